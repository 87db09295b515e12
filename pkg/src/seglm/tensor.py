"""Dense float32 tensors with explicit batch-first / sequence-first layout tags.

Activations are flat row-major buffers; a 4-D layout tag records whether the
axes read [batch*beam, seq, head, dim] (batch first) or
[seq, batch*beam, head, dim] (sequence first). Converting between the two is
an explicit copy, done once before the first and once after the last decoder
layer of each decode step. Tensors are treated as immutable values except for
the in-place row writes the cache module performs on its own buffers.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from math import prod

import numpy as np


class LayoutTag(Enum):
    BATCH_FIRST = "batch_first"
    SEQUENCE_FIRST = "sequence_first"
    UNLAID = "unlaid"  # rank != 4, batch/sequence ordering is meaningless


class LayoutError(ValueError):
    """Wrong rank or layout tag for a layout-sensitive operation."""


@dataclass
class Tensor:
    shape: tuple[int, ...]
    data: np.ndarray  # flat float32, row-major
    layout: LayoutTag = LayoutTag.UNLAID

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        if any(s < 0 for s in self.shape):
            raise ValueError(f"negative dimension in shape {self.shape}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if prod(self.shape) != self.data.size:
            raise ValueError(
                f"shape {self.shape} needs {prod(self.shape)} elements, buffer has {self.data.size}"
            )
        if self.layout is not LayoutTag.UNLAID and len(self.shape) != 4:
            raise LayoutError("batch/sequence layout tags apply to 4-D activations only")

    @property
    def nd(self) -> np.ndarray:
        """Shaped row-major view sharing the flat buffer."""
        return self.data.reshape(self.shape)

    @classmethod
    def from_array(cls, arr, layout: LayoutTag = LayoutTag.UNLAID) -> "Tensor":
        a = np.ascontiguousarray(arr, dtype=np.float32)
        return cls(a.shape, a.reshape(-1), layout)


def new_tensor(shape, fill: float = 0.0, layout: LayoutTag = LayoutTag.UNLAID,
               seed: int | None = None) -> Tensor:
    """Tensor filled with a constant, or with seeded standard-normal draws.

    The same seed always yields the same data; ``fill`` is ignored when a
    seed is given. Zero-size shapes are permitted.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative dimension in shape {shape}")
    n = prod(shape)
    if seed is not None:
        data = np.random.default_rng(seed).standard_normal(n).astype(np.float32)
    else:
        data = np.full(n, fill, dtype=np.float32)
    return Tensor(shape, data, layout)


def to_sequence_first(t: Tensor) -> Tensor:
    """[B, N, H, D] batch first -> [N, B, H, D] sequence first (explicit copy)."""
    if len(t.shape) != 4 or t.layout is not LayoutTag.BATCH_FIRST:
        raise LayoutError(
            f"expected a 4-D batch-first tensor, got rank {len(t.shape)} tagged {t.layout.value}"
        )
    out = np.ascontiguousarray(t.nd.transpose(1, 0, 2, 3))
    return Tensor(out.shape, out.reshape(-1), LayoutTag.SEQUENCE_FIRST)


def to_batch_first(t: Tensor) -> Tensor:
    """[N, B, H, D] sequence first -> [B, N, H, D] batch first (explicit copy)."""
    if len(t.shape) != 4 or t.layout is not LayoutTag.SEQUENCE_FIRST:
        raise LayoutError(
            f"expected a 4-D sequence-first tensor, got rank {len(t.shape)} tagged {t.layout.value}"
        )
    out = np.ascontiguousarray(t.nd.transpose(1, 0, 2, 3))
    return Tensor(out.shape, out.reshape(-1), LayoutTag.BATCH_FIRST)
