"""Autoregressive generation in two variants used as mutual oracles.

The optimized path propagates sequence-first hidden states through the
decoder stack (exactly two layout conversions per decode step), writes each
step's K/V into the pre-allocated segment cache, and calls the fused
two-segment attention kernel, with no cat or index-select tensor ops during
decode. The reference path is the conventional batch-first pipeline:
beam-expanded prompt, per-step gather + concat into a contiguous cache, and
materialized softmax attention with explicit transposes.

Both engines share token selection, so token-for-token equality between them
exercises exactly the optimized pipeline (layouts, segment cache, fused
kernel) against the unfused one.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from math import prod, sqrt

import numpy as np

from .beam import BeamSearchState, beam_step, build_gather_indices
from .config import ModelConfig
from .kvcache import MemoryLedger, PromptKV, ResponseKV, StandardKV, cache_token_bytes
from .ops import ACTIVATIONS, LayerWeights, fused_qkv, gated_mlp, linear, log_softmax, rmsnorm, rope
from .sdpa import SdpaDecodeInputs, sdpa_decode_fused, sdpa_prefill
from .tensor import LayoutTag, Tensor, to_batch_first, to_sequence_first


@dataclass
class OpCounters:
    """Instrumentation: tensor-level data-movement ops observed during a run."""

    layout_conversions: int = 0
    cat_ops: int = 0
    index_select_ops: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationRequest:
    prompt: np.ndarray          # [BS, N_prompt] token ids
    n_response: int
    mode: str = "greedy"
    bw: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.prompt = np.asarray(self.prompt, dtype=np.int64)
        if self.prompt.ndim != 2 or self.prompt.shape[1] < 1:
            raise ValueError("prompt must be [BS, N_prompt] with N_prompt >= 1")
        if self.n_response < 0:
            raise ValueError("n_response must be >= 0")
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"mode must be 'greedy' or 'beam', got {self.mode!r}")
        if self.mode == "greedy" and self.bw != 1:
            raise ValueError("greedy decoding requires bw == 1")
        if self.bw < 1:
            raise ValueError("beam width must be >= 1")


@dataclass
class GenerationResult:
    tokens: np.ndarray          # [BS, BW, n_response]
    final_hidden: np.ndarray    # [BS*BW, d_model], post-final-norm at the last step
    first_token_latency_s: float
    next_token_latency_s: float | None  # mean over decode steps 2..N
    total_latency_s: float
    memory: dict
    counters: OpCounters
    min_top_gap: float

    def to_json_dict(self) -> dict:
        return {
            "tokens": self.tokens.tolist(),
            "min_top_gap": None if np.isinf(self.min_top_gap) else self.min_top_gap,
            "memory": self.memory,
            "counters": self.counters.as_dict(),
            "timing": {
                "first_token_latency_ms": self.first_token_latency_s * 1e3,
                "next_token_latency_ms":
                    None if self.next_token_latency_s is None else self.next_token_latency_s * 1e3,
                "total_latency_s": self.total_latency_s,
            },
        }


class ToyWeights:
    """Seeded Gaussian weights for desk-scale runs; no real checkpoints."""

    def __init__(self, config: ModelConfig, embedding: np.ndarray,
                 layers: list[LayerWeights], final_norm: np.ndarray,
                 head: np.ndarray, seed: int = 0):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.final_norm = final_norm
        self.head = head
        self.seed = seed
        self.validate()

    def validate(self) -> None:
        c = self.config
        if self.embedding.shape != (c.vocab, c.d_model):
            raise ValueError(f"embedding must be [{c.vocab}, {c.d_model}]")
        if self.final_norm.shape != (c.d_model,):
            raise ValueError("final_norm shape mismatch")
        if self.head.shape != (c.d_model, c.vocab):
            raise ValueError("head shape mismatch")
        if len(self.layers) != c.L:
            raise ValueError(f"expected {c.L} layers, got {len(self.layers)}")
        for lw in self.layers:
            lw.validate(c)

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0, scale: float = 0.02) -> "ToyWeights":
        rng = np.random.default_rng(seed)
        emb = (rng.standard_normal((config.vocab, config.d_model)) * scale).astype(np.float32)
        layers = [LayerWeights.random(config, rng, scale) for _ in range(config.L)]
        final_norm = np.ones(config.d_model, dtype=np.float32)
        head = (rng.standard_normal((config.d_model, config.vocab)) * scale).astype(np.float32)
        return cls(config, emb, layers, final_norm, head, seed)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("embedding", self.embedding)]
        for i, lw in enumerate(self.layers):
            for name in LayerWeights.FIELDS:
                out.append((f"layers.{i}.{name}", getattr(lw, name)))
        out.append(("final_norm", self.final_norm))
        out.append(("head", self.head))
        return out


def save_weights(path, weights: ToyWeights) -> None:
    """JSON header (config + tensor manifest) followed by a raw little-endian
    float32 blob; the round trip is byte-exact."""
    manifest = []
    chunks = []
    offset = 0
    for name, arr in weights.named_tensors():
        a = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {"config": asdict(weights.config), "seed": weights.seed, "tensors": manifest}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for chunk in chunks:
            f.write(chunk)


def load_weights(path) -> ToyWeights:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        blob = f.read()
    config = ModelConfig(**header["config"])
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = prod(shape)
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=entry["offset"]
        ).reshape(shape).copy()
    layers = [
        LayerWeights(**{name: arrays[f"layers.{i}.{name}"] for name in LayerWeights.FIELDS})
        for i in range(config.L)
    ]
    return ToyWeights(config, arrays["embedding"], layers,
                      arrays["final_norm"], arrays["head"], header.get("seed", 0))


# --------------------------------------------------------------------------
# Engines
# --------------------------------------------------------------------------

class _DecoderEngine:
    """Shared generation loop; subclasses provide prefill / decode / memory."""

    def __init__(self, weights: ToyWeights):
        self.weights = weights
        self.config = weights.config
        self.activation = ACTIVATIONS[weights.config.activation]
        self.last_ledger: MemoryLedger | None = None  # instrumentation for tests

    def generate(self, request: GenerationRequest) -> GenerationResult:
        cfg = self.config
        if request.prompt.min() < 0 or request.prompt.max() >= cfg.vocab:
            raise ValueError(f"prompt token ids must lie in [0, {cfg.vocab})")
        if request.prompt.shape[1] + request.n_response > cfg.max_pos:
            raise ValueError("prompt plus response exceeds the maximum position length")

        bs, _ = request.prompt.shape
        bw = request.bw
        nr = request.n_response
        counters = OpCounters()
        ledger = MemoryLedger()
        self.last_ledger = ledger
        run = self._begin(request, ledger, counters)

        t0 = time.perf_counter()
        logits, hidden = self._prefill(run)  # [BS*BW, vocab], [BS*BW, d_model]
        state = BeamSearchState(bs, bw)
        if nr > 0:
            beam_step(log_softmax(logits), state)
        first_s = time.perf_counter() - t0

        step_times: list[float] = []
        for t in range(1, nr + 1):
            ts = time.perf_counter()
            current = state.tokens_history[-1].reshape(-1)
            logits, hidden = self._decode_step(run, current, t, state)
            if t < nr:  # the final step yields the final hidden state only
                beam_step(log_softmax(logits), state)
            step_times.append(time.perf_counter() - ts)
        total_s = time.perf_counter() - t0

        if nr > 0:
            idx = build_gather_indices(state.parents_history, nr)
            stacked = np.stack(state.tokens_history, axis=2)  # [BS, BW, Nr] slot-major
            tokens = np.take_along_axis(stacked, idx, axis=1)
        else:
            tokens = np.zeros((bs, bw, 0), dtype=np.int64)

        next_s = float(np.mean(step_times[1:])) if len(step_times) >= 2 else None
        return GenerationResult(
            tokens=tokens,
            final_hidden=hidden,
            first_token_latency_s=first_s,
            next_token_latency_s=next_s,
            total_latency_s=total_s,
            memory=self._memory_summary(run, ledger),
            counters=counters,
            min_top_gap=state.min_top_gap,
        )

    # subclass interface -----------------------------------------------------
    def _begin(self, request, ledger, counters):
        raise NotImplementedError

    def _prefill(self, run):
        raise NotImplementedError

    def _decode_step(self, run, tokens, t, state):
        raise NotImplementedError

    def _memory_summary(self, run, ledger) -> dict:
        raise NotImplementedError


@dataclass
class _OptimizedRun:
    request: GenerationRequest
    prompt_kv: PromptKV
    resp_kv: ResponseKV
    ledger: MemoryLedger
    counters: OpCounters


class OptimizedEngine(_DecoderEngine):
    """Sequence-first decode, segment KV cache, fused two-segment attention."""

    def __init__(self, weights: ToyWeights, initial_response_capacity: int | None = None):
        super().__init__(weights)
        self.initial_response_capacity = initial_response_capacity

    def _begin(self, request, ledger, counters) -> _OptimizedRun:
        bs, n_prompt = request.prompt.shape
        return _OptimizedRun(
            request=request,
            prompt_kv=PromptKV(self.config, bs, n_prompt),
            resp_kv=ResponseKV(self.config, bs, request.bw,
                               initial_capacity=self.initial_response_capacity),
            ledger=ledger,
            counters=counters,
        )

    def _prefill(self, run: _OptimizedRun):
        cfg, w = self.config, self.weights
        bs, n_prompt = run.request.prompt.shape
        bw = run.request.bw
        x = w.embedding[run.request.prompt]  # [BS, Np, dm]; no beam expansion
        positions = np.arange(n_prompt)[None, :]

        for layer, lw in enumerate(w.layers):
            h = rmsnorm(x, lw.rmsnorm_1, cfg.eps)
            q, k, v = fused_qkv(h, lw.w_qkv, cfg.H, cfg.D)
            q, k = rope(q, k, positions, cfg.rope_theta, cfg.rope_style)
            kt = Tensor.from_array(k, LayoutTag.BATCH_FIRST)
            vt = Tensor.from_array(v, LayoutTag.BATCH_FIRST)
            run.prompt_kv.store(layer, kt, vt, run.ledger)
            ctx = sdpa_prefill(Tensor.from_array(q, LayoutTag.BATCH_FIRST), kt, vt, causal=True)
            x = x + linear(ctx.nd.reshape(bs, n_prompt, cfg.d_model), lw.w_o)
            x = x + gated_mlp(rmsnorm(x, lw.rmsnorm_2, cfg.eps),
                              lw.w_gate, lw.w_up, lw.w_down, self.activation)

        x = rmsnorm(x, w.final_norm, cfg.eps)
        last = x[:, -1, :]
        logits = linear(last, w.head)
        # beams share the single prompt computation; replicate for selection
        return np.repeat(logits, bw, axis=0), np.repeat(last, bw, axis=0)

    def _decode_step(self, run: _OptimizedRun, tokens, t, state):
        cfg, w = self.config, self.weights
        bs, n_prompt = run.request.prompt.shape
        rows = bs * run.request.bw

        xt = Tensor.from_array(w.embedding[tokens].reshape(rows, 1, cfg.H, cfg.D),
                               LayoutTag.BATCH_FIRST)
        xt = to_sequence_first(xt)
        run.counters.layout_conversions += 1
        x = xt.nd.reshape(1, rows, cfg.d_model)

        positions = np.array([[n_prompt + t - 1]])
        indices = build_gather_indices(state.parents_history, t)

        for layer, lw in enumerate(w.layers):
            h = rmsnorm(x, lw.rmsnorm_1, cfg.eps)
            q, k, v = fused_qkv(h, lw.w_qkv, cfg.H, cfg.D)  # [1, rows, H, D]
            q, k = rope(q, k, positions, cfg.rope_theta, cfg.rope_style)
            run.resp_kv.append(layer, k, v, run.ledger)  # row t-1 of the pre-allocated buffer
            inp = SdpaDecodeInputs.from_caches(
                Tensor.from_array(q, LayoutTag.SEQUENCE_FIRST),
                run.prompt_kv, run.resp_kv, layer, indices,
            )
            ctx = sdpa_decode_fused(inp)
            x = x + linear(ctx.reshape(1, rows, cfg.d_model), lw.w_o)
            x = x + gated_mlp(rmsnorm(x, lw.rmsnorm_2, cfg.eps),
                              lw.w_gate, lw.w_up, lw.w_down, self.activation)

        xt = Tensor.from_array(x.reshape(1, rows, cfg.H, cfg.D), LayoutTag.SEQUENCE_FIRST)
        xt = to_batch_first(xt)
        run.counters.layout_conversions += 1
        hidden = rmsnorm(xt.nd.reshape(rows, cfg.d_model), w.final_norm, cfg.eps)
        return linear(hidden, w.head), hidden

    def _memory_summary(self, run: _OptimizedRun, ledger) -> dict:
        s = ledger.summary()
        return {
            "policy": "segment",
            "prompt_kv_bytes": run.prompt_kv.total_bytes,
            "response_kv_bytes": run.resp_kv.total_bytes(),
            "final_active_bytes": s.final_active,
            "peak_reserved_bytes": s.peak_reserved,
            "fragmentation_bytes": s.fragmentation,
        }


@dataclass
class _ReferenceRun:
    request: GenerationRequest
    kv: StandardKV
    ledger: MemoryLedger
    counters: OpCounters


class ReferenceEngine(_DecoderEngine):
    """Batch-first baseline: beam-expanded prompt, contiguous cache rebuilt by
    gather + concat each step, materialized softmax attention."""

    def _begin(self, request, ledger, counters) -> _ReferenceRun:
        bs, _ = request.prompt.shape
        return _ReferenceRun(
            request=request,
            kv=StandardKV(self.config, bs, request.bw, counters=counters),
            ledger=ledger,
            counters=counters,
        )

    @staticmethod
    def _attention(q, k, v, causal: bool):
        """Materialized softmax attention on [B, N, H, D] via explicit transposes."""
        scale = np.float32(1.0 / sqrt(q.shape[-1]))
        qt = q.transpose(0, 2, 1, 3)  # [B, H, Nq, D]
        kt = k.transpose(0, 2, 1, 3)
        vt = v.transpose(0, 2, 1, 3)
        s = (qt @ kt.transpose(0, 1, 3, 2)) * scale  # [B, H, Nq, Nk]
        if causal:
            nq, nk = s.shape[-2], s.shape[-1]
            keep = np.arange(nk)[None, :] <= np.arange(nq)[:, None] + (nk - nq)
            s = np.where(keep, s, np.float32(-np.inf))
        m = s.max(axis=-1, keepdims=True)
        p = np.exp(s - m)
        p = p / p.sum(axis=-1, keepdims=True)
        ctx = p @ vt
        return ctx.transpose(0, 2, 1, 3)  # back to [B, Nq, H, D]

    def _prefill(self, run: _ReferenceRun):
        cfg, w = self.config, self.weights
        bw = run.request.bw
        prompt = np.repeat(run.request.prompt, bw, axis=0)  # beam-expanded [BS*BW, Np]
        rows, n_prompt = prompt.shape
        x = w.embedding[prompt]
        positions = np.arange(n_prompt)[None, :]

        for layer, lw in enumerate(w.layers):
            h = rmsnorm(x, lw.rmsnorm_1, cfg.eps)
            q, k, v = fused_qkv(h, lw.w_qkv, cfg.H, cfg.D)
            q, k = rope(q, k, positions, cfg.rope_theta, cfg.rope_style)
            run.kv.store_prompt(layer, k, v, run.ledger)
            ctx = self._attention(q, k, v, causal=True)
            x = x + linear(ctx.reshape(rows, n_prompt, cfg.d_model), lw.w_o)
            x = x + gated_mlp(rmsnorm(x, lw.rmsnorm_2, cfg.eps),
                              lw.w_gate, lw.w_up, lw.w_down, self.activation)

        x = rmsnorm(x, w.final_norm, cfg.eps)
        last = x[:, -1, :]
        return linear(last, w.head), last

    def _decode_step(self, run: _ReferenceRun, tokens, t, state):
        cfg, w = self.config, self.weights
        bs, n_prompt = run.request.prompt.shape
        bw = run.request.bw
        rows = bs * bw

        x = w.embedding[tokens][:, None, :]  # [B, 1, dm] batch first throughout
        positions = np.array([[n_prompt + t - 1]])
        parents = state.parents_history[t - 1]
        reorder = (np.arange(bs)[:, None] * bw + parents).reshape(-1)

        for layer, lw in enumerate(w.layers):
            h = rmsnorm(x, lw.rmsnorm_1, cfg.eps)
            q, k, v = fused_qkv(h, lw.w_qkv, cfg.H, cfg.D)  # [B, 1, H, D]
            q, k = rope(q, k, positions, cfg.rope_theta, cfg.rope_style)
            k_all, v_all = run.kv.step(layer, k, v, reorder, run.ledger)
            ctx = self._attention(q, k_all, v_all, causal=False)  # single newest query
            x = x + linear(ctx.reshape(rows, 1, cfg.d_model), lw.w_o)
            x = x + gated_mlp(rmsnorm(x, lw.rmsnorm_2, cfg.eps),
                              lw.w_gate, lw.w_up, lw.w_down, self.activation)

        hidden = rmsnorm(x.reshape(rows, cfg.d_model), w.final_norm, cfg.eps)
        return linear(hidden, w.head), hidden

    def _memory_summary(self, run: _ReferenceRun, ledger) -> dict:
        s = ledger.summary()
        bs, n_prompt = run.request.prompt.shape
        return {
            "policy": "standard",
            "prompt_kv_bytes": bs * run.request.bw * n_prompt * cache_token_bytes(self.config),
            "kv_bytes": run.kv.total_bytes(),
            "final_active_bytes": s.final_active,
            "peak_reserved_bytes": s.peak_reserved,
            "fragmentation_bytes": s.fragmentation,
        }


def generate(weights: ToyWeights, request: GenerationRequest,
             initial_response_capacity: int | None = None) -> GenerationResult:
    """Run the optimized engine."""
    return OptimizedEngine(weights, initial_response_capacity).generate(request)


def reference_generate(weights: ToyWeights, request: GenerationRequest) -> GenerationResult:
    """Run the reference engine (same contract, unfused pipeline)."""
    return ReferenceEngine(weights).generate(request)
