#!/usr/bin/env python3
"""Sweep the model presets over batch sizes and print the cache-size table.

Writes the canonical CSV next to a human-readable decimal-GB summary, the
same numbers `seglm memsim` produces.
"""
import argparse

from seglm.config import PRESETS, preset
from seglm.kvcache import CacheShapeParams, memsim_row


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bs", nargs="+", type=int, default=[1, 2, 4, 8, 16, 32])
    ap.add_argument("--bw", type=int, default=4)
    ap.add_argument("--n-prompt", type=int, default=1024)
    ap.add_argument("--n-response", type=int, default=1024)
    ap.add_argument("--out", default="memsim_sweep.csv")
    args = ap.parse_args()

    rows = []
    for name in sorted(PRESETS):
        for bs in args.bs:
            rows.append(memsim_row(preset(name), name,
                                   CacheShapeParams(bs, args.bw, args.n_prompt, args.n_response)))

    with open(args.out, "w") as f:
        f.write(",".join(rows[0].keys()) + "\n")
        for r in rows:
            f.write(",".join(str(v) for v in r.values()) + "\n")

    print(f"{'model':<12} {'BS':>4} {'standard':>12} {'segment':>12} {'ratio':>7} {'saving':>10}")
    for r in rows:
        print(f"{r['model']:<12} {r['BS']:>4} {r['standard_bytes'] / 1e9:>10.1f}GB "
              f"{r['segment_bytes'] / 1e9:>10.1f}GB {r['ratio']:>7.3f} "
              f"{r['saving_bytes'] / 1e9:>8.1f}GB")
    print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
