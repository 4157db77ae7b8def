"""Render the per-head masks of every variant as PGM images (one file per head).

Files go to ``results/masks/<variant>/head<h>.pgm``; an ASCII overview of a small
case is printed for quick inspection.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from banded_attn.partition import ALL_VARIANTS, build_mask, compute_partition, render_mask

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seq-len", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--out", default=str(ROOT / "results" / "masks"))
    args = ap.parse_args()

    p = compute_partition(args.seq_len, args.heads)
    for v in ALL_VARIANTS:
        d = Path(args.out) / str(v)
        d.mkdir(parents=True, exist_ok=True)
        for h, img in enumerate(render_mask(build_mask(p, v), "pgm")):
            (d / f"head{h}.pgm").write_bytes(img)
    small = build_mask(compute_partition(12, 3), "SPA")
    for h, txt in enumerate(render_mask(small, "ascii")):
        print(f"SPA N=12 head {h}")
        print(txt.decode(), end="")


if __name__ == "__main__":
    main()
