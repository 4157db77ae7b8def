"""Wall-clock forward+backward timing of dense vs banded attention.

Inputs are drawn once per configuration from a fixed seed and masks are built
before timing starts. Each configuration runs ``warmup`` untimed iterations, then
``repeats`` timed ones. Timings assume a quiet machine at steady CPU frequency.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .kernels import banded_backward, banded_forward, masked_dense_attention
from .partition import MaskVariant, VariantKind, build_mask, compute_partition

log = logging.getLogger(__name__)

DEFAULT_GRID_N = (512, 1024, 2048, 4096)
CSV_COLUMNS = (
    "variant", "N", "H", "d_k", "batch", "repeats",
    "median_s", "mean_s", "p95_s", "tokens_per_sec", "speedup",
)
TIMING_COLUMNS = ("median_s", "mean_s", "p95_s", "tokens_per_sec", "speedup")


@dataclass
class BenchResult:
    variant: str
    N: int
    H: int
    d_k: int
    batch: int
    repeats: int
    median_s: float
    mean_s: float
    p95_s: float
    tokens_per_sec: float
    speedup_vs_standard: float | None = None
    checksum: str = ""

    def row(self) -> list:
        speed = "" if self.speedup_vs_standard is None else f"{self.speedup_vs_standard:.4f}"
        return [
            self.variant, self.N, self.H, self.d_k, self.batch, self.repeats,
            f"{self.median_s:.6f}", f"{self.mean_s:.6f}", f"{self.p95_s:.6f}",
            f"{self.tokens_per_sec:.1f}", speed,
        ]


def default_grid(variants=("Standard", "SPA"), lengths=DEFAULT_GRID_N) -> list[tuple[str, int]]:
    return [(v, n) for n in lengths for v in variants]


def _workload(variant: MaskVariant, n: int, heads: int, d_k: int, batch: int, seed: int):
    rng = np.random.default_rng([seed, n, heads, d_k, batch])
    shape = (batch, heads, n, d_k)
    q, k, v = (rng.standard_normal(shape, dtype=np.float32) for _ in range(3))
    g = rng.standard_normal((batch, n, heads * d_k), dtype=np.float32)
    masks = build_mask(compute_partition(n, heads), variant)
    if variant.kind is VariantKind.STANDARD:
        def step():
            qt, kt, vt = (ag.Tensor(a, requires_grad=True) for a in (q, k, v))
            out, _ = masked_dense_attention(qt, kt, vt, masks)
            out.backward(g)
            return out.data, qt.grad, kt.grad, vt.grad
    else:
        def step():
            res = banded_forward(q, k, v, masks)
            return (res.output,) + banded_backward(g, res.saved)
    return step


def _checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def time_config(variant, n: int, heads: int = 8, d_k: int = 128, batch: int = 1,
                repeats: int = 5, warmup: int = 2, seed: int = 0) -> BenchResult:
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    variant = MaskVariant.parse(variant)
    step = _workload(variant, n, heads, d_k, batch, seed)
    result = None
    for _ in range(warmup):
        result = step()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = step()
        times.append(time.perf_counter() - t0)
    arr = np.array(times)
    median = float(np.median(arr))
    return BenchResult(
        str(variant), n, heads, d_k, batch, repeats,
        median, float(arr.mean()), float(np.percentile(arr, 95)),
        batch * n / median, checksum=_checksum(result),
    )


def run_bench(grid, heads: int = 8, d_k: int = 128, batch: int = 1, repeats: int = 5,
              warmup: int = 2, seed: int = 0) -> list[BenchResult]:
    """Time every ``(variant, N)`` in ``grid``; speedups are relative to Standard at the same N.

    Configurations that run out of memory are skipped with a logged note.
    """
    results = []
    for variant, n in grid:
        try:
            res = time_config(variant, n, heads, d_k, batch, repeats, warmup, seed)
        except MemoryError:
            log.warning("skipping %s N=%d: out of memory", variant, n)
            continue
        log.info("%s N=%d median %.4fs", res.variant, n, res.median_s)
        results.append(res)
    base = {r.N: r.median_s for r in results if r.variant == "Standard"}
    for r in results:
        if r.N in base:
            r.speedup_vs_standard = base[r.N] / r.median_s
    return results


def to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()
