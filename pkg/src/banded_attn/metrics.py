"""Attention statistics: per-head entropy and its support bound, head diversity,
support overlap, and the report that bundles them.

Probabilities are dense arrays shaped ``(..., H, N, M)``; rows summing to zero are
empty-support rows and are left out of every average.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError
from .partition import BandPartition, HeadMask

LN2 = math.log(2.0)

# Published desk-scale measurements from trained checkpoints. Reported for context
# only: they depend on a diversity definition that is not reproduced here.
REFERENCE_VALUES = {
    "sigma_standard": [0.0, 0.0005],
    "sigma_spa": [0.1845, 0.1847],
    "mean_entropy_standard": 4.5461,
    "mean_entropy_spa": 3.6276,
    "entropy_reduction_pct": 20.20,
}


def _as_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim < 3:
        raise ValueError("probabilities must have shape (..., H, N, M)")
    if (p < 0).any():
        raise NumericError("negative probability")
    return p


def row_entropy(probs) -> np.ndarray:
    """Entropy (nats) of every row, shape ``(..., H, N)``; NaN marks empty rows."""
    p = _as_probs(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)
    return np.where(p.sum(axis=-1) > 0, ent, np.nan)


def attention_entropy(probs) -> np.ndarray:
    """Mean row entropy per head, over all non-empty rows (and leading batch dims)."""
    ent = row_entropy(probs)
    h = ent.shape[-2]
    flat = np.moveaxis(ent, -2, 0).reshape(h, -1)
    out = np.empty(h)
    for i in range(h):
        vals = flat[i][~np.isnan(flat[i])]
        out[i] = vals.mean() if vals.size else 0.0
    return out


@dataclass(frozen=True)
class EntropyBound:
    per_head: tuple[float, ...]
    global_bound: float


def entropy_bound(p: BandPartition) -> EntropyBound:
    """``ln(W_h)`` per head and ``ln(ceil(N/H))`` overall."""
    return EntropyBound(
        tuple(math.log(b.width) for b in p.bands),
        math.log(math.ceil(p.seq_len / p.num_heads)),
    )


def standard_query_bound(seq_len: int) -> np.ndarray:
    """Per-query bound ``ln(i + 1)`` of full causal attention."""
    return np.log(np.arange(1, seq_len + 1, dtype=np.float64))


def mask_entropy_bound(masks: Sequence[HeadMask]) -> np.ndarray:
    """``ln`` of the largest row support of each head."""
    return np.array([math.log(max(1, int(m.row_sizes.max()))) for m in masks])


def _kl_to_mixture(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(p / m), 0.0).sum(axis=-1)


def head_diversity(probs) -> float:
    """Mean pairwise Jensen-Shannon divergence between heads, divided by ``ln 2``.

    For each query, JSD is averaged over head pairs whose rows are both non-empty;
    queries with no such pair are skipped. 0 means all heads agree everywhere,
    1 means every pair has disjoint support.
    """
    p = _as_probs(probs)
    h = p.shape[-3]
    if h < 2:
        return 0.0
    nonempty = p.sum(axis=-1) > 0
    total = np.zeros(p.shape[:-3] + p.shape[-2:-1])
    count = np.zeros_like(total)
    for a in range(h):
        pa = p[..., a, :, :]
        for b in range(a + 1, h):
            pb = p[..., b, :, :]
            mix = 0.5 * (pa + pb)
            jsd = 0.5 * _kl_to_mixture(pa, mix) + 0.5 * _kl_to_mixture(pb, mix)
            valid = nonempty[..., a, :] & nonempty[..., b, :]
            total += np.where(valid, jsd, 0.0)
            count += valid
    has = count > 0
    if not has.any():
        return 0.0
    per_query = total[has] / count[has]
    return float(np.clip(per_query.mean() / LN2, 0.0, 1.0))


def support_overlap(masks: Sequence[HeadMask]) -> np.ndarray:
    """Jaccard index between the allowed pair sets of every two heads."""
    h = len(masks)
    lo = np.stack([m.lo for m in masks])
    hi = np.stack([m.hi for m in masks])
    sizes = np.maximum(0, hi - lo + 1).sum(axis=1)
    out = np.eye(h)
    for a in range(h):
        for b in range(a + 1, h):
            inter = np.maximum(0, np.minimum(hi[a], hi[b]) - np.maximum(lo[a], lo[b]) + 1).sum()
            union = sizes[a] + sizes[b] - inter
            out[a, b] = out[b, a] = inter / union if union else 0.0
    return out


@dataclass
class MetricsReport:
    per_head_entropy: list[float]
    mean_entropy: float
    entropy_bound: list[float]
    diversity_sigma: float
    support_overlap: list[list[float]]
    flops: dict
    config: dict
    timestamp: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    notes: dict = field(
        default_factory=lambda: {
            "entropy_unit": "nats",
            "diversity_sigma": "defined here as mean pairwise Jensen-Shannon divergence / ln 2",
            "reference_values": REFERENCE_VALUES,
            "reference_values_note": "trained-checkpoint measurements; context only, not reproduced",
        }
    )

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["head", "entropy", "entropy_bound"])
        for h, (e, b) in enumerate(zip(self.per_head_entropy, self.entropy_bound)):
            w.writerow([h, repr(float(e)), repr(float(b))])
        return buf.getvalue()


def make_report(probs, masks: Sequence[HeadMask], flops: dict, config: dict) -> MetricsReport:
    per_head = attention_entropy(probs)
    return MetricsReport(
        per_head_entropy=[float(x) for x in per_head],
        mean_entropy=float(per_head.mean()),
        entropy_bound=[float(x) for x in mask_entropy_bound(masks)],
        diversity_sigma=head_diversity(probs),
        support_overlap=support_overlap(masks).tolist(),
        flops=flops,
        config=config,
    )


def aggregate_reports(reports: Sequence[MetricsReport], config: dict) -> MetricsReport:
    """Average layer reports field by field (overlap and flops are layer-invariant)."""
    ent = np.mean([r.per_head_entropy for r in reports], axis=0)
    return MetricsReport(
        per_head_entropy=[float(x) for x in ent],
        mean_entropy=float(ent.mean()),
        entropy_bound=list(reports[0].entropy_bound),
        diversity_sigma=float(np.mean([r.diversity_sigma for r in reports])),
        support_overlap=reports[0].support_overlap,
        flops={k: v * len(reports) for k, v in reports[0].flops.items()},
        config=config,
    )
