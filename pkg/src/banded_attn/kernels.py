"""Multi-head attention kernels: dense, masked-dense (the oracle) and block-banded.

Array layout everywhere: ``q, k, v`` have shape ``(..., H, N, d_k)``; outputs are the
concatenated heads, shape ``(..., N, H * d_k)``.

The banded kernel walks each head's queries in tiles. A tile of rows ``[r0, r1)``
needs only the key block ``[min lo, max hi]`` of those rows, so it computes a
``T x K`` score block with one matmul and masks the few entries outside each row's
interval. Nothing of size ``N x N`` is ever allocated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidArgumentError, NumericError, ShapeError, StateError, UnsupportedMaskError
from .partition import (
    STANDARD,
    BandPartition,
    HeadMask,
    MaskVariant,
    VariantKind,
    build_mask,
    compute_partition,
    pair_count,
)

DEFAULT_TILE = 64


@dataclass(frozen=True)
class AttentionConfig:
    seq_len: int
    num_heads: int
    d_model: int
    variant: MaskVariant = field(default_factory=lambda: MaskVariant(VariantKind.SPA))
    tile_size: int = DEFAULT_TILE

    def __post_init__(self):
        object.__setattr__(self, "variant", MaskVariant.parse(self.variant))
        if self.num_heads <= 0 or self.d_model % self.num_heads:
            raise InvalidArgumentError(f"d_model={self.d_model} not divisible by H={self.num_heads}")
        if self.tile_size < 1:
            raise InvalidArgumentError("tile_size must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    @property
    def partition(self) -> BandPartition:
        return compute_partition(self.seq_len, self.num_heads)

    def masks(self) -> list[HeadMask]:
        return build_mask(self.partition, self.variant)


@dataclass
class KernelStats:
    """Work and memory accounting for one sequence (batch dims not multiplied in)."""

    score_pairs: int = 0
    computed_scores: int = 0
    max_score_buffer: list[int] = field(default_factory=list)


@dataclass
class BandedState:
    """What ``banded_backward`` needs from the forward pass."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    plans: list[list[tuple[int, int, int, int]]]
    lo: np.ndarray
    hi: np.ndarray
    probs: list[list[np.ndarray]]
    scale: float


@dataclass
class AttentionOutput:
    output: np.ndarray
    probs: np.ndarray | None = None
    saved: BandedState | None = None
    stats: KernelStats | None = None


def _check_qkv(q, k, v, num_heads: int | None = None) -> None:
    if q.ndim < 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q, k, v must share a (..., H, N, d_k) shape; got {q.shape}, {k.shape}, {v.shape}")
    if num_heads is not None and q.shape[-3] != num_heads:
        raise ShapeError(f"expected {num_heads} heads, got {q.shape[-3]}")


def merge_heads(x: np.ndarray) -> np.ndarray:
    """``(..., H, N, d) -> (..., N, H*d)``."""
    x = np.swapaxes(x, -3, -2)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    """``(..., N, H*d) -> (..., H, N, d)``."""
    n, hd = x.shape[-2], x.shape[-1]
    x = x.reshape(x.shape[:-2] + (n, num_heads, hd // num_heads))
    return np.swapaxes(x, -3, -2)


def mask_intervals(masks: Sequence[HeadMask] | np.ndarray, seq_len: int | None = None):
    """Stack per-head intervals into ``(H, N)`` ``lo``/``hi`` arrays.

    A boolean ``(H, N, N)`` array is also accepted; every non-empty row must be a
    single run of allowed keys, otherwise :class:`UnsupportedMaskError`.
    """
    if isinstance(masks, np.ndarray):
        allowed = masks.astype(bool)
        if allowed.ndim != 3 or allowed.shape[1] != allowed.shape[2]:
            raise ShapeError("dense masks must have shape (H, N, N)")
        n = allowed.shape[-1]
        any_row = allowed.any(-1)
        lo = np.where(any_row, allowed.argmax(-1), 0)
        hi = np.where(any_row, n - 1 - allowed[..., ::-1].argmax(-1), -1)
        width = np.maximum(0, hi - lo + 1)
        if not np.array_equal(allowed.sum(-1), width):
            h, i = np.argwhere(allowed.sum(-1) != width)[0]
            raise UnsupportedMaskError(f"head {h} query {i}: allowed keys are not contiguous")
        return lo, hi
    lo = np.stack([m.lo for m in masks])
    hi = np.stack([m.hi for m in masks])
    if seq_len is not None and lo.shape[1] != seq_len:
        raise ShapeError(f"masks are for N={lo.shape[1]}, inputs have N={seq_len}")
    return lo, hi


def masked_dense_attention(
    q: Tensor, k: Tensor, v: Tensor, masks: Sequence[HeadMask] | np.ndarray
) -> tuple[Tensor, Tensor]:
    """Differentiable masked attention built from autograd ops.

    Returns ``(output, probs)`` with ``output`` shaped ``(..., N, H*d_k)`` and the
    full ``(..., H, N, N)`` probability tensor.
    """
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    _check_qkv(q.data, k.data, v.data)
    n, d_k = q.shape[-2], q.shape[-1]
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(d_k))
    if isinstance(masks, np.ndarray):
        allowed = masks.astype(bool)
        if allowed.shape != (q.shape[-3], n, n):
            raise ShapeError(f"dense masks must have shape {(q.shape[-3], n, n)}")
        probs = ag.masked_softmax_rows(scores, allowed=allowed)
    else:
        if len(masks) != q.shape[-3]:
            raise ShapeError(f"{len(masks)} masks for {q.shape[-3]} heads")
        lo, hi = mask_intervals(masks, n)
        probs = ag.masked_softmax_rows(scores, lo, hi)
    heads = ag.matmul(probs, v)
    axes = list(range(heads.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    merged = ag.transpose(heads, axes)
    out = ag.reshape(merged, merged.shape[:-2] + (merged.shape[-2] * merged.shape[-1],))
    return out, probs


def masked_dense_forward(q, k, v, masks, cfg: AttentionConfig | None = None) -> AttentionOutput:
    """Reference masked attention; materialises every ``N x N`` score matrix."""
    q, k, v = (np.asarray(a.data if isinstance(a, Tensor) else a) for a in (q, k, v))
    if cfg is not None:
        _check_qkv(q, k, v, cfg.num_heads)
        if q.shape[-2] != cfg.seq_len or q.shape[-1] != cfg.d_k:
            raise ShapeError(f"inputs {q.shape} do not match config N={cfg.seq_len}, d_k={cfg.d_k}")
    out, probs = masked_dense_attention(Tensor(q), Tensor(k), Tensor(v), masks)
    return AttentionOutput(out.data, probs.data)


def dense_mha_forward(q, k, v, cfg: AttentionConfig | None = None) -> AttentionOutput:
    """Standard causal multi-head attention."""
    if cfg is not None and cfg.variant.kind is not VariantKind.STANDARD:
        raise InvalidArgumentError("dense_mha_forward runs the Standard variant only")
    q_arr = q.data if isinstance(q, Tensor) else np.asarray(q)
    n, h = q_arr.shape[-2], q_arr.shape[-3]
    masks = build_mask(compute_partition(n, h), STANDARD)
    return masked_dense_forward(q, k, v, masks, cfg)


def _tile_rows(max_width: int, n: int, tile_size: int) -> int:
    """Largest tile height whose score block stays within ``n * max_width`` entries."""
    t = max(1, min(tile_size, n))
    budget = n * max_width
    while t > 1 and t * min(t + max_width - 1, n) > budget:
        t -= 1
    return t


def plan_tiles(lo: np.ndarray, hi: np.ndarray, tile_size: int = DEFAULT_TILE):
    """Per head, the list of ``(r0, r1, k0, k1)`` query tiles and their key blocks."""
    n = lo.shape[1]
    plans = []
    for h in range(lo.shape[0]):
        sizes = np.maximum(0, hi[h] - lo[h] + 1)
        nonempty = np.flatnonzero(sizes)
        tiles = []
        if nonempty.size:
            t = _tile_rows(int(sizes.max()), n, tile_size)
            r = int(nonempty[0])
            last = int(nonempty[-1]) + 1
            while r < last:
                r1 = min(r + t, last)
                rows = slice(r, r1)
                ok = sizes[rows] > 0
                if ok.any():
                    k0 = int(lo[h, rows][ok].min())
                    k1 = int(hi[h, rows][ok].max()) + 1
                    tiles.append((r, r1, k0, k1))
                r = r1
        plans.append(tiles)
    return plans


def _resolve_masks(p, n: int, num_heads: int):
    if isinstance(p, BandPartition):
        if p.seq_len != n or p.num_heads != num_heads:
            raise ShapeError(f"partition is for N={p.seq_len}, H={p.num_heads}")
        masks = build_mask(p, MaskVariant(VariantKind.SPA))
    elif isinstance(p, (str, MaskVariant)):
        masks = build_mask(compute_partition(n, num_heads), p)
    else:
        masks = p
    lo, hi = mask_intervals(masks, None)
    if lo.shape != (num_heads, n):
        raise ShapeError(f"masks have shape {lo.shape}, expected {(num_heads, n)}")
    return lo, hi


def banded_forward(
    q,
    k,
    v,
    p: BandPartition | Sequence[HeadMask] | np.ndarray | MaskVariant | str,
    cfg: AttentionConfig | None = None,
    *,
    tile_size: int | None = None,
    return_probs: bool = False,
) -> AttentionOutput:
    """Attention over contiguous per-query key intervals, touching allowed bands only.

    ``p`` is a partition (SPA bands), a variant name, a ``HeadMask`` list or a dense
    boolean mask (rejected unless every row is contiguous). Rows with no allowed key
    produce zeros. ``return_probs`` densifies the probabilities for inspection.
    """
    q, k, v = (np.asarray(a.data if isinstance(a, Tensor) else a) for a in (q, k, v))
    _check_qkv(q, k, v, cfg.num_heads if cfg is not None else None)
    num_heads, n, d_k = q.shape[-3:]
    if cfg is not None and (n != cfg.seq_len or d_k != cfg.d_k):
        raise ShapeError(f"inputs {q.shape} do not match config N={cfg.seq_len}, d_k={cfg.d_k}")
    if tile_size is None:
        tile_size = cfg.tile_size if cfg is not None else DEFAULT_TILE
    lo, hi = _resolve_masks(p, n, num_heads)
    plans = plan_tiles(lo, hi, tile_size)
    scale = 1.0 / math.sqrt(d_k)
    sc = q.dtype.type(scale)
    out = np.zeros_like(q)
    saved_probs: list[list[np.ndarray]] = []
    stats = KernelStats()
    for h, tiles in enumerate(plans):
        head_probs = []
        buf = 0
        for r0, r1, k0, k1 in tiles:
            qt = q[..., h, r0:r1, :]
            kb = k[..., h, k0:k1, :]
            s = (qt @ np.swapaxes(kb, -1, -2)) * sc
            cols = np.arange(k0, k1)
            allowed = (cols >= lo[h, r0:r1, None]) & (cols <= hi[h, r0:r1, None])
            if not np.isfinite(s).all() and not np.isfinite(np.where(allowed, s, 0)).all():
                raise NumericError(f"non-finite score in head {h}, rows {r0}:{r1}")
            s = np.where(allowed, s, -np.inf)
            mx = s.max(axis=-1, keepdims=True)
            mx[~np.isfinite(mx)] = 0
            s -= mx
            e = np.exp(s, out=s)
            z = e.sum(axis=-1, keepdims=True)
            z[z == 0] = 1
            pt = e / z
            out[..., h, r0:r1, :] = pt @ v[..., h, k0:k1, :]
            head_probs.append(pt)
            stats.score_pairs += int(allowed.sum())
            stats.computed_scores += (r1 - r0) * (k1 - k0)
            buf = max(buf, (r1 - r0) * (k1 - k0))
        saved_probs.append(head_probs)
        stats.max_score_buffer.append(buf)
    state = BandedState(q, k, v, plans, lo, hi, saved_probs, scale)
    probs = densify_probs(state) if return_probs else None
    return AttentionOutput(merge_heads(out), probs, state, stats)


def densify_probs(state: BandedState) -> np.ndarray:
    """Scatter the banded probabilities into a dense ``(..., H, N, N)`` array."""
    q = state.q
    n = q.shape[-2]
    dense = np.zeros(q.shape[:-1] + (n,), dtype=q.dtype)
    for h, tiles in enumerate(state.plans):
        for (r0, r1, k0, k1), pt in zip(tiles, state.probs[h]):
            dense[..., h, r0:r1, k0:k1] = pt
    return dense


def banded_backward(grad_output, saved: BandedState | None, p=None, cfg: AttentionConfig | None = None):
    """Gradients ``(dq, dk, dv)`` of the banded forward, restricted to the bands.

    ``p`` and ``cfg`` are accepted for symmetry with the forward and only checked.
    """
    if saved is None or not isinstance(saved, BandedState) or saved.probs is None:
        raise StateError("banded_backward needs the BandedState saved by banded_forward")
    q, k, v = saved.q, saved.k, saved.v
    num_heads, n, d_k = q.shape[-3:]
    if cfg is not None and (cfg.num_heads != num_heads or cfg.seq_len != n):
        raise StateError("saved state does not match the config")
    g = np.asarray(grad_output, dtype=q.dtype)
    if g.shape != q.shape[:-3] + (n, num_heads * d_k):
        raise ShapeError(f"grad_output shape {g.shape} does not match the forward output")
    g = split_heads(g, num_heads)
    sc = q.dtype.type(saved.scale)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for h, tiles in enumerate(saved.plans):
        for (r0, r1, k0, k1), pt in zip(tiles, saved.probs[h]):
            gt = g[..., h, r0:r1, :]
            vb = v[..., h, k0:k1, :]
            dv[..., h, k0:k1, :] += np.swapaxes(pt, -1, -2) @ gt
            dp = gt @ np.swapaxes(vb, -1, -2)
            ds = pt * (dp - (dp * pt).sum(axis=-1, keepdims=True))
            ds *= sc
            dq[..., h, r0:r1, :] = ds @ k[..., h, k0:k1, :]
            dk[..., h, k0:k1, :] += np.swapaxes(ds, -1, -2) @ q[..., h, r0:r1, :]
    return dq, dk, dv


def banded_attention(
    q: Tensor, k: Tensor, v: Tensor, masks, tile_size: int = DEFAULT_TILE, capture: bool = False
):
    """Autograd wrapper around ``banded_forward`` / ``banded_backward``.

    Returns the output Tensor, plus the dense probabilities when ``capture``.
    """
    res = banded_forward(q, k, v, masks, tile_size=tile_size, return_probs=capture)
    state = res.saved

    def _bw(g):
        return banded_backward(g, state)

    out = ag.custom_op(res.output, (q, k, v), _bw, "banded_attention")
    return (out, res.probs) if capture else out


@dataclass(frozen=True)
class FlopsCount:
    score_madds: int
    weighted_sum_madds: int

    @property
    def total(self) -> int:
        return self.score_madds + self.weighted_sum_madds

    def to_json(self) -> dict:
        return {
            "score_madds": self.score_madds,
            "weighted_sum_madds": self.weighted_sum_madds,
            "total": self.total,
        }


def flops_count(variant: MaskVariant | str, seq_len: int, num_heads: int, d_k: int) -> FlopsCount:
    """Exact multiply-adds of the score and weighted-sum products for one sequence."""
    if d_k < 1:
        raise InvalidArgumentError("d_k must be >= 1")
    masks = build_mask(compute_partition(seq_len, num_heads), variant)
    pairs = pair_count(masks).total
    return FlopsCount(pairs * d_k, pairs * d_k)
