"""Balanced distance partitioning and the attention mask variants built on it.

Every mask in this module is expressed through causal *distances* ``d = i - j``.
A head owns a band of distances ``[start, start + width)``; for query ``i`` that
band maps to the contiguous key interval ``[max(0, i - start - width + 1), i - start]``,
which is empty when ``i < start``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

MAX_RENDER_SEQ_LEN = 4096


@dataclass(frozen=True)
class BandSpec:
    start: int
    width: int

    @property
    def stop(self) -> int:
        return self.start + self.width


@dataclass(frozen=True)
class BandPartition:
    """Per-head distance bands for ``seq_len`` tokens split over ``num_heads`` heads."""

    seq_len: int
    num_heads: int
    base_width: int
    remainder: int
    bands: tuple[BandSpec, ...]

    @property
    def widths(self) -> list[int]:
        return [b.width for b in self.bands]

    @property
    def starts(self) -> list[int]:
        return [b.start for b in self.bands]

    def check(self) -> None:
        """Raise ``AssertionError`` if any structural law is violated."""
        widths = self.widths
        assert len(self.bands) == self.num_heads
        assert sum(widths) == self.seq_len, "widths must sum to N"
        assert max(widths) - min(widths) <= 1, "widths must differ by at most one"
        assert self.bands[0].start == 0
        for a, b in zip(self.bands, self.bands[1:]):
            assert b.start == a.stop, "bands must be contiguous"
        for h, b in enumerate(self.bands):
            assert b.width == self.base_width + (1 if h < self.remainder else 0)
            assert b.stop <= self.seq_len


def _check_sizes(seq_len: int, num_heads: int) -> None:
    if not isinstance(seq_len, (int, np.integer)) or not isinstance(num_heads, (int, np.integer)):
        raise InvalidArgumentError("seq_len and num_heads must be integers")
    if seq_len <= 0 or num_heads <= 0:
        raise InvalidArgumentError(f"seq_len and num_heads must be positive, got N={seq_len}, H={num_heads}")
    if num_heads > seq_len:
        raise InvalidArgumentError(f"num_heads ({num_heads}) must not exceed seq_len ({seq_len})")


def compute_partition(seq_len: int, num_heads: int) -> BandPartition:
    """Split distances ``0..seq_len-1`` into ``num_heads`` balanced contiguous bands.

    The first ``seq_len % num_heads`` heads get one extra distance.

    >>> compute_partition(10, 3).widths
    [4, 3, 3]
    """
    _check_sizes(seq_len, num_heads)
    base, rem = divmod(int(seq_len), int(num_heads))
    bands = tuple(
        BandSpec(start=h * base + min(h, rem), width=base + (1 if h < rem else 0))
        for h in range(num_heads)
    )
    return BandPartition(int(seq_len), int(num_heads), base, rem, bands)


def eball_partition(seq_len: int, num_heads: int) -> tuple[BandSpec, ...]:
    """Exclusive but deliberately unbalanced bands (the EBALL ablation).

    Widths grow geometrically, ``unit * 2**h`` with ``unit = floor(N / (2**H - 1))``
    (at least 1); the last band absorbs whatever is left. When the doubling would
    overrun ``N`` each early band is clamped so every later band keeps one distance.
    """
    _check_sizes(seq_len, num_heads)
    n, h_count = int(seq_len), int(num_heads)
    unit = max(1, n // (2**h_count - 1))
    widths = []
    remaining = n
    for h in range(h_count - 1):
        w = min(unit * 2**h, remaining - (h_count - 1 - h))
        w = max(1, w)
        widths.append(w)
        remaining -= w
    widths.append(remaining)
    bands = []
    start = 0
    for w in widths:
        bands.append(BandSpec(start, w))
        start += w
    return tuple(bands)


class VariantKind(str, enum.Enum):
    STANDARD = "Standard"
    SPA = "SPA"
    SLIDING_WINDOW = "SlidingWindow"
    EBALL = "EBALL"
    GBHALF = "GBHALF"


_ALIASES = {
    "standard": VariantKind.STANDARD,
    "dense": VariantKind.STANDARD,
    "spa": VariantKind.SPA,
    "spattention": VariantKind.SPA,
    "slidingwindow": VariantKind.SLIDING_WINDOW,
    "sliding-window": VariantKind.SLIDING_WINDOW,
    "sliding_window": VariantKind.SLIDING_WINDOW,
    "sw": VariantKind.SLIDING_WINDOW,
    "eball": VariantKind.EBALL,
    "gbhalf": VariantKind.GBHALF,
}


@dataclass(frozen=True)
class MaskVariant:
    """Which sparsity pattern is in force.

    ``window`` only applies to ``SlidingWindow``; ``None`` means ``floor(N/H)`` so the
    per-head budget matches SPA.
    """

    kind: VariantKind
    window: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind))
        if self.kind is not VariantKind.SLIDING_WINDOW and self.window is not None:
            raise InvalidArgumentError("window is only meaningful for SlidingWindow")
        if self.window is not None and self.window < 1:
            raise InvalidArgumentError("SlidingWindow.window must be >= 1")

    @classmethod
    def parse(cls, text: "str | MaskVariant") -> "MaskVariant":
        """Parse ``"spa"``, ``"Standard"``, ``"sliding-window:32"`` and similar."""
        if isinstance(text, MaskVariant):
            return text
        name, _, arg = str(text).strip().partition(":")
        kind = _ALIASES.get(name.lower())
        if kind is None:
            raise InvalidArgumentError(f"unknown mask variant {text!r}")
        window = None
        if arg:
            if kind is not VariantKind.SLIDING_WINDOW:
                raise InvalidArgumentError(f"variant {kind.value} takes no argument")
            try:
                window = int(arg)
            except ValueError:
                raise InvalidArgumentError(f"bad window size {arg!r}") from None
        return cls(kind, window)

    def __str__(self) -> str:
        if self.window is not None:
            return f"{self.kind.value}:{self.window}"
        return self.kind.value

    def resolved_window(self, seq_len: int, num_heads: int) -> int:
        w = self.window if self.window is not None else max(1, seq_len // num_heads)
        if not 1 <= w <= seq_len:
            raise InvalidArgumentError(f"sliding window {w} outside [1, {seq_len}]")
        return w


STANDARD = MaskVariant(VariantKind.STANDARD)
SPA = MaskVariant(VariantKind.SPA)
SLIDING_WINDOW = MaskVariant(VariantKind.SLIDING_WINDOW)
EBALL = MaskVariant(VariantKind.EBALL)
GBHALF = MaskVariant(VariantKind.GBHALF)
ALL_VARIANTS = (STANDARD, SPA, SLIDING_WINDOW, EBALL, GBHALF)


@dataclass(frozen=True, eq=False)
class HeadMask:
    """Allowed keys of one head, one inclusive interval ``[lo[i], hi[i]]`` per query.

    Rows with ``hi[i] < lo[i]`` are empty. ``band`` records the distance band the
    mask came from, when it came from one.
    """

    head: int
    seq_len: int
    lo: np.ndarray
    hi: np.ndarray
    band: BandSpec | None = field(default=None)

    @classmethod
    def from_band(cls, head: int, seq_len: int, band: BandSpec) -> "HeadMask":
        i = np.arange(seq_len)
        hi = i - band.start
        lo = np.maximum(0, i - band.stop + 1)
        empty = hi < 0
        lo = np.where(empty, 0, lo)
        hi = np.where(empty, -1, hi)
        lo.setflags(write=False)
        hi.setflags(write=False)
        return cls(head, seq_len, lo, hi, band)

    @property
    def row_sizes(self) -> np.ndarray:
        return np.maximum(0, self.hi - self.lo + 1)

    @property
    def allowed_ranges(self) -> list[range]:
        return [range(int(a), int(b) + 1) for a, b in zip(self.lo, self.hi)]

    def interval(self, i: int) -> range:
        return range(int(self.lo[i]), int(self.hi[i]) + 1)

    def to_dense(self) -> np.ndarray:
        j = np.arange(self.seq_len)
        return (j[None, :] >= self.lo[:, None]) & (j[None, :] <= self.hi[:, None])

    def __eq__(self, other):
        if not isinstance(other, HeadMask):
            return NotImplemented
        return (
            self.head == other.head
            and self.seq_len == other.seq_len
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    __hash__ = None


def _check_index(p: BandPartition, h: int, *positions: int) -> None:
    if not 0 <= h < p.num_heads:
        raise InvalidArgumentError(f"head index {h} outside [0, {p.num_heads})")
    for pos in positions:
        if not 0 <= pos < p.seq_len:
            raise InvalidArgumentError(f"position {pos} outside [0, {p.seq_len})")


def allow(p: BandPartition, h: int, i: int, j: int) -> bool:
    """True iff head ``h`` may attend from query ``i`` to key ``j``."""
    _check_index(p, h, i, j)
    b = p.bands[h]
    return j <= i and b.start <= i - j < b.stop


def head_support(p: BandPartition, h: int, i: int) -> range:
    """Allowed keys of head ``h`` for query ``i`` as a (possibly empty) range."""
    _check_index(p, h, i)
    b = p.bands[h]
    if i < b.start:
        return range(0)
    return range(max(0, i - b.stop + 1), i - b.start + 1)


def variant_bands(p: BandPartition, v: MaskVariant) -> tuple[BandSpec, ...]:
    """Distance band of every head under variant ``v``."""
    v = MaskVariant.parse(v)
    n, h_count = p.seq_len, p.num_heads
    if v.kind is VariantKind.STANDARD:
        return tuple(BandSpec(0, n) for _ in range(h_count))
    if v.kind is VariantKind.SPA:
        return p.bands
    if v.kind is VariantKind.SLIDING_WINDOW:
        w = v.resolved_window(n, h_count)
        return tuple(BandSpec(0, w) for _ in range(h_count))
    if v.kind is VariantKind.GBHALF:
        return tuple(BandSpec(b.start, math.ceil(b.width / 2)) for b in p.bands)
    if v.kind is VariantKind.EBALL:
        return eball_partition(n, h_count)
    raise InvalidArgumentError(f"unhandled variant {v}")


def build_mask(p: BandPartition, v: MaskVariant | str) -> list[HeadMask]:
    """One ``HeadMask`` per head for variant ``v``."""
    bands = variant_bands(p, v)
    return [HeadMask.from_band(h, p.seq_len, b) for h, b in enumerate(bands)]


@dataclass(frozen=True)
class CoverageReport:
    covered_pairs: int
    duplicate_pairs: int
    missing_pairs: int

    @property
    def ok(self) -> bool:
        return self.duplicate_pairs == 0 and self.missing_pairs == 0

    def to_json(self) -> dict:
        return {
            "covered_pairs": self.covered_pairs,
            "duplicate_pairs": self.duplicate_pairs,
            "missing_pairs": self.missing_pairs,
        }


def pair_multiplicity(masks: list[HeadMask]) -> np.ndarray:
    """``counts[i, j]`` = number of heads allowing ``(i, j)``; shape ``(N, N)``."""
    n = masks[0].seq_len
    lo = np.stack([m.lo for m in masks])
    hi = np.stack([m.hi for m in masks])
    keep = hi >= lo
    rows = np.broadcast_to(np.arange(n), lo.shape)[keep]
    # difference array over keys, one scatter for all heads at once
    stride = n + 1
    diff = np.bincount(rows * stride + lo[keep], minlength=n * stride)
    diff -= np.bincount(rows * stride + hi[keep] + 1, minlength=n * stride)
    return np.cumsum(diff.reshape(n, stride)[:, :n], axis=1).astype(np.int32)


def verify_coverage(
    p: BandPartition | list[HeadMask], variant: MaskVariant | str = SPA
) -> CoverageReport:
    """Count causal pairs covered once, more than once, or not at all.

    Accepts a partition (masks are built for ``variant``) or an explicit mask list.
    """
    masks = build_mask(p, variant) if isinstance(p, BandPartition) else list(p)
    counts = pair_multiplicity(masks)
    n = counts.shape[0]
    causal = np.tril(np.ones((n, n), dtype=bool))
    if (counts[~causal] != 0).any():
        raise AssertionError("mask allows a non-causal pair")
    c = counts[causal]
    return CoverageReport(
        covered_pairs=int((c >= 1).sum()),
        duplicate_pairs=int((c >= 2).sum()),
        missing_pairs=int((c == 0).sum()),
    )


@dataclass(frozen=True)
class PairCount:
    per_head: tuple[int, ...]
    total: int


def pair_count(masks: list[HeadMask]) -> PairCount:
    per_head = tuple(int(m.row_sizes.sum()) for m in masks)
    return PairCount(per_head, sum(per_head))


def render_mask(masks: list[HeadMask], fmt: str = "ascii") -> list[bytes]:
    """Render each head as an N x N grid: allowed = dark (``X`` / 0), else light."""
    if fmt not in ("ascii", "pgm"):
        raise InvalidArgumentError(f"unknown render format {fmt!r}")
    out = []
    for m in masks:
        n = m.seq_len
        if n > MAX_RENDER_SEQ_LEN:
            raise InvalidArgumentError(
                f"refusing to render N={n}; rendering is limited to N <= {MAX_RENDER_SEQ_LEN}"
            )
        dense = m.to_dense()
        if fmt == "ascii":
            grid = np.where(dense, ord("X"), ord(".")).astype(np.uint8)
            lines = b"\n".join(row.tobytes() for row in grid)
            out.append(lines + b"\n")
        else:
            pixels = np.where(dense, 0, 255).astype(np.uint8)
            out.append(b"P5\n%d %d\n255\n" % (n, n) + pixels.tobytes())
    return out
