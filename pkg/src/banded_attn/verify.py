"""Self-check suites behind ``banded-attn verify``.

Each suite returns a :class:`SuiteResult`; a failing suite carries the first
counterexample it found.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .kernels import banded_backward, banded_forward, masked_dense_attention, masked_dense_forward
from .partition import (
    SPA,
    MaskVariant,
    build_mask,
    compute_partition,
    pair_multiplicity,
    verify_coverage,
)

ORACLE_TOL = 1e-10
GRAD_FD_TOL = 1e-4
GRAD_ORACLE_TOL = 1e-8
BAND_VARIANTS = ("SPA", "SlidingWindow", "EBALL", "GBHALF")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checked: int
    detail: dict = field(default_factory=dict)
    counterexample: dict | None = None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "checked": self.checked,
            "detail": self.detail,
            "counterexample": self.counterexample,
        }


def random_sizes(rng: np.random.Generator, max_n: int, count: int) -> list[tuple[int, int]]:
    """``count`` pairs ``(N, H)`` with ``1 <= H <= N <= max_n``."""
    out = []
    for _ in range(count):
        n = int(rng.integers(1, max_n + 1))
        out.append((n, int(rng.integers(1, n + 1))))
    return out


def coverage_suite(sizes, variant=SPA) -> SuiteResult:
    for n, h in sizes:
        rep = verify_coverage(compute_partition(n, h), variant)
        expected = n * (n + 1) // 2
        if not rep.ok or rep.covered_pairs != expected:
            return SuiteResult("coverage", False, len(sizes), {"variant": str(MaskVariant.parse(variant))},
                               {"N": n, "H": h} | rep.to_json())
    return SuiteResult("coverage", True, len(sizes), {"variant": str(MaskVariant.parse(variant))})


def exclusivity_suite(sizes) -> SuiteResult:
    """No causal pair is allowed by two SPA heads."""
    for n, h in sizes:
        counts = pair_multiplicity(build_mask(compute_partition(n, h), SPA))
        if counts.max() > 1:
            i, j = np.argwhere(counts > 1)[0]
            return SuiteResult("exclusivity", False, len(sizes), counterexample={"N": n, "H": h, "i": int(i), "j": int(j)})
    return SuiteResult("exclusivity", True, len(sizes))


def balance_suite(sizes) -> SuiteResult:
    for n, h in sizes:
        p = compute_partition(n, h)
        try:
            p.check()
        except AssertionError as exc:
            return SuiteResult("balance", False, len(sizes), counterexample={"N": n, "H": h, "error": str(exc)})
    return SuiteResult("balance", True, len(sizes))


def oracle_suite(rng: np.random.Generator, trials: int, max_n: int = 64) -> SuiteResult:
    """Banded kernel vs masked-dense oracle at f64."""
    worst = 0.0
    for t in range(trials):
        h = int(rng.choice([x for x in (1, 2, 4, 8) if x <= max_n]))
        n = int(rng.integers(h, max_n + 1))
        d_k = int(rng.integers(1, 9))
        variant = BAND_VARIANTS[t % len(BAND_VARIANTS)]
        q, k, v = rng.standard_normal((3, 2, h, n, d_k))
        masks = build_mask(compute_partition(n, h), variant)
        ref = masked_dense_forward(q, k, v, masks).output
        got = banded_forward(q, k, v, masks, tile_size=int(rng.integers(1, 65))).output
        err = float(np.abs(ref - got).max())
        worst = max(worst, err)
        if not err < ORACLE_TOL:
            return SuiteResult("oracle_equivalence", False, t + 1, {"max_abs_diff": worst},
                               {"N": n, "H": h, "d_k": d_k, "variant": variant, "max_abs_diff": err})
    return SuiteResult("oracle_equivalence", True, trials, {"max_abs_diff": worst, "tolerance": ORACLE_TOL})


def _banded_loss_fn(which: str, q, k, v, masks, weight):
    def f(x: ag.Tensor) -> ag.Tensor:
        args = {"q": q, "k": k, "v": v}
        args[which] = x.data
        res = banded_forward(args["q"], args["k"], args["v"], masks)
        out = ag.custom_op(
            res.output, (x,),
            lambda g: (banded_backward(g, res.saved)["qkv".index(which)],),
        )
        return ag.sum_all(ag.mul(out, weight))
    return f


def gradient_suite(rng: np.random.Generator, trials: int, max_n: int = 16) -> SuiteResult:
    """Banded backward vs central differences and vs oracle autograd at f64."""
    worst_fd = worst_oracle = 0.0
    for t in range(trials):
        h = int(rng.choice([x for x in (1, 2, 4) if x <= max_n]))
        n = int(rng.integers(h, max_n + 1))
        d_k = int(rng.integers(1, 5))
        variant = BAND_VARIANTS[t % len(BAND_VARIANTS)]
        masks = build_mask(compute_partition(n, h), variant)
        q, k, v = rng.standard_normal((3, h, n, d_k))
        weight = rng.standard_normal((n, h * d_k))
        res = banded_forward(q, k, v, masks)
        dq, dk, dv = banded_backward(weight, res.saved)
        qt, kt, vt = (ag.Tensor(a.copy(), requires_grad=True) for a in (q, k, v))
        out, _ = masked_dense_attention(qt, kt, vt, masks)
        ag.sum_all(ag.mul(out, weight)).backward()
        oracle_err = max(float(np.abs(a - b.grad).max()) for a, b in ((dq, qt), (dk, kt), (dv, vt)))
        worst_oracle = max(worst_oracle, oracle_err)
        fd_err = 0.0
        for which, arr in (("q", q), ("k", k), ("v", v)):
            x = ag.Tensor(arr.copy())
            fd_err = max(fd_err, ag.finite_difference_check(_banded_loss_fn(which, q, k, v, masks, weight), x, eps=1e-5))
        worst_fd = max(worst_fd, fd_err)
        if not (fd_err < GRAD_FD_TOL and oracle_err < GRAD_ORACLE_TOL):
            return SuiteResult("gradient_check", False, t + 1,
                               {"max_fd_rel_err": worst_fd, "max_oracle_abs_diff": worst_oracle},
                               {"N": n, "H": h, "d_k": d_k, "variant": variant,
                                "fd_rel_err": fd_err, "oracle_abs_diff": oracle_err})
    return SuiteResult("gradient_check", True, trials,
                       {"max_fd_rel_err": worst_fd, "max_oracle_abs_diff": worst_oracle,
                        "fd_tolerance": GRAD_FD_TOL, "oracle_tolerance": GRAD_ORACLE_TOL})


def run_all(seq_len: int = 64, heads: int = 8, trials: int = 20, seed: int = 0,
            variant: str | MaskVariant = SPA) -> list[SuiteResult]:
    """Run every suite on ``(seq_len, heads)`` plus ``trials`` random sizes up to ``seq_len``.

    ``variant`` selects the masks used by the coverage suite only.
    """
    rng = np.random.default_rng(seed)
    sizes = [(seq_len, heads)] + random_sizes(rng, seq_len, trials)
    return [
        coverage_suite(sizes, variant),
        exclusivity_suite(sizes),
        balance_suite(sizes),
        oracle_suite(rng, trials, min(seq_len, 64)),
        gradient_suite(rng, max(1, trials // 4), min(seq_len, 16)),
    ]
