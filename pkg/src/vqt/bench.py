"""Cost accounting for the temporal stage: analytic FLOPs, wall-clock scaling, JL bound.

FLOP convention: one multiply-add counts as 2 FLOPs. Per spatial location and
per query frame, the temporal stage does two length-T products of width d
(scores q.k and the weighted sum of values), so a query costs 4*T*d FLOPs.
Softmax, normalization and projections are excluded; they are shared by all
variants. Ratios between variants do not depend on the constant.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import sparse, stats

from . import tensor as vt
from .attention import init_attention_params, select_keyframes, spatial_shift
from .mptn import PathwayPlan, aggregation_matrix, plan_pathways
from .tensor import Tensor

VARIANTS = ("dense", "sta", "mptn")
CONVENTION = "1 multiply-add = 2 FLOPs; scores + weighted sum; softmax/projections excluded"


def flops_temporal(variant: str, T: int, N: int, d: int,
                   plan: PathwayPlan | None = None) -> int:
    """Temporal-attention FLOPs for one layer. ``sta`` uses the first pathway of ``plan``."""
    per_query = 4 * T * N * d
    if variant == "dense":
        return T * per_query
    if plan is None:
        raise ValueError(f"{variant} needs a pathway plan")
    if plan.T != T:
        raise ValueError(f"plan is for T={plan.T}, asked for T={T}")
    if variant == "sta":
        return plan.budgets[0] * per_query
    if variant == "mptn":
        return sum(plan.budgets) * per_query
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def flops_ratio(T: int, N: int, d: int, plan: PathwayPlan | None = None) -> Fraction:
    plan = plan_pathways(T) if plan is None else plan
    return Fraction(flops_temporal("mptn", T, N, d, plan), flops_temporal("dense", T, N, d))


def jl_error_bound(T: float, d: float) -> float:
    """Distortion epsilon solving d = 8 ln(T) / eps^2."""
    if T < 2 or d < 1:
        raise ValueError(f"need T >= 2 and d >= 1, got T={T}, d={d}")
    return math.sqrt(8.0 * math.log(T) / d)


@dataclass
class CostReport:
    variant: str
    T: int
    N: int
    d: int
    flops: int
    nanos: int  # median wall-clock per forward of the temporal stage
    ratio: Fraction  # flops vs dense at the same T
    cv: float = 0.0  # std / mean across repetitions

    def to_text(self) -> str:
        return (f"{self.variant}\tT={self.T}\tflops={self.flops}\tratio={self.ratio}"
                f" ({float(self.ratio):.4f})\tns={self.nanos}\tcv={self.cv:.3f}")


@dataclass
class ScalingResult:
    reports: list[CostReport]
    slopes: dict[str, tuple[float, float]]  # variant -> (slope, standard error)
    flagged: list[tuple[str, int]] = field(default_factory=list)  # (variant, T) with cv > 20%

    def to_text(self) -> str:
        lines = [f"# {CONVENTION}"] + [r.to_text() for r in self.reports]
        for v, (s, se) in self.slopes.items():
            lines.append(f"slope {v}: {s:.3f} +/- {se:.3f}")
        for v, T in self.flagged:
            lines.append(f"warning: {v} at T={T} varied more than 20% across repetitions; rerun advised")
        return "\n".join(lines) + "\n"


def write_csv(path: str | Path, reports: list[CostReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "variant", "flops", "nanos"])
        for r in reports:
            w.writerow([r.T, r.variant, r.flops, r.nanos])


def fit_slope(xs, ys) -> tuple[float, float]:
    """Least-squares slope of log y on log x, with its standard error."""
    if len(xs) < 3:
        raise ValueError(f"need at least 3 points for a fit, got {len(xs)}")
    fit = stats.linregress(np.log(xs), np.log(ys))
    return float(fit.slope), float(fit.stderr)


# ------------------------------------------------------------------ timing


def _heads(y: Tensor, heads: int) -> Tensor:
    T, N, d = y.shape
    return vt.transpose(vt.reshape(y, (T, N, heads, d // heads)), (1, 2, 0, 3))


def _dense_core(qh, kh, vh, scale):
    return vt.attention(qh, kh, vh, scale)


def _mptn_core(q, qh, kh, vh, pathways, plan, rng, scale):
    """Selection, shift, sparse attention and fold-back; K and V already in head layout."""
    T, N, d = q.shape
    heads = pathways[0].heads
    qf = q.data.mean(axis=1)
    kf = kh.data.mean(axis=0).transpose(1, 0, 2).reshape(T, d)
    rows, picks = [], []
    for p, budget, stream in zip(pathways, plan.budgets, rng.spawn(len(plan.budgets))):
        sel = select_keyframes(qf, kf, budget, stream)
        qs = spatial_shift(vt.take(q, sel.indices, axis=0), p)
        rows.append(vt.attention(_heads(qs, heads), kh, vh, scale).data)
        picks.append(sel.indices)
    A = sparse.csr_matrix(aggregation_matrix(T, plan.budgets, picks, "scatter"))
    stacked = np.concatenate(rows, axis=2)  # (N, h, R, e)
    return A @ stacked.transpose(2, 0, 1, 3).reshape(stacked.shape[2], -1)


def _time(fn, repetitions: int) -> np.ndarray:
    fn()  # warm-up
    out = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        out[i] = time.perf_counter_ns() - t0
    return out


def scaling_study(T_values, repetitions: int = 10, N: int = 16, d: int = 32, heads: int = 2,
                  seed: int = 0, inner: int | None = None) -> ScalingResult:
    """Wall-clock of the dense and MPTN temporal stages over ``T_values``.

    The timed region matches the FLOP convention: Q, K, V arrive projected
    and split into heads, so only attention proper is measured (plus, for
    MPTN, keyframe selection, the query shift and the fold back to T rows).
    Defaults match the tiny preset (N=16 patches, d=32, 2 heads). Each
    repetition runs the stage ``inner`` times so short stages clear timer
    resolution; the fitted value is the median per-forward time.
    """
    T_values = [int(t) for t in T_values]
    if len(T_values) < 3:
        raise ValueError(f"need at least 3 T values for a fit, got {len(T_values)}")
    bad = [t for t in T_values if t < 8 or t > 256 or t & (t - 1)]
    if bad:
        raise ValueError(f"T values must be powers of two in [8, 256], got {bad}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d // heads)
    reports: list[CostReport] = []
    flagged: list[tuple[str, int]] = []
    with vt.no_grad():
        for T in T_values:
            plan = plan_pathways(T)
            q, k, v = (Tensor(rng.normal(size=(T, N, d))) for _ in range(3))
            qh, kh, vh = (_heads(t, heads) for t in (q, k, v))
            pathways = [init_attention_params(d, heads, rng, np.float64, offsets=True)
                        for _ in plan.budgets]
            for p in pathways:
                p.offset_w.data[:] = rng.normal(0, 0.1, size=p.offset_w.shape)
            reps = inner or max(1, 4096 // T)
            runs = {
                "dense": lambda: [_dense_core(qh, kh, vh, scale) for _ in range(reps)],
                "mptn": lambda: [_mptn_core(q, qh, kh, vh, pathways, plan,
                                            np.random.default_rng([seed, T]), scale)
                                 for _ in range(reps)],
            }
            dense_flops = flops_temporal("dense", T, N, d)
            for variant, fn in runs.items():
                times = _time(fn, repetitions) / reps
                cv = float(times.std() / times.mean())
                if cv > 0.2:
                    flagged.append((variant, T))
                flops = flops_temporal(variant, T, N, d, plan)
                reports.append(CostReport(variant, T, N, d, flops, int(np.median(times)),
                                          Fraction(flops, dense_flops), cv))
    slopes = {}
    for variant in ("dense", "mptn"):
        rs = [r for r in reports if r.variant == variant]
        slopes[variant] = fit_slope([r.T for r in rs], [r.nanos for r in rs])
    return ScalingResult(reports, slopes, flagged)
