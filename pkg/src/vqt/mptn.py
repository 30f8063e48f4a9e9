"""Multi-pathway temporal network: parallel sparse attention at geometric budgets."""

from __future__ import annotations

import contextvars
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as vt
from .attention import AttentionParams, KeyframeSelection, ceil_log2, sta_forward
from .tensor import Tensor
from .tokenizer import ConfigError

MODES = ("scatter", "literal")


class PlanError(ConfigError):
    """Pathway budgets do not fit in the clip."""


@dataclass(frozen=True)
class PathwayPlan:
    T: int
    m: int
    budgets: tuple[int, ...]

    @property
    def log_t(self) -> int:
        return ceil_log2(self.T)

    @property
    def total(self) -> int:
        return sum(self.budgets)

    @property
    def reduces_cost(self) -> bool:
        return self.total < self.T


def _check(T: int, budgets: tuple[int, ...]) -> None:
    if not budgets:
        raise PlanError("empty pathway list")
    if any(b < 1 or b > T for b in budgets):
        raise PlanError(f"budgets {list(budgets)} exceed T={T}; use a shorter pathway list")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise PlanError(f"budgets {list(budgets)} must strictly increase")
    if sum(budgets) > T:
        raise PlanError(f"budgets {list(budgets)} sum to {sum(budgets)} > T={T}; "
                        f"use a shorter pathway list")


def plan_pathways(T: int, budgets: tuple[int, ...] | None = None) -> PathwayPlan:
    """Budgets 2^a * ceil(log2 T) for a = 0..m, m = floor(log2(T / ceil(log2 T) + 1)) - 1.

    Integer arithmetic throughout: 2^k <= T / L + 1 iff 2^k * L <= T + L.
    Explicit ``budgets`` are validated against T instead.
    """
    if T < 2:
        raise PlanError(f"need at least 2 frames, got T={T}")
    L = ceil_log2(T)
    k = 0
    while (2 ** (k + 1)) * L <= T + L:
        k += 1
    m = k - 1
    if budgets is None:
        budgets = tuple(2**a * L for a in range(m + 1))
    else:
        budgets = tuple(int(b) for b in budgets)
        m = len(budgets) - 1
    _check(T, budgets)
    return PathwayPlan(T, m, budgets)


def aggregation_matrix(T: int, budgets: tuple[int, ...],
                       selections: list[np.ndarray | None], mode: str) -> np.ndarray:
    """(T, R) matrix mapping the R concatenated pathway rows back to T frames.

    literal: first R frames take the rows in order, the rest take their mean.
    scatter: each frame averages the rows of pathways that selected it; frames
    no pathway selected take the mean of all rows.
    """
    R = sum(budgets)
    A = np.zeros((T, R))
    if mode == "literal":
        n = min(T, R)
        A[np.arange(n), np.arange(n)] = 1.0
        A[n:, :] = 1.0 / R
        return A
    if mode != "scatter":
        raise ConfigError(f"unknown mptn mode {mode!r}; expected scatter or literal")
    offset = 0
    for budget, idx in zip(budgets, selections):
        if idx is None:
            raise ConfigError("scatter mode needs frame-picking reducers (kl or random)")
        for row, t in enumerate(idx):
            A[t, offset + row] = 1.0
        offset += budget
    hits = A.sum(axis=1)
    picked = hits > 0
    A[picked] /= hits[picked, None]
    A[~picked] = 1.0 / R
    return A


def mptn_forward(tokens: Tensor, params: list[AttentionParams], plan: PathwayPlan,
                 rng: np.random.Generator, mode: str = "scatter", strict: bool = False,
                 reducer: str = "kl", workers: int = 1,
                 ) -> tuple[Tensor, list[KeyframeSelection | None]]:
    """Run one sparse attention pathway per budget and fold the rows back to T.

    Each pathway draws from its own child of ``rng`` (spawned in pathway
    order before any pathway runs), so the result does not depend on
    execution order. Returns (T, N, d) and the per-pathway selections.
    """
    T, N, d = tokens.shape
    if T != plan.T:
        raise ConfigError(f"tokens have T={T}, plan expects T={plan.T}")
    if len(params) != len(plan.budgets):
        raise ConfigError(f"{len(params)} pathway parameter sets for {len(plan.budgets)} budgets")
    streams = rng.spawn(len(plan.budgets))

    def run(i):
        return sta_forward(tokens, params[i], plan.budgets[i], streams[i], strict=strict,
                           reducer=reducer)

    if workers > 1 and len(plan.budgets) > 1:
        ctx = contextvars.copy_context()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(ctx.copy().run, run, i) for i in range(len(plan.budgets))]
            results = [f.result() for f in futures]
    else:
        results = [run(i) for i in range(len(plan.budgets))]

    outs = [r[0] for r in results]
    selections = [r[1] for r in results]
    idx = [None if s is None else s.indices for s in selections]
    A = aggregation_matrix(T, plan.budgets, idx, mode)
    rows = vt.reshape(vt.concat(outs, axis=0), (plan.total, N * d))
    merged = vt.matmul(Tensor(A, dtype=tokens.dtype), rows)
    return vt.reshape(merged, (T, N, d)), selections
