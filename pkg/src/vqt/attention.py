"""Temporal, spatial and sparse temporal attention.

Token layout throughout is (frames, patches, channels). Temporal attention
runs independently per patch location; spatial attention per frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as vt
from .tensor import ContractError, ShapeError, Tensor
from .tokenizer import ConfigError

REDUCERS = ("kl", "random", "linear", "conv", "clustering")


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int
    offset_w: Tensor | None = None  # (d, 2)
    offset_b: Tensor | None = None  # (2,)
    mix_w: Tensor | None = None  # (budget, T), learned reducers only
    mix_b: Tensor | None = None  # (budget,)

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads:
            raise ConfigError(f"embed dim {d} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}
        for name in ("offset_w", "offset_b", "mix_w", "mix_b"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out


def init_attention_params(d: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                          offsets: bool = False, mix: tuple[int, int] | None = None,
                          ) -> AttentionParams:
    """Xavier-uniform projections; offset predictor zeroed so the shift starts as identity."""
    bound = math.sqrt(6.0 / (2 * d))

    def lin():
        return Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True, dtype=dtype)

    p = AttentionParams(lin(), lin(), lin(), lin(), heads)
    if offsets:
        p.offset_w = Tensor(np.zeros((d, 2)), requires_grad=True, dtype=dtype)
        p.offset_b = Tensor(np.zeros(2), requires_grad=True, dtype=dtype)
    if mix is not None:
        budget, T = mix
        base = np.zeros((budget, T))
        base[np.arange(budget), np.linspace(0, T - 1, budget).round().astype(int)] = 1.0
        p.mix_w = Tensor(base + rng.normal(0, 0.02, size=base.shape), requires_grad=True,
                         dtype=dtype)
        p.mix_b = Tensor(np.zeros(budget), requires_grad=True, dtype=dtype)
    return p


def ceil_log2(n: int) -> int:
    """Exact ceil(log2 n) for n >= 1."""
    return (n - 1).bit_length()


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(T, N, d) -> (N, heads, T, d/heads)."""
    T, N, d = x.shape
    return vt.transpose(vt.reshape(x, (T, N, heads, d // heads)), (1, 2, 0, 3))


def _merge_heads(y: Tensor) -> Tensor:
    """(N, heads, S, e) -> (S, N, heads*e)."""
    N, h, S, e = y.shape
    return vt.reshape(vt.transpose(y, (2, 0, 1, 3)), (S, N, h * e))


def _temporal(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams) -> Tensor:
    h = params.heads
    e = q.shape[-1] // h
    y = vt.attention(_split_heads(q, h), _split_heads(k, h), _split_heads(v, h),
                     1.0 / math.sqrt(e))
    return vt.matmul(_merge_heads(y), params.w_o)


def dense_temporal_attention(tokens: Tensor, params: AttentionParams) -> Tensor:
    """Full attention over all T frames at each patch location; (T, N, d) -> (T, N, d)."""
    if tokens.ndim != 3 or tokens.shape[-1] != params.dim:
        raise ShapeError(f"temporal attention: tokens {tokens.shape}, dim {params.dim}")
    q = vt.matmul(tokens, params.w_q)
    k = vt.matmul(tokens, params.w_k)
    v = vt.matmul(tokens, params.w_v)
    return _temporal(q, k, v, params)


def spatial_attention(tokens: Tensor, params: AttentionParams,
                      quality: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """Per-frame attention over the N patches (plus the quality token, if given).

    The quality token is broadcast into every frame's sequence at position 0;
    its T per-frame outputs are averaged back into one (1, d) state.
    """
    T, N, d = tokens.shape
    if d != params.dim:
        raise ShapeError(f"spatial attention: tokens {tokens.shape}, dim {params.dim}")
    x = tokens
    if quality is not None:
        cls = vt.broadcast_to(vt.reshape(quality, (1, 1, d)), (T, 1, d))
        x = vt.concat([cls, tokens], axis=1)
    h = params.heads
    e = d // h
    L = x.shape[1]

    def split(y):
        return vt.transpose(vt.reshape(y, (T, L, h, e)), (0, 2, 1, 3))

    y = vt.attention(split(vt.matmul(x, params.w_q)), split(vt.matmul(x, params.w_k)),
                     split(vt.matmul(x, params.w_v)), 1.0 / math.sqrt(e))
    y = vt.matmul(vt.reshape(vt.transpose(y, (0, 2, 1, 3)), (T, L, d)), params.w_o)
    if quality is None:
        return y, None
    patches = vt.take(y, np.arange(1, L), axis=1)
    q_out = vt.reshape(vt.mean(vt.take(y, [0], axis=1), axis=0), (1, d))
    return patches, q_out


# ------------------------------------------------------------- keyframes


def kl_divergence_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Divergence from uniform of each query's similarity distribution, constant dropped.

    q: (M, d), k: (T, d) -> (M,): logsumexp(s) - mean(s), s = q k^T / sqrt(d).
    """
    s = (q @ k.T) / math.sqrt(q.shape[-1])
    m = s.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=-1))
    return lse - s.mean(axis=-1)


def kl_divergence_score(q: np.ndarray, k: np.ndarray) -> float:
    """Single-query form of :func:`kl_divergence_scores`."""
    return float(kl_divergence_scores(np.asarray(q)[None, :], np.asarray(k))[0])


@dataclass
class KeyframeSelection:
    indices: np.ndarray  # ascending, unique
    probe_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))  # probe divergences
    threshold: float = float("nan")
    divergences: np.ndarray | None = None  # every frame, diagnostics only

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(indices=[int(i) for i in self.indices],
                   probes=[int(i) for i in self.probe_indices],
                   scores=[float(s) for s in self.scores],
                   threshold=float(self.threshold))
        return rec


def select_keyframes(q_frames: np.ndarray, k_frames: np.ndarray, budget: int,
                     rng: np.random.Generator, strict: bool = False,
                     n_probes: int | None = None) -> KeyframeSelection:
    """Pick ``budget`` frames whose divergence beats mean + std of random probes.

    ceil(log2 T) probe frames are drawn without replacement to estimate the
    threshold; frames are then scanned in index order. When fewer than
    ``budget`` frames pass, the remainder is filled with the highest-divergence
    unselected probes, then the lowest unselected indices. ``strict=True``
    skips the fill and may return fewer indices. ``n_probes`` overrides the
    probe count.
    """
    T = q_frames.shape[0]
    if not 1 <= budget <= T:
        raise ContractError(f"budget {budget} outside [1, T={T}]")
    if n_probes is None:
        n_probe = min(T, ceil_log2(T)) if T > 1 else 1
    else:
        n_probe = max(1, min(T, n_probes))
    probes = rng.choice(T, size=n_probe, replace=False)
    div = kl_divergence_scores(q_frames, k_frames)
    probe_div = div[probes]
    threshold = float(probe_div.mean() + probe_div.std())

    chosen = [t for t in range(T) if div[t] > threshold][:budget]
    if not strict and len(chosen) < budget:
        taken = set(chosen)
        for t in sorted(probes.tolist(), key=lambda i: (-div[i], i)):
            if len(chosen) == budget:
                break
            if t not in taken:
                chosen.append(t)
                taken.add(t)
        for t in range(T):
            if len(chosen) == budget:
                break
            if t not in taken:
                chosen.append(t)
                taken.add(t)
    return KeyframeSelection(np.array(sorted(chosen), dtype=np.intp), probes.astype(np.intp),
                             probe_div, threshold, div)


def spatial_shift(queries: Tensor, params: AttentionParams) -> Tensor:
    """Resample each frame's query grid at offsets predicted per token.

    (S, N, d) -> (S, N, d); N must be a perfect square.
    """
    S, N, d = queries.shape
    g = math.isqrt(N)
    if g * g != N:
        raise ConfigError(f"spatial shift needs a square patch grid, got N={N}")
    if params.offset_w is None:
        return queries
    off = vt.add(vt.matmul(queries, params.offset_w), params.offset_b)
    out = vt.bilinear_sample(vt.reshape(queries, (S, g, g, d)), vt.reshape(off, (S, g, g, 2)))
    return vt.reshape(out, (S, N, d))


# ------------------------------------------------------- frame reduction


def _kmeans_cosine(x: np.ndarray, k: int, rng: np.random.Generator,
                   iters: int = 10) -> np.ndarray:
    """Cluster rows of ``x`` by cosine similarity; returns a (k, T) averaging matrix."""
    T = x.shape[0]
    unit = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    seeds = [int(rng.integers(T))]
    while len(seeds) < k:
        sim = (unit @ unit[seeds].T).max(axis=1)
        sim[seeds] = np.inf
        seeds.append(int(np.argmin(sim)))
    centroids = x[seeds].copy()
    assign = np.zeros(T, dtype=np.intp)
    for _ in range(iters):
        cu = centroids / np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
        assign = np.argmax(unit @ cu.T, axis=1)
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
    # order clusters by first member for a stable output layout
    mix = np.zeros((k, T))
    order = sorted(range(k), key=lambda c: (np.flatnonzero(assign == c)[:1].tolist() or [T + c]))
    for row, c in enumerate(order):
        members = np.flatnonzero(assign == c)
        if members.size:
            mix[row, members] = 1.0 / members.size
        else:
            mix[row, seeds[c]] = 1.0
    return mix


def baseline_reduce(tokens: Tensor, strategy: str, budget: int,
                    rng: np.random.Generator | None = None,
                    params: AttentionParams | None = None) -> Tensor:
    """Reduce T frames to ``budget`` rows without divergence scoring.

    random: uniform frame sample (ascending order); linear: learned
    budget x T mixing; conv: learned T -> budget channel map followed by GELU;
    clustering: 10 rounds of cosine k-means, output rows are cluster means.
    """
    T, N, d = tokens.shape
    if not 1 <= budget <= T:
        raise ContractError(f"budget {budget} outside [1, T={T}]")
    if strategy == "random":
        if rng is None:
            raise ContractError("random reduction needs an rng")
        idx = np.sort(rng.choice(T, size=budget, replace=False))
        return vt.take(tokens, idx, axis=0)
    flat = vt.reshape(tokens, (T, N * d))
    if strategy in ("linear", "conv"):
        if params is None or params.mix_w is None:
            raise ContractError(f"{strategy} reduction needs mix_w parameters")
        if params.mix_w.shape != (budget, T):
            raise ShapeError(f"mix_w {params.mix_w.shape}, expected {(budget, T)}")
        out = vt.matmul(params.mix_w, flat)
        if strategy == "conv":
            out = vt.gelu(vt.add(out, vt.reshape(params.mix_b, (budget, 1))))
        return vt.reshape(out, (budget, N, d))
    if strategy == "clustering":
        if rng is None:
            raise ContractError("clustering reduction needs an rng")
        mix = _kmeans_cosine(flat.data.astype(np.float64), budget, rng)
        return vt.reshape(vt.matmul(Tensor(mix, dtype=tokens.dtype), flat), (budget, N, d))
    raise ValueError(f"unknown reduction strategy {strategy!r}; expected one of "
                     f"random, linear, conv, clustering")


def sta_forward(tokens: Tensor, params: AttentionParams, budget: int,
                rng: np.random.Generator, strict: bool = False,
                reducer: str = "kl") -> tuple[Tensor, KeyframeSelection | None]:
    """Sparse temporal attention: (T, N, d) -> (budget, N, d).

    Queries come from the selected frames only (then spatially shifted); keys
    and values come from all T frames. Selection is a hard, forward-only
    decision and carries no gradient. Returns the selection too (``None`` for
    reducers that mix frames instead of picking them).
    """
    T, N, d = tokens.shape
    if d != params.dim:
        raise ShapeError(f"sta: tokens {tokens.shape}, dim {params.dim}")
    q = vt.matmul(tokens, params.w_q)
    k = vt.matmul(tokens, params.w_k)
    v = vt.matmul(tokens, params.w_v)
    selection = None
    if reducer == "kl":
        selection = select_keyframes(q.data.mean(axis=1), k.data.mean(axis=1), budget, rng,
                                     strict=strict)
        q_sel = vt.take(q, selection.indices, axis=0)
    elif reducer == "random":
        idx = np.sort(rng.choice(T, size=budget, replace=False)).astype(np.intp)
        selection = KeyframeSelection(idx)
        q_sel = vt.take(q, idx, axis=0)
    elif reducer in REDUCERS:
        q_sel = baseline_reduce(q, reducer, budget, rng, params)
    else:
        raise ValueError(f"unknown reducer {reducer!r}")
    if q_sel.shape[0] == 0:
        return Tensor(np.zeros((budget, N, d), dtype=tokens.dtype)), selection
    out = _temporal(spatial_shift(q_sel, params), k, v, params)
    missing = budget - out.shape[0]
    if missing:
        out = vt.concat([out, Tensor(np.zeros((missing, N, d), dtype=out.dtype))], axis=0)
    return out, selection


def write_selection_dump(path: str | Path, records: list[dict]) -> None:
    """One JSON object per line: block, pathway, indices, probes, scores, threshold."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
