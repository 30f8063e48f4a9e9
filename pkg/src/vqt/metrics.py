"""VQA evaluation criteria: PLCC, SROCC, KROCC, RMSE."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (constant input or too few samples)."""


def _pair(pred, label) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    return p, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        raise UndefinedCorrelationError(f"need at least 2 samples, got {x.size}")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def plcc(pred, label) -> float:
    """Pearson linear correlation, no logistic fitting."""
    return _pearson(*_pair(pred, label))


def srocc(pred, label) -> float:
    """Spearman rank correlation; ties get average ranks."""
    p, y = _pair(pred, label)
    return _pearson(rankdata(p), rankdata(y))


def krocc(pred, label) -> float:
    """Kendall tau-b over all pairs."""
    p, y = _pair(pred, label)
    n = p.size
    if n < 2:
        raise UndefinedCorrelationError(f"need at least 2 samples, got {n}")
    i, j = np.triu_indices(n, k=1)
    dp = np.sign(p[i] - p[j])
    dy = np.sign(y[i] - y[j])
    concordant = int(np.count_nonzero(dp * dy > 0))
    discordant = int(np.count_nonzero(dp * dy < 0))
    pairs = n * (n - 1) // 2
    tied_p = int(np.count_nonzero(dp == 0))
    tied_y = int(np.count_nonzero(dy == 0))
    denom = (pairs - tied_p) * (pairs - tied_y)
    if denom == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return (concordant - discordant) / float(np.sqrt(denom))


def rmse(pred, label) -> float:
    p, y = _pair(pred, label)
    if p.size == 0:
        raise ValueError("rmse needs at least one pair")
    return float(np.sqrt(np.mean((p - y) ** 2)))


@dataclass
class MetricReport:
    plcc: float
    srocc: float
    krocc: float
    rmse: float
    n: int

    def to_text(self) -> str:
        return "".join(f"{k}: {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        fields = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition(":")
                fields[key.strip()] = value.strip()
        return cls(plcc=float(fields["plcc"]), srocc=float(fields["srocc"]),
                   krocc=float(fields["krocc"]), rmse=float(fields["rmse"]), n=int(fields["n"]))


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def evaluate(pred, label) -> MetricReport:
    p, y = _pair(pred, label)
    return MetricReport(plcc(p, y), srocc(p, y), krocc(p, y), rmse(p, y), int(p.size))
