"""Detection metrics, calibration, the FLOPs model and the label-coverage bound."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "MetricsReport",
    "CalibrationCurve",
    "CoverageBound",
    "FlopsBreakdown",
    "compute_metrics",
    "compute_auc",
    "calibration_curve",
    "flops_dnn",
    "flops_closed_form",
    "baseline_complexity",
    "coverage_bound",
    "coverage_mc",
    "coverage_mc_curve",
]


@dataclass
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    auc: float = float("nan")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def misdetection(self) -> float:
        return self.fn / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "recall": self.recall, "misdetection": self.misdetection,
                "precision": self.precision, "accuracy": self.accuracy, "auc": self.auc}


def compute_metrics(predictions, labels, scores=None) -> MetricsReport:
    """Micro-aggregated confusion counts over every device decision."""
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    rep = MetricsReport(
        tp=int(np.sum(p & y)), tn=int(np.sum(~p & ~y)),
        fp=int(np.sum(p & ~y)), fn=int(np.sum(~p & y)),
    )
    if scores is not None:
        try:
            rep.auc = compute_auc(scores, labels)
        except ValueError:
            pass
    return rep


def compute_auc(scores, labels) -> float:
    """Micro-averaged ROC AUC via the Mann-Whitney rank statistic (ties averaged)."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class CalibrationCurve:
    edges: np.ndarray
    mean_predicted: np.ndarray     # NaN for empty bins
    frequency: np.ndarray          # NaN for empty bins
    counts: np.ndarray

    def deviation(self) -> np.ndarray:
        return np.abs(self.frequency - self.mean_predicted)


def calibration_curve(probabilities, labels, bins: int = 10) -> CalibrationCurve:
    """Equal-width reliability bins over [0, 1]; the last bin is closed."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    p = np.asarray(probabilities, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sum_p = np.bincount(idx, weights=p, minlength=bins)
    sum_y = np.bincount(idx, weights=y, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_p = np.where(counts > 0, sum_p / counts, np.nan)
        freq = np.where(counts > 0, sum_y / counts, np.nan)
    return CalibrationCurve(edges, mean_p, freq, counts)


# ---------------------------------------------------------------------------
# Complexity
# ---------------------------------------------------------------------------


@dataclass
class FlopsBreakdown:
    input_dense: int
    input_bn: int
    input_relu: int
    blocks: int
    output_dense: int
    sigmoid: int
    closed_form: int

    @property
    def components(self) -> tuple:
        return (self.input_dense, self.input_bn, self.input_relu,
                self.blocks, self.output_dense, self.sigmoid)

    @property
    def total(self) -> int:
        return sum(self.components)


def flops_closed_form(L: int, width: int, K: int, N: int, X: int = 1) -> int:
    KX = K * X
    return 8 * L * width ** 2 + (21 * L + 4 * KX + 2 * N + 5) * width + 4 * N


def flops_dnn(L: int, width: int, K: int, N: int, X: int = 1) -> FlopsBreakdown:
    """Per-layer FLOPs of the detector; the input length is 2 K X."""
    for v in (L, width, K, N, X):
        if int(v) != v or v < 1:
            raise ValueError("all FLOPs parameters must be positive integers")
    u = width
    KX = K * X
    c1 = (4 * KX - 1) * u + u
    c2 = 4 * u
    c3 = u
    c4 = L * (4 * ((2 * u - 1) * u + u) + 4 * (4 * u) + 3 * u + u + u)
    c5 = (2 * u - 1) * N + N
    c6 = 4 * N
    return FlopsBreakdown(c1, c2, c3, c4, c5, c6, flops_closed_form(L, u, K, N, X))


_COMPLEXITY = {
    "dnn-mud": ("O(L*v^2)", ("L", "v")),
    "stomp": ("O(N log N)", ("N",)),
    "ls-bomp": ("O(n*K^2*N)", ("n", "K", "N")),
    "c-amp": ("O(N*K*tau)", ("N", "K", "tau")),
    "d-mud": ("O(L*v^2)", ("L", "v")),
    "cnn-mud": ("O(X*N^2)", ("X", "N")),
}


def baseline_complexity(name: str) -> tuple[str, tuple]:
    key = name.strip().lower().replace("_", "-")
    if key not in _COMPLEXITY:
        raise KeyError(f"unknown algorithm {name!r}")
    return _COMPLEXITY[key]


# ---------------------------------------------------------------------------
# Label-coverage bound
# ---------------------------------------------------------------------------


@dataclass
class CoverageBound:
    N: int
    n: int
    alpha: int
    S1: float
    S2: float
    delta: int
    raw: float
    bound: float
    s2_form: str = "appendix"


def coverage_bound(N: int, n: int, alpha: int, s2_form: str = "appendix") -> CoverageBound:
    """Dawson-Sankoff upper bound on P(alpha random n-subsets co-cover every pair).

    The event for a pair is "never covered together". ``s2_form="appendix"``
    uses 3 C(N,4) disjoint-pair terms; ``"lemma"`` uses the compressed prefactor
    ``3 C(N,3) / (4 (N - 1))`` exactly as the closed form is usually printed.
    Arithmetic is exact (rational) until the final conversion.
    """
    if not 2 <= n < N:
        raise ValueError(f"need 2 <= n < N, got n={n}, N={N}")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    c = math.comb
    total = c(N, n)
    p_pair = Fraction(c(N - 2, n) + 2 * c(N - 2, n - 1), total)
    p_disj = Fraction(c(N - 4, n) + 4 * c(N - 4, n - 1) + 4 * c(N - 4, n - 2), total) if N >= 4 else Fraction(0)
    p_share = Fraction(c(N - 3, n) + 3 * c(N - 3, n - 1) + c(N - 3, n - 2), total)
    S1 = c(N, 2) * p_pair ** alpha
    if s2_form == "appendix":
        S2 = 3 * c(N, 4) * p_disj ** alpha + 3 * c(N, 3) * p_share ** alpha
    elif s2_form == "lemma":
        S2 = 3 * c(N, 3) * (Fraction(1, 4 * (N - 1)) * p_disj ** alpha + p_share ** alpha)
    else:
        raise ValueError(f"unknown S2 form {s2_form!r}")
    if S1 == 0:
        delta = 2
        lower = Fraction(0)
    else:
        delta = 2 + math.floor(2 * S2 / S1)
        lower = 2 * ((delta - 1) * S1 - S2) / (delta * (delta - 1))
    raw = 1 - lower
    return CoverageBound(N, n, alpha, float(S1), float(S2), delta, float(raw),
                         float(min(max(raw, Fraction(0)), Fraction(1))), s2_form)


def coverage_mc_curve(N: int, n: int, alpha_max: int, trials: int = 10**4, seed=0):
    """Paired estimates for alpha = 1..alpha_max from one set of draws.

    Returns ``(estimates, stderr)`` arrays of length `alpha_max`. The standard
    error uses ``(hits + 1/2) / (trials + 1)`` so it stays positive when every
    trial (or none) covers all pairs.
    """
    if trials < 10**4:
        raise ValueError("at least 10**4 trials are required")
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(N, 1)
    n_pairs = len(iu[0])
    first_full = np.full(trials, alpha_max + 1)
    covered = np.zeros((trials, n_pairs), dtype=bool)
    alive = np.ones(trials, dtype=bool)
    for a in range(1, alpha_max + 1):
        keys = rng.random((trials, N))
        members = np.argsort(keys, axis=1)[:, :n]
        ind = np.zeros((trials, N), dtype=bool)
        np.put_along_axis(ind, members, True, axis=1)
        covered |= ind[:, iu[0]] & ind[:, iu[1]]
        done = alive & covered.all(axis=1)
        first_full[done] = a
        alive &= ~done
    alphas = np.arange(1, alpha_max + 1)
    hits = (first_full[None, :] <= alphas[:, None]).sum(axis=1)
    est = hits / trials
    # plug-in binomial error vanishes at 0 or 1 hits; shrink toward 1/2 first
    p_adj = (hits + 0.5) / (trials + 1)
    se = np.sqrt(p_adj * (1 - p_adj) / trials)
    return est, se


def coverage_mc(N: int, n: int, alpha: int, trials: int = 10**4, seed=0) -> tuple[float, float]:
    """Fraction of trials in which `alpha` uniform n-subsets co-cover all pairs."""
    est, se = coverage_mc_curve(N, n, alpha, trials, seed)
    return float(est[-1]), float(se[-1])
