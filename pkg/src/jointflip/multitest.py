"""Permutation multiple testing on a matrix of flipped statistics.

Every procedure takes a ``w x m`` matrix whose row 0 is the observed
(identity-flip) row and where larger values are evidence against the
null.  p-values count the observed row itself:

    p = #{j : T_j >= T_1} / w

so a test rejecting when ``p <= alpha`` rejects exactly when
``T_1 > T_(ceil((1 - alpha) w))``, and every p-value is at least 1/w.

NaN entries (flips with degenerate variance) count as exceeding any
observed value.  A NaN in row 0 is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateVariance, SingularCovariance, TooManyHypotheses

MAX_CLOSED = 20
COV_RIDGE = 1e-8

_PSI_ALIASES = {
    "max_abs": "max_abs",
    "maxabs": "max_abs",
    "max": "max_abs",
    "sum_abs": "sum_abs",
    "sumabs": "sum_abs",
    "sum": "sum_abs",
    "sum_square": "sum_square",
    "sumsq": "sum_square",
    "sum_squares": "sum_square",
    "mahalanobis": "mahalanobis",
}


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    raw_stat: np.ndarray
    raw_p: np.ndarray
    adj_p: np.ndarray
    rejected: np.ndarray
    method: str
    alpha: float
    w: int
    global_p: float | None = None

    @property
    def m(self) -> int:
        return self.raw_p.shape[0]


@dataclass(frozen=True)
class CombiningFunction:
    """Row-wise combination of per-hypothesis statistics into one global statistic.

    ``max_abs``, ``sum_abs`` and ``sum_square`` act on the oriented
    statistics (absolute values for two-sided tests).  ``mahalanobis``
    needs signed effective scores and a covariance matrix.
    """

    kind: str = "max_abs"
    cov: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        try:
            kind = _PSI_ALIASES[str(self.kind).lower()]
        except KeyError:
            raise ValueError(f"unknown combining function {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        if kind == "mahalanobis" and self.cov is None:
            raise ValueError("mahalanobis combining needs a covariance estimate")

    def __call__(self, stats: np.ndarray, cols=None) -> np.ndarray:
        """Combine columns ``cols`` of a (w, m) array into a (w,) array."""
        stats = np.asarray(stats, dtype=float)
        if cols is not None:
            stats = stats[:, list(cols)]
        if self.kind == "max_abs":
            return np.max(stats, axis=1)
        if self.kind == "sum_abs":
            return np.sum(stats, axis=1)
        if self.kind == "sum_square":
            return np.sum(stats * stats, axis=1)
        cov = np.atleast_2d(self.cov)
        if cols is not None:
            cov = cov[np.ix_(list(cols), list(cols))]
        return _quadratic_forms(stats, cov)


def _matrix(M) -> np.ndarray:
    stats = np.asarray(getattr(M, "m_stats", M), dtype=float)
    if stats.ndim == 1:
        stats = stats[:, None]
    if np.isnan(stats[0]).any():
        bad = np.flatnonzero(np.isnan(stats[0]))
        raise DegenerateVariance(f"observed statistic is degenerate for hypotheses {bad.tolist()}")
    return np.where(np.isnan(stats), np.inf, stats)


def _n_reject(w: int, alpha: float) -> int:
    """Largest exceedance count still rejected at level alpha, floor(alpha w)."""
    return int(np.floor(alpha * w + 1e-9))


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _counts(stats: np.ndarray) -> np.ndarray:
    """Per column, the number of rows at or above row 0."""
    return np.sum(stats >= stats[0], axis=0)


def perm_pvalue(column) -> float:
    """Fraction of flips whose statistic reaches the observed one (row 0)."""
    stats = _matrix(np.asarray(column, dtype=float).ravel())
    return float(_counts(stats)[0] / stats.shape[0])


def raw_pvalues(M) -> np.ndarray:
    stats = _matrix(M)
    return _counts(stats) / stats.shape[0]


def global_test(M, subset, psi: CombiningFunction | str = "max_abs") -> float:
    """p-value for the intersection of the hypotheses in ``subset``."""
    if not isinstance(psi, CombiningFunction):
        psi = CombiningFunction(psi)
    cols = sorted(set(int(l) for l in subset))
    if not cols:
        raise ValueError("subset must be nonempty")
    stats = _matrix(M)
    if psi.kind == "sum_square" and getattr(M, "alternative", "two_sided") != "two_sided":
        raise ValueError("sum_square combining needs two-sided (absolute) statistics")
    return perm_pvalue(psi(stats, cols))


def _result(M, stats, adj_counts, method, alpha, global_p=None):
    w = stats.shape[0]
    raw_p = _counts(stats) / w
    adj_p = np.maximum(adj_counts / w, raw_p)
    return TestResult(
        raw_stat=stats[0].copy(),
        raw_p=raw_p,
        adj_p=adj_p,
        rejected=np.round(adj_p * w) <= _n_reject(w, alpha),
        method=method,
        alpha=float(alpha),
        w=w,
        global_p=global_p,
    )


def maxt_single_step(M, alpha: float = 0.05) -> TestResult:
    """Single-step max-T: compare each observed statistic with the row maxima."""
    _check_alpha(alpha)
    stats = _matrix(M)
    w = stats.shape[0]
    maxima = np.sort(np.max(stats, axis=1))
    counts = w - np.searchsorted(maxima, stats[0], side="left")
    return _result(M, stats, counts, "maxt_single", alpha)


def maxt_step_down(M, alpha: float = 0.05) -> TestResult:
    """Free step-down max-T (Westfall-Young) adjusted p-values.

    Hypotheses are ordered by decreasing observed statistic; the r-th is
    compared with the row maxima over itself and all hypotheses ranked
    below it, and the resulting p-values are made monotone along that
    order.  Rejecting ``adj_p <= alpha`` reproduces the iterative
    procedure that drops rejected hypotheses and repeats the single step
    until nothing new is rejected.
    """
    _check_alpha(alpha)
    stats = _matrix(M)
    w, m = stats.shape
    order = np.argsort(-stats[0], kind="stable")
    # rows of tail_max: hypotheses from the smallest observed statistic up
    ascending = np.ascontiguousarray(stats.T[order[::-1]])
    tail_max = np.maximum.accumulate(ascending, axis=0)
    exceed = np.sum(tail_max >= ascending[:, :1], axis=1)[::-1]
    counts_sorted = np.maximum.accumulate(exceed)
    counts = np.empty(m, dtype=counts_sorted.dtype)
    counts[order] = counts_sorted
    return _result(M, stats, counts, "maxt_stepdown", alpha)


def closed_testing(M, psi: CombiningFunction | str = "max_abs", alpha: float = 0.05) -> TestResult:
    """Closed testing over all 2^m - 1 intersection hypotheses.

    The adjusted p-value of H_l is the largest global-test p-value over
    every subset containing l.
    """
    _check_alpha(alpha)
    if not isinstance(psi, CombiningFunction):
        psi = CombiningFunction(psi)
    stats = _matrix(M)
    w, m = stats.shape
    if m > MAX_CLOSED:
        raise TooManyHypotheses(f"closed testing enumerates 2**{m} subsets; limit is m <= {MAX_CLOSED}")
    if psi.kind == "sum_square" and getattr(M, "alternative", "two_sided") != "two_sided":
        raise ValueError("sum_square combining needs two-sided (absolute) statistics")
    worst = np.zeros(m, dtype=int)
    for size in range(1, m + 1):
        for cols in combinations(range(m), size):
            T = psi(stats, cols)
            c = int(np.sum(T >= T[0]))
            idx = list(cols)
            worst[idx] = np.maximum(worst[idx], c)
    return _result(M, stats, worst, "closed", alpha)


def _quadratic_forms(rows: np.ndarray, cov: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SingularCovariance("covariance of the flipped scores is not positive definite") from None
    half = np.linalg.solve(L, rows.T)
    return np.sum(half * half, axis=0)


def flip_covariance(raw_scores, ridge: float = COV_RIDGE) -> np.ndarray:
    """Empirical covariance of the flipped score rows, lightly ridged."""
    raw = np.asarray(raw_scores, dtype=float)
    m = raw.shape[1]
    cov = np.atleast_2d(np.cov(raw, rowvar=False))
    return cov + ridge * np.trace(cov) / m * np.eye(m)


def mahalanobis_global(raw_scores, cov_estimate) -> float:
    """Global p-value of the flipped quadratic forms S' cov^-1 S.

    ``raw_scores`` holds signed effective scores, row 0 observed.  One
    Cholesky factor is reused for every flip.
    """
    raw = np.asarray(getattr(raw_scores, "m_stats", raw_scores), dtype=float)
    if raw.ndim == 1:
        raw = raw[:, None]
    cov = np.atleast_2d(np.asarray(cov_estimate, dtype=float))
    if cov.shape != (raw.shape[1], raw.shape[1]):
        raise ValueError(f"covariance must be {raw.shape[1]}x{raw.shape[1]}, got {cov.shape}")
    return perm_pvalue(_quadratic_forms(raw, cov))


def global_result(M, psi: CombiningFunction | str = "max_abs", alpha: float = 0.05, global_p=None) -> TestResult:
    """Per-hypothesis view of a single global test.

    Each adjusted p-value is max(raw p, global p).  Rejections made this
    way control the FWER only in the weak sense (under the global null).
    """
    _check_alpha(alpha)
    stats = _matrix(M)
    w, m = stats.shape
    if global_p is None:
        global_p = global_test(M, range(m), psi)
    counts = np.full(m, round(global_p * w))
    return _result(M, stats, counts, "global_only", alpha, global_p=float(global_p))


def bonferroni_holm(pvalues) -> np.ndarray:
    """Holm step-down adjustment with running-maximum monotonicity."""
    p = np.asarray(pvalues, dtype=float)
    m = p.shape[0]
    order = np.argsort(p, kind="stable")
    adj = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    out = np.empty(m)
    out[order] = adj
    return out
