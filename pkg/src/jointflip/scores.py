"""Effective-score contributions and their sign-flipped statistics.

With ``sw = sqrt(W)`` and ``zw = diag(sw) Z``, the projection
``P = zw (zw' zw)^-1 zw'`` is never formed.  Everything is expressed
through

    b  = (I - P) sw x                  (n,)
    a  = b / sqrt(V)                   per-observation multipliers
    nu = a * (y - mu_hat)              score contributions
    q  = diag(b) zw L^-T               (n, k-1), L L' = zw' zw

so that for a flip g the sandwich x' sw (I-P) G (I-P) G (I-P) sw x
reduces to ``|b|^2 - |q' g|^2``: O(n k) per flip.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateVariance, SingularDesign
from .flips import FlipPlan
from .glm import NullFit, NullFitBatch

VAR_EPS = 1e-12
ALTERNATIVES = ("two_sided", "greater", "less")


def normalize_alternative(alternative: str) -> str:
    alt = str(alternative).replace("-", "_").lower()
    if alt not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")
    return alt


@dataclass(frozen=True)
class ScoreDecomposition:
    nu: np.ndarray
    a: np.ndarray
    b: np.ndarray
    zw: np.ndarray
    chol_zwz: np.ndarray
    q: np.ndarray

    @property
    def n(self) -> int:
        return self.nu.shape[0]

    @property
    def effective_score(self) -> float:
        """n^-1/2 times the sum of the score contributions."""
        return float(np.sum(self.nu) / np.sqrt(self.n))

    @property
    def variance(self) -> float:
        """Model-based variance of the effective score, n^-1 b'b."""
        return float(self.b @ self.b / self.n)


@dataclass(frozen=True)
class ScoreBatch:
    """Decompositions of ``m`` responses stacked on a leading axis."""

    nu: np.ndarray
    a: np.ndarray
    b: np.ndarray
    zw: np.ndarray
    chol_zwz: np.ndarray
    q: np.ndarray

    @property
    def m(self) -> int:
        return self.nu.shape[0]

    @property
    def n(self) -> int:
        return self.nu.shape[1]

    def __len__(self):
        return self.m

    def __getitem__(self, l) -> ScoreDecomposition:
        return ScoreDecomposition(
            self.nu[l], self.a[l], self.b[l], self.zw[l], self.chol_zwz[l], self.q[l]
        )

    @classmethod
    def stack(cls, decs: Sequence[ScoreDecomposition]) -> "ScoreBatch":
        if not decs:
            raise ValueError("at least one decomposition is required")
        n = {d.n for d in decs}
        if len(n) != 1:
            raise ValueError(f"decompositions disagree on n: {sorted(n)}")
        return cls(*(np.stack([getattr(d, f) for d in decs]) for f in
                     ("nu", "a", "b", "zw", "chol_zwz", "q")))


@dataclass(frozen=True)
class FlipStatMatrix:
    """Flipped statistics, one row per flip and one column per response.

    Row 0 is the identity flip.  Entries are already transformed for the
    alternative (absolute value for two-sided, negated for ``less``).
    Flips whose variance degenerated are stored as NaN.
    """

    m_stats: np.ndarray
    standardized: bool = True
    alternative: str = "two_sided"
    n_degenerate: int = 0

    @property
    def w(self) -> int:
        return self.m_stats.shape[0]

    @property
    def m(self) -> int:
        return self.m_stats.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.m_stats[0]


def decompose_batch(fits: NullFitBatch, x, z) -> ScoreBatch:
    """Score decompositions for every response of a batched null fit."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.shape[0]
    Z = np.empty((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
    sw = np.sqrt(fits.w_diag)
    swx = sw * x
    zw = sw[:, :, None] * Z
    k1 = Z.shape[1]
    m = sw.shape[0]
    if k1:
        zwz = np.einsum("mni,mnj->mij", zw, zw)
        try:
            L = np.linalg.cholesky(zwz)
        except np.linalg.LinAlgError:
            raise SingularDesign("Z'WZ is not positive definite") from None
        r = np.einsum("mni,mn->mi", zw, swx)
        coef = np.linalg.solve(
            np.swapaxes(L, 1, 2), np.linalg.solve(L, r[..., None])
        )[..., 0]
        b = swx - np.einsum("mni,mi->mn", zw, coef)
        # x in span(Z) leaves only rounding noise in b; make it an exact zero
        tiny = np.einsum("mn,mn->m", b, b) <= VAR_EPS * np.einsum("mn,mn->m", swx, swx)
        b[tiny] = 0.0
        q = np.swapaxes(np.linalg.solve(L, np.swapaxes(zw * b[:, :, None], 1, 2)), 1, 2)
    else:
        L = np.empty((m, 0, 0))
        b = swx
        q = np.empty((m, n, 0))
    a = b / np.sqrt(fits.v_diag)
    nu = a * (fits.y - fits.mu_hat)
    return ScoreBatch(nu=nu, a=a, b=b, zw=zw, chol_zwz=L, q=q)


def decompose(fit: NullFit, x, z, allow_nonconverged: bool = False) -> ScoreDecomposition:
    """Score contributions and flip-variance factors for one null fit."""
    if not fit.converged and not allow_nonconverged:
        raise ValueError("null fit did not converge; pass allow_nonconverged=True to override")
    if fit.y is None:
        raise ValueError("null fit carries no response vector")
    batch = NullFitBatch(
        gamma_hat=fit.gamma_hat[None],
        mu_hat=fit.mu_hat[None],
        eta_hat=fit.eta_hat[None],
        w_diag=fit.w_diag[None],
        d_diag=fit.d_diag[None],
        v_diag=fit.v_diag[None],
        converged=np.array([fit.converged]),
        separated=np.array([False]),
        iterations=np.array([fit.iterations]),
        dispersion=np.array([fit.dispersion]),
        loglik=np.array([fit.loglik]),
        y=fit.y[None],
    )
    return decompose_batch(batch, x, z)[0]


def _check_signs(g, n):
    g = np.asarray(g)
    if g.shape != (n,) or not np.all(np.abs(g) == 1):
        raise ValueError(f"flip must be a +/-1 vector of length {n}")
    return g.astype(float)


def flip_variance(dec: ScoreDecomposition, g) -> float:
    """Variance of the flipped effective score, n^-1 (Gb)'(I-P)(Gb)."""
    g = _check_signs(g, dec.n)
    bb = float(dec.b @ dec.b)
    proj = dec.q.T @ g
    var = (bb - float(proj @ proj)) / dec.n
    if var <= VAR_EPS * bb or bb == 0.0:
        raise DegenerateVariance(f"flipped variance {var:.3g} is not positive")
    return var


def flipped_stat(dec: ScoreDecomposition, g, standardized: bool = True) -> float:
    """n^-1/2 sum(g * nu), divided by its flipped standard deviation if standardized."""
    g = _check_signs(g, dec.n)
    s = float(g @ dec.nu) / np.sqrt(dec.n)
    if standardized:
        s /= np.sqrt(flip_variance(dec, g))
    return s


def _scaled_variances(batch: ScoreBatch, signs: np.ndarray) -> np.ndarray:
    """n times the flipped variances, shape (w, m), before any degeneracy check."""
    m, n = batch.nu.shape
    bb = np.einsum("mn,mn->m", batch.b, batch.b)
    k1 = batch.q.shape[2]
    if not k1:
        return np.broadcast_to(bb, (signs.shape[0], m)).copy()
    # column i * m + l holds factor i of response l
    Q = np.transpose(batch.q, (1, 2, 0)).reshape(n, k1 * m)
    proj = signs @ Q
    proj *= proj
    var = bb - proj[:, :m]
    for i in range(1, k1):
        var -= proj[:, i * m:(i + 1) * m]
    return var


def _as_signs(signs, n):
    signs = np.asarray(signs, dtype=float)
    if signs.ndim != 2 or signs.shape[1] != n:
        raise ValueError(f"plan has n={signs.shape[-1]} but scores have n={n}")
    return signs


def flip_variances(batch: ScoreBatch, signs) -> np.ndarray:
    """Flipped variances for every (flip, response) pair, shape (w, m).

    Degenerate cells come back as NaN.
    """
    m, n = batch.nu.shape
    var = _scaled_variances(batch, _as_signs(signs, n))
    bb = np.einsum("mn,mn->m", batch.b, batch.b)
    var[(var <= VAR_EPS * bb * n) | (bb == 0.0)] = np.nan
    return var / n


def flip_statistics(batch: ScoreBatch, signs, standardized: bool = True) -> np.ndarray:
    """Signed flipped statistics for all flips at once, shape (w, m).

    Degenerate flipped variances come back as NaN.
    """
    m, n = batch.nu.shape
    signs = _as_signs(signs, n)
    stats = signs @ (batch.nu.T / np.sqrt(n))
    if not standardized:
        return stats
    bb = np.einsum("mn,mn->m", batch.b, batch.b)
    # var is n times the flipped variance here
    var = _scaled_variances(batch, signs)
    var[(var <= VAR_EPS * bb * n) | (bb == 0.0)] = np.nan
    np.sqrt(var, out=var)
    stats *= np.sqrt(n)
    stats /= var
    return stats


def orient(stats, alternative: str) -> np.ndarray:
    """Map signed statistics so that large values are evidence against H0."""
    alt = normalize_alternative(alternative)
    if alt == "two_sided":
        return np.abs(stats)
    if alt == "less":
        return -stats
    return stats


def build_matrix(
    decs,
    plan: FlipPlan,
    standardized: bool = True,
    alternative: str = "two_sided",
) -> FlipStatMatrix:
    """Apply the same flip plan to every response.

    ``decs`` is a sequence of :class:`ScoreDecomposition` or a
    :class:`ScoreBatch`.
    """
    batch = decs if isinstance(decs, ScoreBatch) else ScoreBatch.stack(list(decs))
    alt = normalize_alternative(alternative)
    stats = orient(flip_statistics(batch, plan.signs, standardized), alt)
    return FlipStatMatrix(
        m_stats=stats,
        standardized=bool(standardized),
        alternative=alt,
        n_degenerate=int(np.isnan(stats).sum()),
    )
