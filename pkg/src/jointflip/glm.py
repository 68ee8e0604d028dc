"""Exponential dispersion families, links and IRLS fitting.

Two fits are provided for every response:

* the *null* fit, where the target coefficient is fixed at ``beta0`` and
  enters as an offset, and only the nuisance coefficients are estimated.
  Everything the sign-flip score machinery needs (the diagonals of D, V
  and W = D V^-1 D) is evaluated at this constrained optimum;
* the *full* fit over (beta, gamma), used only by the parametric
  competitors (Wald and likelihood-ratio tests).

Both fits go through one batched IRLS routine that handles ``m``
responses sharing a design at once.  Single-response entry points wrap
it with ``m = 1`` and raise on failure; the batched entry points report
failures per response instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, logit

from .errors import NonConvergence, SeparationDetected, SingularDesign

# keeps d**2 representable when fitted means approach the boundary
_FLOOR = np.sqrt(np.finfo(float).tiny)

TOL = 1e-8
MAX_ITER = 100
SEPARATION_EPS = 1e-10
SEPARATION_COND = 1e12


# --------------------------------------------------------------------- #
# Links
# --------------------------------------------------------------------- #


class Link:
    """Link function g(mu) = eta with its inverse and derivative."""

    kind: str = ""

    def link(self, mu):
        raise NotImplementedError

    def linkinv(self, eta):
        raise NotImplementedError

    def mu_eta(self, eta):
        """d mu / d eta evaluated at ``eta``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return isinstance(other, Link) and other.kind == self.kind

    def __hash__(self):
        return hash(self.kind)


class IdentityLink(Link):
    kind = "identity"

    def link(self, mu):
        return np.asarray(mu, dtype=float).copy()

    def linkinv(self, eta):
        return np.asarray(eta, dtype=float).copy()

    def mu_eta(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))


class LogitLink(Link):
    kind = "logit"

    def link(self, mu):
        return logit(np.asarray(mu, dtype=float))

    def linkinv(self, eta):
        return expit(np.asarray(eta, dtype=float))

    def mu_eta(self, eta):
        p = expit(np.asarray(eta, dtype=float))
        return np.maximum(p * (1.0 - p), _FLOOR)


class LogLink(Link):
    kind = "log"

    def link(self, mu):
        return np.log(np.asarray(mu, dtype=float))

    def linkinv(self, eta):
        return np.exp(np.clip(eta, -700.0, 700.0))

    def mu_eta(self, eta):
        return np.maximum(np.exp(np.clip(eta, -700.0, 700.0)), _FLOOR)


# --------------------------------------------------------------------- #
# Families
# --------------------------------------------------------------------- #


class Family:
    """Exponential dispersion family, described by its variance function.

    ``variance(mu)`` is b''(theta(mu)); the dispersion factor a(phi) is
    carried separately by the fits.
    """

    kind: str = ""
    canonical_link: str = ""
    fixed_dispersion: bool = True

    def variance(self, mu):
        raise NotImplementedError

    def in_support(self, y) -> np.ndarray:
        """Elementwise mask of response values the family can produce."""
        raise NotImplementedError

    def initialize(self, y):
        """Starting fitted means for IRLS."""
        raise NotImplementedError

    def loglik(self, y, mu, dispersion=1.0):
        """Log-likelihood summed over the last axis."""
        raise NotImplementedError

    def is_canonical(self, link: Link) -> bool:
        return link.kind == self.canonical_link

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return isinstance(other, Family) and other.kind == self.kind

    def __hash__(self):
        return hash(self.kind)


class Gaussian(Family):
    kind = "gaussian"
    canonical_link = "identity"
    fixed_dispersion = False

    def variance(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def in_support(self, y):
        return np.isfinite(np.asarray(y, dtype=float))

    def initialize(self, y):
        return np.asarray(y, dtype=float).copy()

    def loglik(self, y, mu, dispersion=1.0):
        r = np.asarray(y) - mu
        n = r.shape[-1]
        return -0.5 * np.sum(r * r, axis=-1) / dispersion - 0.5 * n * np.log(
            2.0 * np.pi * dispersion
        )


class Binomial(Family):
    """Bernoulli responses (unit trials)."""

    kind = "binomial"
    canonical_link = "logit"

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        return np.maximum(mu * (1.0 - mu), _FLOOR)

    def in_support(self, y):
        y = np.asarray(y, dtype=float)
        return (y == 0.0) | (y == 1.0)

    def initialize(self, y):
        return (np.asarray(y, dtype=float) + 0.5) / 2.0

    def loglik(self, y, mu, dispersion=1.0):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.where(y > 0, y * np.log(mu), 0.0) + np.where(
                y < 1, (1.0 - y) * np.log1p(-mu), 0.0
            )
        return np.sum(ll, axis=-1)


class Poisson(Family):
    kind = "poisson"
    canonical_link = "log"

    def variance(self, mu):
        return np.maximum(np.asarray(mu, dtype=float), _FLOOR)

    def in_support(self, y):
        y = np.asarray(y, dtype=float)
        return np.isfinite(y) & (y >= 0) & (y == np.floor(y))

    def initialize(self, y):
        return np.asarray(y, dtype=float) + 0.1

    def loglik(self, y, mu, dispersion=1.0):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.where(y > 0, y * np.log(mu), 0.0) - mu - gammaln(y + 1.0)
        return np.sum(ll, axis=-1)


_FAMILIES = {"gaussian": Gaussian, "binomial": Binomial, "poisson": Poisson}
_LINKS = {"identity": IdentityLink, "logit": LogitLink, "log": LogLink}


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return _FAMILIES[str(family).lower()]()
    except KeyError:
        raise ValueError(
            f"unknown family {family!r}; expected one of {sorted(_FAMILIES)}"
        ) from None


def get_link(link, family: Family | None = None) -> Link:
    if isinstance(link, Link):
        return link
    if link is None:
        if family is None:
            raise ValueError("a link or a family is required")
        link = family.canonical_link
    try:
        return _LINKS[str(link).lower()]()
    except KeyError:
        raise ValueError(
            f"unknown link {link!r}; expected one of {sorted(_LINKS)}"
        ) from None


# --------------------------------------------------------------------- #
# Model specification and fit results
# --------------------------------------------------------------------- #


def _as_design(z, n):
    if z is None:
        return np.empty((n, 0))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    return z


@dataclass(frozen=True)
class ModelSpec:
    """One response's GLM: ``E(y) = g^-1(x * beta + z @ gamma)``.

    ``z`` is used as given; include an intercept column explicitly if
    one is wanted.  ``family`` and ``link`` accept names or instances;
    the link defaults to the family's canonical link.
    """

    family: Family
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    link: Link | None = None
    beta0: float = 0.0

    def __post_init__(self):
        fam = get_family(self.family)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "link", get_link(self.link, fam))
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float).ravel()
        n = y.shape[0]
        z = _as_design(self.z, n)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "beta0", float(self.beta0))
        if x.shape[0] != n or z.shape[0] != n:
            raise ValueError(
                f"length mismatch: y has {n} rows, x {x.shape[0]}, z {z.shape[0]}"
            )
        k = z.shape[1] + 1
        if n < k + 1:
            raise ValueError(f"need n >= k + 1 observations, got n={n}, k={k}")
        if not np.all(fam.in_support(y)):
            bad = np.flatnonzero(~fam.in_support(y))
            raise ValueError(
                f"response outside the {fam.kind} support at rows {bad[:10].tolist()}"
            )
        if z.shape[1] and np.linalg.matrix_rank(z) < z.shape[1]:
            raise SingularDesign("nuisance design z is rank deficient")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        """Number of regression coefficients including the target."""
        return self.z.shape[1] + 1


@dataclass(frozen=True)
class NullFit:
    """Constrained fit under H0 (beta fixed at beta0).

    ``w_diag``, ``d_diag`` and ``v_diag`` are the diagonals of W, D and V
    at (beta0, gamma_hat); ``v_diag`` includes the dispersion factor.
    """

    gamma_hat: np.ndarray
    mu_hat: np.ndarray
    eta_hat: np.ndarray
    w_diag: np.ndarray
    d_diag: np.ndarray
    v_diag: np.ndarray
    converged: bool
    iterations: int
    dispersion: float = 1.0
    loglik: float = float("nan")
    y: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class FullFit:
    beta_hat: float
    gamma_hat: np.ndarray
    loglik: float
    beta_se: float
    converged: bool
    iterations: int = 0


@dataclass(frozen=True)
class NullFitBatch:
    """Null fits for ``m`` responses sharing ``x`` and ``z``.

    Arrays are indexed ``[response, observation]``.  ``ok`` marks
    responses whose fit converged without separation.
    """

    gamma_hat: np.ndarray
    mu_hat: np.ndarray
    eta_hat: np.ndarray
    w_diag: np.ndarray
    d_diag: np.ndarray
    v_diag: np.ndarray
    converged: np.ndarray
    separated: np.ndarray
    iterations: np.ndarray
    dispersion: np.ndarray
    loglik: np.ndarray
    y: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return self.mu_hat.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return self.converged & ~self.separated

    def __getitem__(self, l) -> NullFit:
        return NullFit(
            gamma_hat=self.gamma_hat[l],
            mu_hat=self.mu_hat[l],
            eta_hat=self.eta_hat[l],
            w_diag=self.w_diag[l],
            d_diag=self.d_diag[l],
            v_diag=self.v_diag[l],
            converged=bool(self.converged[l]),
            iterations=int(self.iterations[l]),
            dispersion=float(self.dispersion[l]),
            loglik=float(self.loglik[l]),
            y=self.y[l],
        )


@dataclass(frozen=True)
class FullFitBatch:
    beta_hat: np.ndarray
    gamma_hat: np.ndarray
    loglik: np.ndarray
    beta_se: np.ndarray
    converged: np.ndarray
    separated: np.ndarray
    iterations: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.converged & ~self.separated

    def __getitem__(self, l) -> FullFit:
        return FullFit(
            beta_hat=float(self.beta_hat[l]),
            gamma_hat=self.gamma_hat[l],
            loglik=float(self.loglik[l]),
            beta_se=float(self.beta_se[l]),
            converged=bool(self.converged[l]),
            iterations=int(self.iterations[l]),
        )


# --------------------------------------------------------------------- #
# IRLS
# --------------------------------------------------------------------- #


def _solve_batch(A, r):
    try:
        return np.linalg.solve(A, r[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise SingularDesign("weighted cross-product matrix is singular") from None


def _irls(family, link, Y, X, offset, tol=TOL, max_iter=MAX_ITER):
    """Batched IRLS with step-halving.

    Y is (m, n), X is (n, p), offset is (n,).  Converged responses are
    frozen so each response's result does not depend on its batch mates.
    Returns coefficients (m, p), eta, mu, iteration counts and flags.
    """
    m, n = Y.shape
    p = X.shape[1]
    eta = np.broadcast_to(offset, (m, n)).astype(float)
    beta = np.zeros((m, p))
    iters = np.zeros(m, dtype=int)
    converged = np.zeros(m, dtype=bool)

    if p == 0:
        mu = link.linkinv(eta)
        return beta, eta, mu, iters, np.ones(m, dtype=bool)

    # first pass starts from the family's initial means, not from beta
    mu = family.initialize(Y)
    eta_start = link.link(mu)
    ll = np.full(m, -np.inf)
    active = np.arange(m)
    first = True

    for it in range(1, max_iter + 1):
        Ya = Y[active]
        if first:
            eta_a, mu_a = eta_start, mu
        else:
            eta_a, mu_a = eta[active], link.linkinv(eta[active])
        d = link.mu_eta(eta_a)
        v = family.variance(mu_a)
        w = d * d / v
        work = (eta_a - offset) + (Ya - mu_a) / d
        XtWX = (X.T * w[:, None, :]) @ X
        XtWz = (w * work) @ X
        new = _solve_batch(XtWX, XtWz)

        eta_new = offset + new @ X.T
        mu_new = link.linkinv(eta_new)
        ll_new = family.loglik(Ya, mu_new)
        if not first:
            old = beta[active]
            ll_old = ll[active]
            for _ in range(40):
                bad = ~np.isfinite(ll_new) | (ll_new < ll_old - 1e-10 * np.abs(ll_old))
                if not bad.any():
                    break
                new[bad] = 0.5 * (new[bad] + old[bad])
                eta_new[bad] = offset + new[bad] @ X.T
                mu_new[bad] = link.linkinv(eta_new[bad])
                ll_new[bad] = family.loglik(Ya[bad], mu_new[bad])
        first = False

        beta[active] = new
        eta[active] = eta_new
        ll[active] = ll_new
        iters[active] = it

        d = link.mu_eta(eta_new)
        v = family.variance(mu_new)
        score = ((Ya - mu_new) * d / v) @ X
        done = np.max(np.abs(score), axis=1) <= tol
        converged[active[done]] = True
        active = active[~done]
        if active.size == 0:
            break

    mu = link.linkinv(eta)
    return beta, eta, mu, iters, converged


def _separated(family, link, mu, eta, X):
    """Boundary means combined with a numerically singular weighted design."""
    m = mu.shape[0]
    out = np.zeros(m, dtype=bool)
    if family.kind != "binomial" or X.shape[1] == 0:
        return out
    at_edge = (mu < SEPARATION_EPS) | (mu > 1.0 - SEPARATION_EPS)
    for l in np.flatnonzero(at_edge.any(axis=1)):
        # information carried by the observations still inside (0, 1)
        inside = ~at_edge[l]
        d = link.mu_eta(eta[l, inside])
        w = d * d / family.variance(mu[l, inside])
        Xi = X[inside]
        out[l] = np.linalg.cond((Xi * w[:, None]).T @ Xi) > SEPARATION_COND
    return out


def _check_rank(X, what):
    if X.shape[1] and np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesign(f"{what} is rank deficient")


def _resolve_dispersion(family, Y, mu, dispersion):
    if dispersion is not None:
        return np.full(Y.shape[0], float(dispersion))
    if family.fixed_dispersion:
        return np.ones(Y.shape[0])
    # profile (MLE) dispersion for the gaussian family
    r = Y - mu
    return np.sum(r * r, axis=1) / Y.shape[1]


def fit_null_batch(
    family,
    Y,
    x,
    z,
    link=None,
    beta0=0.0,
    dispersion=None,
    tol=TOL,
    max_iter=MAX_ITER,
) -> NullFitBatch:
    """Constrained (beta = beta0) fits of every column of ``Y`` (n x m).

    ``dispersion=None`` profiles sigma^2 for the gaussian family and uses
    a(phi) = 1 otherwise; pass a number to fix it.  Failures are
    reported through ``converged`` and ``separated`` rather than raised.
    """
    family = get_family(family)
    link = get_link(link, family)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    Y = np.ascontiguousarray(Y.T)
    n = Y.shape[1]
    x = np.asarray(x, dtype=float).ravel()
    Z = _as_design(z, n)
    _check_rank(Z, "nuisance design z")
    offset = x * float(beta0)

    gamma, eta, mu, iters, conv = _irls(family, link, Y, Z, offset, tol, max_iter)
    sep = _separated(family, link, mu, eta, Z)
    disp = _resolve_dispersion(family, Y, mu, dispersion)
    d = link.mu_eta(eta)
    v = family.variance(mu) * disp[:, None]
    w = d * d / v
    ll = family.loglik(Y, mu, disp) if not family.fixed_dispersion else family.loglik(Y, mu)
    return NullFitBatch(
        gamma_hat=gamma,
        mu_hat=mu,
        eta_hat=eta,
        w_diag=w,
        d_diag=d,
        v_diag=v,
        converged=conv,
        separated=sep,
        iterations=iters,
        dispersion=disp,
        loglik=ll,
        y=Y,
    )


def fit_full_batch(
    family, Y, x, z, link=None, tol=TOL, max_iter=MAX_ITER
) -> FullFitBatch:
    """Unconstrained fits over (beta, gamma) for every column of ``Y``.

    ``beta_se`` comes from the inverse Fisher information, which equals
    the observed information for canonical links; the gaussian family
    uses the profiled (MLE) sigma^2.
    """
    family = get_family(family)
    link = get_link(link, family)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    Y = np.ascontiguousarray(Y.T)
    n = Y.shape[1]
    x = np.asarray(x, dtype=float).ravel()
    X = np.column_stack([x, _as_design(z, n)])
    _check_rank(X, "design [x, z]")
    coef, eta, mu, iters, conv = _irls(family, link, Y, X, np.zeros(n), tol, max_iter)
    sep = _separated(family, link, mu, eta, X)
    disp = _resolve_dispersion(family, Y, mu, None)
    d = link.mu_eta(eta)
    w = d * d / (family.variance(mu) * disp[:, None])
    info = (X.T * w[:, None, :]) @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full_like(info, np.nan)
    se = np.sqrt(np.abs(cov[:, 0, 0]))
    ll = family.loglik(Y, mu, disp) if not family.fixed_dispersion else family.loglik(Y, mu)
    return FullFitBatch(
        beta_hat=coef[:, 0],
        gamma_hat=coef[:, 1:],
        loglik=ll,
        beta_se=se,
        converged=conv,
        separated=sep,
        iterations=iters,
    )


def raise_on_failure(converged, separated, iterations):
    if separated:
        raise SeparationDetected(
            "fitted means reached the 0/1 boundary with a singular weighted design"
        )
    if not converged:
        raise NonConvergence(f"IRLS did not converge in {iterations} iterations")


def fit_null(spec: ModelSpec, dispersion=None, tol=TOL, max_iter=MAX_ITER) -> NullFit:
    """IRLS for the nuisance-only model with fixed offset ``x * beta0``."""
    batch = fit_null_batch(
        spec.family,
        spec.y,
        spec.x,
        spec.z,
        link=spec.link,
        beta0=spec.beta0,
        dispersion=dispersion,
        tol=tol,
        max_iter=max_iter,
    )
    raise_on_failure(batch.converged[0], batch.separated[0], batch.iterations[0])
    return batch[0]


def fit_full(spec: ModelSpec, tol=TOL, max_iter=MAX_ITER) -> FullFit:
    """Unconstrained MLE over (beta, gamma)."""
    batch = fit_full_batch(
        spec.family, spec.y, spec.x, spec.z, link=spec.link, tol=tol, max_iter=max_iter
    )
    raise_on_failure(batch.converged[0], batch.separated[0], batch.iterations[0])
    return batch[0]
