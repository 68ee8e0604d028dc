"""Desk-scale simulation studies: size, FWER and power.

Datasets share one target covariate ``x`` and one nuisance covariate
``z`` (plus an intercept), drawn bivariate standard normal with
correlation ``rho_xz``.  Responses are coupled through an exchangeable
Gaussian copula: the latent ``sqrt(rho_y) F + sqrt(1 - rho_y) E`` is
pushed through each response's marginal quantile function, so marginals
are exactly the GLM's while the responses are dependent.

Each replicate draws from its own Philox stream keyed by
``(seed, stream, replicate)``, so results do not depend on how
replicates are scheduled across workers.
"""

from __future__ import annotations

import configparser
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .flips import make_exhaustive, make_plan
from .glm import ModelSpec, fit_full_batch, fit_null_batch, get_family, raise_on_failure
from .multitest import bonferroni_holm, maxt_single_step, maxt_step_down
from .scores import decompose_batch, flip_statistics, orient

log = logging.getLogger(__name__)

UNIVARIATE_SETTINGS = ((0.0, 0.0), (1.0, 0.0), (0.0, 0.5), (1.0, 0.5))
MULTIVARIATE_SETTINGS = ((0.0, 0.0), (-1.0, 0.0), (0.0, 0.5), (-1.0, 0.5))
BONFERRONI_GRID = tuple(0.05 / k for k in (1, 10, 100, 1000))
RHO_GRID = (0.0, 0.2, 0.4, 0.6, 0.8)
MAX_FAIL_FRACTION = 0.01

UNIVARIATE_METHODS = ("flipscores", "wald", "score", "lrt")
MULTIVARIATE_METHODS = ("flipscores_maxt_sd", "flipscores_maxt", "wald_holm", "score_holm", "lrt_holm")

REPORT_COLUMNS = (
    "study", "gamma", "rho_xz", "rho_y", "n", "m", "method", "alpha",
    "size", "size_ratio", "ratio_ci_low", "ratio_ci_high",
    "fwer", "power", "monte_carlo_se", "power_se",
    "avg_response_correlation", "n_valid", "n_failed", "valid",
)


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 50
    m: int = 1
    family: str = "binomial"
    beta_alt: float = 1.0
    frac_alt: float = 0.0
    gamma_true: float = 0.0
    rho_xz: float = 0.0
    rho_y: float = 0.0
    n_sims: int = 10_000
    w: int = 2000
    alpha_grid: tuple = BONFERRONI_GRID
    seed: int = 0
    intercept: float = 0.0
    include_nuisance: bool = True
    exhaustive: bool = False
    settings: tuple | None = None
    rho_y_grid: tuple | None = None
    n_jobs: int = 1

    def __post_init__(self):
        n_alt = self.frac_alt * self.m
        if abs(n_alt - round(n_alt)) > 1e-9:
            raise ValueError(f"frac_alt * m must be an integer, got {n_alt}")
        if not 0.0 <= self.frac_alt <= 1.0:
            raise ValueError("frac_alt must lie in [0, 1]")
        if not -1.0 < self.rho_xz < 1.0:
            raise ValueError("rho_xz must lie in (-1, 1)")
        if not 0.0 <= self.rho_y < 1.0:
            raise ValueError("rho_y must lie in [0, 1)")
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))

    @property
    def n_alt(self) -> int:
        return int(round(self.frac_alt * self.m))


@dataclass
class StudyReport:
    """Tidy rows, one per setting x method x alpha."""

    rows: list

    def select(self, **conditions) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in conditions.items())]

    def one(self, **conditions) -> dict:
        hits = self.select(**conditions)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {conditions}")
        return hits[0]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in REPORT_COLUMNS})
        return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else f"{float(v):.10g}"
    return v


# --------------------------------------------------------------------- #
# Data generation
# --------------------------------------------------------------------- #


def _rng(seed, *key):
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    data_ss, flip_ss = ss.spawn(2)
    return np.random.Generator(np.random.Philox(data_ss)), int(flip_ss.generate_state(1, np.uint64)[0])


def gen_dataset(cfg: ScenarioConfig, rng):
    """One simulated dataset: ``(Y (n x m), x (n,), z (n x k-1))``.

    The first ``frac_alt * m`` responses have slope ``beta_alt``; the
    rest are null.  ``rng`` is a numpy Generator or an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(rng))
    n, m = cfg.n, cfg.m
    e = rng.standard_normal((n, 2))
    x = e[:, 0]
    zc = cfg.rho_xz * e[:, 0] + np.sqrt(1.0 - cfg.rho_xz**2) * e[:, 1]
    beta = np.zeros(m)
    beta[: cfg.n_alt] = cfg.beta_alt
    eta = cfg.intercept + np.outer(x, beta)
    if cfg.include_nuisance:
        eta = eta + cfg.gamma_true * zc[:, None]
        z = np.column_stack([np.ones(n), zc])
    else:
        z = np.empty((n, 0))

    common = rng.standard_normal((n, 1))
    latent = np.sqrt(cfg.rho_y) * common + np.sqrt(1.0 - cfg.rho_y) * rng.standard_normal((n, m))
    kind = get_family(cfg.family).kind
    if kind == "binomial":
        # Y = 1 exactly when Phi(latent) < mu
        Y = (latent < stats.norm.ppf(stats.logistic.cdf(eta))).astype(float)
    elif kind == "gaussian":
        Y = eta + latent
    else:
        Y = stats.poisson.ppf(stats.norm.cdf(latent), np.exp(eta))
    return Y, x, z


def avg_response_correlation(Y) -> float:
    """Mean off-diagonal Pearson correlation between response columns."""
    m = Y.shape[1]
    if m < 2:
        return float("nan")
    with np.errstate(invalid="ignore", divide="ignore"):
        C = np.corrcoef(Y, rowvar=False)
    off = C[~np.eye(m, dtype=bool)]
    return float(np.nanmean(off)) if np.isfinite(off).any() else float("nan")


# --------------------------------------------------------------------- #
# Competitors
# --------------------------------------------------------------------- #


def _competitors(null, full, scores, beta0=0.0):
    """Two-sided Wald, score and LRT p-values, each of shape (m,)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        wald = stats.chi2.sf(((full.beta_hat - beta0) / full.beta_se) ** 2, 1)
        score = stats.chi2.sf(np.sum(scores.nu, axis=1) ** 2 / np.sum(scores.b**2, axis=1), 1)
    lrt = stats.chi2.sf(np.maximum(2.0 * (full.loglik - null.loglik), 0.0), 1)
    return wald, score, lrt


def competitor_tests(spec: ModelSpec):
    """(p_wald, p_score, p_lrt) for one response.

    The score statistic is (S*)^2 / Var{S*} with the model-based variance
    n^-1 b'b; all three are referred to chi-square(1).  Fit failures
    raise.
    """
    null = fit_null_batch(spec.family, spec.y, spec.x, spec.z, link=spec.link, beta0=spec.beta0)
    full = fit_full_batch(spec.family, spec.y, spec.x, spec.z, link=spec.link)
    for fit in (null, full):
        raise_on_failure(fit.converged[0], fit.separated[0], fit.iterations[0])
    scores = decompose_batch(null, spec.x, spec.z)
    return tuple(float(p[0]) for p in _competitors(null, full, scores, spec.beta0))


# --------------------------------------------------------------------- #
# Replicates
# --------------------------------------------------------------------- #


def _plan(cfg, flip_seed):
    return make_exhaustive(cfg.n) if cfg.exhaustive else make_plan(cfg.n, cfg.w, flip_seed)


def _fit_all(cfg, Y, x, z):
    null = fit_null_batch(cfg.family, Y, x, z)
    full = fit_full_batch(cfg.family, Y, x, z)
    if not (null.ok.all() and full.ok.all()):
        return None
    scores = decompose_batch(null, x, z)
    return null, full, scores


def univariate_replicate(cfg: ScenarioConfig, stream: int, rep: int):
    """p-values (flipscores, wald, score, lrt) for one replicate, or None on fit failure."""
    rng, flip_seed = _rng(cfg.seed, stream, rep)
    Y, x, z = gen_dataset(replace(cfg, m=1), rng)
    fitted = _fit_all(cfg, Y, x, z)
    if fitted is None:
        return None
    null, full, scores = fitted
    M = np.abs(flip_statistics(scores, _plan(cfg, flip_seed).signs, standardized=True))
    if np.isnan(M[0, 0]):
        return None
    col = np.where(np.isnan(M[:, 0]), np.inf, M[:, 0])
    p_flip = np.mean(col >= col[0])
    wald, score, lrt = _competitors(null, full, scores)
    return np.array([p_flip, wald[0], score[0], lrt[0]])


def multivariate_replicate(cfg: ScenarioConfig, stream: int, rep: int):
    """Per-alpha false-rejection flags and alternative rejection fractions.

    Returns ``(any_false (methods, alphas), power (methods, alphas),
    avg_corr)`` or None on fit failure.
    """
    rng, flip_seed = _rng(cfg.seed, stream, rep)
    Y, x, z = gen_dataset(cfg, rng)
    fitted = _fit_all(cfg, Y, x, z)
    if fitted is None:
        return None
    null, full, scores = fitted
    M = orient(flip_statistics(scores, _plan(cfg, flip_seed).signs, standardized=True), "two_sided")
    if np.isnan(M[0]).any():
        return None
    alphas = np.asarray(cfg.alpha_grid)
    adj = [
        maxt_step_down(M, 0.5).adj_p,
        maxt_single_step(M, 0.5).adj_p,
        *(bonferroni_holm(p) for p in _competitors(null, full, scores)),
    ]
    is_alt = np.zeros(cfg.m, dtype=bool)
    is_alt[: cfg.n_alt] = True
    any_false = np.empty((len(adj), alphas.size), dtype=bool)
    power = np.full((len(adj), alphas.size), np.nan)
    for i, a in enumerate(adj):
        rej = a[:, None] <= alphas[None, :] * (1 + 1e-12)
        any_false[i] = rej[~is_alt].any(axis=0)
        if is_alt.any():
            power[i] = rej[is_alt].mean(axis=0)
    return any_false, power, avg_response_correlation(Y)


def _run_chunk(args):
    fn, cfg, stream, reps = args
    return [fn(cfg, stream, r) for r in reps]


def _run_replicates(fn, cfg, stream):
    reps = range(cfg.n_sims)
    if cfg.n_jobs <= 1:
        return [fn(cfg, stream, r) for r in reps]
    chunks = np.array_split(np.arange(cfg.n_sims), cfg.n_jobs * 4)
    with ProcessPoolExecutor(cfg.n_jobs) as pool:
        parts = pool.map(_run_chunk, [(fn, cfg, stream, c.tolist()) for c in chunks])
        return [r for part in parts for r in part]


# --------------------------------------------------------------------- #
# Studies
# --------------------------------------------------------------------- #


def _mc_se(rate, n):
    return float(np.sqrt(rate * (1.0 - rate) / n)) if n else float("nan")


def _failure_check(cfg, n_failed, label):
    frac = n_failed / cfg.n_sims
    if n_failed:
        log.warning("%s: %d of %d replicates excluded after fit failures", label, n_failed, cfg.n_sims)
    return frac < MAX_FAIL_FRACTION


def run_univariate_study(cfg: ScenarioConfig) -> StudyReport:
    """Empirical size of flipscores and the parametric competitors.

    Runs every (gamma, rho_xz) setting (the four univariate settings by
    default) at every alpha in ``cfg.alpha_grid``.  The true slope is 0.
    """
    rows = []
    settings = cfg.settings or UNIVARIATE_SETTINGS
    for stream, (gamma, rho_xz) in enumerate(settings):
        sc = replace(cfg, m=1, frac_alt=0.0, gamma_true=gamma, rho_xz=rho_xz)
        results = _run_replicates(univariate_replicate, sc, stream)
        good = np.array([r for r in results if r is not None]).reshape(-1, len(UNIVARIATE_METHODS))
        n_valid = good.shape[0]
        n_failed = sc.n_sims - n_valid
        valid = _failure_check(sc, n_failed, f"univariate gamma={gamma} rho_xz={rho_xz}")
        for i, method in enumerate(UNIVARIATE_METHODS):
            for alpha in sc.alpha_grid:
                size = float(np.mean(good[:, i] <= alpha * (1 + 1e-12))) if n_valid else float("nan")
                half = 1.96 * np.sqrt(alpha * (1 - alpha) / n_valid) / alpha
                rows.append(dict(
                    study="univariate", gamma=gamma, rho_xz=rho_xz, rho_y=0.0, n=sc.n, m=1,
                    method=method, alpha=alpha, size=size, size_ratio=size / alpha,
                    ratio_ci_low=1.0 - half, ratio_ci_high=1.0 + half,
                    fwer=float("nan"), power=float("nan"),
                    monte_carlo_se=_mc_se(size, n_valid), power_se=float("nan"),
                    avg_response_correlation=float("nan"),
                    n_valid=n_valid, n_failed=n_failed, valid=valid,
                ))
    return StudyReport(rows)


def run_multivariate_study(cfg: ScenarioConfig) -> StudyReport:
    """FWER over true nulls and average power over true alternatives.

    Sweeps ``cfg.rho_y_grid`` (latent copula correlation) for each
    (gamma, rho_xz) setting and reports the achieved average observed
    correlation between responses alongside.
    """
    if cfg.m < 2:
        raise ValueError("the multivariate study needs m >= 2")
    rows = []
    settings = cfg.settings or MULTIVARIATE_SETTINGS
    grid = cfg.rho_y_grid if cfg.rho_y_grid is not None else RHO_GRID
    stream = 0
    for gamma, rho_xz in settings:
        for rho_y in grid:
            sc = replace(cfg, gamma_true=gamma, rho_xz=rho_xz, rho_y=rho_y)
            results = [r for r in _run_replicates(multivariate_replicate, sc, 1000 + stream) if r is not None]
            stream += 1
            n_valid = len(results)
            n_failed = sc.n_sims - n_valid
            valid = _failure_check(sc, n_failed, f"multivariate gamma={gamma} rho_xz={rho_xz} rho_y={rho_y}")
            if n_valid:
                fwer = np.mean([r[0] for r in results], axis=0)
                power = np.mean([r[1] for r in results], axis=0)
                corr = float(np.nanmean([r[2] for r in results]))
            else:
                shape = (len(MULTIVARIATE_METHODS), len(sc.alpha_grid))
                fwer = power = np.full(shape, np.nan)
                corr = float("nan")
            for i, method in enumerate(MULTIVARIATE_METHODS):
                for j, alpha in enumerate(sc.alpha_grid):
                    rows.append(dict(
                        study="multivariate", gamma=gamma, rho_xz=rho_xz, rho_y=rho_y,
                        n=sc.n, m=sc.m, method=method, alpha=alpha,
                        size=float("nan"), size_ratio=float("nan"),
                        ratio_ci_low=float("nan"), ratio_ci_high=float("nan"),
                        fwer=float(fwer[i, j]), power=float(power[i, j]),
                        monte_carlo_se=_mc_se(fwer[i, j], n_valid),
                        power_se=_mc_se(power[i, j], n_valid),
                        avg_response_correlation=corr,
                        n_valid=n_valid, n_failed=n_failed, valid=valid,
                    ))
    return StudyReport(rows)


# --------------------------------------------------------------------- #
# Config files
# --------------------------------------------------------------------- #


def _parse_value(name, raw, default):
    raw = raw.strip()
    if name == "settings":
        return tuple(tuple(float(v) for v in pair.split()) for pair in raw.split(";") if pair.strip())
    if name in ("alpha_grid", "rho_y_grid"):
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "yes", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path):
    """Read an INI-style ``[scenario]`` section.

    ``study`` selects ``univariate`` or ``multivariate``; every other key
    is a :class:`ScenarioConfig` field.  Lists are whitespace or comma
    separated; ``settings`` is ``gamma rho_xz`` pairs separated by ``;``.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if "scenario" not in parser:
        raise ValueError(f"{path}: missing [scenario] section")
    section = dict(parser["scenario"])
    study = section.pop("study", "univariate").strip().lower()
    if study not in ("univariate", "multivariate"):
        raise ValueError(f"unknown study {study!r}")
    defaults = ScenarioConfig()
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    values = {k: _parse_value(k, v, getattr(defaults, k)) for k, v in section.items()}
    return study, ScenarioConfig(**values)


def run_study(study: str, cfg: ScenarioConfig) -> StudyReport:
    return run_univariate_study(cfg) if study == "univariate" else run_multivariate_study(cfg)


def describe(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)
