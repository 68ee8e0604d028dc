"""Command-line front end.

    jointflip analyze  --y Y.tsv --x X.tsv --z Z.tsv --family binomial --out report.tsv
    jointflip validate --y Y.tsv --x X.tsv --z Z.tsv --family binomial
    jointflip simulate --config scenario.ini --out results/

Input files are comma- or tab-delimited numeric tables, one observation
per row, with an optional header row.  No intercept is added: put a
column of ones in the Z file if the model needs one.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import JointFlipError, ParseError
from .flips import DEFAULT_FLIPS, GENERATOR, make_plan
from .glm import fit_null_batch, get_family, get_link
from .multitest import (
    CombiningFunction,
    TestResult,
    closed_testing,
    flip_covariance,
    global_result,
    mahalanobis_global,
    maxt_single_step,
    maxt_step_down,
)
from .scores import build_matrix, decompose_batch, flip_statistics, normalize_alternative

log = logging.getLogger(__name__)

METHODS = ("maxt", "maxt-sd", "closed", "mahalanobis", "global")
PSIS = ("maxabs", "sumabs", "sumsq")
REPORT_COLUMNS = ("hypothesis_id", "observed_stat", "raw_p", "adj_p", "rejected")
_MISSING = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class AnalysisConfig:
    y_file: Path
    x_file: Path
    z_file: Path | None = None
    family: str = "binomial"
    link: str | None = None
    method: str = "maxt-sd"
    psi: str = "maxabs"
    alternative: str = "two-sided"
    alpha: float = 0.05
    flips: int = DEFAULT_FLIPS
    seed: int = 0
    beta0: float = 0.0
    out: Path | None = None
    delimiter: str = "auto"
    standardized: bool = True
    allow_nonconverged: bool = False


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    columns: tuple = ()

    def __str__(self):
        return f"{self.code}: {self.message}"


@dataclass(frozen=True)
class Table:
    values: np.ndarray
    names: list


# --------------------------------------------------------------------- #
# Input parsing
# --------------------------------------------------------------------- #


def _sniff(line: str, delimiter: str) -> str | None:
    if delimiter in ("tab", "\\t", "\t"):
        return "\t"
    if delimiter in ("comma", ","):
        return ","
    if delimiter in ("space", "whitespace"):
        return None
    if delimiter != "auto":
        return delimiter
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None


def _cell(tok: str) -> float:
    tok = tok.strip()
    if tok.lower() in _MISSING:
        return np.nan
    return float(tok)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def read_table(path, delimiter: str = "auto") -> Table:
    """Parse a numeric table; a first row with no numeric cell is a header."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ParseError(f"{path}: no data rows")
    sep = _sniff(lines[0], delimiter)
    if sep is None:
        rows = [ln.split() for ln in lines]
    else:
        rows = [[c.strip() for c in r] for r in csv.reader(lines, delimiter=sep)]
    names = None
    if not any(_is_number(c) for c in rows[0]):
        names = rows.pop(0)
    if not rows:
        raise ParseError(f"{path}: header but no data rows")
    width = len(rows[0])
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{path}: row {i + 1} has {len(row)} fields, expected {width}")
        try:
            values[i] = [_cell(c) for c in row]
        except ValueError as exc:
            raise ParseError(f"{path}: row {i + 1}: {exc}") from None
    if names is not None and len(names) != width:
        raise ParseError(f"{path}: header has {len(names)} names for {width} columns")
    return Table(values, names or [])


def load_inputs(cfg: AnalysisConfig):
    """(Y, x, z, hypothesis ids) with shapes checked."""
    ty = read_table(cfg.y_file, cfg.delimiter)
    tx = read_table(cfg.x_file, cfg.delimiter)
    Y, x = ty.values, tx.values
    n = Y.shape[0]
    if x.shape[1] != 1:
        raise ParseError(f"{cfg.x_file}: expected one column (target covariate), got {x.shape[1]}")
    if x.shape[0] != n:
        raise ParseError(f"row-count mismatch: y has {n} rows, x has {x.shape[0]}")
    if cfg.z_file is not None:
        z = read_table(cfg.z_file, cfg.delimiter).values
        if z.shape[0] != n:
            raise ParseError(f"row-count mismatch: y has {n} rows, z has {z.shape[0]}")
    else:
        z = np.empty((n, 0))
    names = ty.names or [f"H{l + 1}" for l in range(Y.shape[1])]
    return Y, x[:, 0], z, names


def validate_inputs(cfg: AnalysisConfig) -> list:
    """Problems that would invalidate the analysis; empty when the inputs are clean."""
    try:
        Y, x, z, names = load_inputs(cfg)
    except ParseError as exc:
        return [Diagnostic("parse_error", str(exc))]
    out = []
    for label, arr in (("y", Y), ("x", x[:, None]), ("z", z)):
        bad = np.isnan(arr)
        if bad.any():
            cols = tuple(np.flatnonzero(bad.any(axis=0)).tolist())
            out.append(Diagnostic("missing_values", f"{label} contains {int(bad.sum())} missing values", cols))
    if out:
        return out
    n = Y.shape[0]
    if z.shape[1]:
        rank = np.linalg.matrix_rank(z)
        if rank < z.shape[1]:
            out.append(Diagnostic("z_rank_deficient", f"z has rank {rank} < {z.shape[1]} columns"))
        else:
            coef, *_ = np.linalg.lstsq(z, x, rcond=None)
            resid = x - z @ coef
            if np.linalg.norm(resid) <= 1e-8 * max(np.linalg.norm(x), 1e-300):
                out.append(Diagnostic("target_collinear", "target collinear with nuisance: x lies in the span of z"))
    elif np.linalg.norm(x) == 0:
        out.append(Diagnostic("target_collinear", "target covariate is identically zero"))
    if n < z.shape[1] + 2:
        out.append(Diagnostic("too_few_rows", f"n={n} is below k + 1 = {z.shape[1] + 2}"))
    try:
        family = get_family(cfg.family)
    except ValueError as exc:
        return out + [Diagnostic("bad_family", str(exc))]
    bad = ~family.in_support(Y)
    if bad.any():
        cols = tuple(np.flatnonzero(bad.any(axis=0)).tolist())
        ids = ", ".join(names[c] for c in cols[:10])
        out.append(Diagnostic("support_violation", f"responses outside the {family.kind} support: {ids}", cols))
    return out


# --------------------------------------------------------------------- #
# Analysis
# --------------------------------------------------------------------- #


def _psi(name: str) -> CombiningFunction:
    return CombiningFunction(name)


def analyze(cfg: AnalysisConfig):
    """Run the full pipeline; returns ``(TestResult, header dict, hypothesis ids)``."""
    if cfg.method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    problems = validate_inputs(cfg)
    if problems:
        raise ParseError("; ".join(str(p) for p in problems))
    Y, x, z, names = load_inputs(cfg)
    family = get_family(cfg.family)
    link = get_link(cfg.link, family)
    alternative = normalize_alternative(cfg.alternative)

    fits = fit_null_batch(family, Y, x, z, link=link, beta0=cfg.beta0)
    sep = np.flatnonzero(fits.separated)
    if sep.size:
        raise JointFlipError(f"separation detected for hypotheses {[names[l] for l in sep]}")
    nonconv = np.flatnonzero(~fits.converged)
    if nonconv.size and not cfg.allow_nonconverged:
        raise JointFlipError(f"null fit did not converge for hypotheses {[names[l] for l in nonconv]}")

    scores = decompose_batch(fits, x, z)
    plan = make_plan(Y.shape[0], cfg.flips, cfg.seed)
    M = build_matrix(scores, plan, standardized=cfg.standardized, alternative=alternative)
    bad_rows = np.flatnonzero(np.isnan(M.m_stats[0]))
    if bad_rows.size:
        raise JointFlipError(f"degenerate variance of the observed statistic for hypotheses {[names[l] for l in bad_rows]}")

    psi = _psi(cfg.psi)
    if cfg.method == "maxt":
        result = maxt_single_step(M, cfg.alpha)
    elif cfg.method == "maxt-sd":
        result = maxt_step_down(M, cfg.alpha)
    elif cfg.method == "closed":
        result = closed_testing(M, psi, cfg.alpha)
    elif cfg.method == "global":
        result = global_result(M, psi, cfg.alpha)
    else:
        raw = flip_statistics(scores, plan.signs, standardized=False)
        p = mahalanobis_global(raw, flip_covariance(raw))
        result = global_result(M, psi, cfg.alpha, global_p=p)

    header = {
        "method": result.method,
        "cli_method": cfg.method,
        "psi": psi.kind if cfg.method in ("closed", "global") else "",
        "alternative": "two_sided" if cfg.method == "mahalanobis" else alternative,
        "standardized": str(cfg.standardized).lower(),
        "alpha": repr(float(cfg.alpha)),
        "flips": str(plan.w),
        "seed": str(cfg.seed),
        "generator": GENERATOR,
        "family": family.kind,
        "link": link.kind,
        "beta0": repr(float(cfg.beta0)),
        "n": str(Y.shape[0]),
        "m": str(Y.shape[1]),
        "convergence_failures": str(int(nonconv.size)),
        "degenerate_flips": str(M.n_degenerate),
    }
    if result.global_p is not None:
        header["global_p"] = f"{result.global_p:.12g}"
    header = {k: v for k, v in header.items() if v != ""}
    return result, header, names


def write_report(path, result: TestResult, header: dict, names) -> Path:
    path = Path(path)
    lines = ["# jointflip report"]
    lines += [f"# {k}: {v}" for k, v in header.items()]
    lines.append("\t".join(REPORT_COLUMNS))
    for l, name in enumerate(names):
        lines.append("\t".join([
            str(name),
            f"{result.raw_stat[l]:.12g}",
            f"{result.raw_p[l]:.12g}",
            f"{result.adj_p[l]:.12g}",
            "true" if result.rejected[l] else "false",
        ]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_report(path):
    """Parse a report back into ``(header dict, column dict)``."""
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, sep, value = line[2:].partition(": ")
            if sep:
                header[key] = value
        elif line and not line.startswith("hypothesis_id"):
            rows.append(line.split("\t"))
    cols = {
        "hypothesis_id": [r[0] for r in rows],
        "observed_stat": np.array([float(r[1]) for r in rows]),
        "raw_p": np.array([float(r[2]) for r in rows]),
        "adj_p": np.array([float(r[3]) for r in rows]),
        "rejected": np.array([r[4] == "true" for r in rows]),
    }
    return header, cols


def run_analysis(cfg: AnalysisConfig) -> Path:
    """Analyze and write the TSV report to ``cfg.out``."""
    if cfg.out is None:
        raise ValueError("an output path is required")
    result, header, names = analyze(cfg)
    return write_report(cfg.out, result, header, names)


# --------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------- #


def _add_input_args(p):
    p.add_argument("--y", required=True, type=Path, help="responses, n rows x m columns")
    p.add_argument("--x", required=True, type=Path, help="target covariate, n rows x 1 column")
    p.add_argument("--z", type=Path, default=None, help="nuisance covariates, n rows x (k-1) columns")
    p.add_argument("--family", default="binomial", choices=("gaussian", "binomial", "poisson"))
    p.add_argument("--delimiter", default="auto", help="auto, comma, tab or a literal character")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointflip", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="test every response and write a TSV report")
    _add_input_args(a)
    a.add_argument("--link", default=None, choices=("identity", "logit", "log"))
    a.add_argument("--method", default="maxt-sd", choices=METHODS)
    a.add_argument("--psi", default="maxabs", choices=PSIS)
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--flips", type=int, default=DEFAULT_FLIPS)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--beta0", type=float, default=0.0)
    a.add_argument("--alternative", default="two-sided", choices=("two-sided", "greater", "less"))
    a.add_argument("--effective", action="store_true", help="use unstandardized effective scores")
    a.add_argument("--allow-nonconverged", action="store_true")
    a.add_argument("--out", required=True, type=Path)

    v = sub.add_parser("validate", help="check inputs and list problems")
    _add_input_args(v)

    s = sub.add_parser("simulate", help="run a simulation study from a config file")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--n-jobs", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return _simulate(args)
        cfg = AnalysisConfig(
            y_file=args.y, x_file=args.x, z_file=args.z, family=args.family,
            delimiter=args.delimiter,
            **({} if args.command == "validate" else dict(
                link=args.link, method=args.method, psi=args.psi,
                alternative=args.alternative, alpha=args.alpha, flips=args.flips,
                seed=args.seed, beta0=args.beta0, out=args.out,
                standardized=not args.effective,
                allow_nonconverged=args.allow_nonconverged,
            )),
        )
        if args.command == "validate":
            problems = validate_inputs(cfg)
            for p in problems:
                print(p)
            if not problems:
                print("ok")
            return 1 if problems else 0
        path = run_analysis(cfg)
        print(path)
        return 0
    except (JointFlipError, ValueError) as exc:
        print(f"jointflip: error: {exc}", file=sys.stderr)
        return 1


def _simulate(args) -> int:
    from dataclasses import replace

    from .simulate import load_config, run_study

    study, cfg = load_config(args.config)
    if args.n_jobs is not None:
        cfg = replace(cfg, n_jobs=args.n_jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    report = run_study(study, cfg)
    path = report.to_csv(args.out / f"{study}.csv")
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
