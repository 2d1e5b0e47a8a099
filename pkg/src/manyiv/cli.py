"""Command-line interface: ``manyiv {fit,test,simulate,diagnose}``.

Exit codes: 0 success, 2 data or specification error, 3 estimation failure.
Output is JSON with a fixed key order and floats rounded to 12 significant
digits, so identical inputs give byte-identical output.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys

import numpy as np

from . import estimators as est
from . import mc, overid, variance
from .errors import DataError, EstimationError, JustIdentified, ManyIVError, SpecError
from .jsonfmt import dumps
from .reduce import DEFAULT_DENSE_CAP, Dataset, Design

__all__ = ["main", "read_csv", "build_parser"]

EXIT_OK, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3

_DEFAULT_SE = {"liml": "hessian", "emd": "emd", "umd": "umd", "psd-mix": "none"}
_VALID_SE = {
    "liml": {"hessian", "sandwich"},
    "emd": {"emd"},
    "umd": {"umd"},
    "psd-mix": {"none"},
}


# --------------------------------------------------------------------------
# input


def read_csv(path: str) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV with a header row; reject missing or non-numeric cells."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError("duplicate column names in header")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                try:
                    v = float(cell) if cell else math.nan
                except ValueError:
                    raise DataError(f"line {line_no}, column {col!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"line {line_no}, column {col!r}: missing or non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path} has no data rows")
    return header, np.array(rows, dtype=float)


def _select(header, names, prefix, what, exclude) -> list[str]:
    if names is not None and prefix is not None:
        raise DataError(f"give either a {what} list or a {what} prefix, not both")
    if names is not None:
        cols = [c.strip() for c in names.split(",") if c.strip()]
        missing = [c for c in cols if c not in header]
        if missing:
            raise DataError(f"unknown {what} columns: {missing}")
        return cols
    if prefix is not None:
        return [c for c in header if c.startswith(prefix) and c not in exclude]
    return []


def load_dataset(args) -> tuple[Dataset, dict]:
    header, data = read_csv(args.input)
    for role, col in (("outcome", args.outcome), ("endogenous", args.endogenous)):
        if col not in header:
            raise DataError(f"{role} column {col!r} not found")
    if args.outcome == args.endogenous:
        raise DataError("outcome and endogenous columns must differ")
    taken = {args.outcome, args.endogenous}
    zcols = _select(header, args.instruments, args.instrument_prefix, "instrument", taken)
    if not zcols:
        raise DataError("at least one instrument column is required")
    wcols = _select(header, args.exogenous, args.exogenous_prefix, "exogenous", taken | set(zcols))
    overlap = (set(zcols) & set(wcols)) | (taken & (set(zcols) | set(wcols)))
    if overlap:
        raise DataError(f"columns assigned to more than one role: {sorted(overlap)}")
    idx = {c: i for i, c in enumerate(header)}
    n = data.shape[0]
    W = data[:, [idx[c] for c in wcols]] if wcols else np.zeros((n, 0))
    if not args.no_intercept:
        W = np.column_stack([W, np.ones(n)])
    d = Dataset(data[:, idx[args.outcome]], data[:, idx[args.endogenous]], W, data[:, [idx[c] for c in zcols]])
    roles = {"instruments": zcols, "exogenous": wcols, "intercept": not args.no_intercept}
    return d, roles


# --------------------------------------------------------------------------
# commands


def _emit(doc, args) -> None:
    text = dumps(doc)
    if getattr(args, "output", None):
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cap(args) -> dict:
    return {"cap": DEFAULT_DENSE_CAP, "force": bool(getattr(args, "force_large_n", False))}


def _fit(ss, design, d, estimator: str, se_method: str, cap: dict):
    """Point estimate, SEResult (or None) and extra flags."""
    flags: list[str] = []
    needs_dd = estimator == "emd" or se_method in ("sandwich", "emd", "umd")
    dd = design.diagnostics(d.y, d.x, **cap) if needs_dd else None
    se = None
    if estimator == "liml":
        fit = est.liml_re(ss)
        if se_method == "hessian":
            se = variance.se_hessian_re(ss, fit)
        else:
            mv = variance.delta_hat(ss, dd, fit)
            if mv.regularized:
                flags.append("delta_regularized")
            se = variance.se_sandwich_liml(ss, dd, fit, mv)
    elif estimator == "emd":
        re_fit = est.liml_re(ss)
        mv = variance.delta_hat(ss, dd, re_fit)
        if mv.regularized:
            flags.append("delta_regularized")
        fit = est.emd(ss, mv.Delta_hat, Omega_hat=re_fit.Omega_hat)
        se = variance.se_emd(fit, mv, fallback=re_fit)
    elif estimator == "umd":
        fit = est.umd(ss)
        mv = variance.delta_hat(ss, dd, fit)
        if mv.regularized:
            flags.append("delta_regularized")
        se = variance.se_umd(ss, dd, fit, mv)
    else:
        fit = est.psd_mix(ss)
    return fit, se, flags


def cmd_fit(args) -> int:
    se_method = args.se or _DEFAULT_SE[args.estimator]
    if se_method not in _VALID_SE[args.estimator]:
        raise _UsageError(
            f"--se {se_method} is not available for --estimator {args.estimator}; "
            f"choose from {sorted(_VALID_SE[args.estimator])}"
        )
    d, _ = load_dataset(args)
    design = Design(d.W, d.Zstar)
    ss = design.suff_stats(d.y, d.x)
    fit, se, extra = _fit(ss, design, d, args.estimator, se_method, _cap(args))
    doc = {
        "beta_hat": fit.beta_hat,
        "se": None if se is None else se.se,
        "ci95": None if se is None else list(se.ci95(fit.beta_hat)),
        "estimator": args.estimator,
        "se_method": None if se is None else se_method,
        "lambda_hat": fit.lambda_hat,
        "Omega_hat": fit.Omega_hat,
    }
    if fit.kind == est.Kind.UMD:
        doc["Xi_hat"] = fit.Xi_hat
    else:
        doc["Xi22_hat"] = fit.Xi22_hat
    doc.update(
        {
            "m_min": ss.m_min,
            "m_max": ss.m_max,
            "K": ss.K,
            "L": ss.L,
            "n": ss.n,
            "flags": list(fit.flags) + extra,
        }
    )
    _emit(doc, args)
    return EXIT_OK


def _result_doc(r: overid.TestResult) -> dict:
    return {
        "statistic": r.statistic,
        "critical_value": r.critical_value,
        "p_value": r.p_value,
        "nominal_size": r.nominal_size,
        "reject": r.reject,
        "details": r.details,
    }


def cmd_test(args) -> int:
    d, _ = load_dataset(args)
    design = Design(d.W, d.Zstar)
    ss = design.suff_stats(d.y, d.x)
    if ss.K < 2:
        raise JustIdentified("overidentification tests need at least two instruments")
    dd = design.diagnostics(d.y, d.x, **_cap(args))
    fit = est.liml_re(ss)
    psi3, psi4 = variance.psi_moments(dd, fit.Omega_hat)
    kap = variance.kappa_hat(fit.beta_hat, fit.Omega_hat, psi4)
    doc = {
        "n": ss.n,
        "K": ss.K,
        "L": ss.L,
        "m_min": ss.m_min,
        "j_md": overid.j_md(ss),
        "kappa_hat": kap,
        "delta_hat": dd.delta_hat,
        "modified_cd": _result_doc(overid.modified_cd_test(ss, dd, fit, kap, args.size)),
        "sargan": _result_doc(overid.sargan_test(ss, args.size)),
        "md_j": _result_doc(overid.md_j_test(ss, dd, kap, args.size)),
    }
    _emit(doc, args)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    d, roles = load_dataset(args)
    design = Design(d.W, d.Zstar)
    ss = design.suff_stats(d.y, d.x)
    dd = design.diagnostics(d.y, d.x, **_cap(args))
    lam = max(ss.m_max - ss.alpha_k, 0.0)
    doc = {
        "n": ss.n,
        "K": ss.K,
        "L": ss.L,
        "K_over_n": ss.alpha_k,
        "L_over_n": ss.alpha_l,
        "m_min": ss.m_min,
        "m_max": ss.m_max,
        "lambda_hat": lam,
        "delta_hat": dd.delta_hat,
        "mu_hat": dd.mu_hat,
        "instruments": roles["instruments"],
        "exogenous": roles["exogenous"],
        "intercept": roles["intercept"],
    }
    _emit(doc, args)
    return EXIT_OK


def cmd_simulate(args) -> int:
    exp = mc.load_experiment(args.spec)
    reps = args.reps if args.reps is not None else exp["reps"]
    seed = args.seed if args.seed is not None else exp["seed"]
    report = mc.run_mc(
        exp["spec"], reps, seed, exp["targets"], nominal=exp["nominal"], workers=args.workers
    )
    _emit(report.to_dict(), args)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


class _UsageError(Exception):
    pass


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--outcome", required=True, help="outcome column")
    p.add_argument("--endogenous", required=True, help="endogenous regressor column")
    p.add_argument("--instruments", help="comma-separated instrument columns")
    p.add_argument("--instrument-prefix", help="use every column starting with this prefix as an instrument")
    p.add_argument("--exogenous", help="comma-separated exogenous regressor columns")
    p.add_argument("--exogenous-prefix", help="use every column starting with this prefix as exogenous")
    p.add_argument("--no-intercept", action="store_true", help="do not append an intercept to the exogenous regressors")
    p.add_argument("--output", help="write JSON here instead of standard output")
    p.add_argument(
        "--force-large-n",
        action="store_true",
        help=f"allow the O(n^2) leverage computations above n={DEFAULT_DENSE_CAP}",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manyiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate beta")
    _data_args(p)
    p.add_argument("--estimator", choices=sorted(_DEFAULT_SE), default="liml")
    p.add_argument("--se", choices=["hessian", "sandwich", "emd", "umd"], help="standard error method")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="overidentification tests")
    _data_args(p)
    p.add_argument("--size", type=float, default=0.05, help="nominal size (default 0.05)")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("diagnose", help="report dimensions, eigenvalues and leverage diagnostics")
    _data_args(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment file")
    p.add_argument("spec", help="experiment JSON file")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--reps", type=int, help="override the number of replications")
    p.add_argument("--workers", type=int, help="worker processes (default: $MANYIV_THREADS or 1)")
    p.add_argument("--output", help="write the report here instead of standard output")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "size", None) is not None and not 0 < args.size < 1:
        parser.error("--size must lie strictly between 0 and 1")
    try:
        return args.func(args)
    except _UsageError as exc:
        parser.error(str(exc))
    except (DataError, SpecError) as exc:
        print(f"manyiv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"manyiv: estimation failed ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ManyIVError as exc:  # pragma: no cover - every subclass is handled above
        print(f"manyiv: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"manyiv: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
