"""Configuration-driven command line interface.

Subcommands: screen | pivot | ci | simulate | verify.  Experiments carry too
many parameters for flags, so each subcommand reads a JSON config document
(--seed is the single override, for sweep scripting).  Exit codes: 0 success,
1 verification invariant failure, 2 config/schema error, 3 rare-event
underflow.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import asymptotics, harness
from .errors import RareEventUnderflow
from .gauss import RngStream, mills_lower, std_normal_cdf, std_normal_survival
from .families import GenerativeSpec
from .selection import ScreeningRule
from .seq import SeqCarveProblem, seq_confidence_interval, seq_pivot

log = logging.getLogger("carveinf")


class CliConfigError(ValueError):
    pass


def _load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliConfigError("config root must be a JSON object")
    return doc


def _check_keys(doc, allowed, required, where="config"):
    unknown = set(doc) - set(allowed)
    if unknown:
        raise CliConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = set(required) - set(doc)
    if missing:
        raise CliConfigError(f"missing keys in {where}: {sorted(missing)}")


def _parse_rule(doc):
    if not isinstance(doc, dict):
        raise CliConfigError("rule must be an object")
    variant = doc.get("variant")
    try:
        if variant == "threshold":
            _check_keys(doc, {"variant", "lambda"}, {"variant", "lambda"}, "rule")
            return ScreeningRule("threshold", lam=np.asarray(doc["lambda"], dtype=float))
        if variant == "top_d":
            _check_keys(doc, {"variant", "d"}, {"variant", "d"}, "rule")
            return ScreeningRule("top_d", d=int(doc["d"]))
        if variant == "bh":
            _check_keys(doc, {"variant", "alpha"}, {"variant", "alpha"}, "rule")
            return ScreeningRule("bh", alpha=float(doc["alpha"]))
    except (TypeError, ValueError) as exc:
        raise CliConfigError(f"invalid rule: {exc}") from exc
    raise CliConfigError(f"unknown rule variant: {variant!r}")


def _emit(payload, out_dir, name, fmt):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"{name}.{fmt}").write_text(text, encoding="utf-8")


def cmd_screen(args):
    doc = _load_config(args.config)
    _check_keys(doc, {"rule", "z1"}, {"rule", "z1"})
    rule = _parse_rule(doc["rule"])
    z1 = np.asarray(doc["z1"], dtype=float)
    outcome = harness._apply_rule(rule, z1)
    _emit(outcome.to_dict(), args.out, "screen", "json")
    return 0


def _seq_problem_fields(doc, extra=(), required_extra=()):
    allowed = {"z_obs", "m", "rho", "offset", "sign"} | set(extra)
    required = {"z_obs", "rho", "offset"} | set(required_extra)
    _check_keys(doc, allowed, required)
    try:
        return (
            float(doc["z_obs"]),
            float(doc.get("m", 0.0)),
            float(doc["rho"]),
            float(doc["offset"]),
            float(doc.get("sign", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise CliConfigError(f"invalid numeric field: {exc}") from exc


def cmd_pivot(args):
    doc = _load_config(args.config)
    z_obs, m, rho, offset, sign = _seq_problem_fields(doc, extra=("m",))
    try:
        res = seq_pivot(z_obs, SeqCarveProblem(m, rho, offset, sign))
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    _emit(
        {
            "value": res.value,
            "numerator": res.numerator,
            "denominator": res.denominator,
            "quadrature_error": res.quadrature_error,
        },
        args.out, "pivot", "json",
    )
    return 0


def cmd_ci(args):
    doc = _load_config(args.config)
    z_obs, _, rho, offset, sign = _seq_problem_fields(
        doc, extra=("level",), required_extra=("level",)
    )
    level = float(doc["level"])
    try:
        ci = seq_confidence_interval(z_obs, rho, offset, sign, level)
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    _emit(
        {"lower": ci.lower, "upper": ci.upper, "level": ci.level,
         "iterations": ci.iterations},
        args.out, "ci", "json",
    )
    return 0


SIMULATE_KEYS = {
    "n1", "n2", "rule", "replications", "master_seed", "sqrt_n_beta",
    "family", "randomization_mode", "level", "compute_ci",
}


def cmd_simulate(args):
    doc = _load_config(args.config)
    _check_keys(doc, SIMULATE_KEYS,
                {"n1", "n2", "rule", "replications", "sqrt_n_beta"})
    seed = args.seed if args.seed is not None else doc.get("master_seed", 0)
    try:
        cfg = harness.ExperimentConfig(
            n1=int(doc["n1"]),
            n2=int(doc["n2"]),
            rule=_parse_rule(doc["rule"]),
            replications=int(doc["replications"]),
            master_seed=int(seed),
            sqrt_n_beta=np.asarray(doc["sqrt_n_beta"], dtype=float),
            family=str(doc.get("family", "gaussian")),
            randomization_mode=str(doc.get("randomization_mode", "gaussian")),
            level=float(doc.get("level", 0.90)),
            compute_ci=bool(doc.get("compute_ci", False)),
        )
    except (TypeError, ValueError) as exc:
        raise CliConfigError(f"invalid experiment config: {exc}") from exc
    records = harness.run_two_stage(cfg, jobs=args.jobs)
    summary = harness.summarize(cfg, records)
    summary_text = harness.summary_to_json(summary)
    sys.stdout.write(summary_text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "replications.csv").write_text(
            harness.records_to_csv(records), encoding="utf-8"
        )
        (out / "summary.json").write_text(summary_text, encoding="utf-8")
    return 0


VERIFY_KEYS = {"checks", "master_seed", "n_mc", "mills_lower_shift"}
DEFAULT_CHECKS = ("sandwich", "convolution", "decay", "moments")


def cmd_verify(args):
    doc = _load_config(args.config) if args.config else {}
    _check_keys(doc, VERIFY_KEYS, set())
    checks = doc.get("checks", list(DEFAULT_CHECKS))
    seed = args.seed if args.seed is not None else doc.get("master_seed", 20260823)
    n_mc = int(doc.get("n_mc", 200_000))
    # test hook: an additive perturbation of the lower envelope must trip
    # the sandwich invariant and exit nonzero
    shift = float(doc.get("mills_lower_shift", 0.0))
    lower_fn = (lambda x: mills_lower(x) + shift) if shift else mills_lower

    report = {}
    failures = []

    if "sandwich" in checks:
        grid = np.arange(0.0, 10.0 + 1e-9, 0.01)
        rep = asymptotics.sandwich_report(grid, lower_fn=lower_fn)
        lower_grid = np.arange(-10.0, 10.0 + 1e-9, 0.01)
        sv = std_normal_survival(lower_grid)
        rep["violations_lower_full_grid"] = int(
            np.count_nonzero(lower_fn(lower_grid) > sv)
        )
        report["sandwich"] = rep
        if rep["violations_lower"] or rep["violations_upper"] \
                or rep["violations_lower_full_grid"]:
            failures.append("sandwich")

    if "convolution" in checks:
        from .gauss import gauss_expectation, log_std_normal_survival

        worst = 0.0
        for m in (-6.0, -3.0, 0.0, 2.0, 6.0):
            for rho in (0.5, 1.0, 2.0):
                got = gauss_expectation(
                    lambda z: np.exp(log_std_normal_survival(-(z + m) / rho))
                )
                want = std_normal_cdf(m / np.sqrt(1.0 + rho * rho))
                worst = max(worst, abs(got - want))
        report["convolution"] = {"max_abs_error": worst, "tolerance": 1e-8}
        if worst >= 1e-8:
            failures.append("convolution")

    if "decay" in checks:
        rows = []
        ok = True
        prev = None
        for m in (-6.0, -8.0, -10.0, -12.0):
            exact = std_normal_cdf(m / np.sqrt(2.0))
            approx = asymptotics.seq_selprob_asymptotic(m, 1.0)
            rel = abs(approx - exact) / exact
            rows.append({"m": m, "exact": exact, "approx": approx,
                         "rel_error": rel})
            if prev is not None and rel >= prev:
                ok = False
            prev = rel
        if rows[0]["rel_error"] >= 0.10 or rows[2]["rel_error"] >= 0.04:
            ok = False
        report["decay"] = {"rows": rows, "monotone_and_within_bounds": ok}
        if not ok:
            failures.append("decay")

    if "moments" in checks:
        spec = GenerativeSpec("gaussian", np.zeros(2))
        rep = asymptotics.randomization_moments_check(
            40, 40, spec, n_mc, RngStream(int(seed), 0)
        )
        report["moments"] = rep
        if not (rep["cov_within_3se"] and rep["cross_within_3se"]):
            failures.append("moments")

    report["failures"] = failures
    _emit(report, args.out, "verify", "json")
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="carveinf",
        description="Data-carved selective inference: screening, carved "
                    "pivots and intervals, simulation batches, and "
                    "asymptotics verification.",
    )
    parser.add_argument("--format", choices=("csv", "json"), default="json",
                        help="output format for report files")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in (
        ("screen", cmd_screen, True),
        ("pivot", cmd_pivot, True),
        ("ci", cmd_ci, True),
        ("simulate", cmd_simulate, True),
        ("verify", cmd_verify, False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config,
                       help="path to the JSON config document")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker count (results are identical "
                            "for any value)")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    level = os.environ.get("CARVE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RareEventUnderflow as exc:
        print(f"rare-event underflow: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
