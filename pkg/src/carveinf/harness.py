"""Two-stage simulation harness.

Per replication: draw a triangular-array sample, run the selection rule on
the stage-one (randomized) statistic, then compute carved pivots and
confidence intervals on the full-data statistic conditioned on the selection,
together with the data-splitting intervals that use stage two alone.
Replications are keyed by RngStream stream ids, so results are reproducible
and independent of how they are scheduled across processes.
"""

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import RareEventUnderflow
from .families import GenerativeSpec, sample_triangular_array
from .gauss import QuadratureConfig, RngStream
from .selection import ScreeningRule, screen_bh, screen_threshold, screen_top_d
from .seq import SeqCarveProblem, seq_confidence_interval, seq_pivot, split_interval

CSV_SCHEMA = "carve-replications-1"
CSV_COLUMNS = [
    "rep", "empty", "selected", "signs", "pivots",
    "ci_lower", "ci_upper", "split_lower", "split_upper",
    "truth", "covered", "split_covered", "error",
]


@dataclass
class ExperimentConfig:
    n1: int
    n2: int
    rule: ScreeningRule
    replications: int
    master_seed: int
    sqrt_n_beta: np.ndarray
    family: str = "gaussian"
    randomization_mode: str = "gaussian"  # or "implicit_carving"
    level: float = 0.90
    compute_ci: bool = False
    Sigma: np.ndarray = None
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 1:
            raise ValueError("need n1 >= 2 and n2 >= 1")
        if self.replications < 100:
            raise ValueError("replications must be >= 100")
        if self.randomization_mode not in ("gaussian", "implicit_carving"):
            raise ValueError(f"unknown randomization mode: {self.randomization_mode}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        self.sqrt_n_beta = np.atleast_1d(np.asarray(self.sqrt_n_beta, dtype=float))

    @property
    def rho2(self):
        return self.n2 / self.n1

    @property
    def rho(self):
        return float(np.sqrt(self.rho2))


@dataclass
class ReplicationRecord:
    rep: int
    empty: bool
    selected: list
    signs: list
    pivots: list
    ci_lower: list
    ci_upper: list
    split_lower: list
    split_upper: list
    truth: list
    error: str = ""

    def covered(self):
        return [lo <= t <= hi for lo, hi, t in
                zip(self.ci_lower, self.ci_upper, self.truth)]

    def split_covered(self):
        return [lo <= t <= hi for lo, hi, t in
                zip(self.split_lower, self.split_upper, self.truth)]


def _apply_rule(rule, v):
    if rule.variant == "threshold":
        return screen_threshold(v, rule.lam)
    if rule.variant == "top_d":
        return screen_top_d(v, rule.d)
    if rule.variant == "bh":
        return screen_bh(v, rule.alpha)
    raise ValueError(f"harness does not support rule variant {rule.variant}")


def _selection_offsets(outcome):
    """Per selected coordinate: (sign, cutoff on the stage-one statistic scale)."""
    info = outcome.threshold_info
    if outcome.rule.variant == "threshold":
        return [(1.0, float(c)) for c in info["lambda"]]
    if outcome.rule.variant == "top_d":
        c = info["abs_dplus1_stat"]
        return [(float(s), c) for s in outcome.signs]
    if outcome.rule.variant == "bh":
        c = info["tau"]
        return [(float(s), c) for s in outcome.signs]
    raise ValueError(f"unsupported rule variant {outcome.rule.variant}")


def _run_replication(cfg, rep):
    rng = RngStream(cfg.master_seed, rep)
    gen = rng.generator()
    n1, n2 = cfg.n1, cfg.n2
    n = n1 + n2
    rho = cfg.rho
    d = cfg.sqrt_n_beta.size
    spec = GenerativeSpec(cfg.family, cfg.sqrt_n_beta, cfg.Sigma)
    data = sample_triangular_array(spec, n, gen)

    z_full = np.sqrt(n) * data.mean(axis=0)
    if cfg.randomization_mode == "implicit_carving":
        w = np.sqrt(n) * (data[:n1].mean(axis=0) - data.mean(axis=0))
    else:
        w = rho * (gen.standard_normal(d) @ spec._chol.T)
    inflate = np.sqrt(1.0 + cfg.rho2)
    v = (z_full + w) / inflate  # stage-one scale randomized statistic

    outcome = _apply_rule(cfg.rule, v)
    rec = ReplicationRecord(
        rep=rep, empty=outcome.empty, selected=[], signs=[], pivots=[],
        ci_lower=[], ci_upper=[], split_lower=[], split_upper=[], truth=[],
    )
    if outcome.empty:
        return rec

    z2 = np.sqrt(n2) * data[n1:].mean(axis=0)
    try:
        for (sign, cutoff), j in zip(_selection_offsets(outcome), outcome.selected):
            m_true = float(cfg.sqrt_n_beta[j])
            prob = SeqCarveProblem(m_true, rho, inflate * cutoff, sign)
            piv = seq_pivot(float(z_full[j]), prob, cfg.quad)
            rec.selected.append(int(j))
            rec.signs.append(float(sign))
            rec.pivots.append(piv.value)
            rec.truth.append(m_true)
            if cfg.compute_ci:
                ci = seq_confidence_interval(
                    float(z_full[j]), rho, inflate * cutoff, sign,
                    cfg.level, cfg.quad,
                )
                sp = split_interval(float(z2[j]), n, n2, cfg.level)
                rec.ci_lower.append(ci.lower)
                rec.ci_upper.append(ci.upper)
                rec.split_lower.append(sp.lower)
                rec.split_upper.append(sp.upper)
    except RareEventUnderflow as exc:
        rec.error = f"RareEventUnderflow: {exc}"
    return rec


def _run_chunk(args):
    cfg, reps = args
    return [_run_replication(cfg, r) for r in reps]


def run_two_stage(cfg, jobs=1):
    """Runs all replications; per-replication errors are recorded in the
    records, never raised.  Output is identical for any jobs value."""
    reps = list(range(cfg.replications))
    if jobs <= 1:
        records = [_run_replication(cfg, r) for r in reps]
    else:
        chunks = [reps[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, [(cfg, c) for c in chunks]))
        records = [rec for part in parts for rec in part]
        records.sort(key=lambda rec: rec.rep)
    return records


def pooled_pivots(records):
    return [p for rec in records for p in rec.pivots if not rec.error]


def uniformity_report(pivots):
    """Kolmogorov-Smirnov distance of the pivots from Unif(0,1)."""
    pivots = np.sort(np.asarray(pivots, dtype=float))
    n = pivots.size
    if n < 100:
        raise ValueError("need at least 100 pivots")
    grid_hi = np.arange(1, n + 1) / n
    grid_lo = np.arange(0, n) / n
    ks = float(max(np.max(grid_hi - pivots), np.max(pivots - grid_lo)))
    return ks, n


def coverage_report(records, level):
    carved_hits, split_hits = [], []
    carved_lengths, split_lengths = [], []
    for rec in records:
        if rec.error or rec.empty or not rec.ci_lower:
            continue
        carved_hits.extend(rec.covered())
        split_hits.extend(rec.split_covered())
        carved_lengths.extend(
            hi - lo for lo, hi in zip(rec.ci_lower, rec.ci_upper)
        )
        split_lengths.extend(
            hi - lo for lo, hi in zip(rec.split_lower, rec.split_upper)
        )
    if len(carved_hits) < 100:
        raise ValueError("need at least 100 intervals")
    n = len(carved_hits)
    carved = float(np.mean(carved_hits))
    split = float(np.mean(split_hits))
    return {
        "level": level,
        "n_intervals": n,
        "carved_coverage": carved,
        "carved_se": float(np.sqrt(carved * (1 - carved) / n)),
        "split_coverage": split,
        "split_se": float(np.sqrt(split * (1 - split) / n)),
        "median_length_carved": float(np.median(carved_lengths)),
        "median_length_split": float(np.median(split_lengths)),
    }


def regime_sweep(base_cfg, gamma_list, n_list, jobs=1, beta_bar=None):
    """KS distance of pooled pivots along sqrt(n)beta = -n^gamma |beta_bar|.

    n in n_list is the total sample size, split evenly between stages.
    """
    d = base_cfg.sqrt_n_beta.size
    if beta_bar is None:
        beta_bar = np.ones(d)
    beta_bar = np.abs(np.asarray(beta_bar, dtype=float))
    rows = []
    for gamma in gamma_list:
        if not 0.0 <= gamma < 0.5:
            raise ValueError("gamma must lie in [0, 1/2)")
        for n in n_list:
            n1 = n // 2
            cfg = ExperimentConfig(
                n1=n1, n2=n - n1, rule=base_cfg.rule,
                replications=base_cfg.replications,
                master_seed=base_cfg.master_seed,
                sqrt_n_beta=-(n ** gamma) * beta_bar,
                family=base_cfg.family,
                randomization_mode=base_cfg.randomization_mode,
                level=base_cfg.level, compute_ci=False,
                Sigma=base_cfg.Sigma, quad=base_cfg.quad,
            )
            records = run_two_stage(cfg, jobs=jobs)
            pivots = pooled_pivots(records)
            underflows = sum(1 for rec in records if rec.error)
            row = {
                "gamma": gamma,
                "n": n,
                "family": cfg.family,
                "mode": cfg.randomization_mode,
                "n_pivots": len(pivots),
                "n_empty": sum(1 for rec in records if rec.empty),
                "n_underflow": underflows,
            }
            row["ks"] = uniformity_report(pivots)[0] if len(pivots) >= 100 else None
            rows.append(row)
    return rows


def _join(values, fmt=repr):
    return ";".join(fmt(v) for v in values)


def records_to_csv(records):
    """Frozen, versioned CSV layout: one row per replication, multi-valued
    fields joined by ';' within a cell."""
    buf = io.StringIO()
    buf.write(f"# schema={CSV_SCHEMA}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow([
            rec.rep,
            int(rec.empty),
            _join(rec.selected, str),
            _join(rec.signs),
            _join(rec.pivots),
            _join(rec.ci_lower),
            _join(rec.ci_upper),
            _join(rec.split_lower),
            _join(rec.split_upper),
            _join(rec.truth),
            _join([int(c) for c in rec.covered()], str),
            _join([int(c) for c in rec.split_covered()], str),
            rec.error,
        ])
    return buf.getvalue()


def summarize(cfg, records):
    pivots = pooled_pivots(records)
    summary = {
        "n1": cfg.n1,
        "n2": cfg.n2,
        "rho2": cfg.rho2,
        "family": cfg.family,
        "randomization_mode": cfg.randomization_mode,
        "rule": cfg.rule.variant,
        "replications": cfg.replications,
        "master_seed": cfg.master_seed,
        "level": cfg.level,
        "n_pivots": len(pivots),
        "n_empty": sum(1 for rec in records if rec.empty),
        "n_errors": sum(1 for rec in records if rec.error),
    }
    if len(pivots) >= 100:
        ks, n = uniformity_report(pivots)
        summary["ks_distance"] = ks
    else:
        summary["ks_distance"] = None
        summary["ks_reason"] = "fewer than 100 pivots"
    if cfg.compute_ci:
        try:
            summary["coverage"] = coverage_report(records, cfg.level)
        except ValueError as exc:
            summary["coverage"] = None
            summary["coverage_reason"] = str(exc)
    return summary


def summary_to_json(summary):
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"
