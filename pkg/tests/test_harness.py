import json

import numpy as np
import pytest

from carveinf.families import FAMILIES, GenerativeSpec, sample_triangular_array
from carveinf.gauss import RngStream
from carveinf.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    coverage_report,
    pooled_pivots,
    records_to_csv,
    regime_sweep,
    run_two_stage,
    summarize,
    summary_to_json,
    uniformity_report,
)
from carveinf.selection import ScreeningRule


def _threshold_cfg(**kw):
    base = dict(
        n1=50,
        n2=50,
        rule=ScreeningRule("threshold", lam=np.zeros(4)),
        replications=400,
        master_seed=7,
        sqrt_n_beta=np.zeros(4),
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestFamilies:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_standardization(self, family):
        spec = GenerativeSpec(family, np.zeros(3))
        x = sample_triangular_array(spec, 400_000, RngStream(1, 0))
        assert np.allclose(x.mean(axis=0), 0.0, atol=0.01)
        assert np.allclose(x.var(axis=0), 1.0, atol=0.02)

    def test_mean_shift_and_mixing(self):
        Sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
        spec = GenerativeSpec("uniform", np.array([3.0, -1.0]), Sigma)
        n = 200_000
        x = sample_triangular_array(spec, n, RngStream(1, 1))
        assert np.allclose(x.mean(axis=0), spec.sqrt_n_beta / np.sqrt(n), atol=0.01)
        assert np.allclose(np.cov(x.T), Sigma, atol=0.03)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            GenerativeSpec("cauchy", np.zeros(1))

    def test_non_pd_sigma_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            GenerativeSpec("gaussian", np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestConfig:
    def test_replication_floor(self):
        with pytest.raises(ValueError):
            _threshold_cfg(replications=50)

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            _threshold_cfg(randomization_mode="bootstrap")

    def test_rho(self):
        cfg = _threshold_cfg(n1=50, n2=200)
        assert cfg.rho2 == pytest.approx(4.0)
        assert cfg.rho == pytest.approx(2.0)


class TestRunTwoStage:
    def test_determinism_across_jobs(self):
        cfg = _threshold_cfg(replications=120)
        solo = run_two_stage(cfg, jobs=1)
        multi = run_two_stage(cfg, jobs=2)
        assert records_to_csv(solo) == records_to_csv(multi)

    def test_rerun_is_byte_identical(self):
        cfg = _threshold_cfg(replications=120)
        a = records_to_csv(run_two_stage(cfg))
        b = records_to_csv(run_two_stage(cfg))
        assert a == b

    def test_seed_changes_output(self):
        a = records_to_csv(run_two_stage(_threshold_cfg(replications=120)))
        b = records_to_csv(
            run_two_stage(_threshold_cfg(replications=120, master_seed=8))
        )
        assert a != b

    def test_empty_selections_recorded(self):
        cfg = _threshold_cfg(
            rule=ScreeningRule("threshold", lam=np.full(4, 50.0)),
            replications=100,
        )
        records = run_two_stage(cfg)
        assert all(rec.empty for rec in records)
        assert pooled_pivots(records) == []

    def test_pivots_uniform_under_null_gaussian_mode(self):
        cfg = _threshold_cfg(
            rule=ScreeningRule("threshold", lam=np.ones(4)), replications=1500
        )
        records = run_two_stage(cfg)
        pivots = pooled_pivots(records)
        ks, n = uniformity_report(pivots)
        assert n > 800
        # null 95th percentile of the KS statistic is about 1.36/sqrt(n)
        assert ks < 1.8 / np.sqrt(n)

    def test_implicit_and_gaussian_modes_agree_in_distribution(self):
        # the implicit randomization is exactly Gaussian-like at finite n for
        # Gaussian data, so the pooled pivot samples must match in law
        base = dict(replications=1200, rule=ScreeningRule("threshold", lam=np.zeros(5)),
                    sqrt_n_beta=np.zeros(5), n1=40, n2=40, master_seed=77)
        piv_g = np.sort(pooled_pivots(run_two_stage(
            ExperimentConfig(randomization_mode="gaussian", **base))))
        piv_i = np.sort(pooled_pivots(run_two_stage(
            ExperimentConfig(randomization_mode="implicit_carving", **base))))
        # two-sample KS
        allv = np.concatenate([piv_g, piv_i])
        cdf_g = np.searchsorted(piv_g, allv, side="right") / piv_g.size
        cdf_i = np.searchsorted(piv_i, allv, side="right") / piv_i.size
        ks2 = float(np.max(np.abs(cdf_g - cdf_i)))
        crit = 1.8 * np.sqrt((piv_g.size + piv_i.size) / (piv_g.size * piv_i.size))
        assert ks2 < crit

    def test_top_d_rule_runs(self):
        cfg = _threshold_cfg(rule=ScreeningRule("top_d", d=2), replications=150)
        records = run_two_stage(cfg)
        assert all(len(rec.selected) == 2 for rec in records)
        assert all(0.0 <= p <= 1.0 for p in pooled_pivots(records))

    def test_bh_rule_runs(self):
        cfg = _threshold_cfg(rule=ScreeningRule("bh", alpha=0.2), replications=300)
        records = run_two_stage(cfg)
        assert any(not rec.empty for rec in records)
        assert all(0.0 <= p <= 1.0 for p in pooled_pivots(records))


class TestReports:
    def test_uniformity_floor(self):
        with pytest.raises(ValueError):
            uniformity_report(np.linspace(0, 1, 50))

    def test_uniformity_on_exact_grid(self):
        # evenly spaced mid-grid points have KS distance 1/(2n)
        n = 1000
        ks, got_n = uniformity_report((np.arange(n) + 0.5) / n)
        assert got_n == n
        assert ks == pytest.approx(0.5 / n, abs=1e-12)

    def test_coverage_matches_nominal(self):
        cfg = _threshold_cfg(
            rule=ScreeningRule("threshold", lam=np.zeros(3)),
            sqrt_n_beta=np.zeros(3),
            replications=700,
            compute_ci=True,
            level=0.9,
        )
        records = run_two_stage(cfg, jobs=2)
        rep = coverage_report(records, 0.9)
        assert abs(rep["carved_coverage"] - 0.9) < 4 * rep["carved_se"] + 0.01
        assert abs(rep["split_coverage"] - 0.9) < 4 * rep["split_se"] + 0.01
        assert rep["median_length_carved"] > 0

    def test_coverage_floor(self):
        cfg = _threshold_cfg(replications=100)
        records = run_two_stage(cfg)
        with pytest.raises(ValueError):
            coverage_report(records, 0.9)


class TestRegimeSweep:
    def test_rows_and_gamma_domain(self):
        base = _threshold_cfg(
            rule=ScreeningRule("threshold", lam=np.zeros(3)),
            sqrt_n_beta=np.zeros(3),
            replications=150,
        )
        rows = regime_sweep(base, [0.0], [60, 120], jobs=2)
        assert [r["n"] for r in rows] == [60, 120]
        assert all(r["ks"] is None or 0 <= r["ks"] <= 1 for r in rows)
        with pytest.raises(ValueError):
            regime_sweep(base, [0.7], [60])


class TestSerialization:
    def test_csv_layout(self):
        cfg = _threshold_cfg(replications=100)
        text = records_to_csv(run_two_stage(cfg))
        lines = text.split("\n")
        assert lines[0] == "# schema=carve-replications-1"
        assert lines[1] == ",".join(CSV_COLUMNS)
        assert len(lines) == 2 + 100 + 1  # header lines + rows + trailing newline

    def test_csv_pivots_round_trip(self):
        cfg = _threshold_cfg(replications=100)
        records = run_two_stage(cfg)
        text = records_to_csv(records)
        import csv as csvmod
        import io

        rows = list(csvmod.reader(io.StringIO(text.split("\n", 1)[1])))
        header = rows[0]
        pcol = header.index("pivots")
        parsed = [
            float(v)
            for row in rows[1:]
            if row and row[pcol]
            for v in row[pcol].split(";")
        ]
        assert parsed == pooled_pivots(records)

    def test_summary_json(self):
        cfg = _threshold_cfg(replications=150, compute_ci=True)
        records = run_two_stage(cfg)
        summary = summarize(cfg, records)
        doc = json.loads(summary_to_json(summary))
        assert doc["replications"] == 150
        assert doc["rule"] == "threshold"
        assert 0 <= doc["ks_distance"] <= 1
        assert doc["coverage"]["n_intervals"] >= 100

    def test_summary_ks_recomputable_from_csv(self):
        cfg = _threshold_cfg(replications=200)
        records = run_two_stage(cfg)
        summary = summarize(cfg, records)
        text = records_to_csv(records)
        import csv as csvmod
        import io

        rows = list(csvmod.reader(io.StringIO(text.split("\n", 1)[1])))
        pcol = rows[0].index("pivots")
        pivots = [
            float(v)
            for row in rows[1:]
            if row and row[pcol]
            for v in row[pcol].split(";")
        ]
        assert uniformity_report(pivots)[0] == pytest.approx(
            summary["ks_distance"], abs=1e-15
        )
