import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carveinf.errors import RareEventUnderflow
from carveinf.gauss import QuadratureConfig, std_normal_quantile, std_normal_survival
from carveinf.seq import (
    SeqCarveProblem,
    invert_pivot,
    seq_carved_density,
    seq_confidence_interval,
    seq_pivot,
    seq_survival_factor,
    split_interval,
)


def _problem(m=0.0, rho=1.0, offset=0.0, sign=1.0):
    return SeqCarveProblem(m=m, rho=rho, offset=offset, sign=sign)


class TestProblemValidation:
    def test_rho_positive(self):
        with pytest.raises(ValueError):
            _problem(rho=0.0)

    def test_sign_domain(self):
        with pytest.raises(ValueError):
            _problem(sign=0.5)

    def test_finite_fields(self):
        with pytest.raises(ValueError):
            _problem(m=np.inf)


class TestSurvivalFactor:
    def test_monotone_in_value(self):
        prob = _problem(offset=1.0)
        vals = seq_survival_factor(np.linspace(-3, 3, 50), prob)
        assert np.all(np.diff(vals) > 0)

    def test_negative_sign_flips(self):
        up = seq_survival_factor(0.3, _problem(offset=1.0, sign=1.0))
        dn = seq_survival_factor(-0.3, _problem(m=0.0, offset=-1.0, sign=-1.0))
        assert up == pytest.approx(dn, rel=1e-12)

    def test_half_at_cutoff(self):
        prob = _problem(m=0.4, offset=1.1)
        assert seq_survival_factor(1.1 - 0.4, prob) == pytest.approx(0.5, abs=1e-14)


class TestPivotValues:
    def test_analytic_anchor(self):
        # m=0, rho=1, cutoff 0: the carved density is 2 phi(z) Phi(z), and
        # the upper-tail mass from 0 is exactly 3/4
        res = seq_pivot(0.0, _problem())
        assert res.value == pytest.approx(0.75, abs=1e-9)

    def test_denominator_is_selection_probability(self):
        # E[survival((c - Y)/rho)] over Y ~ N(m,1) has the closed form
        # survival((c - m)/sqrt(1+rho^2))
        for m, rho, c in [(0.0, 1.0, 1.5), (-2.0, 0.5, 1.0), (1.0, 2.0, -0.5)]:
            res = seq_pivot(0.0, _problem(m, rho, c))
            want = std_normal_survival((c - m) / np.sqrt(1 + rho * rho))
            assert res.denominator == pytest.approx(want, rel=1e-8)

    def test_rejection_sampling_oracle(self):
        m, rho, c, z = -2.0, 1.0, 1.5, 0.8
        rng = np.random.default_rng(2026)
        hits_num = hits_den = 0
        batch = 4_000_000
        y = rng.normal(m, 1.0, batch)
        accept = rng.uniform(size=batch) < std_normal_survival((c - y) / rho)
        hits_den = int(np.count_nonzero(accept))
        hits_num = int(np.count_nonzero(accept & (y > z)))
        assert hits_den > 5000
        oracle = hits_num / hits_den
        se = np.sqrt(oracle * (1 - oracle) / hits_den)
        res = seq_pivot(z, _problem(m, rho, c))
        assert abs(res.value - oracle) < 4 * se

    def test_no_selection_limit(self):
        # a cutoff far below the data makes the factor 1 and the pivot the
        # plain Gaussian upper tail
        res = seq_pivot(1.3, _problem(m=0.5, offset=-40.0))
        assert res.value == pytest.approx(std_normal_survival(1.3 - 0.5), abs=1e-8)

    def test_value_in_unit_interval_and_edges(self):
        prob = _problem(offset=1.0)
        assert seq_pivot(25.0, prob).value == 0.0
        assert seq_pivot(-25.0, prob).value == 1.0

    def test_reflection_symmetry(self):
        for z in (-1.0, 0.2, 2.5):
            a = seq_pivot(z, _problem(m=0.7, offset=1.2, sign=1.0)).value
            b = seq_pivot(-z, _problem(m=-0.7, offset=-1.2, sign=-1.0)).value
            assert a == pytest.approx(1.0 - b, abs=1e-8)

    def test_decreasing_in_z_obs(self):
        prob = _problem(m=-1.0, offset=1.0)
        vals = [seq_pivot(z, prob).value for z in np.linspace(-3, 4, 15)]
        assert all(x >= y - 1e-12 for x, y in zip(vals, vals[1:]))
        assert vals[0] > vals[-1]

    def test_increasing_in_m(self):
        vals = [
            seq_pivot(0.8, _problem(m=m, offset=1.5)).value
            for m in np.linspace(-4, 4, 17)
        ]
        assert all(y >= x - 1e-12 for x, y in zip(vals, vals[1:]))
        assert vals[-1] > vals[0]

    @given(
        st.floats(-3, 3), st.floats(0.3, 3), st.floats(-2, 2),
        st.sampled_from([-1.0, 1.0]),
    )
    @settings(max_examples=25, deadline=None)
    def test_pivot_always_in_unit_interval(self, m, rho, c, sign):
        res = seq_pivot(0.5, _problem(m, rho, c, sign))
        assert 0.0 <= res.value <= 1.0
        assert res.denominator > 0

    def test_underflow_raises(self):
        with pytest.raises(RareEventUnderflow):
            seq_pivot(0.0, _problem(m=0.0, offset=60.0))

    def test_rare_event_still_resolved_in_log_space(self):
        # denominator near e^-100 is fine as long as it stays above 1e-300
        res = seq_pivot(0.0, _problem(m=0.0, offset=20.0))
        want = std_normal_survival(20.0 / np.sqrt(2.0))
        assert res.denominator == pytest.approx(want, rel=1e-6)
        assert 0.0 <= res.value <= 1.0


class TestCarvedDensity:
    def test_normalizes_to_one(self):
        prob = _problem(m=-1.0, offset=1.0)
        grid = np.linspace(-10, 10, 4001)
        total = np.trapezoid(seq_carved_density(grid, prob), grid)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_histogram_of_accepted_draws(self):
        m, rho, c = 0.5, 1.0, 1.0
        prob = _problem(m, rho, c)
        rng = np.random.default_rng(7)
        y = rng.normal(m, 1.0, 2_000_000)
        keep = y[rng.uniform(size=y.size) < std_normal_survival((c - y) / rho)]
        # chi-square-style binned comparison against the analytic density
        edges = np.linspace(-3, 4, 29)
        counts, _ = np.histogram(keep - m, bins=edges)
        centers = 0.5 * (edges[:-1] + edges[1:])
        width = edges[1] - edges[0]
        expected = seq_carved_density(centers, prob) * width * keep.size
        mask = expected > 50
        z_scores = (counts[mask] - expected[mask]) / np.sqrt(expected[mask])
        assert np.max(np.abs(z_scores)) < 5.0

    def test_proportional_to_phi_times_factor(self):
        prob = _problem(m=0.3, offset=0.8)
        grid = np.array([-2.0, 0.0, 1.5])
        dens = seq_carved_density(grid, prob)
        raw = (np.exp(-0.5 * grid**2) / np.sqrt(2 * np.pi)) * seq_survival_factor(
            grid, prob
        )
        ratios = dens / raw
        assert np.allclose(ratios, ratios[0], rtol=1e-10)


class TestIntervals:
    def test_endpoints_hit_target_quantiles(self):
        z, rho, c, level = 1.4, 1.0, 1.0, 0.9
        ci = seq_confidence_interval(z, rho, c, 1.0, level)
        lo_piv = seq_pivot(z, _problem(ci.lower, rho, c)).value
        hi_piv = seq_pivot(z, _problem(ci.upper, rho, c)).value
        assert lo_piv == pytest.approx(0.05, abs=1e-7)
        assert hi_piv == pytest.approx(0.95, abs=1e-7)
        assert ci.lower < ci.upper
        assert ci.iterations > 0

    def test_nesting_across_levels(self):
        z, rho, c = 0.9, 0.8, 1.2
        ci80 = seq_confidence_interval(z, rho, c, 1.0, 0.80)
        ci95 = seq_confidence_interval(z, rho, c, 1.0, 0.95)
        assert ci95.lower < ci80.lower < ci80.upper < ci95.upper

    def test_level_domain(self):
        with pytest.raises(ValueError):
            seq_confidence_interval(0.0, 1.0, 0.0, 1.0, 1.0)

    def test_invert_pivot_on_gaussian_cdf(self):
        # with pivot(m) = Phi(m - z) the interval is the classical z-interval
        z = 0.7
        lo, hi, _ = invert_pivot(
            lambda m: 1.0 - std_normal_survival(m - z), z, 0.95
        )
        q = std_normal_quantile(0.975)
        assert lo == pytest.approx(z - q, abs=1e-8)
        assert hi == pytest.approx(z + q, abs=1e-8)

    def test_split_interval_closed_form(self):
        n, n2, level = 200, 100, 0.9
        z2 = 1.1
        ci = split_interval(z2, n, n2, level)
        scale = np.sqrt(n / n2)
        q = std_normal_quantile(0.95)
        assert ci.lower == pytest.approx(z2 * scale - q * scale, abs=1e-12)
        assert ci.upper == pytest.approx(z2 * scale + q * scale, abs=1e-12)


class TestQuadratureControls:
    def test_tighter_radius_changes_little_in_the_bulk(self):
        prob = _problem(m=0.0, offset=0.5)
        wide = seq_pivot(0.4, prob, QuadratureConfig(truncation_radius=12)).value
        default = seq_pivot(0.4, prob).value
        assert wide == pytest.approx(default, abs=1e-9)

    def test_reported_quadrature_error_is_small(self):
        res = seq_pivot(0.4, _problem(m=0.0, offset=0.5))
        assert res.quadrature_error < 1e-9
