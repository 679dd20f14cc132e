from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from citorus.estimate_harness import (
    EXPONENT_INEQUALITIES,
    CommutatorSweepConfig,
    amplitude_bound,
    band_limited_scalar,
    cet_check,
    cet_ladder,
    check_exponent_inequalities,
    commutator_ladder,
    commutator_sweep,
    composition_norm_check,
    composition_sweep,
    derivative_magnitude2,
    dyadic_tail_check,
    fit_slope,
    gaussian_spectrum_scalar,
    oscillating_scalar,
    scalar_map,
)
from citorus.spectral_torus import ContractError, Field, gradient_lp_norm, lp_norm, make_grid, scalar_field

BETA, B, ALPHA = F(1, 200), F(5), F(1, 10**6)


def _by_name(results):
    return {r.name: r for r in results}


@pytest.fixture(scope="module")
def results():
    return _by_name(check_exponent_inequalities(BETA, B, ALPHA, 4))


class TestExponentLedger:
    def test_all_hold(self, results):
        assert len(results) == len(EXPONENT_INEQUALITIES)
        assert all(r.holds for r in results.values())

    def test_linear_margin(self, results):
        assert results["linear_error"].margin == F(2, 25)

    def test_corrector_margin_is_thin(self, results):
        # independent evaluation: -2 b beta - ((1 - beta + 2 alpha)/b - 1/4)
        want = -2 * B * BETA - ((1 - BETA + 2 * ALPHA) / B - F(1, 4))
        assert results["quadratic_error_corrector"].margin == want == F(2499, 2500000)

    def test_oscillation_margin(self, results):
        lhs = -(1 + ALPHA) / 4 + (1 - BETA + ALPHA) * (1 + ALPHA) / B - BETA
        assert results["oscillation_error"].margin == -2 * B * BETA - lhs
        assert results["oscillation_error"].margin == F(29999254999, 5000000000000)

    def test_principal_margin(self, results):
        L = (1 + ALPHA - BETA) / B + BETA
        lhs = F(5, 2) * L - BETA - F(3, 4) * F(3, 2)
        assert results["quadratic_error_principal"].margin == -2 * B * BETA - lhs

    def test_large_beta_breaks_oscillation(self):
        res = _by_name(check_exponent_inequalities(F(1, 10), B, ALPHA, 4))
        assert not res["oscillation_error"].holds

    def test_json_is_exact(self, results):
        j = results["linear_error"].to_json()
        assert j["margin"] == "2/25" and j["holds"] is True

    @pytest.mark.parametrize("bad", [0.005, 1e-6])
    def test_floats_rejected(self, bad):
        with pytest.raises(ContractError):
            check_exponent_inequalities(bad, B, ALPHA, 4)

    def test_string_rationals_accepted(self):
        res = check_exponent_inequalities("1/200", "5", "1/1000000", 4)
        assert all(r.holds for r in res)

    def test_nonpositive_rejected(self):
        with pytest.raises(ContractError):
            check_exponent_inequalities(F(0), B, ALPHA, 4)

    @settings(max_examples=40, deadline=None)
    @given(num=st.integers(1, 50), den=st.integers(100, 2000), d=st.integers(2, 6))
    def test_margin_sign_matches_holds(self, num, den, d):
        for r in check_exponent_inequalities(F(num, den), B, ALPHA, d):
            assert r.holds == (r.margin > 0 if r.inequality.strict else r.margin >= 0)


class TestHelpers:
    def test_fit_slope_power_law(self):
        x = [2, 4, 8, 16]
        assert fit_slope(x, [3 * t**-1.5 for t in x]) == pytest.approx(-1.5)

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_derivative_tensor_of_mode(self, m):
        grid = make_grid(2, 32)
        x = grid.coordinate(0) + grid.coordinate(1)
        f = scalar_field(grid, np.sin(2 * np.pi * x))
        mag2 = derivative_magnitude2(f.spectral()[0], grid, m)
        # every entry of the m-th derivative tensor has modulus (2 pi)^m |sin or cos|
        assert np.sqrt(mag2.max()) == pytest.approx((2 * np.pi) ** m * 2 ** (m / 2), rel=1e-10)

    def test_first_derivative_matches_gradient_norm(self):
        grid = make_grid(2, 32)
        f = band_limited_scalar(grid, 3, np.random.default_rng(0), mean=0.0)
        mag2 = derivative_magnitude2(f.spectral()[0], grid, 1)
        assert np.sqrt(mag2.mean()) == pytest.approx(gradient_lp_norm(f, 2), rel=1e-12)


class TestCommutator:
    def test_config_needs_scale_separation(self):
        with pytest.raises(ContractError):
            CommutatorSweepConfig(mu=8, sigma=8)

    def test_oscillating_scalar_lattice(self):
        grid = make_grid(2, 64)
        g = oscillating_scalar(grid, 8, np.random.default_rng(0))
        assert lp_norm(g, 2) == pytest.approx(1.0)
        # invariant under shifts by 1/sigma
        assert np.allclose(np.roll(g.values, 8, axis=1), g.values)

    def test_constant_amplitude_product(self):
        grid = make_grid(2, 64)
        f = oscillating_scalar(grid, 8, np.random.default_rng(1))
        a = Field(grid, np.ones((1,) + grid.shape), 0)
        m = commutator_sweep(CommutatorSweepConfig(2, 8), a, f)
        assert m.product_norm == pytest.approx(lp_norm(f, 2), rel=1e-14)

    def test_amplitude_bound_of_constant(self):
        grid = make_grid(2, 32)
        a = Field(grid, np.full((1,) + grid.shape, 2.5), 0)
        assert amplitude_bound(a, 2, 4) == pytest.approx(2.5)

    def test_ladder(self):
        lad = commutator_ladder(seed=3)
        assert lad["holder_drift"] <= 0.2
        assert lad["smoothing_slopes"]["0"] == pytest.approx(-1.0, abs=0.2)
        assert lad["smoothing_slopes"]["1/2"] == pytest.approx(-0.5, abs=0.2)

    def test_odd_p_rejected(self):
        grid = make_grid(2, 64)
        f = oscillating_scalar(grid, 8, np.random.default_rng(1))
        a = band_limited_scalar(grid, 2, np.random.default_rng(2))
        with pytest.raises(ContractError):
            commutator_sweep(CommutatorSweepConfig(2, 8, p=3), a, f)


class TestDyadic:
    def test_band_limited_is_vacuous(self):
        grid = make_grid(2, 128)
        a = band_limited_scalar(grid, 2, np.random.default_rng(0))
        t = dyadic_tail_check(a, 2, 32, 6, 10)
        assert t["vacuous"] and t["decay_ok"] and t["triangle_ok"]

    def test_gaussian_decays(self):
        grid = make_grid(2, 256)
        t = dyadic_tail_check(gaussian_spectrum_scalar(grid, 2.0), 2, 32, 8, 10)
        assert t["decay_ok"] and not t["vacuous"] and t["triangle_ok"]


class TestMollificationCommutator:
    @pytest.mark.parametrize("m,target", [(0, 2.0), (1, 1.0), (2, 0.0)])
    def test_coupled_slopes(self, m, target):
        assert cet_ladder(m)["slope"] == pytest.approx(target, abs=0.2)

    def test_fixed_pair_bounded(self):
        lad = cet_ladder(0, eps=(F(1, 4), F(1, 8), F(1, 16)), coupled=False)
        assert lad["ratio_spread"] <= 1.0

    def test_constant_factor_commutes(self):
        grid = make_grid(2, 64)
        g = gaussian_spectrum_scalar(grid, 3.0)
        c = Field(grid, np.full((1,) + grid.shape, 2.0), 0)
        assert max(r["lhs"] for r in cet_check(c, g, [1 / 8], 0)) <= 1e-13


class TestComposition:
    def test_identity_ratio_one(self):
        assert composition_sweep("identity", 2, samples=3)["max_ratio"] == pytest.approx(1.0)

    def test_square_of_sine(self):
        grid = make_grid(2, 64)
        u = Field(grid, np.sin(2 * np.pi * grid.coordinate(0))[None] + np.zeros((1,) + grid.shape), 0)
        assert composition_norm_check(scalar_map("square"), u, 1)["ratio"] == pytest.approx(0.5, rel=1e-10)

    @pytest.mark.parametrize("name", ["cube", "cos", "sin", "exp"])
    def test_bounded(self, name):
        assert composition_sweep(name, 2, samples=5)["max_ratio"] < 50

    def test_unknown_map(self):
        with pytest.raises(ContractError):
            scalar_map("tan")
