from fractions import Fraction as F

import numpy as np
import pytest

from citorus import convex_integration as ci
from citorus.matrix_geometry import DomainError, build_direction_set
from citorus.mikado import build_profile, place_lines
from citorus.spectral_torus import lp_norm, make_grid

BETA, B, ALPHA = F(1, 200), F(5), F(1, 10**6)


def desk(lam_prev, mu, sigma):
    return ci.make_params(BETA, B, ALPHA, 2, 2, ci.DeskOverrides(lam_prev, mu, sigma))


@pytest.fixture(scope="module")
def fam_single():
    return place_lines(build_direction_set(3), ncount=1)


@pytest.fixture(scope="module")
def fam_pair():
    return place_lines(build_direction_set(3), ncount=2)


class TestParams:
    def test_desk_frequencies(self):
        p = desk(2, 16, 4)
        assert p.lam.factors == ((F(64), F(1)),)
        assert p.lam_next.value() == pytest.approx(64.0**5)
        assert p.mu.value() == pytest.approx(16) and p.sigma.value() == pytest.approx(4)

    def test_ladder_values_exact(self):
        p = ci.make_params(BETA, B, ALPHA, 2, 2)
        assert p.lam_at(1).factors == ((F(32), F(1)),)
        assert p.lam.factors == ((F(2**25), F(1)),)

    @pytest.mark.parametrize(
        "kwargs,match",
        [
            (dict(beta=F(1, 2), alpha=F(3, 4)), "alpha < beta"),
            (dict(b=F(1)), "b > 1"),
            (dict(overrides=ci.DeskOverrides(4, 16, 4)), "lam_prev < sigma"),
            (dict(overrides=ci.DeskOverrides(2, 4, 8)), "sigma < mu"),
        ],
    )
    def test_relations_enforced(self, kwargs, match):
        args = dict(beta=BETA, b=B, alpha=ALPHA, a=2, n=2, overrides=None)
        args.update(kwargs)
        with pytest.raises(ci.ParameterError, match=match):
            ci.make_params(**args)

    def test_floats_rejected(self):
        with pytest.raises((ci.ParameterError, ValueError)):
            ci.make_params(0.005, B, ALPHA, 2, 2)


class TestTriplets:
    def test_seed_is_exact_solution(self):
        t = ci.seed_triplet(make_grid(3, 16), np.random.default_rng(0), 2, 0.5)
        assert ci.nsr_residual(t)["relative"] <= 1e-12
        assert lp_norm(t.u, 2) == pytest.approx(0.5)
        assert np.max(np.abs(t.R.trace())) <= 1e-12

    def test_zero_triplet(self):
        assert ci.nsr_residual(ci.zero_triplet(make_grid(2, 16)))["relative"] == 0.0

    def test_mollification_keeps_closure(self):
        t = ci.seed_triplet(make_grid(3, 32), np.random.default_rng(1), 3, 1.0)
        t_l = ci.mollify_triplet(t, 0.15)
        assert ci.nsr_residual(t_l)["relative"] <= 1e-12
        assert np.max(np.abs(t_l.R.trace())) <= 1e-12


@pytest.fixture(scope="module")
def small_step(fam_single):
    t = ci.seed_triplet(make_grid(3, 32), np.random.default_rng(0), 2, 0.05)
    return ci.iterate_step(t, desk(1, 12, 2), fam_single, build_profile(3), min_points_per_radius=1,
                           keep_parts=True, split_diagnostics=True)


class TestStep:
    def test_identities(self, small_step):
        diag = small_step.diagnostics
        assert diag["failures"] == []
        assert diag["residual"]["relative"] <= 1e-8
        assert diag["velocity_divergence_relative"] <= 1e-8
        assert diag["partition_defect"] <= 1e-10
        assert diag["oscillation_identity"]["relative"] <= 1e-8

    def test_new_stress_trace_free(self, small_step):
        R = small_step.triplet.R
        assert np.max(np.abs(R.trace())) <= 1e-12 * max(lp_norm(R, np.inf), 1e-300)

    def test_parts_sum_to_stress(self, small_step):
        bd = small_step.breakdown
        total = sum(bd.parts[k].values for k in ("quadratic", "linear", "oscillation", "correction"))
        assert np.allclose(total, bd.R.values, atol=1e-12 * np.abs(bd.R.values).max())
        assert small_step.report.parts["triangle_ok"]

    def test_report_rows(self, small_step):
        rows = small_step.report.rows
        assert len(rows) == 6
        for r in rows:
            assert set(r) >= {"name", "measured", "target", "ratio", "formula"}

    def test_split_diagnostics(self, small_step):
        diag = small_step.diagnostics
        for key in ("oscillation_product_rule_l1", "oscillation_remainder_l1", "corrector_product_rule_ratio"):
            assert diag[key] >= 0

    def test_single_family_needs_single_shell(self, fam_single):
        t = ci.seed_triplet(make_grid(3, 32), np.random.default_rng(0), 2, 2.0)
        with pytest.raises(DomainError):
            ci.iterate_step(t, desk(1, 12, 2), fam_single, build_profile(3), min_points_per_radius=1)

    def test_several_shells_close(self, fam_pair):
        t = ci.seed_triplet(make_grid(3, 64), np.random.default_rng(3), 2, 2.0)
        res = ci.iterate_step(t, desk(1, 24, 2), fam_pair, build_profile(3), min_points_per_radius=1,
                              consume=True)
        assert len(res.diagnostics["shells"]) > 1
        assert res.diagnostics["failures"] == []

    def test_consume_matches_copy(self, fam_single):
        grid = make_grid(3, 32)
        a = ci.iterate_step(ci.seed_triplet(grid, np.random.default_rng(5), 2, 0.05), desk(1, 12, 2), fam_single,
                            build_profile(3), min_points_per_radius=1, keep_parts=True)
        b = ci.iterate_step(ci.seed_triplet(grid, np.random.default_rng(5), 2, 0.05), desk(1, 12, 2), fam_single,
                            build_profile(3), min_points_per_radius=1, keep_parts=False, consume=True)
        assert np.allclose(a.triplet.u.values, b.triplet.u.values, atol=1e-14)
        assert np.allclose(a.triplet.R.values, b.triplet.R.values, atol=1e-13)

    def test_under_resolved_tubes_rejected(self, fam_single):
        from citorus.spectral_torus import ResolutionError

        t = ci.seed_triplet(make_grid(3, 16), np.random.default_rng(0), 2, 0.05)
        with pytest.raises(ResolutionError):
            ci.iterate_step(t, desk(1, 12, 2), fam_single, build_profile(3))
