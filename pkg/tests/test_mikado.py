import itertools

import numpy as np
import pytest

from citorus.estimate_harness import fit_slope
from citorus.matrix_geometry import build_direction_set, gamma_squared
from citorus.mikado import (
    PlacementWarning,
    axial_tube_section,
    build_profile,
    bump,
    check_tube_resolution,
    default_offset,
    line_distance2,
    mikado_flow,
    periodic_line_distance,
    place_lines,
    tube_field,
    tube_samples,
)
from citorus.spectral_torus import (
    ContractError,
    ResolutionError,
    divergence_values,
    lp_norm,
    make_grid,
    sym_pairs,
)


@pytest.fixture(scope="module")
def fam3():
    return place_lines(build_direction_set(3), ncount=1)


@pytest.fixture(scope="module")
def grid3():
    return make_grid(3, 64)


class TestProfile:
    @pytest.mark.parametrize("d", [3, 4, 5])
    def test_weighted_mean_vanishes(self, d):
        prof = build_profile(d)
        assert abs(prof.weighted_mean) < 1e-12
        assert prof.weighted_square > 0

    def test_support(self):
        prof = build_profile(4)
        r = np.array([0.0, 0.3, 0.5, 1.0, 1.7])
        assert np.all(prof(r) == 0.0)
        assert np.all(bump(np.array([0.6, 0.75, 0.9])) > 0)

    def test_low_dimension_rejected(self):
        with pytest.raises(ContractError):
            build_profile(2)


class TestPlacement:
    def test_certificate_matches_pairs(self, fam3):
        keys = sorted(fam3.anchors)
        dists = [line_distance2(fam3.anchors[x], fam3.ds.K[x[1]], fam3.anchors[y], fam3.ds.K[y[1]])
                 for x, y in itertools.combinations(keys, 2)]
        assert min(dists) == fam3.min_distance2 > 0

    def test_mu0_values(self):
        assert place_lines(build_direction_set(4), ncount=2).mu0 == pytest.approx(13.856, abs=1e-3)
        assert place_lines(build_direction_set(3), ncount=1).mu0 == pytest.approx(10.392, abs=1e-3)

    def test_warning_when_target_missed(self):
        with pytest.warns(PlacementWarning):
            fam = place_lines(build_direction_set(3), ncount=1, mu0_target=2.0)
        assert fam.warning

    def test_parallel_lines_distance(self):
        from fractions import Fraction as F
        k = (1, 0, 0)
        d2 = line_distance2((F(0), F(0), F(0)), k, (F(0), F(1, 4), F(1, 4)), k)
        assert d2 == F(1, 8)

    def test_distance_grid_matches_closed_form(self):
        p = np.array([0.1, 0.2, 0.3])
        dist = periodic_line_distance(16, p, (1, 0, 0))
        y = np.arange(16) / 16 - 0.2
        z = np.arange(16) / 16 - 0.3
        y -= np.round(y)
        z -= np.round(z)
        want = np.sqrt(y[:, None] ** 2 + z[None, :] ** 2)
        assert np.allclose(dist[0], want)
        assert np.allclose(dist[5], want)


class TestTubes:
    def test_normalization(self, fam3, grid3):
        prof = build_profile(3)
        for n in range(fam3.ds.size):
            psi = tube_field(fam3, prof, 0, n, 12, grid3, min_points_per_radius=4).values[0]
            assert np.mean(psi * psi) == pytest.approx(1.0, abs=1e-12)
            assert abs(np.mean(psi)) < 1e-12

    def test_support_radius(self, fam3, grid3):
        prof = build_profile(3)
        n = 2
        psi = tube_field(fam3, prof, 0, n, 12, grid3, min_points_per_radius=4).values[0]
        dist = periodic_line_distance(64, fam3.anchor(0, n), fam3.ds.K[n])
        assert not np.any(psi[dist >= 1 / 12])

    def test_oscillation_tiles(self, fam3):
        prof = build_profile(3)
        grid = make_grid(3, 64)
        fine = tube_field(fam3, prof, 0, 0, 12, grid, sigma=2, min_points_per_radius=2).values[0]
        ts = tube_samples(prof, fam3.anchor(0, 0), fam3.ds.K[0], 12, 32)
        assert np.array_equal(fine, np.tile(ts.dense_base(), (2, 2, 2)))

    def test_resolution_guard(self):
        with pytest.raises(ResolutionError, match="under-resolved"):
            check_tube_resolution(64, 1, 16, 13.8, 8)
        with pytest.raises(ContractError, match="mu0"):
            check_tube_resolution(64, 1, 10, 13.8, 1)
        with pytest.raises(ResolutionError):
            check_tube_resolution(64, 3, 16, 13.8, 1)


@pytest.fixture(scope="module")
def flow(fam3, grid3):
    R = np.eye(3) + 0.2 * np.array([[0.5, 0.3, 0], [0.3, -0.2, 0.1], [0, 0.1, 0.4]])
    W = mikado_flow(fam3, build_profile(3), 0, R, 12, 1, grid3, min_points_per_radius=4)
    return R, W


class TestFlow:
    def test_divergence_free(self, flow, grid3):
        _, W = flow
        div = divergence_values(W.values, 1, grid3)
        assert np.max(np.abs(div)) <= 1e-10 * lp_norm(W, np.inf)

    def test_tensor_identity(self, flow, fam3, grid3):
        R, W = flow
        ds = fam3.ds
        g2 = gamma_squared(ds, R)
        prof = build_profile(3)
        tubes = [tube_samples(prof, fam3.anchor(0, n), k, 12, 64).dense_base() for n, k in enumerate(ds.K)]
        for a, b in sym_pairs(3):
            acc = W.values[a] * W.values[b] - R[a, b]
            for n, k in enumerate(ds.K):
                acc -= g2[n] * k[a] * k[b] * (tubes[n] ** 2 - 1)
            assert np.max(np.abs(acc)) <= 1e-10

    def test_mean_of_outer_product(self, flow):
        R, W = flow
        flat = W.values.reshape(3, -1)
        M = flat @ flat.T / flat.shape[1]
        assert np.allclose(M, R, atol=1e-10)

    def test_distinct_families_disjoint(self):
        fam = place_lines(build_direction_set(3), ncount=2)
        grid = make_grid(3, 128)
        prof = build_profile(3)
        W0 = mikado_flow(fam, prof, 0, np.eye(3), 24, 1, grid, min_points_per_radius=4)
        W1 = mikado_flow(fam, prof, 1, np.eye(3), 24, 1, grid, min_points_per_radius=4)
        assert np.all(np.abs(W0.values).sum(0) * np.abs(W1.values).sum(0) == 0)


class TestScaling:
    @pytest.mark.parametrize("p,target", [(1, -1.0), (2, 0.0), (np.inf, 1.0)])
    def test_section_slopes_three_dimensions(self, p, target):
        grid = make_grid(2, 256)
        prof = build_profile(3)
        mus = (8, 16, 32)
        norms = [lp_norm(axial_tube_section(prof, m, grid, default_offset(3)[1:]), p) for m in mus]
        assert fit_slope(mus, norms) == pytest.approx(target, abs=0.1)

    @pytest.mark.parametrize("p,target", [(1, 0.0), (2, 1.0), (np.inf, 2.0)])
    def test_gradient_section_slopes(self, p, target):
        grid = make_grid(2, 512)
        prof = build_profile(3)
        mus = (8, 16, 32)
        norms = [lp_norm(axial_tube_section(prof, m, grid, default_offset(3)[1:], gradient=True), p)
                 for m in mus]
        assert fit_slope(mus, norms) == pytest.approx(target, abs=0.1)

    def test_section_grid_dimension(self):
        with pytest.raises(ContractError):
            axial_tube_section(build_profile(4), 8, make_grid(2, 64))
