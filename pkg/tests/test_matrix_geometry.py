from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from citorus.matrix_geometry import (
    BALL_RADIUS,
    DomainError,
    build_direction_set,
    exact_rank,
    gamma,
    gamma_gradient,
    gamma_squared,
    positivity_certificate,
    reconstruct,
)
from citorus.spectral_torus import sym_pairs


def _ball_point(rng, d, radius):
    H = rng.standard_normal((d, d))
    H = (H + H.T) / 2
    return np.eye(d) + radius * rng.random() * H / np.linalg.norm(H)


@pytest.mark.parametrize("d", [2, 3, 4, 5])
class TestDirectionSet:
    def test_identity_decomposition_exact(self, d):
        ds = build_direction_set(d)
        total = [[Fraction(0)] * d for _ in range(d)]
        for c, k in zip(ds.base_coeffs, ds.K):
            for a in range(d):
                for b in range(d):
                    total[a][b] += c * k[a] * k[b]
        assert total == [[Fraction(int(a == b)) for b in range(d)] for a in range(d)]

    def test_spans_symmetric_matrices(self, d):
        ds = build_direction_set(d)
        rows = [[Fraction(k[a] * k[b]) for a, b in sym_pairs(d)] for k in ds.K]
        assert exact_rank(rows) == d * (d + 1) // 2

    def test_certificate(self, d):
        cert = positivity_certificate(build_direction_set(d))
        assert cert["holds"]
        assert cert["axis_lower_bound"] > 0

    def test_integer_directions(self, d):
        ds = build_direction_set(d)
        assert all(isinstance(c, int) for k in ds.K for c in k)
        assert len(set(ds.K)) == ds.size


def test_eps_at_four_dimensions():
    assert build_direction_set(4).eps == Fraction(1, 16)


def test_rank_of_dependent_rows():
    assert exact_rank([[Fraction(1), Fraction(2)], [Fraction(2), Fraction(4)]]) == 1


class TestGamma:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 5))
    def test_reconstruction(self, seed, d):
        ds = build_direction_set(d)
        R = _ball_point(np.random.default_rng(seed), d, BALL_RADIUS)
        assert np.max(np.abs(reconstruct(ds, gamma_squared(ds, R)) - R)) <= 1e-12

    def test_batched_matches_single(self):
        ds = build_direction_set(3)
        rng = np.random.default_rng(0)
        Rs = np.stack([_ball_point(rng, 3, 0.4) for _ in range(5)])
        batch = gamma(ds, Rs)
        for i, R in enumerate(Rs):
            assert np.allclose(gamma(ds, R), batch[i])

    def test_identity_gives_base_coefficients(self):
        ds = build_direction_set(4)
        g2 = gamma_squared(ds, np.eye(4))
        assert np.allclose(g2, [float(c) for c in ds.base_coeffs])

    def test_positive_on_ball(self):
        ds = build_direction_set(4)
        rng = np.random.default_rng(1)
        for _ in range(200):
            assert np.all(gamma(ds, _ball_point(rng, 4, BALL_RADIUS)) > 0)

    def test_outside_ball(self):
        ds = build_direction_set(4)
        R = np.eye(4)
        R[0, 0] += 0.6
        with pytest.raises(DomainError):
            gamma(ds, R)

    @pytest.mark.parametrize("d", [3, 4])
    def test_gradient_matches_differences(self, d):
        ds = build_direction_set(d)
        rng = np.random.default_rng(d)
        h = 1e-6
        for _ in range(10):
            R = _ball_point(rng, d, 0.4)
            H = rng.standard_normal((d, d))
            H = (H + H.T) / 2
            fd = (gamma(ds, R + h * H) - gamma(ds, R - h * H)) / (2 * h)
            an = np.einsum("kab,ab->k", gamma_gradient(ds, R), H)
            assert np.max(np.abs(fd - an)) <= 1e-6

    def test_upper_bound(self):
        ds = build_direction_set(4)
        bound = positivity_certificate(ds)["gamma_upper_bound"]
        rng = np.random.default_rng(2)
        worst = max(gamma(ds, _ball_point(rng, 4, BALL_RADIUS)).max() for _ in range(200))
        assert worst <= bound
