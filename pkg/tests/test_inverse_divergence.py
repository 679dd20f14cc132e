from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from citorus.inverse_divergence import (
    InverseDivOperator,
    inverse_div,
    symmetric_gradient,
    symmetric_gradient_identity_check,
)
from citorus.spectral_torus import (
    ContractError,
    Field,
    Multiplier,
    apply_multiplier,
    divergence_values,
    leray_project,
    lp_norm,
    make_grid,
    random_field,
    scalar_field,
    sym_index,
)

GRIDS = {2: 32, 3: 16, 4: 8}


@pytest.mark.parametrize("d", range(2, 9))
def test_coefficient_identities_exact(d):
    op = InverseDivOperator(d)
    assert op.trace_identity() == 0
    assert op.divergence_identity() == 0
    assert op.cubic == Fraction(2 - d, d - 1)


class TestRightInverse:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.sampled_from(sorted(GRIDS)))
    def test_div_of_potential(self, seed, d):
        grid = make_grid(d, GRIDS[d])
        f = random_field(grid, 1, 2, np.random.default_rng(seed))
        Rf = inverse_div(f)
        back = divergence_values(Rf.values, 2, grid)
        assert lp_norm(Field(grid, back, 1) - f, 2) <= 1e-12 * lp_norm(f, 2)
        assert np.max(np.abs(Rf.trace())) <= 1e-12 * lp_norm(f, np.inf)

    def test_single_mode(self):
        grid = make_grid(2, 32)
        x = grid.coordinate(0) + 0 * grid.coordinate(1)
        f = np.zeros((2,) + grid.shape)
        f[1] = np.sin(2 * np.pi * x)
        Rf = inverse_div(Field(grid, f, 1))
        idx = sym_index(2)
        assert np.allclose(Rf.values[idx[(0, 1)]], -np.cos(2 * np.pi * x) / (2 * np.pi), atol=1e-15)
        assert np.allclose(Rf.values[idx[(0, 0)]], 0.0, atol=1e-15)

    def test_order_minus_one(self):
        grid = make_grid(3, 32)
        rng = np.random.default_rng(0)
        for kmax in (2, 4, 8):
            f = random_field(grid, 1, kmax, rng)
            smooth = apply_multiplier(f, Multiplier("frac_power", s=-1.0))
            assert lp_norm(inverse_div(f), 2) <= 4 * lp_norm(smooth, 2)

    def test_rejects_mean(self):
        grid = make_grid(2, 16)
        f = Field(grid, np.ones((2,) + grid.shape), 1)
        with pytest.raises(ContractError, match="zero-mean"):
            inverse_div(f)
        assert inverse_div(f, drop_mean=True).mean_dropped

    def test_rejects_scalars(self):
        grid = make_grid(2, 16)
        with pytest.raises(ContractError):
            inverse_div(scalar_field(grid, 0.0))


class TestSymmetricGradient:
    @pytest.mark.parametrize("d", [2, 3, 4])
    def test_identity_on_divergence_free(self, d):
        grid = make_grid(d, GRIDS[d])
        f = leray_project(random_field(grid, 1, 2, np.random.default_rng(d)))
        assert symmetric_gradient_identity_check(f) <= 1e-12

    def test_rejects_compressible(self):
        grid = make_grid(2, 16)
        f = random_field(grid, 1, 2, np.random.default_rng(5))
        with pytest.raises(ContractError, match="divergence-free"):
            symmetric_gradient_identity_check(f)

    def test_trace_is_twice_divergence(self):
        grid = make_grid(3, 16)
        f = random_field(grid, 1, 3, np.random.default_rng(6))
        sg = symmetric_gradient(f)
        div = divergence_values(f.values, 1, grid)[0]
        assert np.allclose(sg.trace(), 2 * div, atol=1e-10)
