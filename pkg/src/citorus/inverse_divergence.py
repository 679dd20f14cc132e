"""Order -1 inverse divergence returning symmetric trace-free matrix fields.

For a zero-mean vector field ``f`` the operator is

    (R f)_ij = c1 D^-2 d_i d_j d_k f_k + c2 D^-1 d_k f_k delta_ij
               + D^-1 d_i f_j + D^-1 d_j f_i,

with ``c1 = (2 - d)/(d - 1)`` and ``c2 = -1/(d - 1)``.  The coefficients are
chosen so the trace cancels and ``div R f = f``.  Everything is assembled
mode by mode in Fourier space.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from .spectral_torus import (
    ContractError,
    Field,
    TorusGrid,
    Multiplier,
    apply_multiplier,
    divergence_values,
    from_spectral,
    gradient_lp_norm,
    lp_norm,
    parseval_sum,
    sym_pairs,
)

__all__ = [
    "InverseDivOperator",
    "inverse_div",
    "inverse_div_spectral",
    "symmetric_gradient",
    "symmetric_gradient_identity_check",
]


@dataclass(frozen=True)
class InverseDivOperator:
    """Exact rational coefficients of the four symbol terms in dimension ``d``."""

    d: int

    @property
    def cubic(self) -> Fraction:
        return Fraction(2 - self.d, self.d - 1)

    @property
    def trace_term(self) -> Fraction:
        return Fraction(-1, self.d - 1)

    @property
    def gradient_terms(self) -> tuple[Fraction, Fraction]:
        return Fraction(1), Fraction(1)

    def trace_identity(self) -> Fraction:
        """Coefficient of ``D^-1 div f`` in the trace; zero by construction."""
        return self.cubic + self.d * self.trace_term + sum(self.gradient_terms)

    def divergence_identity(self) -> Fraction:
        """Coefficient of ``grad D^-1 div f`` in ``div R f - f``; also zero."""
        return self.cubic + self.trace_term + self.gradient_terms[0]


def inverse_div_spectral(fhat: np.ndarray, grid: TorusGrid) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(storage index, coefficients)`` of ``R f`` one component at a time.

    ``fhat`` holds the half-spectrum coefficients of the ``d`` components.
    Modes with vanishing wavevector are sent to zero.
    """
    d = grid.d
    op = InverseDivOperator(d)
    c1, c2 = float(op.cubic), float(op.trace_term)
    kv = grid.wavevector
    with np.errstate(divide="ignore"):
        inv_k2 = 1.0 / grid.knorm2
    inv_k2[grid.singular_mask] = 0.0
    # xi.f / |xi|^2; the trace term uses xi.f = kf |xi|^2
    kf = kv[0] * fhat[0]
    for j in range(1, d):
        kf += kv[j] * fhat[j]
    kf *= inv_k2
    inv_k2 *= 1.0 / (2.0 * np.pi)
    for c, (a, b) in enumerate(sym_pairs(d)):
        term = kf * (c1 * kv[a] * kv[b])
        term += kv[a] * fhat[b]
        term += kv[b] * fhat[a]
        if a == b:
            term += c2 * grid.knorm2 * kf
        term *= inv_k2
        term *= -1j
        yield c, term
        del term


def _check_zero_mean(f: Field, drop_mean: bool) -> None:
    mean = np.max(np.abs(f.means()))
    scale = np.sqrt(max(parseval_sum(f), 0.0))
    if mean > 1e-12 * max(scale, 1e-300) and not drop_mean:
        raise ContractError(f"inverse divergence needs a zero-mean field (mean {mean:.3e})")


def inverse_div(f: Field, drop_mean: bool = False) -> Field:
    if f.rank != 1:
        raise ContractError("inverse divergence acts on vector fields")
    _check_zero_mean(f, drop_mean)
    grid = f.grid
    fhat = f.spectral()
    out = np.empty((len(sym_pairs(grid.d)),) + grid.shape)
    for c, coeffs in inverse_div_spectral(fhat, grid):
        out[c] = from_spectral(coeffs, grid)
    return Field(grid, out, 2, mean_dropped=drop_mean)


def symmetric_gradient(f: Field) -> Field:
    """``grad f + (grad f)^T`` stored as a symmetric matrix field."""
    grid = f.grid
    fhat = f.spectral()
    kv = grid.wavevector
    out = np.empty((len(sym_pairs(grid.d)),) + grid.shape)
    for c, (a, b) in enumerate(sym_pairs(grid.d)):
        out[c] = from_spectral(2j * np.pi * (kv[b] * fhat[a] + kv[a] * fhat[b]), grid)
    return Field(grid, out, 2)


def symmetric_gradient_identity_check(f: Field, tol: float = 1e-10) -> float:
    """Relative sup-norm gap between ``R(lap f)`` and the symmetric gradient of ``f``."""
    if f.rank != 1:
        raise ContractError("needs a vector field")
    grad_sym = symmetric_gradient(f)
    gscale = lp_norm(grad_sym, np.inf)
    if gscale == 0.0:
        return 0.0
    div = Field(f.grid, divergence_values(f.values, 1, f.grid), 0)
    if lp_norm(div, 2) > tol * gscale:
        raise ContractError("input is not divergence-free")
    lap = apply_multiplier(f, Multiplier("laplacian"))
    gap = inverse_div(lap) - grad_sym
    return lp_norm(gap, np.inf) / gradient_lp_norm(f, np.inf)
