"""Positive decomposition of symmetric matrices near the identity into lattice rank-one tensors.

With directions ``K = {e_a} U {e_a + e_b, e_a - e_b : a < b}`` and a smoothing
width ``eps`` we use, for ``M`` close to the identity,

    Gamma^2_{e_a +- e_b}(M) = (h(M_ab) +- M_ab) / 2,       h(x) = sqrt(x^2 + eps^2)
    Gamma^2_{e_a}(M)        = M_aa - sum_{b != a} h(M_ab)

so that ``sum_k Gamma_k^2(M) k (x) k = M`` identically.  The pair terms are
positive for every ``M``; the axis terms stay positive on the Frobenius ball
of radius 1/2 around the identity because that ball sits inside a
diagonally dominant cone, which is certified in exact rational arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

__all__ = [
    "DirectionSet",
    "DomainError",
    "BALL_RADIUS",
    "build_direction_set",
    "gamma",
    "gamma_squared",
    "gamma_squared_of_entries",
    "gamma_squared_component",
    "gamma_gradient",
    "reconstruct",
    "positivity_certificate",
    "exact_rank",
]

BALL_RADIUS = 0.5


class DomainError(ValueError):
    """Matrix outside the ball where the coefficient functions are defined."""


@dataclass(frozen=True)
class DirectionSet:
    """Lattice directions with their base coefficients at the identity."""

    d: int
    K: tuple[tuple[int, ...], ...]
    eps: Fraction
    base_coeffs: tuple[Fraction, ...]

    @property
    def size(self) -> int:
        return len(self.K)

    @property
    def lam0(self) -> float:
        """Largest Euclidean length among the directions."""
        return max(math.sqrt(sum(c * c for c in k)) for k in self.K)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.K, dtype=float)

    def pairs(self) -> list[tuple[int, int, int]]:
        """For each direction: (a, b, sign) with b = -1 for axis directions."""
        out = []
        for k in self.K:
            nz = [j for j, c in enumerate(k) if c]
            if len(nz) == 1:
                out.append((nz[0], -1, 1))
            else:
                a, b = nz
                out.append((a, b, k[a] * k[b]))
        return out

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "directions": [list(k) for k in self.K],
            "coefficients_at_identity": [str(c) for c in self.base_coeffs],
            "eps": str(self.eps),
        }


def _axis_margin_ok(d: int, eps: Fraction) -> bool:
    # worst case of |X_aa| + sum_b |X_ab| over the ball is (1/2) sqrt(1 + (d-1)/2)
    lhs = (1 + Fraction(d - 1, 2)) / 4
    slack = 1 - (d - 1) * eps
    return slack > 0 and lhs < slack * slack


def _choose_eps(d: int) -> Fraction:
    for j in range(2, 40):
        eps = Fraction(1, 2**j)
        if _axis_margin_ok(d, eps):
            return eps
    raise DomainError(
        f"no positive decomposition over the radius-1/2 ball is certified for d={d} "
        "with the pair-smoothing construction (works for d <= 6)"
    )


def exact_rank(rows: list[list[Fraction]]) -> int:
    """Rank by fraction-exact Gaussian elimination."""
    m = [list(map(Fraction, r)) for r in rows]
    rank = 0
    ncol = len(m[0]) if m else 0
    for col in range(ncol):
        piv = next((r for r in range(rank, len(m)) if m[r][col] != 0), None)
        if piv is None:
            continue
        m[rank], m[piv] = m[piv], m[rank]
        for r in range(len(m)):
            if r != rank and m[r][col] != 0:
                f = m[r][col] / m[rank][col]
                m[r] = [x - f * y for x, y in zip(m[r], m[rank])]
        rank += 1
    return rank


def _outer_upper(k: tuple[int, ...]) -> list[Fraction]:
    d = len(k)
    return [Fraction(k[a] * k[b]) for a in range(d) for b in range(a, d)]


def build_direction_set(d: int) -> DirectionSet:
    if d < 2:
        raise DomainError("dimension must be at least 2")
    eps = _choose_eps(d)
    K: list[tuple[int, ...]] = []
    coeffs: list[Fraction] = []
    for a in range(d):
        e = [0] * d
        e[a] = 1
        K.append(tuple(e))
        coeffs.append(1 - (d - 1) * eps)
    for a in range(d):
        for b in range(a + 1, d):
            for sign in (1, -1):
                v = [0] * d
                v[a] = 1
                v[b] = sign
                K.append(tuple(v))
                coeffs.append(eps / 2)
    ds = DirectionSet(d, tuple(K), eps, tuple(coeffs))
    total = [sum(c * x for c, x in zip(coeffs, col)) for col in zip(*[_outer_upper(k) for k in K])]
    ident = [Fraction(1) if a == b else Fraction(0) for a in range(d) for b in range(a, d)]
    if total != ident:
        raise AssertionError("base coefficients do not reproduce the identity")
    if exact_rank([_outer_upper(k) for k in K]) != d * (d + 1) // 2:
        raise AssertionError("rank-one tensors do not span the symmetric matrices")
    return ds


def positivity_certificate(ds: DirectionSet) -> dict:
    """Exact check that every squared coefficient stays positive on the ball.

    Returns the rational quantities compared and a float lower bound on the
    axis coefficients.
    """
    d, eps = ds.d, ds.eps
    worst_sq = (1 + Fraction(d - 1, 2)) / 4
    slack = 1 - (d - 1) * eps
    holds = slack > 0 and worst_sq < slack * slack
    return {
        "worst_dominance_squared": worst_sq,
        "axis_slack_squared": slack * slack,
        "holds": holds,
        "axis_lower_bound": float(slack) - math.sqrt(float(worst_sq)),
        "pair_terms_positive": eps > 0,
        "gamma_upper_bound": math.sqrt(1.0 + BALL_RADIUS - (d - 1) * float(eps)),
    }


def _h(x, eps: float):
    return np.sqrt(x * x + eps * eps)


def gamma_squared_of_entries(ds: DirectionSet, entry: Callable[[int, int], np.ndarray]) -> list:
    """Squared coefficients given a callable returning matrix entries ``M_ab``.

    Entries may be scalars or arrays of any common shape, so the same code
    serves single matrices and whole matrix fields.
    """
    eps = float(ds.eps)
    hcache = {}
    for a in range(ds.d):
        for b in range(a + 1, ds.d):
            hcache[(a, b)] = _h(entry(a, b), eps)
    out = []
    for a, b, sign in ds.pairs():
        if b < 0:
            g2 = entry(a, a) - sum(hcache[tuple(sorted((a, c)))] for c in range(ds.d) if c != a)
        else:
            g2 = 0.5 * (hcache[(a, b)] + sign * entry(a, b))
        out.append(g2)
    return out


def gamma_squared_component(ds: DirectionSet, n: int, entry: Callable[[int, int], np.ndarray]):
    """Squared coefficient of the single direction ``ds.K[n]``."""
    eps = float(ds.eps)
    a, b, sign = ds.pairs()[n]
    if b >= 0:
        m = entry(a, b)
        return 0.5 * (_h(m, eps) + sign * m)
    out = entry(a, a)
    for c in range(ds.d):
        if c != a:
            out = out - _h(entry(min(a, c), max(a, c)), eps)
    return out


def _check_ball(R: np.ndarray, slack: float) -> None:
    d = R.shape[-1]
    dist = np.linalg.norm((R - np.eye(d)).reshape(R.shape[:-2] + (-1,)), axis=-1)
    if np.any(dist > BALL_RADIUS + slack):
        raise DomainError(f"|Id - R|_F = {float(np.max(dist)):.6g} exceeds {BALL_RADIUS}")


def gamma_squared(ds: DirectionSet, R: np.ndarray, slack: float = 0.0) -> np.ndarray:
    """Squared coefficients for a matrix or a stack of matrices ``(..., d, d)``."""
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (ds.d, ds.d):
        raise DomainError(f"expected {ds.d}x{ds.d} matrices, got shape {R.shape}")
    if not np.allclose(R, np.swapaxes(R, -1, -2), atol=1e-14, rtol=0):
        raise DomainError("matrix is not symmetric")
    _check_ball(R, slack)
    g2 = gamma_squared_of_entries(ds, lambda a, b: R[..., a, b])
    return np.stack(g2, axis=-1)


def gamma(ds: DirectionSet, R: np.ndarray, slack: float = 0.0) -> np.ndarray:
    """Coefficients ``Gamma_k(R)`` in the order of ``ds.K``."""
    return np.sqrt(gamma_squared(ds, R, slack))


def reconstruct(ds: DirectionSet, g2: np.ndarray) -> np.ndarray:
    """``sum_k g2_k k (x) k`` for squared coefficients ``(..., |K|)``."""
    K = ds.array
    return np.einsum("...k,ka,kb->...ab", g2, K, K)


def gamma_gradient(ds: DirectionSet, R: np.ndarray) -> np.ndarray:
    """Derivatives of each ``Gamma_k`` with respect to a symmetric matrix.

    Returns ``G`` of shape ``(|K|, d, d)``, symmetric in the last two axes,
    such that the derivative along a symmetric direction ``H`` is ``sum G * H``.
    """
    R = np.asarray(R, dtype=float)
    d = ds.d
    eps = float(ds.eps)
    g = gamma(ds, R)
    out = np.zeros((ds.size, d, d))
    for n, (a, b, sign) in enumerate(ds.pairs()):
        if b < 0:
            out[n, a, a] = 1.0
            for c in range(d):
                if c != a:
                    hp = R[a, c] / math.sqrt(R[a, c] ** 2 + eps**2)
                    out[n, a, c] = out[n, c, a] = -hp / 2.0
        else:
            hp = R[a, b] / math.sqrt(R[a, b] ** 2 + eps**2)
            out[n, a, b] = out[n, b, a] = (hp + sign) / 4.0
        out[n] /= 2.0 * g[n]
    return out
