"""Concentrated Mikado flows: thin periodic pipes along lattice directions.

A tube is ``c * mu^((d-1)/2) * psi(mu * dist(x, line))`` where ``psi`` is a
smooth radial profile supported in ``[1/2, 1]`` and ``dist`` is the periodic
distance to a closed line ``p + t k``.  Tubes of one direction are constant
along ``k``; multiplied by ``k`` they are stationary, divergence-free,
pressureless Euler flows.

Disjointness of the pipes is certified exactly: anchors are rational points on
a ``1/q`` grid and squared line distances are integer computations.
"""

from __future__ import annotations

import functools
import itertools
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import integrate

from .matrix_geometry import DirectionSet, gamma
from .spectral_torus import ContractError, Field, ResolutionError, TorusGrid

__all__ = [
    "Profile",
    "MikadoFamily",
    "TubeSamples",
    "PlacementWarning",
    "build_profile",
    "bump",
    "bump_derivative",
    "place_lines",
    "line_distance2",
    "periodic_line_distance",
    "tube_samples",
    "tube_field",
    "axial_tube_section",
    "mikado_flow",
    "check_tube_resolution",
    "default_offset",
    "DEFAULT_POINTS_PER_RADIUS",
]

DEFAULT_POINTS_PER_RADIUS = 8


def default_offset(d: int) -> np.ndarray:
    """Common translation of all anchors.

    A rigid translation leaves every line distance unchanged; this one has
    distinct, non-dyadic fractional parts so coarse grids sample each tube at
    several distinct radii instead of symmetric, equidistant points.
    """
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return np.array([((j + 1) * golden) % 1.0 for j in range(d)]) / 37.0


class PlacementWarning(UserWarning):
    """Requested separation not reached; the family carries the best one found."""


def bump(r: np.ndarray) -> np.ndarray:
    """``exp(16 - 1/((r - 1/2)(1 - r)))`` on ``(1/2, 1)``, zero elsewhere; peak 1 at r = 3/4."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = (r > 0.5) & (r < 1.0)
    ri = r[inside]
    out[inside] = np.exp(16.0 - 1.0 / ((ri - 0.5) * (1.0 - ri)))
    return out


def bump_derivative(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = (r > 0.5) & (r < 1.0)
    ri = r[inside]
    q = (ri - 0.5) * (1.0 - ri)
    out[inside] = np.exp(16.0 - 1.0 / q) * (1.5 - 2.0 * ri) / (q * q)
    return out


def _moment(fn, power: int) -> float:
    val, _ = integrate.quad(lambda r: fn(r) * r**power, 0.5, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    return val


@dataclass(frozen=True)
class Profile:
    """Radial profile ``(A - B r) bump(r)`` with vanishing ``r^(d-2)``-weighted mean."""

    d: int
    A: float
    B: float
    weighted_mean: float
    weighted_square: float

    def __call__(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return (self.A - self.B * r) * bump(r)


def build_profile(d: int) -> Profile:
    if d < 3:
        raise ContractError("profiles are built for d >= 3")
    w = d - 2
    b = lambda r: float(bump(np.array(r)))
    m0 = _moment(b, w)
    m1 = _moment(b, w + 1)
    A = 1.0
    B = A * m0 / m1
    psi = lambda r: (A - B * r) * b(r)
    mean = _moment(psi, w)
    sq = _moment(lambda r: psi(r) ** 2, w)
    return Profile(d, A, B, mean, sq)


# ---------------------------------------------------------------- line placement

def _gram_parts(dirs: list[tuple[int, ...]]):
    """Integer Gram determinant and adjugate of the span of ``dirs``."""
    K = np.array(dirs, dtype=np.int64)
    if len(dirs) == 2 and abs(int(np.dot(K[0], K[1]))) ** 2 == int(K[0] @ K[0]) * int(K[1] @ K[1]):
        K = K[:1]
    G = K @ K.T
    if G.shape == (1, 1):
        return K, int(G[0, 0]), np.array([[1]], dtype=np.int64)
    det = int(G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0])
    adj = np.array([[G[1, 1], -G[0, 1]], [-G[1, 0], G[0, 0]]], dtype=np.int64)
    return K, det, adj


@functools.lru_cache(maxsize=None)
def _shift_box(d: int, reach: int) -> np.ndarray:
    rng = range(-reach, reach + 1)
    return np.array(list(itertools.product(rng, repeat=d)), dtype=np.int64)


def line_distance2(
    p: tuple[Fraction, ...], k: tuple[int, ...], p2: tuple[Fraction, ...], k2: tuple[int, ...]
) -> Fraction:
    """Exact squared periodic distance between the closed lines ``p + t k`` and ``p2 + t k2``."""
    q = math.lcm(*(x.denominator for x in p + p2))
    a = np.array([int((y - x) * q) for x, y in zip(p, p2)], dtype=np.int64)
    return Fraction(int(_min_scaled(a[None], q, [k, k2])[0]), 1) / _scale(q, [k, k2])


def _scale(q: int, dirs) -> int:
    _, det, _ = _gram_parts(list(dirs))
    return q * q * det


def _min_scaled(a: np.ndarray, q: int, dirs) -> np.ndarray:
    """``q^2 det(G) dist^2`` minimized over period shifts, for offsets ``a / q``."""
    K, det, adj = _gram_parts(list(dirs))
    reach = 2 * max(1, max(abs(c) for k in dirs for c in k))
    shifts = _shift_box(K.shape[1], reach)
    w = a[:, None, :] + q * shifts[None, :, :]
    kw = w @ K.T
    if K.shape[0] == 1:
        proj = kw[..., 0] ** 2
    else:
        k0, k1 = kw[..., 0], kw[..., 1]
        proj = adj[0, 0] * k0 * k0 + 2 * adj[0, 1] * k0 * k1 + adj[1, 1] * k1 * k1
    val = det * np.einsum("csd,csd->cs", w, w) - proj
    return val.min(axis=1)


@dataclass(frozen=True)
class MikadoFamily:
    """Direction set plus certified line anchors.

    ``anchors[(i, n)]`` is the rational anchor of the line of index ``i`` along
    ``ds.K[n]``.  ``min_distance2`` is the exact smallest squared distance
    between distinct lines and ``mu0 = 2 / sqrt(min_distance2)``.
    """

    ds: DirectionSet
    ncount: int
    q: int
    anchors: dict = field(hash=False)
    min_distance2: Fraction
    warning: bool = False
    offset: tuple[float, ...] | None = None

    @property
    def mu0(self) -> float:
        return 2.0 / math.sqrt(self.min_distance2)

    def anchor(self, i: int, n: int) -> np.ndarray:
        """Anchor of line ``(i mod ncount, K[n])`` including the common offset."""
        p = np.array([float(x) for x in self.anchors[(i % self.ncount, n)]])
        shift = default_offset(self.ds.d) if self.offset is None else np.asarray(self.offset)
        return p + shift

    def to_json(self) -> dict:
        return {
            "ncount": self.ncount,
            "q": self.q,
            "min_distance2": str(self.min_distance2),
            "mu0": self.mu0,
            "warning": self.warning,
            "offset": [float(x) for x in (self.offset or default_offset(self.ds.d))],
            "anchors": {f"{i},{n}": [str(x) for x in p] for (i, n), p in sorted(self.anchors.items())},
        }


@functools.lru_cache(maxsize=4096)
def _pair_table(q: int, k0: tuple[int, ...], k: tuple[int, ...]) -> np.ndarray:
    """Squared line distance for every offset residue mod ``q``, flattened."""
    d = len(k)
    res = np.array(list(itertools.product(range(q), repeat=d)), dtype=np.int64)
    return _min_scaled(res, q, [k0, k]) / _scale(q, [k0, k])


def _nearest2(cand: np.ndarray, k: tuple[int, ...], others, q: int) -> np.ndarray:
    """Squared distance from lines ``cand/q + t k`` to the nearest of ``others``."""
    d = cand.shape[1]
    place = q ** np.arange(d - 1, -1, -1)
    score = np.full(len(cand), np.inf)
    for a0, k0 in others:
        flat = np.mod(cand - a0[None, :], q) @ place
        score = np.minimum(score, _pair_table(q, tuple(k0), tuple(k))[flat])
    return score


def place_lines(
    ds: DirectionSet,
    ncount: int = 2,
    mu0_target: float | None = None,
    q: int | None = None,
    sweeps: int = 10,
) -> MikadoFamily:
    """Rational anchors on the ``1/q`` grid with large pairwise line distances.

    Lines are placed greedily in the order (index, direction), each at the
    candidate farthest from the lines already placed (ties go to the first
    candidate).  Then each line in turn is moved to its best position given
    all the others, until a sweep changes nothing.  The final separation is
    certified with exact integer arithmetic.
    """
    if ncount < 1:
        raise ContractError("ncount must be at least 1")
    d = ds.d
    if q is None:
        q = 4 if d >= 4 else 12
    cand = np.array(list(itertools.product(range(q), repeat=d)), dtype=np.int64)
    keys = [(i, n) for i in range(ncount) for n in range(ds.size)]
    pos: list[np.ndarray] = []
    for j, (i, n) in enumerate(keys):
        if j == 0:
            pos.append(np.zeros(d, dtype=np.int64))
            continue
        score = _nearest2(cand, ds.K[n], [(pos[t], ds.K[keys[t][1]]) for t in range(j)], q)
        pos.append(cand[int(np.argmax(score))])
    for _ in range(sweeps if len(keys) > 2 else 0):
        moved = False
        for j, (i, n) in enumerate(keys):
            others = [(pos[t], ds.K[keys[t][1]]) for t in range(len(keys)) if t != j]
            score = _nearest2(cand, ds.K[n], others, q)
            here = _nearest2(pos[j][None], ds.K[n], others, q)[0]
            best = int(np.argmax(score))
            if score[best] > here * (1 + 1e-12):
                pos[j] = cand[best]
                moved = True
        if not moved:
            break
    anchors = {key: tuple(Fraction(int(c), q) for c in p) for key, p in zip(keys, pos)}
    best_overall = None
    for x, y in itertools.combinations(keys, 2):
        d2 = line_distance2(anchors[x], ds.K[x[1]], anchors[y], ds.K[y[1]])
        best_overall = d2 if best_overall is None or d2 < best_overall else best_overall
    if best_overall is None:
        best_overall = Fraction(1, 4)
    if best_overall == 0:
        raise ContractError("two lines intersect; increase q")
    warn = False
    if mu0_target is not None and best_overall < Fraction(4) / Fraction(mu0_target) ** 2:
        warn = True
        warnings.warn(
            f"separation for mu0={mu0_target} not reached; best mu0 is {2 / math.sqrt(best_overall):.4g}",
            PlacementWarning,
            stacklevel=2,
        )
    return MikadoFamily(ds, ncount, q, anchors, best_overall, warn)


# ---------------------------------------------------------------- tube sampling

def _min_image(x: np.ndarray) -> np.ndarray:
    return x - np.round(x)


def periodic_line_distance(M: int, anchor: np.ndarray, k: tuple[int, ...]) -> np.ndarray:
    """Distance from every point of the ``M^d`` grid to the closed line ``anchor + t k``.

    Axis and diagonal directions use closed forms; other directions fall back
    to minimizing the transverse distance over a box of period shifts.
    """
    d = len(k)
    y = []
    for j in range(d):
        shape = [1] * d
        shape[j] = M
        y.append(_min_image(np.arange(M).reshape(shape) / M - anchor[j]))
    nz = [j for j, c in enumerate(k) if c]
    if len(nz) == 1 and abs(k[nz[0]]) == 1:
        d2 = sum(y[j] ** 2 for j in range(d) if j != nz[0])
        return np.sqrt(np.broadcast_to(d2, (M,) * d))
    if len(nz) == 2 and abs(k[nz[0]]) == 1 and abs(k[nz[1]]) == 1:
        a, b = nz
        s = k[a] * k[b]
        d2 = sum(y[j] ** 2 for j in range(d) if j not in nz)
        d2 = d2 + _min_image(y[a] - s * y[b]) ** 2 / 2.0
        return np.sqrt(np.broadcast_to(d2, (M,) * d))
    kk = np.array(k, dtype=float)
    k2 = float(kk @ kk)
    reach = max(abs(c) for c in k)
    best = None
    for m in itertools.product(range(-reach, reach + 1), repeat=d):
        z = [y[j] - m[j] for j in range(d)]
        dot = sum(z[j] * kk[j] for j in range(d))
        d2 = sum(zj**2 for zj in z) - dot**2 / k2
        best = d2 if best is None else np.minimum(best, d2)
    return np.sqrt(np.maximum(best, 0.0))


@dataclass(frozen=True)
class TubeSamples:
    """Nonzero samples of one normalized tube on the base ``M^d`` grid.

    The tube oscillated by ``sigma`` on an ``N^d`` grid with ``N = sigma M``
    is the base pattern tiled ``sigma`` times along each axis.
    """

    M: int
    d: int
    index: np.ndarray
    values: np.ndarray
    scale: float
    slope: float

    def dense_base(self) -> np.ndarray:
        out = np.zeros(self.M**self.d)
        out[self.index] = self.values
        return out.reshape((self.M,) * self.d)

    def expand(self, N: int) -> tuple[np.ndarray, np.ndarray]:
        """Flat indices and values of the tiled pattern on the ``N^d`` grid."""
        if N % self.M:
            raise ContractError("N must be a multiple of the base size")
        sigma = N // self.M
        multi = np.unravel_index(self.index, (self.M,) * self.d)
        tiles = np.array(list(itertools.product(range(sigma), repeat=self.d)), dtype=np.int64)
        flat = np.zeros((self.index.size, tiles.shape[0]), dtype=np.int64)
        for j in range(self.d):
            flat = flat * N + (multi[j][:, None] + self.M * tiles[None, :, j])
        vals = np.broadcast_to(self.values[:, None], flat.shape)
        return flat.ravel(), vals.ravel().copy()


def tube_samples(profile: Profile, anchor: np.ndarray, k: tuple[int, ...], mu: float, M: int) -> TubeSamples:
    """Tube on the ``M^d`` grid, with the slope and scale fixed on that grid.

    The linear coefficient of the profile is re-solved so the discrete mean is
    exactly zero, and the overall scale makes the discrete mean square one.
    """
    d = len(k)
    r = mu * periodic_line_distance(M, anchor, k).ravel()
    idx = np.flatnonzero((r > 0.5) & (r < 1.0))
    rr = r[idx]
    bb = bump(rr)
    if idx.size < 2 or not np.any(bb > 0):
        raise ResolutionError(f"tube of radius 1/{mu} has no interior samples on a {M}^{d} grid")
    slope = profile.A * bb.sum() / (rr * bb).sum()
    vals = (profile.A - slope * rr) * bb
    ms = float(np.sum(vals * vals)) / M**d
    if ms <= 0:
        raise ResolutionError("tube samples vanish")
    scale = 1.0 / math.sqrt(ms)
    return TubeSamples(M, d, idx, vals * scale, scale, slope)


def check_tube_resolution(N: int, sigma: int, mu: float, mu0: float, min_ppr: float) -> int:
    if sigma < 1 or int(sigma) != sigma:
        raise ContractError("sigma must be a positive integer")
    if N % sigma:
        raise ResolutionError(f"sigma={sigma} must divide N={N}")
    if mu < mu0 * (1 - 1e-12):
        raise ContractError(f"mu={mu} is below the family's mu0={mu0:.4g}")
    M = N // sigma
    if M < min_ppr * mu:
        raise ResolutionError(
            f"under-resolved tube: N/sigma = {M} < {min_ppr} * mu = {min_ppr * mu}"
        )
    return M


def tube_field(
    fam: MikadoFamily,
    profile: Profile,
    i: int,
    n: int,
    mu: float,
    grid: TorusGrid,
    sigma: int = 1,
    min_points_per_radius: float = DEFAULT_POINTS_PER_RADIUS,
) -> Field:
    """Dense samples of the tube of index ``i`` along ``K[n]``, evaluated at ``sigma x``."""
    M = check_tube_resolution(grid.N, sigma, mu, fam.mu0, min_points_per_radius)
    ts = tube_samples(profile, fam.anchor(i, n), fam.ds.K[n], mu, M)
    base = ts.dense_base()
    reps = (grid.N // M,) * grid.d
    return Field(grid, np.tile(base, reps)[None], 0)


def axial_tube_section(
    profile: Profile,
    mu: float,
    grid: TorusGrid,
    anchor: np.ndarray | None = None,
    gradient: bool = False,
) -> Field:
    """Cross-section on ``T^(d-1)`` of a tube along the first axis of ``T^d``.

    An axis tube is constant along its axis, so its norms equal the norms of
    this section; ``grid.d`` is ``d - 1`` while the profile carries ``d``.
    With ``gradient`` the samples are ``|grad|`` of the same normalized tube,
    from the chain rule applied to the closed-form profile.
    """
    if grid.d != profile.d - 1:
        raise ContractError("section grid must have dimension d - 1")
    p = np.zeros(grid.d) if anchor is None else np.asarray(anchor, dtype=float)
    y2 = 0.0
    for j in range(grid.d):
        shape = [1] * grid.d
        shape[j] = grid.N
        y2 = y2 + _min_image(np.arange(grid.N).reshape(shape) / grid.N - p[j]) ** 2
    r = mu * np.sqrt(np.broadcast_to(y2, grid.shape)).ravel()
    idx = np.flatnonzero((r > 0.5) & (r < 1.0))
    if idx.size < 2:
        raise ResolutionError("section has no interior samples")
    rr = r[idx]
    bb = bump(rr)
    slope = profile.A * bb.sum() / (rr * bb).sum()
    vals = (profile.A - slope * rr) * bb
    scale = 1.0 / math.sqrt(float(np.sum(vals * vals)) / grid.npoints)
    vals *= scale
    if gradient:
        vals = scale * mu * np.abs((profile.A - slope * rr) * bump_derivative(rr) - slope * bb)
    out = np.zeros(grid.npoints)
    out[idx] = vals
    return Field(grid, out.reshape((1,) + grid.shape), 0)


def mikado_flow(
    fam: MikadoFamily,
    profile: Profile,
    i: int,
    R: np.ndarray,
    mu: float,
    sigma: int,
    grid: TorusGrid,
    min_points_per_radius: float = DEFAULT_POINTS_PER_RADIUS,
) -> Field:
    """``sum_k Gamma_k(R) psi_{i,k}(sigma x) k`` for a constant matrix ``R`` in the ball."""
    M = check_tube_resolution(grid.N, sigma, mu, fam.mu0, min_points_per_radius)
    coef = gamma(fam.ds, R)
    out = np.zeros((grid.d, grid.npoints))
    for n, k in enumerate(fam.ds.K):
        ts = tube_samples(profile, fam.anchor(i, n), k, mu, M)
        flat, vals = ts.expand(grid.N)
        for j, kj in enumerate(k):
            if kj:
                out[j, flat] += coef[n] * kj * vals
    return Field(grid, out.reshape((grid.d,) + grid.shape), 1)
