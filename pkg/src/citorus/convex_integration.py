"""One step of the convex-integration iteration for the stationary NSR system.

A triplet ``(u, p, R)`` solves

    -lap u + div(u (x) u) + grad p = div R,    div u = 0,

with ``R`` symmetric and trace free.  A step mollifies the triplet, splits the
mollified stress into dyadic shells, adds concentrated Mikado flows whose
self-interaction cancels it, corrects the divergence and collects what is
left into a new stress made of four parts (quadratic, linear, oscillation and
correction errors).

Fields on a ``64^4`` grid cost 134 MB per scalar, so the step in
:func:`iterate_step` streams every tensor product and releases intermediates
as soon as they are folded into the spectral forcings.
"""

from __future__ import annotations

import dataclasses
import math
import os
import resource
import tempfile
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .inverse_divergence import inverse_div_spectral
from .matrix_geometry import DomainError, gamma_squared_component, gamma_squared_of_entries
from .mikado import DEFAULT_POINTS_PER_RADIUS, MikadoFamily, Profile, TubeSamples, check_tube_resolution, tube_samples
from .spectral_torus import (
    ContractError,
    Field,
    TorusGrid,
    from_spectral,
    leray_project,
    magnitude2,
    max_bytes,
    mollifier_symbol,
    random_field,
    smooth_step,
    sym_index,
    sym_pairs,
    to_spectral,
)

__all__ = [
    "AssemblyError",
    "ParameterError",
    "Monomial",
    "DeskOverrides",
    "IterationParams",
    "make_params",
    "SolutionTriplet",
    "zero_triplet",
    "seed_triplet",
    "nsr_residual",
    "mollify_triplet",
    "mollification_witnesses",
    "CutoffFamily",
    "shell_weight",
    "build_cutoffs",
    "PrincipalPerturbation",
    "principal_perturbation",
    "coefficient_field",
    "oscillation_identity_check",
    "corrector",
    "product_rule_split",
    "ReynoldsErrorBreakdown",
    "new_stress",
    "NormReport",
    "norm_report",
    "StepResult",
    "iterate_step",
]

TWO_PI = 2.0 * np.pi
ERROR_PARTS = ("quadratic", "linear", "oscillation", "correction")
_CHUNK = 1 << 20


class ParameterError(ValueError):
    """Invalid iteration parameters."""


class AssemblyError(RuntimeError):
    """A structural identity failed during a step; ``diagnostics`` has the numbers."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class Monomial:
    """Product of rational powers of positive rationals, evaluated on demand."""

    factors: tuple[tuple[Fraction, Fraction], ...] = ()

    @classmethod
    def of(cls, base, exponent=1) -> "Monomial":
        base = Fraction(base)
        if base <= 0:
            raise ParameterError("monomial bases must be positive")
        return cls(((base, Fraction(exponent)),))

    def __mul__(self, other: "Monomial") -> "Monomial":
        acc: dict[Fraction, Fraction] = {}
        for b, e in self.factors + other.factors:
            acc[b] = acc.get(b, Fraction(0)) + e
        return Monomial(tuple((b, e) for b, e in acc.items() if e != 0 and b != 1))

    def __pow__(self, e) -> "Monomial":
        e = Fraction(e)
        return Monomial(tuple((b, x * e) for b, x in self.factors))

    def __truediv__(self, other: "Monomial") -> "Monomial":
        return self * other ** -1

    def log(self) -> float:
        return sum(float(e) * (math.log(b.numerator) - math.log(b.denominator)) for b, e in self.factors)

    def value(self) -> float:
        return math.exp(self.log())

    def exact(self) -> Fraction | None:
        """Exact value when every exponent is an integer, else None."""
        if any(e.denominator != 1 for _, e in self.factors):
            return None
        out = Fraction(1)
        for b, e in self.factors:
            out *= b ** int(e)
        return out

    def __str__(self) -> str:
        if not self.factors:
            return "1"
        return "*".join(f"{b}^({e})" for b, e in self.factors)


def _ceil_power(a: int, e: Fraction, max_bits: int = 8192) -> int | None:
    """Smallest integer ``>= a^e``, or None when it would exceed ``max_bits``."""
    if e * math.log2(a) > max_bits:
        return None
    if e.denominator == 1:
        return a ** int(e)
    target = a**e.numerator
    q = e.denominator
    lo, hi = 1, 1 << (target.bit_length() // q + 2)
    while lo < hi:
        mid = (lo + hi) // 2
        if mid**q >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _exact_rational(x, name: str) -> Fraction:
    if isinstance(x, float):
        raise ParameterError(f"{name} must be an exact rational (int, Fraction or 'p/q'), got float {x!r}")
    try:
        return Fraction(x)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"{name}: cannot read {x!r} as a rational") from exc


@dataclass(frozen=True)
class DeskOverrides:
    """Small-integer stand-ins for the frequency ladder.

    ``lam`` defaults to ``sigma * mu``; ``l`` defaults to the mollification
    formula evaluated at the surrogate frequencies.
    """

    lam_prev: int
    mu: int
    sigma: int
    lam: int | None = None
    l: Fraction | None = None


@dataclass(frozen=True)
class IterationParams:
    beta: Fraction
    b: Fraction
    alpha: Fraction
    a: int
    n: int
    overrides: DeskOverrides | None = None

    def lam_at(self, m: int) -> Monomial:
        """``ceil(a^(b^m))`` exactly when representable, else the symbolic power."""
        e = self.b**m
        c = _ceil_power(self.a, e)
        return Monomial.of(c) if c is not None else Monomial.of(self.a, e)

    @property
    def desk(self) -> bool:
        return self.overrides is not None

    @property
    def lam_prev(self) -> Monomial:
        return Monomial.of(self.overrides.lam_prev) if self.desk else self.lam_at(self.n - 1)

    @property
    def lam(self) -> Monomial:
        if self.desk:
            o = self.overrides
            return Monomial.of(o.lam if o.lam is not None else o.sigma * o.mu)
        return self.lam_at(self.n)

    @property
    def lam_next(self) -> Monomial:
        """Next frequency; for desk runs the surrogate ``lam^b``."""
        return self.lam**self.b if self.desk else self.lam_at(self.n + 1)

    def _delta(self, lam: Monomial) -> Monomial:
        return lam ** (-2 * self.beta)

    @property
    def delta(self) -> Monomial:
        return self._delta(self.lam)

    @property
    def delta_prev(self) -> Monomial:
        return self._delta(self.lam_prev)

    @property
    def delta_next(self) -> Monomial:
        return self._delta(self.lam_next)

    @property
    def mu(self) -> Monomial:
        return Monomial.of(self.overrides.mu) if self.desk else self.lam ** Fraction(3, 4)

    @property
    def sigma(self) -> Monomial:
        return Monomial.of(self.overrides.sigma) if self.desk else self.lam ** Fraction(1, 4)

    @property
    def l(self) -> Monomial:
        if self.desk and self.overrides.l is not None:
            return Monomial.of(self.overrides.l)
        return self.delta ** Fraction(1, 2) / (self.delta_prev ** Fraction(1, 2) * self.lam_prev ** (1 + self.alpha))

    @property
    def stress_unit(self) -> Monomial:
        """Shell unit ``delta_n lam_{n-1}^(-2 alpha)`` of the stress cutoffs."""
        return self.delta * self.lam_prev ** (-2 * self.alpha)

    def amplitude(self, i: int) -> float:
        """Perturbation amplitude ``2^(i+1) delta_n^(1/2) lam_{n-1}^(-alpha)`` of shell ``i``."""
        return 2.0 ** (i + 1) * math.sqrt(self.stress_unit.value())

    @property
    def sigma_int(self) -> int:
        s = self.sigma.value()
        if abs(s - round(s)) > 1e-9:
            raise ParameterError(f"sigma = {s} is not an integer; grid periodicity needs one")
        return int(round(s))

    def mollifier_window(self) -> tuple[float, float, float]:
        """``(log lam_prev, log 1/l, (1 + 1/40) log lam_prev)``; the middle should sit between."""
        lp = self.lam_prev.log()
        return lp, -self.l.log(), (1 + 1 / 40) * lp

    def to_json(self) -> dict:
        out = {
            "beta": str(self.beta),
            "b": str(self.b),
            "alpha": str(self.alpha),
            "a": self.a,
            "n": self.n,
            "desk": self.desk,
        }
        for name in ("lam_prev", "lam", "delta", "mu", "sigma", "l", "stress_unit", "delta_next"):
            m = getattr(self, name)
            out[name] = {"formula": str(m), "value": m.value()}
        return out


def make_params(beta, b, alpha, a: int, n: int, overrides: DeskOverrides | None = None) -> IterationParams:
    beta = _exact_rational(beta, "beta")
    b = _exact_rational(b, "b")
    alpha = _exact_rational(alpha, "alpha")
    problems = []
    if not 0 < beta < 1:
        problems.append("0 < beta < 1")
    if not b > 1:
        problems.append("b > 1")
    if not 0 < alpha < beta:
        problems.append("0 < alpha < beta")
    if int(a) != a or a < 2:
        problems.append("a >= 2 integer")
    if int(n) != n or n < 2:
        problems.append("n >= 2 integer")
    if overrides is not None:
        o = overrides
        for name in ("lam_prev", "mu", "sigma"):
            v = getattr(o, name)
            if int(v) != v or v < 1:
                problems.append(f"{name} positive integer")
        if not o.lam_prev < o.sigma:
            problems.append(f"lam_prev < sigma ({o.lam_prev} < {o.sigma})")
        if not o.sigma < o.mu:
            problems.append(f"sigma < mu ({o.sigma} < {o.mu})")
        if o.lam is not None and o.lam != o.sigma * o.mu:
            problems.append(f"lam = sigma * mu ({o.lam} != {o.sigma * o.mu})")
        if o.l is not None and Fraction(o.l) <= 0:
            problems.append("l > 0")
    if problems:
        raise ParameterError("parameter relations violated: " + "; ".join(problems))
    if overrides is not None and overrides.l is not None:
        overrides = DeskOverrides(overrides.lam_prev, overrides.mu, overrides.sigma, overrides.lam, Fraction(overrides.l))
    return IterationParams(beta, b, alpha, int(a), int(n), overrides)


# ---------------------------------------------------------------- triplets

@dataclass(eq=False)
class SolutionTriplet:
    """Velocity, pressure and stress on one grid.

    :meth:`release` hands the fields over and empties the triplet, which lets
    a step reuse the buffers without another reference keeping them alive.
    """

    u: Field
    p: Field
    R: Field

    def release(self) -> tuple[Field, Field, Field]:
        out = (self.u, self.p, self.R)
        self.u = self.p = self.R = None
        return out

    def __post_init__(self):
        if (self.u.rank, self.p.rank, self.R.rank) != (1, 0, 2):
            raise ContractError("triplet needs (vector, scalar, symmetric matrix) fields")
        if not self.u.grid == self.p.grid == self.R.grid:
            raise ContractError("triplet fields live on different grids")

    @property
    def grid(self) -> TorusGrid:
        return self.u.grid


def zero_triplet(grid: TorusGrid) -> SolutionTriplet:
    ncomp = len(sym_pairs(grid.d))
    return SolutionTriplet(
        Field(grid, np.zeros((grid.d,) + grid.shape), 1),
        Field(grid, np.zeros((1,) + grid.shape), 0),
        Field(grid, np.zeros((ncomp,) + grid.shape), 2),
    )


def _parseval(coeffs: np.ndarray, grid: TorusGrid, weight: np.ndarray | None = None) -> float:
    w = grid.parseval_weights if weight is None else grid.parseval_weights * weight
    return float(np.sum(w * (coeffs.real**2 + coeffs.imag**2)))


def _sym_div_forcing(grid: TorusGrid, entry: Callable[[int, int, int], np.ndarray]) -> np.ndarray:
    """Spectral divergence of the symmetric matrix whose ``(a, b)`` entry is ``entry(c, a, b)``.

    Entries are produced one at a time so only one physical product is alive.
    """
    kv = grid.wavevector
    acc = np.zeros((grid.d,) + grid.spectral_shape, dtype=complex)
    for c, (a, b) in enumerate(sym_pairs(grid.d)):
        m = to_spectral(entry(c, a, b), grid)
        acc[a] += kv[b] * m
        if a != b:
            acc[b] += kv[a] * m
        del m
    acc *= 2j * np.pi
    return acc


def _inv_k2(grid: TorusGrid) -> np.ndarray:
    with np.errstate(divide="ignore"):
        inv = 1.0 / grid.knorm2
    inv[grid.singular_mask] = 0.0
    return inv


def seed_triplet(
    grid: TorusGrid, rng: np.random.Generator, kmax: int = 2, amplitude: float = 0.05
) -> SolutionTriplet:
    """Random band-limited divergence-free ``u`` with the stress that makes it exact.

    ``p`` is the Navier-Stokes pressure of ``u`` and ``R`` the inverse
    divergence of ``-lap u + div(u (x) u) + grad p``, so the NSR residual
    vanishes up to roundoff.
    """
    d = grid.d
    u = leray_project(random_field(grid, 1, kmax, rng)).values
    norm = math.sqrt(float(magnitude2(u, 1, d).mean()))
    u *= amplitude / norm
    kv = grid.wavevector
    forcing = _sym_div_forcing(grid, lambda c, a, b: u[a] * u[b])
    phat = TWO_PI * 1j * sum(kv[j] * forcing[j] for j in range(d))
    phat *= _inv_k2(grid) / TWO_PI**2
    for j in range(d):
        forcing[j] += TWO_PI**2 * grid.knorm2 * to_spectral(u[j], grid) + 2j * np.pi * kv[j] * phat
    p = from_spectral(phat, grid)[None]
    del phat
    R = np.empty((len(sym_pairs(d)),) + grid.shape)
    for c, coeffs in inverse_div_spectral(forcing, grid):
        R[c] = from_spectral(coeffs, grid)
    del forcing
    return SolutionTriplet(Field(grid, u, 1), Field(grid, p, 0), Field(grid, R, 2))


def nsr_residual(t: SolutionTriplet) -> dict:
    """L2 norm of ``-lap u + div(u (x) u) + grad p - div R`` and of each term.

    Evaluated one component at a time through Parseval; ``relative`` divides
    by the largest term norm.
    """
    grid = t.grid
    d = grid.d
    kv = grid.wavevector
    idx = sym_index(d)
    u, R = t.u.values, t.R.values
    phat = to_spectral(t.p.values[0], grid)
    sums = dict(laplacian=0.0, advection=0.0, pressure=0.0, stress=0.0, residual=0.0)
    for i in range(d):
        lap = TWO_PI**2 * grid.knorm2 * to_spectral(u[i], grid)
        adv = np.zeros(grid.spectral_shape, dtype=complex)
        st = np.zeros(grid.spectral_shape, dtype=complex)
        for j in range(d):
            adv += kv[j] * to_spectral(u[i] * u[j], grid)
            st += kv[j] * to_spectral(R[idx[(min(i, j), max(i, j))]], grid)
        adv *= 2j * np.pi
        st *= 2j * np.pi
        prs = 2j * np.pi * kv[i] * phat
        sums["laplacian"] += _parseval(lap, grid)
        sums["advection"] += _parseval(adv, grid)
        sums["pressure"] += _parseval(prs, grid)
        sums["stress"] += _parseval(st, grid)
        lap += adv
        lap += prs
        lap -= st
        sums["residual"] += _parseval(lap, grid)
        del lap, adv, st, prs
    out = {k: math.sqrt(v) for k, v in sums.items()}
    out["scale"] = max(out["laplacian"], out["advection"], out["pressure"], out["stress"])
    out["relative"] = out["residual"] / out["scale"] if out["scale"] > 0 else 0.0
    return out


# ---------------------------------------------------------------- mollification

def mollify_triplet(t: SolutionTriplet, l: float, inplace: bool = False) -> SolutionTriplet:
    """Mollify at radius ``l`` and move the commutator of the product into the stress.

    The new stress is ``eta*R - eta*(u (x) u) + ubar (x) ubar`` with the trace
    parts sent to the pressure, so it stays trace free.  With ``inplace`` the
    arrays of ``t`` are overwritten (the caller must not use ``t`` afterwards).
    """
    grid = t.grid
    d = grid.d
    sym = mollifier_symbol(grid, float(l))
    smooth = lambda x: from_spectral(to_spectral(x, grid) * sym, grid)
    if inplace:
        u, p, R = t.u.values, t.p.values, t.R.values
    else:
        u, p, R = t.u.values.copy(), t.p.values.copy(), t.R.values.copy()
    for c, (a, b) in enumerate(sym_pairs(d)):
        R[c] = smooth(R[c] - u[a] * u[b])
    q = smooth(magnitude2(u, 1, d))
    for a in range(d):
        u[a] = smooth(u[a])
    q -= magnitude2(u, 1, d)
    q /= d
    for c, (a, b) in enumerate(sym_pairs(d)):
        R[c] += u[a] * u[b]
        if a == b:
            R[c] += q
    p[0] = smooth(p[0]) + q
    p[0] -= p[0].mean()
    return SolutionTriplet(Field(grid, u, 1), Field(grid, p, 0), Field(grid, R, 2))


def _grad_l2(values: np.ndarray, grid: TorusGrid, weights=None) -> float:
    total = 0.0
    w = weights or [1.0] * values.shape[0]
    for wc, comp in zip(w, values):
        total += wc * _parseval(to_spectral(comp, grid), grid, TWO_PI**2 * grid.knorm2)
    return math.sqrt(total)


def _l2(values: np.ndarray, rank: int, d: int) -> float:
    return math.sqrt(float(magnitude2(values, rank, d).mean()))


def _l1(values: np.ndarray, rank: int, d: int) -> float:
    return float(np.sqrt(magnitude2(values, rank, d)).mean())


def mollification_witnesses(t: SolutionTriplet, t_l: SolutionTriplet, l: float) -> dict:
    """Measured forms of the mollification estimates.

    ``velocity_ratio`` is ``|ubar - u|_2 / (l |grad u|_2)`` and
    ``stress_constant`` is ``(|Rbar|_1 - |R|_1) / (l^2 |grad u|_2^2)``.
    """
    d = t.grid.d
    gu = _grad_l2(t.u.values, t.grid)
    du = _l2(t_l.u.values - t.u.values, 1, d)
    r0 = _l1(t.R.values, 2, d)
    r1 = _l1(t_l.R.values, 2, d)
    return {
        "velocity_gap": du,
        "velocity_bound": l * gu,
        "velocity_ratio": du / (l * gu) if gu > 0 else 0.0,
        "stress_l1": r0,
        "mollified_stress_l1": r1,
        "stress_constant": (r1 - r0) / (l * l * gu * gu) if gu > 0 else 0.0,
    }


# ---------------------------------------------------------------- cutoffs

def _unit_step(t):
    """1 for t <= 3/4, 0 for t >= 1, smooth in between."""
    return smooth_step(4.0 * np.asarray(t, dtype=float) - 2.0)


def shell_weight(i: int, t) -> np.ndarray:
    """Squared cutoff of shell ``i`` at normalized stress size ``t``.

    Shell 0 covers ``t < 1``; shell ``i >= 1`` is supported in
    ``(3/4 4^(i-1), 4^i)`` and the weights sum to one.
    """
    if i == 0:
        return _unit_step(t)
    t = np.asarray(t, dtype=float)
    w = _unit_step(t / 4.0**i) - _unit_step(t / 4.0 ** (i - 1))
    return np.maximum(w, 0.0)


@dataclass(frozen=True, eq=False)
class CutoffFamily:
    """Dyadic partition of the grid by the size of the mollified stress.

    ``rnorm`` is ``|Rbar|_F / stress_unit``; shell ``i`` has cutoff
    ``sqrt(shell_weight(i, rnorm))``.
    """

    stress_unit: float
    i_max: int
    shells: tuple[int, ...]
    rnorm: np.ndarray = field(repr=False)

    def chi_squared(self, i: int, t: np.ndarray | None = None) -> np.ndarray:
        if t is not None:
            return shell_weight(i, t)
        flat = self.rnorm.reshape(-1)
        out = np.empty(flat.size)
        for lo in range(0, flat.size, _CHUNK):
            out[lo:lo + _CHUNK] = shell_weight(i, flat[lo:lo + _CHUNK])
        return out.reshape(self.rnorm.shape)

    def chi(self, i: int, t: np.ndarray | None = None) -> np.ndarray:
        return np.sqrt(self.chi_squared(i, t))

    def partition_defect(self) -> float:
        flat = self.rnorm.reshape(-1)
        worst = 0.0
        for lo in range(0, flat.size, _CHUNK):
            part = flat[lo:lo + _CHUNK]
            total = sum(shell_weight(i, part) for i in self.shells)
            worst = max(worst, float(np.max(np.abs(total - 1.0))))
        return worst

    def shell_ranges(self) -> dict[int, tuple[float, float]]:
        """Range of ``rnorm / 4^(i-1)`` over the support of each shell ``i >= 1``."""
        out = {}
        for i in self.shells:
            if i == 0:
                continue
            supp = self.chi_squared(i) > 0
            if supp.any():
                vals = self.rnorm[supp] / 4.0 ** (i - 1)
                out[i] = (float(vals.min()), float(vals.max()))
        return out


def build_cutoffs(Rbar: Field, params: IterationParams) -> CutoffFamily:
    s = params.stress_unit.value()
    rnorm = np.sqrt(magnitude2(Rbar.values, 2, Rbar.d)) / s
    top = float(rnorm.max())
    i_max = 0
    while 4.0 ** (i_max + 2) < top:
        i_max += 1
    shells = [0]
    while 0.75 * 4.0 ** shells[-1] < top:
        shells.append(shells[-1] + 1)
    return CutoffFamily(s, i_max, tuple(shells), rnorm)


# ---------------------------------------------------------------- perturbation

@dataclass(frozen=True, eq=False)
class PrincipalPerturbation:
    """Principal perturbation ``w^p`` and the pressure it absorbs.

    ``pressure`` is ``sum_i 4^(i+1) stress_unit chi_i^2``.  ``tubes`` maps
    ``(parity, n)`` to the base-grid samples of each tube.
    """

    w: Field
    pressure: Field
    shells: tuple[int, ...]
    sigma: int
    mu: float
    tubes: dict = field(repr=False)
    argument_radius: float
    gamma_range: tuple[float, float]
    parity_overlap: int

    @property
    def grid(self) -> TorusGrid:
        return self.w.grid


def _shell_entry(Rflat: list[np.ndarray], idx: dict, pts, scale: float):
    def entry(a: int, b: int):
        val = -Rflat[idx[(a, b)]][pts] / scale
        return val + 1.0 if a == b else val
    return entry


def principal_perturbation(
    Rbar: Field,
    cut: CutoffFamily,
    fam: MikadoFamily,
    profile: Profile,
    params: IterationParams,
    min_points_per_radius: float = DEFAULT_POINTS_PER_RADIUS,
) -> PrincipalPerturbation:
    """Sum over shells and directions of ``amplitude_i chi_i Gamma_k(A_i) psi_k(sigma x) k``.

    ``A_i = Id - Rbar / (4^(i+1) stress_unit)``.  Coefficients are only
    evaluated where the tubes are nonzero.
    """
    grid = Rbar.grid
    d, N = grid.d, grid.N
    ds = fam.ds
    sigma = params.sigma_int
    mu = params.mu.value()
    M = check_tube_resolution(N, sigma, mu, fam.mu0, min_points_per_radius)
    if fam.ncount < 2 and len(cut.shells) > 1:
        raise DomainError("neighbouring shells need two disjoint line families (ncount >= 2)")
    s = cut.stress_unit
    idx = sym_index(d)
    Rflat = [Rbar.values[c].reshape(-1) for c in range(Rbar.ncomp)]
    tflat = cut.rnorm.reshape(-1)
    w = np.zeros((d, grid.npoints))
    P = np.zeros(grid.npoints)
    tubes: dict = {}
    supports: dict = {}
    radius = 0.0
    gmin, gmax = np.inf, 0.0
    for i in cut.shells:
        chi2 = cut.chi_squared(i).reshape(-1)
        P += 4.0 ** (i + 1) * s * chi2
        supp = chi2 > 0
        if supp.any():
            radius = max(radius, float(tflat[supp].max()) / 4.0 ** (i + 1))
        del chi2, supp
        if radius > 0.5 + 1e-6:
            raise DomainError(f"shell {i}: matrix argument leaves the ball (|Id - A| = {radius:.6g})")
        par = i % fam.ncount
        amp = params.amplitude(i)
        scale = 4.0 ** (i + 1) * s
        for n, k in enumerate(ds.K):
            if (par, n) not in supports:
                ts = tube_samples(profile, fam.anchor(par, n), k, mu, M)
                tubes[(par, n)] = ts
                supports[(par, n)] = ts.expand(N)
            flat, vals = supports[(par, n)]
            chi = np.sqrt(shell_weight(i, tflat[flat]))
            sel = chi > 0
            if not sel.any():
                continue
            pts = flat[sel]
            g2 = gamma_squared_component(ds, n, _shell_entry(Rflat, idx, pts, scale))
            if g2.min() <= 0:
                raise DomainError(f"shell {i}, direction {k}: coefficient squared {g2.min():.3e} <= 0")
            g = np.sqrt(g2)
            gmin, gmax = min(gmin, float(g.min())), max(gmax, float(g.max()))
            rho = amp * chi[sel] * g
            for j, kj in enumerate(k):
                if kj:
                    w[j, pts] += kj * rho * vals[sel]
    parity_sets = []
    for par in range(fam.ncount):
        keys = [key for key in supports if key[0] == par]
        parity_sets.append(np.unique(np.concatenate([supports[key][0] for key in keys])) if keys else np.empty(0, int))
    overlap = 0
    for a in range(len(parity_sets)):
        for b in range(a + 1, len(parity_sets)):
            overlap += int(np.intersect1d(parity_sets[a], parity_sets[b], assume_unique=True).size)
    return PrincipalPerturbation(
        Field(grid, w.reshape((d,) + grid.shape), 1),
        Field(grid, P.reshape((1,) + grid.shape), 0),
        cut.shells,
        sigma,
        mu,
        tubes,
        radius,
        (gmin if gmax > 0 else 0.0, gmax),
        overlap,
    )


def coefficient_field(Rbar: Field, cut: CutoffFamily, fam: MikadoFamily, params: IterationParams, i: int, n: int) -> Field:
    """Dense ``rho_{i,k}``: amplitude times cutoff times ``Gamma_k(A_i)`` (zero off the shell)."""
    grid = Rbar.grid
    chi2 = cut.chi_squared(i)
    supp = np.flatnonzero(chi2.reshape(-1) > 0)
    out = np.zeros(grid.npoints)
    if supp.size:
        Rflat = [Rbar.values[c].reshape(-1) for c in range(Rbar.ncomp)]
        scale = 4.0 ** (i + 1) * cut.stress_unit
        g2 = gamma_squared_component(fam.ds, n, _shell_entry(Rflat, sym_index(grid.d), supp, scale))
        out[supp] = params.amplitude(i) * np.sqrt(chi2.reshape(-1)[supp] * np.maximum(g2, 0.0))
    return Field(grid, out.reshape((1,) + grid.shape), 0)


def oscillation_identity_check(
    Rbar: Field, pert: PrincipalPerturbation, cut: CutoffFamily, fam: MikadoFamily, slabs: int = 16
) -> dict:
    """Pointwise gap between ``w^p (x) w^p + Rbar - P Id`` and ``sum rho^2 (psi^2 - 1) k (x) k``.

    Both sides are built slab by slab along the first axis.
    """
    grid = Rbar.grid
    d, N = grid.d, grid.N
    ds = fam.ds
    s = cut.stress_unit
    idx = sym_index(d)
    pairs = sym_pairs(d)
    w, R, P = pert.w.values, Rbar.values, pert.pressure.values[0]
    bases = {key: ts.dense_base() for key, ts in pert.tubes.items()}
    M = next(iter(pert.tubes.values())).M if pert.tubes else N
    sigma = N // M
    step = max(1, N // slabs)
    gap, scale = 0.0, 0.0
    for r0 in range(0, N, step):
        sl = slice(r0, min(N, r0 + step))
        rows = np.arange(sl.start, sl.stop) % M
        lhs = []
        for c, (a, b) in enumerate(pairs):
            val = w[a, sl] * w[b, sl] + R[c, sl]
            if a == b:
                val = val - P[sl]
            lhs.append(val)
        rhs = [np.zeros_like(lhs[0]) for _ in pairs]
        t = cut.rnorm[sl]
        for i in pert.shells:
            chi2 = shell_weight(i, t)
            if not np.any(chi2 > 0):
                continue
            scale_i = 4.0 ** (i + 1) * s
            weight = scale_i * chi2
            g2 = gamma_squared_of_entries(
                ds, lambda a, b: (1.0 if a == b else 0.0) - R[idx[(a, b)], sl] / scale_i
            )
            par = i % fam.ncount
            for n, k in enumerate(ds.K):
                key = (par, n)
                if key not in bases:
                    continue
                psi = np.tile(bases[key][rows], (1,) + (sigma,) * (d - 1))
                f = weight * g2[n] * (psi * psi - 1.0)
                for c, (a, b) in enumerate(pairs):
                    if k[a] * k[b]:
                        rhs[c] += (k[a] * k[b]) * f
        for c in range(len(pairs)):
            gap = max(gap, float(np.max(np.abs(lhs[c] - rhs[c]))))
            scale = max(scale, float(np.max(np.abs(lhs[c]))))
    return {"absolute": gap, "scale": scale, "relative": gap / scale if scale > 0 else 0.0}


def corrector(w_p: Field) -> Field:
    """``-grad lap^-1 div w^p``: the gradient field that makes ``w^p + w^c`` divergence free.

    For exact Mikado coefficients this equals ``-|grad|^-1 R_j`` applied to
    ``sum (div a) psi(sigma x)``; evaluating it on the sampled ``w^p`` keeps
    the cancellation exact on the grid.
    """
    grid = w_p.grid
    kv = grid.wavevector
    proj = np.zeros(grid.spectral_shape, dtype=complex)
    for j in range(grid.d):
        proj += kv[j] * to_spectral(w_p.values[j], grid)
    proj *= _inv_k2(grid)
    out = np.empty_like(w_p.values)
    for j in range(grid.d):
        out[j] = -from_spectral(kv[j] * proj, grid)
    return Field(grid, out, 1)


def product_rule_split(
    Rbar: Field,
    pert: PrincipalPerturbation,
    cut: CutoffFamily,
    fam: MikadoFamily,
    params: IterationParams,
    oscillation_forcing: np.ndarray | None = None,
) -> dict:
    """Oscillation error and corrector with derivatives falling on the coefficients only.

    In the continuum ``k . grad psi_k = 0`` gives
    ``div(rho^2 (psi^2 - 1) k (x) k) = (k . grad rho^2)(psi^2 - 1) k`` and
    ``div(rho psi k) = (k . grad rho) psi``.  On the grid the spectral
    derivative of a product picks up extra terms at the base-grid Nyquist
    corners of the tube pattern.  This returns the L1 norm of the
    product-rule oscillation error, the L2 norm of the product-rule corrector
    and, given the assembled oscillation forcing, the L1 norm of the
    remainder.
    """
    grid = Rbar.grid
    d = grid.d
    kv = grid.wavevector
    sigma = pert.sigma
    osc = np.zeros((d,) + grid.spectral_shape, dtype=complex)
    corr = np.zeros(grid.spectral_shape, dtype=complex)
    for i in pert.shells:
        for n, k in enumerate(fam.ds.K):
            key = (i % fam.ncount, n)
            if key not in pert.tubes:
                continue
            rho = coefficient_field(Rbar, cut, fam, params, i, n).values[0]
            if not rho.any():
                continue
            along = 2j * np.pi * sum(kj * kv[j] for j, kj in enumerate(k) if kj)
            base = pert.tubes[key].dense_base()
            psi = np.tile(base, (sigma,) * d)
            drho = from_spectral(along * to_spectral(rho, grid), grid)
            corr += to_spectral(drho * psi, grid)
            del drho
            drho2 = from_spectral(along * to_spectral(rho * rho, grid), grid)
            psi *= psi
            psi -= 1.0
            fh = to_spectral(drho2 * psi, grid)
            del drho2, psi, rho
            for j, kj in enumerate(k):
                if kj:
                    osc[j] += kj * fh
            del fh
    out = {}
    _, out["oscillation_product_rule_l1"] = _stress_from_forcing(osc, grid, False)
    out["corrector_product_rule_l2"] = math.sqrt(_parseval(corr, grid, _inv_k2(grid) / TWO_PI**2))
    del corr
    if oscillation_forcing is not None:
        osc -= oscillation_forcing
        _, out["oscillation_remainder_l1"] = _stress_from_forcing(osc, grid, False)
    return out


# ---------------------------------------------------------------- new stress

def _stress_from_forcing(forcing: np.ndarray, grid: TorusGrid, keep: bool) -> tuple[np.ndarray | None, float]:
    """Inverse divergence of a spectral forcing: samples (if kept) and the L1 norm."""
    d = grid.d
    out = np.empty((len(sym_pairs(d)),) + grid.shape) if keep else None
    mag2 = np.zeros(grid.shape)
    for c, coeffs in inverse_div_spectral(forcing, grid):
        comp = from_spectral(coeffs, grid)
        del coeffs
        a, b = sym_pairs(d)[c]
        mag2 += (1.0 if a == b else 2.0) * comp * comp
        if keep:
            out[c] = comp
        del comp
    return out, float(np.sqrt(mag2).mean())


def _oscillation_forcing(w: np.ndarray, Rbar: np.ndarray, P: np.ndarray, grid: TorusGrid) -> np.ndarray:
    def entry(c, a, b):
        val = w[a] * w[b] + Rbar[c]
        if a == b:
            val -= P
        return val
    return _sym_div_forcing(grid, entry)


def _correction_forcing(wp: np.ndarray, wc: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return _sym_div_forcing(grid, lambda c, a, b: wc[a] * wp[b] + wp[a] * wc[b] + wc[a] * wc[b])


def _quadratic_forcing(w: np.ndarray, ubar: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return _sym_div_forcing(grid, lambda c, a, b: w[a] * ubar[b] + ubar[a] * w[b])


def _linear_forcing(w: np.ndarray, grid: TorusGrid) -> np.ndarray:
    out = np.empty((grid.d,) + grid.spectral_shape, dtype=complex)
    for j in range(grid.d):
        out[j] = TWO_PI**2 * grid.knorm2 * to_spectral(w[j], grid)
    return out


@dataclass(frozen=True, eq=False)
class ReynoldsErrorBreakdown:
    """New stress, its four parts and the new pressure.

    ``parts`` maps each of ``quadratic``, ``linear``, ``oscillation`` and
    ``correction`` to its field, or to None when fields were not kept to
    save memory; ``l1`` always holds their L1 norms.
    """

    parts: dict
    l1: dict
    R: Field
    p: Field
    R_l1: float

    @property
    def E_q(self) -> Field | None:
        return self.parts["quadratic"]

    @property
    def E_l(self) -> Field | None:
        return self.parts["linear"]

    @property
    def E_o(self) -> Field | None:
        return self.parts["oscillation"]

    @property
    def E_c(self) -> Field | None:
        return self.parts["correction"]


def _new_pressure(pbar: np.ndarray, P: np.ndarray) -> np.ndarray:
    out = pbar - P
    out -= out.mean()
    return out


def new_stress(
    t_l: SolutionTriplet, pert: PrincipalPerturbation, w_c: Field, keep_parts: bool = True
) -> tuple[ReynoldsErrorBreakdown, SolutionTriplet]:
    """New stress ``R(div(...))`` for each error part, new pressure and new triplet.

    With ``keep_parts`` the new stress is the literal sum of the four part
    fields; otherwise it is the inverse divergence of the summed forcings.
    """
    grid = t_l.grid
    d = grid.d
    ubar, Rbar = t_l.u.values, t_l.R.values
    wp, wc = pert.w.values, w_c.values
    w = wp + wc
    forcings = {
        "oscillation": lambda: _oscillation_forcing(wp, Rbar, pert.pressure.values[0], grid),
        "correction": lambda: _correction_forcing(wp, wc, grid),
        "quadratic": lambda: _quadratic_forcing(w, ubar, grid),
        "linear": lambda: _linear_forcing(w, grid),
    }
    parts, l1 = {}, {}
    total = None
    for name, make in forcings.items():
        F = make()
        vals, l1[name] = _stress_from_forcing(F, grid, keep_parts)
        parts[name] = Field(grid, vals, 2) if keep_parts else None
        if not keep_parts:
            total = F if total is None else total + F
        del F
    if keep_parts:
        Rn = sum((parts[name].values for name in ERROR_PARTS[1:]), parts[ERROR_PARTS[0]].values.copy())
    else:
        Rn, _ = _stress_from_forcing(total, grid, True)
    p_n = _new_pressure(t_l.p.values[0], pert.pressure.values[0])[None]
    bd = ReynoldsErrorBreakdown(parts, l1, Field(grid, Rn, 2), Field(grid, p_n, 0), _l1(Rn, 2, d))
    return bd, SolutionTriplet(Field(grid, ubar + w, 1), bd.p, bd.R)


# ---------------------------------------------------------------- reporting

@dataclass(frozen=True)
class NormReport:
    """Measured norms against the inductive targets at the given parameters.

    ``rows`` has one entry per estimate; ratios above one are expected at
    desk scale and are informational.
    """

    rows: list
    parts: dict

    def to_json(self) -> dict:
        return {"rows": self.rows, "parts": self.parts}


def _increment_norms(u: np.ndarray, u_prev, grid: TorusGrid) -> tuple[float, float]:
    l2, g2 = 0.0, 0.0
    for j in range(grid.d):
        diff = u[j] - (0.0 if u_prev is None else np.asarray(u_prev[j]))
        l2 += float(np.mean(diff * diff))
        g2 += _parseval(to_spectral(diff, grid), grid, TWO_PI**2 * grid.knorm2)
        del diff
    return math.sqrt(l2), math.sqrt(g2)


def norm_report(
    t: SolutionTriplet,
    params: IterationParams,
    u_prev=None,
    breakdown: ReynoldsErrorBreakdown | None = None,
) -> NormReport:
    """Six measured quantities with their targets.

    ``u_prev`` (array of shape ``(d, N, ..., N)``) is the previous velocity;
    when omitted the increment is measured from zero.
    """
    grid = t.grid
    d = grid.d
    lam = params.lam.value()
    delta = params.delta.value()
    unit_next = (params.delta_next * params.lam ** (-2 * params.alpha)).value()
    inc, ginc = _increment_norms(t.u.values, u_prev, grid)
    measured = {
        "stress_l1": _l1(t.R.values, 2, d),
        "velocity_l2": _l2(t.u.values, 1, d),
        "gradient_l2": _grad_l2(t.u.values, grid),
        "increment_l2": inc,
        "increment_gradient_l2": ginc / lam,
        "increment_total": inc + ginc / lam,
    }
    targets = {
        "stress_l1": (unit_next, "delta_{n+1} lam_n^(-2 alpha)"),
        "velocity_l2": (1.0 - math.sqrt(delta), "1 - delta_n^(1/2)"),
        "gradient_l2": (lam * math.sqrt(delta), "lam_n delta_n^(1/2)"),
        "increment_l2": (lam ** -float(params.beta), "lam_n^(-beta)"),
        "increment_gradient_l2": (lam ** -float(params.beta), "lam_n^(-1) |grad increment|_2 vs lam_n^(-beta)"),
        "increment_total": (lam ** -float(params.beta), "lam_n^(-beta)"),
    }
    rows = []
    for name, value in measured.items():
        target, formula = targets[name]
        rows.append({
            "name": name,
            "measured": value,
            "target": target,
            "ratio": value / target if target > 0 else math.inf,
            "formula": formula,
        })
    parts = {}
    if breakdown is not None:
        parts = dict(breakdown.l1)
        parts["sum_of_parts"] = sum(breakdown.l1.values())
        parts["new_stress"] = breakdown.R_l1
        parts["triangle_ok"] = breakdown.R_l1 <= parts["sum_of_parts"] * (1 + 1e-12)
    return NormReport(rows, parts)


# ---------------------------------------------------------------- the step

@dataclass(frozen=True, eq=False)
class StepResult:
    triplet: SolutionTriplet
    breakdown: ReynoldsErrorBreakdown
    report: NormReport
    diagnostics: dict


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _div_l2(values: np.ndarray, grid: TorusGrid) -> float:
    acc = np.zeros(grid.spectral_shape, dtype=complex)
    for j in range(grid.d):
        acc += grid.wavevector[j] * to_spectral(values[j], grid)
    return TWO_PI * math.sqrt(_parseval(acc, grid))


def _keep_parts_default(grid: TorusGrid) -> bool:
    need = len(ERROR_PARTS) * len(sym_pairs(grid.d)) * grid.npoints * 8
    return need <= max_bytes() // 4


def iterate_step(
    t: SolutionTriplet,
    params: IterationParams,
    fam: MikadoFamily,
    profile: Profile,
    *,
    consume: bool = False,
    keep_parts: bool | None = None,
    min_points_per_radius: float = DEFAULT_POINTS_PER_RADIUS,
    tol: float = 1e-8,
    strict: bool = True,
    split_diagnostics: bool = False,
) -> StepResult:
    """Run one full step from ``t`` and verify its structural identities.

    With ``consume`` the arrays of ``t`` are reused in place and the old
    velocity is parked in a temporary file, which keeps a ``64^4`` step near
    25 scalar fields of memory.  With ``strict`` a failed identity (closure,
    divergence, partition or oscillation cancellation) raises
    :class:`AssemblyError`; otherwise it is only recorded.  With
    ``split_diagnostics`` the product-rule parts of the oscillation error and
    of the corrector are measured as well (about four extra fields of memory
    and six transforms per shell and direction).
    """
    start = time.perf_counter()
    grid = t.grid
    d = grid.d
    if keep_parts is None:
        keep_parts = _keep_parts_default(grid)
    diag: dict = {"grid": {"d": d, "N": grid.N}, "keep_parts": keep_parts, "consume": consume}
    l = params.l.value()
    diag["l"] = l

    tmpdir = None
    if consume:
        if t.u is None:
            raise ContractError("triplet was already released")
        tmpdir = tempfile.TemporaryDirectory(prefix="citorus-")
        spill = os.path.join(tmpdir.name, "u_prev.npy")
        np.save(spill, t.u.values)
        t = SolutionTriplet(*t.release())
        u_prev = None
    else:
        u_prev = t.u.values
    try:
        t_l = mollify_triplet(t, l, inplace=consume)
        del t
        diag["mollified_residual"] = nsr_residual(t_l)["relative"]
        ubar, pbar, Rbar = t_l.release()
        del t_l

        cut = build_cutoffs(Rbar, params)
        diag["stress_unit"] = cut.stress_unit
        diag["i_max"] = cut.i_max
        diag["shells"] = list(cut.shells)
        diag["partition_defect"] = cut.partition_defect()
        diag["shell_ranges"] = {str(i): r for i, r in cut.shell_ranges().items()}
        diag["mollified_stress_sup"] = float(cut.rnorm.max()) * cut.stress_unit

        pert = principal_perturbation(Rbar, cut, fam, profile, params, min_points_per_radius)
        diag["sigma"] = pert.sigma
        diag["mu"] = pert.mu
        diag["points_per_radius"] = grid.N / pert.sigma / pert.mu
        diag["argument_radius"] = pert.argument_radius
        diag["gamma_range"] = list(pert.gamma_range)
        diag["parity_overlap"] = pert.parity_overlap
        osc = oscillation_identity_check(Rbar, pert, cut, fam)
        diag["oscillation_identity"] = osc
        wp = pert.w.values
        wp_l2 = _l2(wp, 1, d)
        diag["principal_l2"] = wp_l2
        diag["principal_mean"] = float(np.max(np.abs(pert.w.means())))

        # oscillation part first: it is the only consumer of the mollified stress
        F = _oscillation_forcing(wp, Rbar.values, pert.pressure.values[0], grid)
        if split_diagnostics:
            split = product_rule_split(Rbar, pert, cut, fam, params, F)
            diag.update(split)
        del cut
        p_n = _new_pressure(pbar.values[0], pert.pressure.values[0])
        del pbar, Rbar
        pert = dataclasses.replace(pert, pressure=None)
        parts, l1 = {}, {}
        vals, l1["oscillation"] = _stress_from_forcing(F, grid, keep_parts)
        parts["oscillation"] = vals
        total = F
        del F, vals

        w_c = corrector(pert.w)
        wc = w_c.values
        wc_l2 = _l2(wc, 1, d)
        diag["corrector_l2"] = wc_l2
        diag["corrector_ratio"] = wc_l2 / wp_l2 if wp_l2 > 0 else 0.0
        if split_diagnostics:
            diag["corrector_product_rule_ratio"] = diag["corrector_product_rule_l2"] / wp_l2 if wp_l2 > 0 else 0.0
        F = _correction_forcing(wp, wc, grid)
        vals, l1["correction"] = _stress_from_forcing(F, grid, keep_parts)
        parts["correction"] = vals
        total += F
        del F, vals

        wp += wc  # wp now holds the full perturbation w
        del wc, w_c
        w = wp
        diag["perturbation_divergence"] = _div_l2(w, grid)
        w_grad = _grad_l2(w, grid)
        diag["perturbation_divergence_relative"] = diag["perturbation_divergence"] / w_grad if w_grad > 0 else 0.0
        diag["perturbation_sup"] = float(np.sqrt(magnitude2(w, 1, d).max()))
        F = _quadratic_forcing(w, ubar.values, grid)
        vals, l1["quadratic"] = _stress_from_forcing(F, grid, keep_parts)
        parts["quadratic"] = vals
        total += F
        del F, vals
        F = _linear_forcing(w, grid)
        vals, l1["linear"] = _stress_from_forcing(F, grid, keep_parts)
        parts["linear"] = vals
        total += F
        del F, vals

        u_n = ubar.values
        u_n += w
        del w, wp, pert, ubar
        if keep_parts:
            del total
            Rn = parts["quadratic"] + parts["linear"]
            Rn += parts["oscillation"]
            Rn += parts["correction"]
        else:
            Rn, _ = _stress_from_forcing(total, grid, True)
            del total
        fields = {name: (Field(grid, parts[name], 2) if keep_parts else None) for name in ERROR_PARTS}
        bd = ReynoldsErrorBreakdown(
            fields, {name: l1[name] for name in ERROR_PARTS}, Field(grid, Rn, 2), Field(grid, p_n[None], 0), _l1(Rn, 2, d)
        )
        triplet = SolutionTriplet(Field(grid, u_n, 1), bd.p, bd.R)

        res = nsr_residual(triplet)
        diag["residual"] = res
        grad_u = _grad_l2(u_n, grid)
        diag["velocity_divergence_relative"] = _div_l2(u_n, grid) / grad_u if grad_u > 0 else 0.0
        if consume:
            u_prev = np.load(spill, mmap_mode="r")
        report = norm_report(triplet, params, u_prev, bd)
    finally:
        u_prev = None
        if tmpdir is not None:
            tmpdir.cleanup()
    diag["runtime_s"] = time.perf_counter() - start
    diag["peak_rss_mb"] = _peak_rss_mb()

    failures = []
    if res["relative"] > tol:
        failures.append(f"NSR closure residual {res['relative']:.3e} > {tol}")
    if diag["velocity_divergence_relative"] > tol:
        failures.append(f"divergence of u_n {diag['velocity_divergence_relative']:.3e} > {tol}")
    if diag["partition_defect"] > 1e-10:
        failures.append(f"cutoff partition defect {diag['partition_defect']:.3e} > 1e-10")
    if osc["relative"] > tol:
        failures.append(f"oscillation identity gap {osc['relative']:.3e} > {tol}")
    diag["failures"] = failures
    if failures and strict:
        raise AssemblyError("; ".join(failures), diag)
    return StepResult(triplet, bd, report, diag)
