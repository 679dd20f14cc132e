"""Exact exponent bookkeeping and numerical sweeps for the analytic estimates.

Two kinds of checks live here.  Inequalities between exponents of the
frequency ladder have explicit rational content and are decided exactly with
:class:`fractions.Fraction`.  Estimates with unstated constants (the
oscillation commutator, the mollification commutator, the composition bound,
dyadic tail decay) can only be measured: these functions return quotients,
fitted slopes and drift across doubling ladders, never a verdict of their own.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .spectral_torus import (
    ContractError,
    Field,
    Multiplier,
    ResolutionError,
    TorusGrid,
    apply_multiplier,
    from_spectral,
    gradient_lp_norm,
    lp_norm,
    lp_symbol,
    make_grid,
    mollifier_symbol,
    random_field,
    to_spectral,
)

__all__ = [
    "ExponentInequality",
    "InequalityResult",
    "EXPONENT_INEQUALITIES",
    "check_exponent_inequalities",
    "CommutatorSweepConfig",
    "CommutatorMeasurement",
    "band_limited_scalar",
    "oscillating_scalar",
    "amplitude_bound",
    "commutator_sweep",
    "commutator_ladder",
    "gaussian_spectrum_scalar",
    "dyadic_tail_check",
    "cet_check",
    "cet_ladder",
    "ScalarMap",
    "scalar_map",
    "composition_norm_check",
    "composition_sweep",
    "fit_slope",
    "derivative_magnitude2",
]

Rational = Fraction | int


# ---------------------------------------------------------------- exact exponents

def _rational(x, name: str) -> Fraction:
    if isinstance(x, bool) or isinstance(x, float):
        raise ContractError(f"{name} must be an exact rational, got {x!r}")
    return Fraction(x)


def _log_inverse_length(beta: Fraction, b: Fraction, alpha: Fraction) -> Fraction:
    """Exponent of ``lambda_n`` in the inverse mollification length."""
    return (1 + alpha - beta) / b + beta


@dataclass(frozen=True)
class ExponentInequality:
    """``lhs (<|<=) rhs`` between exponents of the current frequency.

    ``lhs`` and ``rhs`` take ``(beta, b, alpha, d)`` as Fractions (``d`` an
    int) and must return Fractions.
    """

    name: str
    group: str
    text: str
    lhs: Callable[[Fraction, Fraction, Fraction, int], Fraction]
    rhs: Callable[[Fraction, Fraction, Fraction, int], Fraction]
    strict: bool = True

    def evaluate(self, beta: Fraction, b: Fraction, alpha: Fraction, d: int) -> "InequalityResult":
        left = Fraction(self.lhs(beta, b, alpha, d))
        right = Fraction(self.rhs(beta, b, alpha, d))
        margin = right - left
        holds = margin > 0 if self.strict else margin >= 0
        return InequalityResult(self, left, right, margin, holds)


@dataclass(frozen=True)
class InequalityResult:
    inequality: ExponentInequality
    lhs: Fraction
    rhs: Fraction
    margin: Fraction
    holds: bool

    @property
    def name(self) -> str:
        return self.inequality.name

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "group": self.inequality.group,
            "text": self.inequality.text,
            "lhs": str(self.lhs),
            "rhs": str(self.rhs),
            "margin": str(self.margin),
            "margin_float": float(self.margin),
            "strict": self.inequality.strict,
            "holds": self.holds,
        }


def _next_stress(beta, b, alpha, d):
    return -2 * b * beta


EXPONENT_INEQUALITIES: tuple[ExponentInequality, ...] = (
    ExponentInequality(
        "oscillation_error", "new-stress",
        "-(1+alpha)/4 + (1-beta+alpha)(1+alpha)/b - beta < -2 b beta",
        lambda be, b, al, d: -(1 + al) / 4 + (1 - be + al) * (1 + al) / b - be,
        _next_stress,
    ),
    ExponentInequality(
        "linear_error", "new-stress",
        "-beta + 1 + (3/4)(1-d)/2 <= -2 b beta",
        lambda be, b, al, d: -be + 1 + Fraction(3, 4) * Fraction(1 - d, 2),
        _next_stress,
        strict=False,
    ),
    ExponentInequality(
        "quadratic_error_principal", "new-stress",
        "((d+1)/2) L - beta - (3/4)(d-1)/2 < -2 b beta,  L = (1+alpha-beta)/b + beta",
        lambda be, b, al, d: Fraction(d + 1, 2) * _log_inverse_length(be, b, al) - be
        - Fraction(3, 4) * Fraction(d - 1, 2),
        _next_stress,
    ),
    ExponentInequality(
        "quadratic_error_corrector", "new-stress",
        "(1-beta+2 alpha)/b - 1/4 < -2 b beta",
        lambda be, b, al, d: (1 - be + 2 * al) / b - Fraction(1, 4),
        _next_stress,
    ),
    ExponentInequality(
        "correction_error", "new-stress",
        "-2 beta - 1 + L < -2 b beta",
        lambda be, b, al, d: -2 * be - 1 + _log_inverse_length(be, b, al),
        _next_stress,
    ),
    ExponentInequality(
        "length_above_previous_frequency", "constants",
        "1 <= 1 + alpha + (b-1) beta  (exponents of lambda_{n-1})",
        lambda be, b, al, d: Fraction(1),
        lambda be, b, al, d: 1 + al + (b - 1) * be,
        strict=False,
    ),
    ExponentInequality(
        "length_below_previous_frequency_power", "constants",
        "1 + alpha + (b-1) beta <= 1 + 1/40",
        lambda be, b, al, d: 1 + al + (b - 1) * be,
        lambda be, b, al, d: 1 + Fraction(1, 40),
        strict=False,
    ),
    ExponentInequality(
        "length_gap_to_current_frequency", "constants",
        "1 + alpha + (b-1) beta < b",
        lambda be, b, al, d: 1 + al + (b - 1) * be,
        lambda be, b, al, d: b,
    ),
    ExponentInequality(
        "oscillation_below_concentration", "constants",
        "1/4 < 3/4",
        lambda be, b, al, d: Fraction(1, 4),
        lambda be, b, al, d: Fraction(3, 4),
    ),
    ExponentInequality(
        "previous_frequency_below_oscillation", "constants",
        "1/b < 1/4",
        lambda be, b, al, d: 1 / b,
        lambda be, b, al, d: Fraction(1, 4),
    ),
    ExponentInequality(
        "coefficient_frequency_below_oscillation", "constants",
        "L < 1/4  (room for some theta with l^-1 <= sigma^(1-theta))",
        lambda be, b, al, d: _log_inverse_length(be, b, al),
        lambda be, b, al, d: Fraction(1, 4),
    ),
)


def check_exponent_inequalities(beta: Rational, b: Rational, alpha: Rational, d: int) -> list[InequalityResult]:
    """Evaluate every ladder inequality exactly.

    All arguments must be exact (``int``, ``Fraction`` or a ``"p/q"`` string).
    """
    beta = _rational(beta, "beta")
    b = _rational(b, "b")
    alpha = _rational(alpha, "alpha")
    if beta <= 0 or b <= 0 or alpha <= 0:
        raise ContractError("beta, b and alpha must be positive")
    if int(d) != d or d < 2:
        raise ContractError("d must be an integer >= 2")
    return [ineq.evaluate(beta, b, alpha, int(d)) for ineq in EXPONENT_INEQUALITIES]


# ---------------------------------------------------------------- derivative tensors

def derivative_magnitude2(coeffs: np.ndarray, grid: TorusGrid, m: int) -> np.ndarray:
    """Pointwise squared Frobenius norm of the ``m``-th derivative tensor.

    ``coeffs`` are half-spectrum coefficients of a scalar.  Each sorted
    multi-index is weighted by the number of orderings it represents.
    """
    if m == 0:
        v = from_spectral(coeffs, grid)
        return v * v
    kv = grid.wavevector
    out = np.zeros(grid.shape)
    for combo in itertools.combinations_with_replacement(range(grid.d), m):
        sym = np.ones(grid.spectral_shape, dtype=complex)
        for j in combo:
            sym = sym * (2j * np.pi * kv[j])
        weight = math.factorial(m)
        for j in set(combo):
            weight //= math.factorial(combo.count(j))
        v = from_spectral(sym * coeffs, grid)
        out += weight * v * v
    return out


def _mag_lp(mag2: np.ndarray, p: float) -> float:
    if p == np.inf:
        return float(np.sqrt(mag2.max()))
    return float(np.mean(mag2 ** (p / 2.0)) ** (1.0 / p))


def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def _drift(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    return float(v.max() / v.min() - 1.0)


# ---------------------------------------------------------------- oscillation commutator

@dataclass(frozen=True)
class CommutatorSweepConfig:
    """One point of the fast-oscillation commutator sweep.

    ``decay`` is the target exponent of the tail term, ``depth`` the number
    of derivatives entering the amplitude bound, ``amplitude`` an optional
    prescribed bound (otherwise it is certified from the coefficients).
    """

    mu: int
    sigma: int
    theta: Fraction = Fraction(1, 2)
    p: int = 2
    s: Fraction = Fraction(0)
    decay: int = 10
    depth: int = 8
    amplitude: float | None = None

    def __post_init__(self):
        if int(self.mu) != self.mu or int(self.sigma) != self.sigma or self.mu < 1 or self.sigma < 1:
            raise ContractError("mu and sigma must be positive integers")
        theta = Fraction(self.theta)
        if not 0 < theta < 1:
            raise ContractError("theta must lie in (0, 1)")
        if not 0 <= Fraction(self.s) <= 1:
            raise ContractError("s must lie in [0, 1]")
        if self.p < 1:
            raise ContractError("p must be at least 1")
        # mu <= sigma^(1 - theta)  <=>  mu^den <= sigma^num, in integers
        e = 1 - theta
        if self.mu ** e.denominator > self.sigma ** e.numerator:
            raise ContractError(f"mu={self.mu} exceeds sigma^(1-theta) = {self.sigma}^{e}")


@dataclass(frozen=True)
class CommutatorMeasurement:
    sigma: int
    mu: int
    s: float
    amplitude: float
    product_norm: float
    holder_rhs: float
    holder_quotient: float
    inverse_norm: float
    inverse_rhs: float
    inverse_quotient: float
    smoothing_ratio: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def band_limited_scalar(grid: TorusGrid, mu: int, rng: np.random.Generator, mean: float = 1.0) -> Field:
    """Random real scalar with Fourier support in the ball ``|xi| <= mu``.

    The oscillating part is scaled to sup norm ``mean / 2`` so the field stays
    away from zero.
    """
    osc = random_field(grid, 0, mu, rng)
    c = to_spectral(osc.values[0], grid)
    c[grid.knorm2 > mu * mu] = 0.0
    vals = from_spectral(c, grid)[None]
    vals = vals / (2.0 * np.abs(vals).max()) * abs(mean) + mean
    return Field(grid, vals, 0)


def oscillating_scalar(grid: TorusGrid, sigma: int, rng: np.random.Generator, kmax: int = 2) -> Field:
    """Zero-mean ``g(sigma x)`` with ``g`` random and band-limited; unit L2 norm."""
    if grid.N % sigma:
        raise ResolutionError("sigma must divide N")
    base = make_grid(grid.d, grid.N // sigma)
    if not kmax < base.N // 2:
        raise ResolutionError(f"N/sigma = {base.N} cannot carry modes up to {kmax}")
    g = random_field(base, 0, kmax, rng).values[0]
    g = g / math.sqrt(float(np.mean(g * g)))
    return Field(grid, np.tile(g, (sigma,) * grid.d)[None], 0)


def amplitude_bound(a: Field, mu: float, depth: int) -> float:
    """Certified ``max_i sup|grad^i a| / (2 pi mu)^i`` for ``i <= depth``.

    Frequencies count cycles per unit length, so a mode of frequency ``mu``
    has derivatives of size ``(2 pi mu)^i``.  For a trigonometric polynomial
    ``sup|grad^i a| <= sum |a_xi| (2 pi |xi|)^i``.  Coefficients at transform
    roundoff level are dropped; high derivative weights would otherwise
    amplify them.
    """
    c = to_spectral(a.values[0], a.grid)
    absc = np.abs(c) * a.grid.parseval_weights
    absc[absc < 1e-13 * absc.max()] = 0.0
    kn = np.sqrt(a.grid.knorm2)
    return max(float(np.sum(absc * kn**i)) / mu**i for i in range(depth + 1))


def _spectrum_on_lattice(f: Field, sigma: int) -> bool:
    c = np.abs(to_spectral(f.values[0], f.grid))
    grid = f.grid
    on = np.ones(grid.spectral_shape, dtype=bool)
    for j, k in enumerate(grid.wavevector):
        idx = np.rint(k * 1.0).astype(np.int64)
        on &= idx % sigma == 0
    # Nyquist-zeroed wavevectors are fine: they stay multiples of sigma or 0
    off = c[~on]
    return off.size == 0 or float(off.max()) <= 1e-12 * max(float(c.max()), 1e-300)


def commutator_sweep(cfg: CommutatorSweepConfig, a: Field, f: Field) -> CommutatorMeasurement:
    """Measure both fast-oscillation quotients at one ``(mu, sigma)``.

    The product quotient is ``|af|_p / (|a|_p |f|_p + C_a |f|_p sigma^-N)``
    (``p`` even).  The inverse-gradient quotient divides
    ``||grad|^-1 (af)|_p`` by ``sigma^(s-1) ||grad|^-s (af)|_p + C_a |f|_p sigma^-N``.
    ``smoothing_ratio`` is ``||grad|^-1 (af)|_p / ||grad|^-s (af)|_p``, whose
    slope in ``sigma`` should be ``s - 1``.
    """
    if a.rank or f.rank:
        raise ContractError("commutator sweep acts on scalar fields")
    if cfg.p % 2:
        raise ContractError("the product estimate needs an even p")
    if not _spectrum_on_lattice(f, cfg.sigma):
        raise ContractError("f is not 1/sigma periodic")
    if abs(float(np.mean(f.values))) > 1e-12 * lp_norm(f, 2):
        raise ContractError("f must have zero mean")
    ca = cfg.amplitude if cfg.amplitude is not None else amplitude_bound(a, cfg.mu, cfg.depth)
    p = cfg.p
    s = float(cfg.s)
    af = Field(a.grid, a.values * f.values, 0)
    fp = lp_norm(f, p)
    tail = ca * fp * float(cfg.sigma) ** (-cfg.decay)
    prod = lp_norm(af, p)
    holder_rhs = lp_norm(a, p) * fp + tail
    inv = lp_norm(apply_multiplier(af, Multiplier("frac_power", s=-1.0), drop_mean=True), p)
    inv_s = lp_norm(apply_multiplier(af, Multiplier("frac_power", s=-s), drop_mean=True), p) if s else prod
    inv_rhs = float(cfg.sigma) ** (s - 1.0) * inv_s + tail
    return CommutatorMeasurement(
        sigma=cfg.sigma,
        mu=cfg.mu,
        s=s,
        amplitude=ca,
        product_norm=prod,
        holder_rhs=holder_rhs,
        holder_quotient=prod / holder_rhs,
        inverse_norm=inv,
        inverse_rhs=inv_rhs,
        inverse_quotient=inv / inv_rhs,
        smoothing_ratio=inv / inv_s if inv_s > 0 else 0.0,
    )


def _ladder_grid_size(d: int, sigma: int, mu: int, kmax: int, p: int) -> int:
    top = kmax * sigma + mu
    N = 16
    while N < max(2 * (top + 1) * max(p // 2, 1), 4 * sigma):
        N *= 2
    return N


def commutator_ladder(
    mu: int = 2,
    sigmas: Sequence[int] = (8, 16, 32),
    s_values: Sequence[Fraction] = (Fraction(0), Fraction(1, 2)),
    *,
    d: int = 2,
    p: int = 2,
    theta: Fraction = Fraction(1, 2),
    kmax: int = 2,
    seed: int = 0,
    N: int | None = None,
) -> dict:
    """Commutator quotients across a sigma-doubling ladder at fixed ``mu``.

    One amplitude ``a`` and one base oscillation are drawn from ``seed`` and
    reused at every ``sigma``; a common grid resolves the top of the ladder.
    Returns rows per ``(sigma, s)``, the drift of the product quotient and the
    fitted slope of the smoothing ratio for each ``s``.
    """
    N = N or _ladder_grid_size(d, max(sigmas), mu, kmax, p)
    grid = make_grid(d, N)
    rng = np.random.Generator(np.random.PCG64(seed))
    a = band_limited_scalar(grid, mu, rng)
    base_seed = int(rng.integers(2**63))
    rows = []
    for sigma in sigmas:
        f = oscillating_scalar(grid, sigma, np.random.Generator(np.random.PCG64(base_seed)), kmax)
        for s in s_values:
            cfg = CommutatorSweepConfig(mu, sigma, theta=theta, p=p, s=Fraction(s))
            rows.append(commutator_sweep(cfg, a, f))
    holder = [r.holder_quotient for r in rows if r.s == float(s_values[0])]
    slopes = {}
    for s in s_values:
        sel = [r for r in rows if r.s == float(s)]
        slopes[str(Fraction(s))] = fit_slope([r.sigma for r in sel], [r.smoothing_ratio for r in sel])
    return {
        "d": d,
        "N": N,
        "mu": mu,
        "p": p,
        "sigmas": list(sigmas),
        "rows": [r.to_json() for r in rows],
        "holder_drift": _drift(holder),
        "smoothing_slopes": slopes,
    }


# ---------------------------------------------------------------- dyadic tails

def gaussian_spectrum_scalar(grid: TorusGrid, mu: float, cutoff: float | None = None) -> Field:
    """Real scalar with coefficients ``exp(-|xi|^2 / (2 mu^2))``, optionally truncated."""
    k2 = grid.knorm2
    c = np.exp(-k2 / (2.0 * mu * mu)).astype(complex)
    if cutoff is not None:
        c[np.sqrt(k2) > cutoff] = 0.0
    return Field(grid, from_spectral(c, grid)[None], 0)


def dyadic_tail_check(a: Field, mu: float, sigma: int, depth: int, decay: int, floor: float = 1e-13) -> dict:
    """Sup norms of the Littlewood-Paley blocks of ``a`` against their tail bound.

    Rows carry ``|Delta_q a|_inf``, the bound ``2^(q d) mu^depth 2^(-q depth)``
    and the ratio to the previous block.  Beyond ``q0 = ceil(log2 mu) + 3``
    every nonzero block must shrink by at least ``2^-decay`` and a zero block
    must be followed by zeros.  Blocks below ``floor`` times ``|a|_inf`` are
    transform roundoff and count as zero.  If all blocks from ``q0`` on vanish
    the check is vacuous, which is reported.  The high-pass part above
    ``sigma / 16`` is compared with the sum of its block norms.
    """
    grid = a.grid
    d = grid.d
    c = to_spectral(a.values[0], grid)
    kmax = math.sqrt(float(grid.knorm2.max()))
    qmax = max(0, math.ceil(math.log2(max(kmax, 1.0)))) + 1
    q0 = math.ceil(math.log2(mu)) + 3
    zero = floor * float(np.abs(a.values).max())
    rows = []
    prev = None
    for q in range(-1, qmax + 1):
        sup = float(np.abs(from_spectral(c * lp_symbol(grid, q), grid)).max())
        if sup <= zero:
            sup = 0.0
        bound = 2.0 ** (q * d) * float(mu) ** depth * 2.0 ** (-q * depth)
        rows.append({
            "q": q,
            "sup": sup,
            "bound": bound,
            "ratio_to_bound": sup / bound,
            "ratio_to_previous": (sup / prev) if prev else None,
        })
        prev = sup
    tail = [r for r in rows if r["q"] >= q0]
    decay_ok = True
    seen_zero = False
    for r0, r1 in zip(tail, tail[1:]):
        if r0["sup"] == 0.0:
            seen_zero = True
        if seen_zero and r1["sup"] != 0.0:
            decay_ok = False
        if r0["sup"] > 0.0 and r1["sup"] > r0["sup"] * 2.0 ** (-decay):
            decay_ok = False
    vacuous = all(r["sup"] == 0.0 for r in tail)
    ell = Fraction(sigma, 16)
    high = apply_multiplier(a, Multiplier("wavenumber_geq", ell=ell))
    high_sup = lp_norm(high, np.inf)
    block_sum = sum(r["sup"] for r in rows if r["q"] >= 0 and Fraction(2) ** r["q"] >= ell)
    return {
        "mu": mu,
        "depth": depth,
        "decay": decay,
        "q0": q0,
        "zero_level": zero,
        "rows": rows,
        "decay_ok": decay_ok,
        "vacuous": vacuous,
        "high_pass_sup": high_sup,
        "block_sum": block_sum,
        "triangle_ok": high_sup <= block_sum * (1 + 1e-12) + zero,
    }


# ---------------------------------------------------------------- mollification commutator

def cet_check(f: Field, g: Field, eps: Sequence[float], m: int, p: float = 2) -> list[dict]:
    """Mollification commutator of a product, one row per mollification scale.

    Each row has ``lhs = |grad^m [(fg)*eta - (f*eta)(g*eta)]|_p``, the
    gradient product ``|grad f|_2p |grad g|_2p``, the normalized size
    ``lhs / gradient product`` and the full ratio with ``eps^(2-m)``.
    """
    if f.rank or g.rank:
        raise ContractError("cet_check acts on scalar fields")
    if m not in (0, 1, 2):
        raise ContractError("m must be 0, 1 or 2")
    grid = f.grid
    fg = 1.0
    for h in (f, g):
        fg *= gradient_lp_norm(h, 2 * p)
    rows = []
    for e in eps:
        eta = mollifier_symbol(grid, e)
        fe = from_spectral(eta * to_spectral(f.values[0], grid), grid)
        ge = from_spectral(eta * to_spectral(g.values[0], grid), grid)
        comm = eta * to_spectral(f.values[0] * g.values[0], grid) - to_spectral(fe * ge, grid)
        lhs = _mag_lp(derivative_magnitude2(comm, grid, m), p)
        normalized = lhs / fg if fg > 0 else 0.0
        rows.append({
            "eps": float(e),
            "lhs": lhs,
            "gradient_product": fg,
            "normalized": normalized,
            "ratio": normalized / float(e) ** (2 - m),
        })
    return rows


def _cet_pair(grid: TorusGrid, k: int) -> tuple[Field, Field]:
    x = [grid.coordinate(j) for j in range(grid.d)]
    f = np.sin(2 * np.pi * k * x[0]) + 0 * x[-1]
    g = np.sin(2 * np.pi * k * (x[0] + x[-1])) if grid.d > 1 else np.cos(2 * np.pi * k * x[0])
    return Field(grid, np.broadcast_to(f, grid.shape)[None].copy(), 0), Field(grid, g[None], 0)


def cet_ladder(
    m: int,
    p: float = 2,
    eps: Sequence[Fraction] = (Fraction(1, 8), Fraction(1, 16), Fraction(1, 32)),
    *,
    coupled: bool = True,
    d: int = 2,
    N: int = 128,
    wavelength_cells: int = 4,
) -> dict:
    """Commutator sizes across a halving ladder of mollification scales.

    With ``coupled`` the trigonometric pair oscillates at frequency
    ``1 / (wavelength_cells * eps)``, so every derivative order sees its
    homogeneous scaling; otherwise the pair has unit frequency, which only
    exhibits the ``eps^2`` rate of the undifferentiated commutator.
    The fitted slope of the normalized size against ``eps`` targets ``2 - m``.
    """
    grid = make_grid(d, N)
    rows = []
    for e in eps:
        e = Fraction(e)
        if e < Fraction(2, N):
            raise ResolutionError(f"eps={e} below two grid cells")
        if coupled:
            kf = 1 / (wavelength_cells * e)
            if kf.denominator != 1:
                raise ContractError("coupled ladder needs 1/(cells * eps) integral")
            k = int(kf)
        else:
            k = 1
        if 2 * k >= N // 2:
            raise ResolutionError("pair frequency not resolved")
        f, g = _cet_pair(grid, k)
        rows.extend(cet_check(f, g, [float(e)], m, p))
    ratios = [r["ratio"] for r in rows]
    return {
        "m": m,
        "p": p,
        "coupled": coupled,
        "rows": rows,
        "slope": fit_slope([r["eps"] for r in rows], [r["normalized"] for r in rows]),
        "ratio_spread": _drift(ratios),
    }


# ---------------------------------------------------------------- composition

@dataclass(frozen=True)
class ScalarMap:
    """A smooth map ``R -> R`` with its derivatives, ``derivs[i]`` the ``i``-th."""

    name: str
    derivs: tuple[Callable[[np.ndarray], np.ndarray], ...] = field(repr=False)

    def sup_derivative(self, i: int, lo: float, hi: float, samples: int = 4097) -> float:
        t = np.linspace(lo, hi, samples)
        return float(np.max(np.abs(self.derivs[i](t))))


def scalar_map(name: str) -> ScalarMap:
    if name == "identity":
        return ScalarMap(name, (lambda t: t, np.ones_like) + (np.zeros_like,) * 4)
    if name == "square":
        return ScalarMap(name, (lambda t: t * t, lambda t: 2 * t, lambda t: 2 + 0 * t) + (np.zeros_like,) * 3)
    if name == "cube":
        return ScalarMap(
            name, (lambda t: t**3, lambda t: 3 * t**2, lambda t: 6 * t, lambda t: 6 + 0 * t, np.zeros_like)
        )
    if name == "cos":
        return ScalarMap(name, (np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t), np.sin, np.cos))
    if name == "sin":
        return ScalarMap(name, (np.sin, np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t), np.sin))
    if name == "exp":
        return ScalarMap(name, (np.exp,) * 5)
    raise ContractError(f"unknown scalar map {name!r}")


def composition_norm_check(F: ScalarMap, u: Field, m: int) -> dict:
    """``|grad^m (F o u)|_inf`` against ``|grad^m u|_inf sum_i |F^(i)|_inf |u|_inf^(i-1)``.

    Sup norms of ``F^(i)`` are taken over the range of ``u``; derivatives of
    the composition are spectral, so ``F o u`` should be well resolved.
    """
    if not 1 <= m <= 4:
        raise ContractError("m must lie in 1..4")
    grid = u.grid
    vals = u.values[0]
    lo, hi = float(vals.min()), float(vals.max())
    comp = F.derivs[0](vals)
    lhs = math.sqrt(float(derivative_magnitude2(to_spectral(comp, grid), grid, m).max()))
    du = math.sqrt(float(derivative_magnitude2(to_spectral(vals, grid), grid, m).max()))
    usup = max(abs(lo), abs(hi))
    rhs = du * sum(F.sup_derivative(i, lo, hi) * usup ** (i - 1) for i in range(1, m + 1))
    return {"map": F.name, "m": m, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else 0.0}


def composition_sweep(
    name: str, m: int, samples: int = 50, *, d: int = 2, N: int = 64, kmax: int = 3, seed: int = 0
) -> dict:
    """Largest composition ratio over random band-limited inputs of unit sup norm."""
    grid = make_grid(d, N)
    rng = np.random.Generator(np.random.PCG64(seed))
    F = scalar_map(name)
    ratios = []
    for _ in range(samples):
        u = random_field(grid, 0, kmax, rng)
        u = Field(grid, u.values / np.abs(u.values).max(), 0)
        ratios.append(composition_norm_check(F, u, m)["ratio"])
    return {"map": name, "m": m, "samples": samples, "max_ratio": max(ratios), "min_ratio": min(ratios)}
