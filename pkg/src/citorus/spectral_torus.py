"""Periodic fields on the unit torus and their Fourier-multiplier calculus.

A field stores real samples on the uniform grid ``m / N`` of ``[0, 1)^d``
with a leading component axis.  Spectral coefficients use the real FFT over
the last ``d`` axes with forward normalization, so the zero mode is the mean.

Every derivative-type symbol is built from the wavevector with the Nyquist
components set to zero.  This keeps the discrete operators mutually
consistent: ``div(grad f)`` equals ``laplacian(f)`` to roundoff, mixed
partials commute, and a grid function invariant under a lattice shift ``k``
satisfies ``k . grad f = 0`` exactly.
"""

from __future__ import annotations

import functools
import math
import os
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "TorusGrid",
    "Field",
    "Multiplier",
    "ContractError",
    "ResolutionError",
    "SizingError",
    "make_grid",
    "scalar_field",
    "vector_field",
    "sym_tensor_field",
    "zeros",
    "sym_pairs",
    "sym_index",
    "to_spectral",
    "from_spectral",
    "apply_multiplier",
    "divergence_values",
    "magnitude2",
    "smooth_step",
    "lp_symbol",
    "mollifier_symbol",
    "mollify",
    "lp_norm",
    "gradient_lp_norm",
    "sobolev_norm",
    "parseval_sum",
    "leray_project",
    "random_field",
    "dump_citf",
    "load_citf",
    "max_bytes",
]

DEFAULT_MAX_BYTES = 4 * 2**30
CITF_MAGIC = b"CITF"
CITF_VERSION = 1


class ContractError(ValueError):
    """An operation was called outside its documented domain."""


class ResolutionError(ValueError):
    """The grid is too coarse for the requested construction."""


class SizingError(MemoryError):
    """A grid would exceed the configured memory budget."""


def max_bytes() -> int:
    """Memory cap for one vector field, from ``CIT_MAX_BYTES`` if set."""
    raw = os.environ.get("CIT_MAX_BYTES")
    return int(raw) if raw else DEFAULT_MAX_BYTES


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with ``N`` samples per axis on ``[0, 1)^d``."""

    d: int
    N: int

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.N,) * (self.d - 1) + (self.N // 2 + 1,)

    @property
    def npoints(self) -> int:
        return self.N**self.d

    @property
    def spacing(self) -> float:
        return 1.0 / self.N

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    def coordinate(self, j: int) -> np.ndarray:
        """Coordinate ``x_j`` as an array broadcastable to the grid shape."""
        shape = [1] * self.d
        shape[j] = self.N
        return (np.arange(self.N) / self.N).reshape(shape)

    @functools.cached_property
    def wavevector(self) -> tuple[np.ndarray, ...]:
        """Integer wavenumbers per axis, Nyquist zeroed, broadcastable."""
        out = []
        for j in range(self.d):
            if j < self.d - 1:
                k = np.fft.fftfreq(self.N, 1.0 / self.N)
            else:
                k = np.fft.rfftfreq(self.N, 1.0 / self.N)
            k[np.abs(k) == self.N // 2] = 0.0
            shape = [1] * self.d
            shape[j] = k.size
            out.append(k.reshape(shape))
        return tuple(out)

    @functools.cached_property
    def knorm2(self) -> np.ndarray:
        """Squared modulus of the Nyquist-zeroed wavevector."""
        total = np.zeros(self.spectral_shape)
        for k in self.wavevector:
            total += k * k
        return total

    @functools.cached_property
    def singular_mask(self) -> np.ndarray:
        """Modes where every derivative symbol vanishes (the mean and Nyquist corners)."""
        return self.knorm2 == 0

    @functools.cached_property
    def parseval_weights(self) -> np.ndarray:
        """Multiplicity of each stored half-spectrum coefficient."""
        w = np.full(self.N // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return w.reshape((1,) * (self.d - 1) + (-1,))


def make_grid(d: int = 4, N: int = 32) -> TorusGrid:
    if d < 2:
        raise ContractError(f"dimension must be at least 2, got {d}")
    if N % 2:
        raise ContractError(f"N must be even, got {N}")
    if N < 8:
        raise ContractError(f"N must be at least 8, got {N}")
    if N & (N - 1):
        raise ContractError(f"N must be a power of 2, got {N}")
    need = N**d * d * 8
    if need > max_bytes():
        raise SizingError(
            f"a vector field on a {N}^{d} grid needs {need} bytes; cap is {max_bytes()} "
            "(raise CIT_MAX_BYTES or lower N)"
        )
    return TorusGrid(d, N)


def sym_pairs(d: int) -> list[tuple[int, int]]:
    """Storage order of symmetric-matrix components: upper triangle, row-major."""
    return [(a, b) for a in range(d) for b in range(a, d)]


@functools.lru_cache(maxsize=None)
def sym_index(d: int) -> dict[tuple[int, int], int]:
    idx = {}
    for c, (a, b) in enumerate(sym_pairs(d)):
        idx[(a, b)] = c
        idx[(b, a)] = c
    return idx


def _ncomp(d: int, rank: int) -> int:
    return (1, d, d * (d + 1) // 2)[rank]


@dataclass(frozen=True, eq=False)
class Field:
    """Real samples of a scalar (rank 0), vector (1) or symmetric matrix (2) field.

    ``values`` has shape ``(ncomp, N, ..., N)``.  Rank-2 fields store the
    upper triangle in the order of :func:`sym_pairs`.
    """

    grid: TorusGrid
    values: np.ndarray
    rank: int = 0
    traceless: bool = False
    mean_dropped: bool = field(default=False, compare=False)

    def __post_init__(self):
        want = (_ncomp(self.grid.d, self.rank),) + self.grid.shape
        if self.values.shape != want:
            raise ContractError(f"values have shape {self.values.shape}, expected {want}")
        if self.traceless:
            if self.rank != 2:
                raise ContractError("only rank-2 fields carry a traceless flag")
            tr = np.abs(self.trace())
            scale = max(float(np.max(np.abs(self.values))), 1e-300)
            if tr.max() > 1e-12 * scale:
                raise ContractError(f"traceless flag set but |Tr| reaches {tr.max():.3e}")

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def ncomp(self) -> int:
        return self.values.shape[0]

    def component(self, a: int, b: int | None = None) -> np.ndarray:
        if b is None:
            return self.values[a]
        return self.values[sym_index(self.d)[(a, b)]]

    def trace(self) -> np.ndarray:
        if self.rank != 2:
            raise ContractError("trace needs a rank-2 field")
        idx = sym_index(self.d)
        return sum(self.values[idx[(a, a)]] for a in range(self.d))

    def spectral(self) -> np.ndarray:
        return to_spectral(self.values, self.grid)

    def means(self) -> np.ndarray:
        return self.values.reshape(self.ncomp, -1).mean(axis=1)

    def is_zero_mean(self, rtol: float = 1e-12) -> bool:
        scale = lp_norm(self, 2)
        return bool(np.max(np.abs(self.means()), initial=0.0) <= rtol * max(scale, 1e-300))

    def like(self, values: np.ndarray, **kw) -> "Field":
        return Field(self.grid, values, self.rank, **kw)

    def __add__(self, other: "Field") -> "Field":
        _same_kind(self, other)
        return self.like(self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        _same_kind(self, other)
        return self.like(self.values - other.values)

    def __mul__(self, c: float) -> "Field":
        return self.like(self.values * c, traceless=self.traceless)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return self * -1.0


def _same_kind(f: Field, g: Field) -> None:
    if f.grid != g.grid or f.rank != g.rank:
        raise ContractError("fields live on different grids or have different rank")


def scalar_field(grid: TorusGrid, values: np.ndarray) -> Field:
    vals = np.broadcast_to(np.asarray(values, dtype=float), grid.shape)
    return Field(grid, np.array(vals)[None], 0)


def vector_field(grid: TorusGrid, values: np.ndarray) -> Field:
    return Field(grid, np.asarray(values, dtype=float), 1)


def sym_tensor_field(grid: TorusGrid, values: np.ndarray, traceless: bool = False) -> Field:
    return Field(grid, np.asarray(values, dtype=float), 2, traceless=traceless)


def zeros(grid: TorusGrid, rank: int) -> Field:
    return Field(grid, np.zeros((_ncomp(grid.d, rank),) + grid.shape), rank)


def to_spectral(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return sfft.rfftn(values, axes=grid.axes, norm="forward")


def from_spectral(coeffs: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return sfft.irfftn(coeffs, s=grid.shape, axes=grid.axes, norm="forward")


# ---------------------------------------------------------------- multipliers

def _bump_unit(t: np.ndarray) -> np.ndarray:
    """exp(-1/t) for t > 0, else 0."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(r: np.ndarray) -> np.ndarray:
    """C-infinity step: 1 for r <= 1, 0 for r >= 2."""
    r = np.asarray(r, dtype=float)
    up = _bump_unit(2.0 - r)
    down = _bump_unit(r - 1.0)
    return up / (up + down)


def _floor_log2(x: float | Fraction) -> int:
    x = Fraction(x)
    if x <= 0:
        raise ContractError("dyadic index needs a positive argument")
    q = x.numerator.bit_length() - x.denominator.bit_length()
    while Fraction(2) ** q > x:
        q -= 1
    while Fraction(2) ** (q + 1) <= x:
        q += 1
    return q


def lp_symbol(grid: TorusGrid, q: int) -> np.ndarray:
    """Symbol of the dyadic block at scale ``2^q`` (``q >= -1``).

    Blocks telescope: block ``q`` is ``step(|xi|/2^q) - step(|xi|/2^(q-1))`` and
    the lowest block is ``step(2|xi|)``, so their sum is identically one.
    """
    if q < -1:
        raise ContractError("dyadic blocks start at q = -1")
    k = np.sqrt(grid.knorm2)
    if q == -1:
        return smooth_step(2.0 * k)
    return smooth_step(k / 2.0**q) - smooth_step(k / 2.0 ** (q - 1))


def _low_pass(grid: TorusGrid, top: int | None) -> np.ndarray:
    """Sum of blocks ``-1..top`` (zero symbol when ``top`` is None)."""
    if top is None:
        return np.zeros(grid.spectral_shape)
    return smooth_step(np.sqrt(grid.knorm2) / 2.0**top)


@dataclass(frozen=True)
class Multiplier:
    """A Fourier multiplier by name.

    ``partial`` (axis ``j``), ``gradient``, ``divergence``, ``laplacian``,
    ``inv_laplacian``, ``frac_power`` (exponent ``s``), ``riesz`` (axis ``j``),
    ``lp_block`` (scale ``q``), ``wavenumber_leq`` and ``wavenumber_geq``
    (threshold ``ell``).
    """

    name: str
    j: int | None = None
    s: float | None = None
    q: int | None = None
    ell: float | Fraction | None = None

    NAMES = (
        "partial", "gradient", "divergence", "laplacian", "inv_laplacian",
        "frac_power", "riesz", "lp_block", "wavenumber_leq", "wavenumber_geq",
    )

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ContractError(f"unknown multiplier {self.name!r}")

    @property
    def singular(self) -> bool:
        if self.name in ("inv_laplacian", "riesz"):
            return True
        return self.name == "frac_power" and self.s < 0

    def symbol(self, grid: TorusGrid) -> np.ndarray:
        """Symbol of a componentwise multiplier on the half spectrum."""
        two_pi = 2.0 * np.pi
        k2 = grid.knorm2
        sing = grid.singular_mask
        if self.name == "partial":
            return 1j * two_pi * grid.wavevector[self.j]
        if self.name == "laplacian":
            return -(two_pi**2) * k2
        if self.name == "inv_laplacian":
            with np.errstate(divide="ignore"):
                out = -1.0 / (two_pi**2 * k2)
            out[sing] = 0.0
            return out
        if self.name == "frac_power":
            if self.s == 0:
                return np.ones(grid.spectral_shape)
            with np.errstate(divide="ignore"):
                out = (two_pi**2 * k2) ** (self.s / 2.0)
            out[sing] = 0.0
            return out
        if self.name == "riesz":
            with np.errstate(invalid="ignore", divide="ignore"):
                out = -1j * grid.wavevector[self.j] / np.sqrt(k2)
            out[sing] = 0.0
            return out
        if self.name == "lp_block":
            return lp_symbol(grid, self.q)
        if self.name == "wavenumber_leq":
            ell = Fraction(self.ell)
            top = _floor_log2(ell) if ell >= Fraction(1, 2) else None
            return _low_pass(grid, top)
        if self.name == "wavenumber_geq":
            # blocks with 2^q >= ell, i.e. everything above the largest 2^q < ell
            ell = Fraction(self.ell)
            if ell <= Fraction(1, 2):
                return np.ones(grid.spectral_shape)
            top = _floor_log2(ell)
            if Fraction(2) ** top == ell:
                top -= 1
            return 1.0 - _low_pass(grid, top)
        raise ContractError(f"{self.name} is not a componentwise multiplier")


def _check_mean(f: Field, coeffs: np.ndarray, m: Multiplier, drop_mean: bool) -> bool:
    if not m.singular:
        return False
    mean = np.abs(coeffs[(slice(None),) + (0,) * f.d])
    scale = math.sqrt(max(parseval_sum(f), 0.0))
    if mean.max() > 1e-12 * max(scale, 1e-300):
        if not drop_mean:
            raise ContractError(
                f"{m.name} needs a zero-mean field (mean up to {mean.max():.3e}); "
                "pass drop_mean=True to discard the mean mode"
            )
        return True
    return False


def apply_multiplier(f: Field, m: Multiplier, drop_mean: bool = False) -> Field:
    """Apply ``m`` to ``f`` in Fourier space.

    Singular symbols (``inv_laplacian``, ``riesz``, negative ``frac_power``)
    vanish on modes with zero wavevector.  A field with a nonzero mean is
    rejected unless ``drop_mean`` is set, in which case the result is flagged.
    """
    grid = f.grid
    coeffs = f.spectral()
    dropped = _check_mean(f, coeffs, m, drop_mean)
    two_pi_i = 2j * np.pi
    if m.name == "gradient":
        if f.rank != 0:
            raise ContractError("gradient is defined here for scalar fields")
        out = np.stack([from_spectral(two_pi_i * k * coeffs[0], grid) for k in grid.wavevector])
        return Field(grid, out, 1)
    if m.name == "divergence":
        return Field(grid, divergence_values(f.values, f.rank, grid), f.rank - 1)
    sym = m.symbol(grid)
    out = from_spectral(coeffs * sym, grid)
    return Field(grid, out, f.rank, mean_dropped=dropped)


def divergence_values(values: np.ndarray, rank: int, grid: TorusGrid) -> np.ndarray:
    """Divergence of a vector (rank 1) or symmetric matrix (rank 2) sample array."""
    d = grid.d
    kv = grid.wavevector
    two_pi_i = 2j * np.pi
    if rank == 1:
        acc = np.zeros(grid.spectral_shape, dtype=complex)
        for j in range(d):
            acc += kv[j] * to_spectral(values[j], grid)
        return from_spectral(two_pi_i * acc, grid)[None]
    if rank == 2:
        acc = np.zeros((d,) + grid.spectral_shape, dtype=complex)
        for c, (a, b) in enumerate(sym_pairs(d)):
            chat = to_spectral(values[c], grid)
            acc[a] += kv[b] * chat
            if a != b:
                acc[b] += kv[a] * chat
        return from_spectral(two_pi_i * acc, grid)
    raise ContractError("divergence needs a vector or matrix field")


# ---------------------------------------------------------------- mollifier

def _bump_radial(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def _periodic_offset(grid: TorusGrid, j: int) -> np.ndarray:
    x = grid.coordinate(j)
    return x - np.round(x)


@functools.lru_cache(maxsize=4)
def mollifier_symbol(grid: TorusGrid, l: float) -> np.ndarray:
    """Fourier coefficients of the unit-mass periodized bump of radius ``l``.

    The kernel is normalized by grid quadrature, so the zero mode is exactly one.
    """
    if l < 2.0 / grid.N:
        raise ResolutionError(f"mollifier radius {l} below the grid limit 2/N = {2.0 / grid.N}")
    r2 = np.zeros(grid.shape)
    for j in range(grid.d):
        r2 = r2 + _periodic_offset(grid, j) ** 2
    kernel = _bump_radial(np.sqrt(r2) / l)
    del r2
    kernel /= kernel.mean()
    sym = to_spectral(kernel, grid).real
    sym.setflags(write=False)
    return sym


def mollify(f: Field, l: float) -> Field:
    sym = mollifier_symbol(f.grid, float(l))
    out = np.empty_like(f.values)
    for c in range(f.ncomp):
        out[c] = from_spectral(to_spectral(f.values[c], f.grid) * sym, f.grid)
    return Field(f.grid, out, f.rank)


# ---------------------------------------------------------------- norms

def _weights(rank: int, d: int) -> list[float]:
    if rank < 2:
        return [1.0] * _ncomp(d, rank)
    return [1.0 if a == b else 2.0 for a, b in sym_pairs(d)]


def magnitude2(values: np.ndarray, rank: int, d: int) -> np.ndarray:
    """Pointwise squared Euclidean (vectors) or Frobenius (matrices) magnitude."""
    out = np.zeros(values.shape[1:])
    for w, comp in zip(_weights(rank, d), values):
        out += w * comp * comp
    return out


def _lp_from_mag2(mag2: np.ndarray, p: float) -> float:
    if p == np.inf:
        return float(np.sqrt(mag2.max()))
    if p == 2:
        return float(np.sqrt(mag2.mean()))
    if p == 1:
        return float(np.sqrt(mag2).mean())
    return float(np.mean(mag2 ** (p / 2.0)) ** (1.0 / p))


def lp_norm(f: Field, p: float = 2) -> float:
    """Normalized ``L^p`` norm ``(mean |f|^p)^(1/p)``; ``p = inf`` gives the max."""
    if p < 1:
        raise ContractError("p must be at least 1")
    if f.ncomp == 1:
        v = np.abs(f.values[0])
        if p == np.inf:
            return float(v.max())
        if p == 1:
            return float(v.mean())
        return float(np.mean(v**p) ** (1.0 / p))
    return _lp_from_mag2(magnitude2(f.values, f.rank, f.d), p)


def gradient_lp_norm(f: Field, p: float = 2) -> float:
    """``L^p`` norm of the full gradient, Frobenius over (component, derivative)."""
    grid = f.grid
    mag2 = np.zeros(grid.shape)
    for w, comp in zip(_weights(f.rank, f.d), f.values):
        chat = to_spectral(comp, grid)
        for k in grid.wavevector:
            g = from_spectral(2j * np.pi * k * chat, grid)
            mag2 += w * g * g
    return _lp_from_mag2(mag2, p)


def parseval_sum(f: Field) -> float:
    """Sum of squared spectral magnitudes over the full spectrum."""
    total = 0.0
    w = f.grid.parseval_weights
    for wc, comp in zip(_weights(f.rank, f.d), f.values):
        chat = to_spectral(comp, f.grid)
        total += wc * float(np.sum(w * (chat.real**2 + chat.imag**2)))
    return total


def sobolev_norm(f: Field, s: float) -> float:
    """``H^s`` norm with weight ``(1 + 4 pi^2 |xi|^2)^s``."""
    weight = (1.0 + 4.0 * np.pi**2 * f.grid.knorm2) ** s * f.grid.parseval_weights
    total = 0.0
    for wc, comp in zip(_weights(f.rank, f.d), f.values):
        chat = to_spectral(comp, f.grid)
        total += wc * float(np.sum(weight * np.abs(chat) ** 2))
    return math.sqrt(total)


# ---------------------------------------------------------------- random data

def leray_project(f: Field) -> Field:
    """Remove the gradient part of a vector field."""
    if f.rank != 1:
        raise ContractError("Leray projection acts on vector fields")
    grid = f.grid
    coeffs = f.spectral()
    kv = grid.wavevector
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = 1.0 / grid.knorm2
    inv[grid.singular_mask] = 0.0
    kdot = sum(kv[j] * coeffs[j] for j in range(grid.d))
    for j in range(grid.d):
        coeffs[j] -= kv[j] * kdot * inv
    return Field(grid, from_spectral(coeffs, grid), 1)


def random_field(
    grid: TorusGrid,
    rank: int,
    kmax: int,
    rng: np.random.Generator,
    zero_mean: bool = True,
    decay: float = 0.0,
) -> Field:
    """Random real field with Fourier support in the box ``|xi|_inf <= kmax``.

    Coefficients are standard complex normals damped by ``(1 + |xi|^2)^(-decay/2)``.
    """
    if not 1 <= kmax < grid.N // 2:
        raise ContractError(f"kmax must lie in [1, N/2), got {kmax}")
    d = grid.d
    nc = _ncomp(d, rank)
    low = np.arange(-kmax, kmax + 1)
    box = (low.size,) * (d - 1) + (kmax + 1,)
    draw = rng.standard_normal((nc,) + box + (2,))
    vals = draw[..., 0] + 1j * draw[..., 1]
    grids = np.meshgrid(*([low] * (d - 1) + [np.arange(kmax + 1)]), indexing="ij")
    k2 = sum(g.astype(float) ** 2 for g in grids)
    vals *= (1.0 + k2) ** (-decay / 2.0)
    if zero_mean:
        vals[(slice(None),) + (kmax,) * (d - 1) + (0,)] = 0.0
    coeffs = np.zeros((nc,) + grid.spectral_shape, dtype=complex)
    index = tuple(np.mod(low, grid.N) for _ in range(d - 1)) + (np.arange(kmax + 1),)
    coeffs[(slice(None),) + np.ix_(*index)] = vals
    return Field(grid, from_spectral(coeffs, grid), rank)


# ---------------------------------------------------------------- CITF dumps

_HEADER = struct.Struct("<4sIBBI")


def dump_citf(f: Field, path: str | os.PathLike) -> None:
    """Write ``f`` as magic, version, d, rank, N, then little-endian float64 samples."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CITF_MAGIC, CITF_VERSION, f.d, f.rank, f.grid.N))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_citf(path: str | os.PathLike) -> Field:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError("file too short for a CITF header")
    magic, version, d, rank, N = _HEADER.unpack_from(raw)
    if magic != CITF_MAGIC:
        raise ContractError(f"bad magic {magic!r}")
    if version != CITF_VERSION:
        raise ContractError(f"unsupported CITF version {version}")
    if rank > 2:
        raise ContractError(f"bad rank {rank}")
    grid = TorusGrid(d, N)
    shape = (_ncomp(d, rank),) + grid.shape
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != int(np.prod(shape)):
        raise ContractError(f"payload has {body.size} values, header implies {int(np.prod(shape))}")
    return Field(grid, body.reshape(shape).astype(float), rank)


def as_vector(comps: Sequence[np.ndarray], grid: TorusGrid) -> Field:
    return Field(grid, np.stack(comps), 1)
