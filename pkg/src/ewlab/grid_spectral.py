"""Periodic grid fields, spectral calculus and frequency-space projections.

All fields live on a cubic periodic box of side ``box_len`` sampled at
``n`` points per axis.  Fourier coefficients are kept in the real-FFT
layout produced by :func:`scipy.fft.rfftn` with ``norm="forward"``, so a
coefficient array holds the true amplitudes ``c_m`` of
``f(x) = sum_m c_m exp(i xi_m . x)`` with ``xi_m = 2 pi m / box_len``.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import numpy.typing as npt
import scipy.fft as sfft

RANK_COMPONENTS = {"scalar": 1, "vector3": 3, "matrix3x3": 9}

# smallest power the rough-data coefficient law is pushed past s
ROUGH_EPS = 0.01


def fft_workers() -> int:
    """Thread count for FFTs, capped by the EWLAB_THREADS variable."""
    raw = os.environ.get("EWLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _fwd(values: np.ndarray) -> np.ndarray:
    return sfft.rfftn(values, axes=(-3, -2, -1), norm="forward", workers=fft_workers())


def _inv(coefs: np.ndarray, n: int) -> np.ndarray:
    return sfft.irfftn(coefs, s=(n, n, n), axes=(-3, -2, -1), norm="forward", workers=fft_workers())


@dataclass(frozen=True)
class Grid3:
    """Periodic cubic grid with ``n`` samples per axis on a box of side ``box_len``."""

    n: int
    box_len: float

    def __post_init__(self) -> None:
        n = int(self.n)
        if n < 8 or n & (n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if not np.isfinite(self.box_len) or self.box_len <= 0:
            raise ValueError(f"box_len must be positive, got {self.box_len}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "box_len", float(self.box_len))

    @property
    def spacing(self) -> float:
        return self.box_len / self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    @property
    def volume(self) -> float:
        return self.box_len**3

    @property
    def band(self) -> int:
        """Largest integer wavenumber kept by the 2/3 truncation rule."""
        return (self.n - 1) // 3

    @property
    def nyquist(self) -> float:
        """Per-axis Nyquist frequency pi n / L."""
        return np.pi * self.n / self.box_len

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.arange(self.n) * self.spacing
        return np.meshgrid(x, x, x, indexing="ij")

    def wavenumbers(self) -> "Wavenumbers":
        return _wavenumbers(self.n, self.box_len)


@dataclass(frozen=True)
class Wavenumbers:
    """Integer and physical wavevectors of a grid in real-FFT layout."""

    m: tuple[np.ndarray, np.ndarray, np.ndarray]
    xi: tuple[np.ndarray, np.ndarray, np.ndarray]
    xi2: np.ndarray
    weight: np.ndarray
    band_mask: np.ndarray
    nyq: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def xi_abs(self) -> np.ndarray:
        return np.sqrt(self.xi2)


@lru_cache(maxsize=16)
def _wavenumbers(n: int, box_len: float) -> Wavenumbers:
    m_full = np.fft.fftfreq(n, 1.0 / n)
    m_half = np.fft.rfftfreq(n, 1.0 / n)
    m0 = m_full[:, None, None]
    m1 = m_full[None, :, None]
    m2 = m_half[None, None, :]
    scale = 2.0 * np.pi / box_len
    xi = (m0 * scale, m1 * scale, m2 * scale)
    xi2 = xi[0] ** 2 + xi[1] ** 2 + xi[2] ** 2
    # multiplicity of each stored coefficient in the full spectrum
    weight = np.where((m_half == 0) | (m_half == n // 2), 1.0, 2.0)[None, None, :]
    weight = np.broadcast_to(weight, (n, n, n // 2 + 1)).copy()
    k = (n - 1) // 3
    band = (np.abs(m0) <= k) & (np.abs(m1) <= k) & (np.abs(m2) <= k)
    nyq = (np.abs(m0) == n // 2, np.abs(m1) == n // 2, np.abs(m2) == n // 2)
    for arr in (*xi, xi2, weight, band):
        arr.flags.writeable = False
    return Wavenumbers((m0, m1, m2), xi, xi2, weight, band, nyq)


@dataclass(frozen=True)
class Field:
    """Real samples of a scalar, vector or 3x3 matrix field on a :class:`Grid3`.

    ``data`` has shape ``(components, n, n, n)``; its C-order flattening is
    the documented layout ``((c*n + i)*n + j)*n + k``.  Matrix entry
    ``M_jk`` is component ``3*j + k``.
    """

    grid: Grid3
    rank: str
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.rank not in RANK_COMPONENTS:
            raise ValueError(f"unknown rank {self.rank!r}")
        n = self.grid.n
        arr = np.array(self.data, dtype=np.float64)
        ncomp = RANK_COMPONENTS[self.rank]
        if arr.size != ncomp * n**3:
            raise ValueError(f"{self.rank} field on n={n} needs {ncomp * n**3} samples, got {arr.size}")
        arr = arr.reshape(ncomp, n, n, n)
        if not np.all(np.isfinite(arr)):
            raise ValueError("field samples must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def components(self) -> int:
        return self.data.shape[0]

    def coefficients(self) -> np.ndarray:
        return _fwd(self.data)

    @classmethod
    def from_coefficients(cls, grid: Grid3, rank: str, coefs: np.ndarray) -> "Field":
        return cls(grid, rank, _inv(coefs, grid.n))

    def __add__(self, other: "Field") -> "Field":
        _check_same(self, other)
        return Field(self.grid, self.rank, self.data + other.data)

    def __sub__(self, other: "Field") -> "Field":
        _check_same(self, other)
        return Field(self.grid, self.rank, self.data - other.data)

    def scaled(self, factor: float) -> "Field":
        return Field(self.grid, self.rank, self.data * factor)

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.data)))


def _check_same(a: Field, b: Field) -> None:
    if a.grid != b.grid or a.rank != b.rank:
        raise ValueError("fields live on different grids or have different ranks")


def scalar(grid: Grid3, values: npt.ArrayLike) -> Field:
    return Field(grid, "scalar", np.asarray(values))


def vector(grid: Grid3, values: npt.ArrayLike) -> Field:
    return Field(grid, "vector3", np.asarray(values))


# ---------------------------------------------------------------------------
# spectral calculus on coefficient arrays
# ---------------------------------------------------------------------------


def deriv_coefs(coefs: np.ndarray, wn: Wavenumbers, axis: int) -> np.ndarray:
    """First derivative along ``axis`` with the Nyquist mode zeroed."""
    mult = np.where(wn.nyq[axis], 0.0, 1j * wn.xi[axis])
    return coefs * mult


def second_deriv_coefs(coefs: np.ndarray, wn: Wavenumbers, a: int, b: int) -> np.ndarray:
    """Mixed second derivative; Nyquist zeroed on each axis differentiated an odd number of times."""
    if a == b:
        return coefs * (-(wn.xi[a] ** 2))
    mult = -wn.xi[a] * wn.xi[b]
    mult = np.where(wn.nyq[a] | wn.nyq[b], 0.0, mult)
    return coefs * mult


def gradient_coefs(coefs: np.ndarray, wn: Wavenumbers) -> np.ndarray:
    """Stack of the three first derivatives along a new leading axis."""
    return np.stack([deriv_coefs(coefs, wn, a) for a in range(3)], axis=-4)


def div_coefs(coefs: np.ndarray, wn: Wavenumbers) -> np.ndarray:
    return sum(deriv_coefs(coefs[..., a, :, :, :], wn, a) for a in range(3))


def curl_coefs(coefs: np.ndarray, wn: Wavenumbers) -> np.ndarray:
    d = lambda comp, ax: deriv_coefs(coefs[..., comp, :, :, :], wn, ax)  # noqa: E731
    return np.stack([d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1)], axis=-4)


def laplacian_coefs(coefs: np.ndarray, wn: Wavenumbers) -> np.ndarray:
    return -wn.xi2 * coefs


def truncate(coefs: np.ndarray, wn: Wavenumbers) -> np.ndarray:
    """2/3-rule truncation."""
    return np.where(wn.band_mask, coefs, 0.0)


def spectral_derivative(f: Field, kind: str | tuple) -> Field:
    """Exact Fourier-multiplier derivative of the trigonometric interpolant.

    ``kind`` is one of ``"grad"``, ``"div"``, ``"curl"``, ``"laplacian"`` or
    ``("mixed", i, j)``.  Gradients of a scalar are vectors; gradients of a
    vector ``U`` are matrices with entry ``(j, k) = d_j U^k``.
    """
    wn = f.grid.wavenumbers()
    c = f.coefficients()
    if kind == "grad":
        if f.rank == "scalar":
            out = gradient_coefs(c[0], wn)
            return Field.from_coefficients(f.grid, "vector3", out)
        if f.rank == "vector3":
            # d_j U^k stored at 3*j + k
            g = np.stack([deriv_coefs(c, wn, j) for j in range(3)])
            return Field.from_coefficients(f.grid, "matrix3x3", g.reshape(9, *c.shape[1:]))
        raise ValueError("grad needs a scalar or vector field")
    if kind == "div":
        if f.rank != "vector3":
            raise ValueError("div needs a vector field")
        return Field.from_coefficients(f.grid, "scalar", div_coefs(c, wn)[None])
    if kind == "curl":
        if f.rank != "vector3":
            raise ValueError("curl needs a vector field")
        return Field.from_coefficients(f.grid, "vector3", curl_coefs(c, wn))
    if kind == "laplacian":
        return Field.from_coefficients(f.grid, f.rank, laplacian_coefs(c, wn))
    if isinstance(kind, tuple) and len(kind) == 3 and kind[0] == "mixed":
        i, j = int(kind[1]), int(kind[2])
        if not (0 <= i < 3 and 0 <= j < 3):
            raise ValueError("mixed derivative axes must be 0, 1 or 2")
        return Field.from_coefficients(f.grid, f.rank, second_deriv_coefs(c, wn, i, j))
    raise ValueError(f"unknown derivative kind {kind!r}")


# ---------------------------------------------------------------------------
# alias-free pointwise products
# ---------------------------------------------------------------------------


def padded_size(n: int, degree: int) -> int:
    """Grid size on which a degree-``degree`` product of band-limited inputs has no aliasing into the band."""
    k = (n - 1) // 3
    m = (degree + 1) * k + 1
    m = max(m, n)
    while True:
        m = sfft.next_fast_len(m, real=True)
        if m % 2 == 0:
            return m
        m += 1


def to_padded(coefs: np.ndarray, n: int, m: int) -> np.ndarray:
    """Physical values on an ``m``-grid of band-limited coefficients stored on an ``n``-grid."""
    k = (n - 1) // 3
    shape = coefs.shape[:-3] + (m, m, m // 2 + 1)
    out = np.zeros(shape, dtype=complex)
    lo = slice(0, k + 1)
    out[..., 0 : k + 1, 0 : k + 1, lo] = coefs[..., 0 : k + 1, 0 : k + 1, lo]
    out[..., m - k :, 0 : k + 1, lo] = coefs[..., n - k :, 0 : k + 1, lo]
    out[..., 0 : k + 1, m - k :, lo] = coefs[..., 0 : k + 1, n - k :, lo]
    out[..., m - k :, m - k :, lo] = coefs[..., n - k :, n - k :, lo]
    return sfft.irfftn(out, s=(m, m, m), axes=(-3, -2, -1), norm="forward", workers=fft_workers())


def from_padded(values: np.ndarray, n: int) -> np.ndarray:
    """Band-limited coefficients (2/3 rule) on an ``n``-grid of values sampled on a padded grid."""
    m = values.shape[-1]
    k = (n - 1) // 3
    full = sfft.rfftn(values, axes=(-3, -2, -1), norm="forward", workers=fft_workers())
    out = np.zeros(values.shape[:-3] + (n, n, n // 2 + 1), dtype=complex)
    lo = slice(0, k + 1)
    out[..., 0 : k + 1, 0 : k + 1, lo] = full[..., 0 : k + 1, 0 : k + 1, lo]
    out[..., n - k :, 0 : k + 1, lo] = full[..., m - k :, 0 : k + 1, lo]
    out[..., 0 : k + 1, n - k :, lo] = full[..., 0 : k + 1, m - k :, lo]
    out[..., n - k :, n - k :, lo] = full[..., m - k :, m - k :, lo]
    return out


def dealiased_product(*fields: Field) -> np.ndarray:
    """Coefficients of the 2/3-truncated product of band-limited fields (componentwise broadcast)."""
    grid = fields[0].grid
    n = grid.n
    m = padded_size(n, len(fields))
    wn = grid.wavenumbers()
    prod = None
    for f in fields:
        vals = to_padded(truncate(f.coefficients(), wn), n, m)
        prod = vals if prod is None else prod * vals
    return from_padded(prod, n)


# ---------------------------------------------------------------------------
# Helmholtz split
# ---------------------------------------------------------------------------


def helmholtz_coefs(coefs: np.ndarray, wn: Wavenumbers) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split vector coefficients (3, ...) into gradient part, solenoidal part, zero mode."""
    xi2 = np.where(wn.xi2 == 0, 1.0, wn.xi2)
    # odd (first-derivative) multipliers carry the Nyquist convention
    xis = [np.where(wn.nyq[a], 0.0, wn.xi[a]) for a in range(3)]
    dot = sum(xis[a] * coefs[a] for a in range(3))
    phi = np.stack([xis[a] * dot / xi2 for a in range(3)])
    zero = wn.xi2 == 0
    phi = np.where(zero, 0.0, phi)
    mean_c = np.where(zero, coefs, 0.0)
    psi = coefs - phi - mean_c
    return phi, psi, mean_c


def helmholtz_decompose(v: Field) -> tuple[Field, Field, np.ndarray]:
    """Split ``v`` into a curl-free part, a divergence-free part and its mean."""
    if v.rank != "vector3":
        raise ValueError("Helmholtz split needs a vector field")
    wn = v.grid.wavenumbers()
    phi, psi, mean_c = helmholtz_coefs(v.coefficients(), wn)
    mean = np.real(mean_c[:, 0, 0, 0]).copy()
    return (
        Field.from_coefficients(v.grid, "vector3", phi),
        Field.from_coefficients(v.grid, "vector3", psi),
        mean,
    )


# ---------------------------------------------------------------------------
# Littlewood-Paley machinery
# ---------------------------------------------------------------------------


def _e(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(r: npt.ArrayLike) -> np.ndarray:
    """Smooth cutoff equal to 1 for r <= 1/2 and 0 for r >= 1."""
    r = np.asarray(r, dtype=float)
    a = _e(2.0 - 2.0 * r)
    b = _e(2.0 * r - 1.0)
    return a / (a + b)


def lp_bump(r: npt.ArrayLike) -> np.ndarray:
    """Radial profile supported in (1/2, 2) whose dyadic dilates sum to one."""
    r = np.asarray(r, dtype=float)
    return smooth_step(r / 2.0) * (1.0 - smooth_step(r))


@dataclass(frozen=True)
class LPBand:
    """Dyadic band ``nu = 2**k`` with ``k >= 1``."""

    nu: float

    def __post_init__(self) -> None:
        k = np.log2(self.nu)
        if self.nu < 2 or abs(k - round(k)) > 1e-12:
            raise ValueError(f"band frequency must be 2**k with k >= 1, got {self.nu}")


def lp_bands(grid: Grid3) -> list[LPBand]:
    """All dyadic bands needed to cover every frequency stored on ``grid``."""
    xi_max = np.sqrt(3.0) * grid.nyquist
    bands = []
    nu = 2.0
    while True:
        bands.append(LPBand(nu))
        if nu >= xi_max:
            return bands
        nu *= 2.0


def _lp_multiplier(grid: Grid3, nu: float) -> np.ndarray:
    return lp_bump(grid.wavenumbers().xi_abs / nu)


def lp_project(f: Field, band: LPBand) -> Field:
    """Apply the Fourier multiplier ``psi_LP(|xi| / nu)``."""
    if band.nu > f.grid.nyquist:
        warnings.warn(
            f"band nu={band.nu:g} exceeds the grid Nyquist frequency {f.grid.nyquist:g}; "
            "it is truncated by the grid",
            stacklevel=2,
        )
    return Field.from_coefficients(f.grid, f.rank, f.coefficients() * _lp_multiplier(f.grid, band.nu))


def lp_low(f: Field) -> Field:
    """Low-frequency remainder: multiplier ``eta(|xi| / 2)``, complementary to all bands nu >= 2."""
    mult = smooth_step(f.grid.wavenumbers().xi_abs / 2.0)
    return Field.from_coefficients(f.grid, f.rank, f.coefficients() * mult)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def coef_energy(coefs: np.ndarray, wn: Wavenumbers, weight: np.ndarray | float = 1.0) -> float:
    """sum over the full spectrum of weight*|c|^2, summed over leading components."""
    w = wn.weight * weight
    tot = np.abs(coefs) ** 2 * w
    return float(np.sum(tot.reshape(-1)))


def sobolev_norm(f: Field, s: float) -> float:
    """Plancherel-normalised H^s norm with bracket ``<xi> = (1 + |xi|^2)^(1/2)``."""
    if abs(s) > 8:
        raise ValueError("s outside the supported range |s| <= 8")
    wn = f.grid.wavenumbers()
    bracket = (1.0 + wn.xi2) ** s
    return float(np.sqrt(f.grid.volume * coef_energy(f.coefficients(), wn, bracket)))


def l2_norm(f: Field | np.ndarray, grid: Grid3 | None = None) -> float:
    """Direct quadrature L^2 norm over the box."""
    if isinstance(f, Field):
        grid, data = f.grid, f.data
    else:
        data = f
    assert grid is not None
    return float(np.sqrt(np.sum(data.reshape(-1) ** 2) * grid.cell_volume))


def lp_sobolev_norm(f: Field, s: float) -> float:
    """Dyadic-side norm ``||f||_L2 + (sum_nu nu^(2s) ||P_nu f||^2)^(1/2)``."""
    wn = f.grid.wavenumbers()
    c = f.coefficients()
    total = 0.0
    for band in lp_bands(f.grid):
        mult = _lp_multiplier(f.grid, band.nu)
        total += band.nu ** (2 * s) * f.grid.volume * coef_energy(c * mult, wn)
    return float(np.sqrt(f.grid.volume * coef_energy(c, wn)) + np.sqrt(total))


def holder_seminorm(f: Field, beta: float, r_max: int, exclude_wrap: bool = False) -> float:
    """Lattice lower bound for the C^beta seminorm.

    Maximises ``|f(x) - f(y)| / |x - y|^beta`` over grid pairs whose offset
    has every component at most ``r_max`` cells.  With ``exclude_wrap`` the
    pairs that straddle the periodic boundary are skipped, which is how a
    non-periodic profile such as a coordinate function is measured.
    """
    n = f.grid.n
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    if not 1 <= r_max <= n // 4:
        raise ValueError(f"r_max must lie in [1, {n // 4}]")
    h = f.grid.spacing
    idx = np.arange(n)
    best = 0.0
    r = range(-r_max, r_max + 1)
    for d0 in r:
        for d1 in r:
            for d2 in r:
                d = (d0, d1, d2)
                if d <= (0, 0, 0):
                    continue  # each unordered pair once
                dist = h * np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                diff = np.abs(np.roll(f.data, shift=(-d0, -d1, -d2), axis=(1, 2, 3)) - f.data)
                if exclude_wrap:
                    ok = [((idx + dk) >= 0) & ((idx + dk) < n) for dk in d]
                    mask = ok[0][:, None, None] & ok[1][None, :, None] & ok[2][None, None, :]
                    diff = np.where(mask[None], diff, 0.0)
                best = max(best, float(diff.max()) / dist**beta)
    return best


# ---------------------------------------------------------------------------
# reproducible rough data
# ---------------------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def mode_uniforms(seed: int, stream: int, m0: np.ndarray, m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Uniform numbers in [0, 1) keyed by (seed, stream, integer wavevector); no shared state."""
    key = _splitmix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(np.uint64(int(stream))))
    h = key
    with np.errstate(over="ignore"):
        for m in (m0, m1, m2):
            h = _splitmix64(h ^ (np.asarray(m).astype(np.int64).astype(np.uint64) & _MASK64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def rough_coefficients(grid: Grid3, s: float, seed: int, stream: int = 0) -> np.ndarray:
    """Unnormalised Hermitian coefficients with magnitude <xi>^(-s-3/2-eps0) in the 2/3 band."""
    wn = grid.wavenumbers()
    m0, m1, m2 = (np.broadcast_to(m, wn.xi2.shape) for m in wn.m)
    # canonical representative of the pair (m, -m); the stored half-space has m2 >= 0
    flip = (m2 == 0) & ((m1 < 0) | ((m1 == 0) & (m0 < 0)))
    sign = np.where(flip, -1.0, 1.0)
    u = mode_uniforms(seed, stream, np.where(flip, -m0, m0), np.where(flip, -m1, m1), m2)
    phase = sign * 2.0 * np.pi * u
    mag = (1.0 + wn.xi2) ** (-(s + 1.5 + ROUGH_EPS) / 2.0)
    coefs = mag * np.exp(1j * phase)
    keep = wn.band_mask & (wn.xi2 > 0)
    return np.where(keep, coefs, 0.0)


def rough_random_field(
    grid: Grid3, s: float, amplitude: float, seed: int, components: int = 1, stream: int = 0
) -> Field:
    """Random band-limited field with H^s norm equal to ``amplitude``.

    Fourier magnitudes follow ``<xi>^(-s-3/2-0.01)``; phases come from a
    counter-based hash of (seed, component stream, wavevector), so the
    result is bit-identical for a given seed regardless of threading.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    if components not in (1, 3):
        raise ValueError("components must be 1 or 3")
    coefs = np.stack([rough_coefficients(grid, s, seed, 3 * stream + c) for c in range(components)])
    rank = "scalar" if components == 1 else "vector3"
    f = Field.from_coefficients(grid, rank, coefs)
    norm = sobolev_norm(f, s)
    if amplitude == 0 or norm == 0:
        return f.scaled(0.0)
    return f.scaled(amplitude / norm)


def band_limited_field(grid: Grid3, kmax: int, seed: int, components: int = 3, decay: float = 2.0) -> Field:
    """Smooth random trigonometric polynomial with integer wavenumbers |m_i| <= kmax, unit max-norm."""
    wn = grid.wavenumbers()
    out = []
    for c in range(components):
        coefs = rough_coefficients(grid, decay, seed, 1000 + c)
        keep = (np.abs(wn.m[0]) <= kmax) & (np.abs(wn.m[1]) <= kmax) & (np.abs(wn.m[2]) <= kmax)
        out.append(np.where(keep, coefs, 0.0))
    rank = "scalar" if components == 1 else "vector3"
    f = Field.from_coefficients(grid, rank, np.stack(out))
    return f.scaled(1.0 / f.max_norm())


# ---------------------------------------------------------------------------
# frequency rescaling
# ---------------------------------------------------------------------------


def resample(f: Field, n_new: int) -> Field:
    """Spectral interpolation of ``f`` onto a grid with ``n_new`` points per axis (same box)."""
    n = f.grid.n
    if n_new == n:
        return f
    c = np.fft.fftn(f.data, axes=(1, 2, 3), norm="forward")
    out = np.zeros((f.components, n_new, n_new, n_new), dtype=complex)
    k = min(n, n_new) // 2
    idx_old = np.r_[0:k, n - k + 1 : n] if k > 0 else np.r_[0]
    idx_new = np.r_[0:k, n_new - k + 1 : n_new] if k > 0 else np.r_[0]
    out[np.ix_(range(f.components), idx_new, idx_new, idx_new)] = c[np.ix_(range(f.components), idx_old, idx_old, idx_old)]
    vals = np.real(np.fft.ifftn(out, axes=(1, 2, 3), norm="forward"))
    return Field(Grid3(n_new, f.grid.box_len), f.rank, vals)


def frequency_rescale(
    snapshots: Sequence[tuple[float, Field]],
    lam: float,
    t_k: float,
    times: Sequence[float] | None = None,
    n_target: int | None = None,
) -> list[tuple[float, Field]]:
    """Samples of ``f(t_k + t/lam, x/lam)`` on the box of side ``lam * L``.

    Without ``times`` the rescaled times are those of the stored snapshots at
    or after ``t_k``.  Space is handled by spectral interpolation, time by
    linear interpolation between neighbouring snapshots.
    """
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    if not snapshots:
        raise ValueError("no snapshots given")
    ts = np.array([t for t, _ in snapshots], dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("snapshot times must increase strictly")
    grid = snapshots[0][1].grid
    n_target = grid.n if n_target is None else int(n_target)
    if times is None:
        times = [lam * (t - t_k) for t in ts if t >= t_k - 1e-12 * max(1.0, abs(t_k))]
    out = []
    new_grid = Grid3(n_target, lam * grid.box_len)
    for tau in times:
        t = t_k + tau / lam
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise ValueError(f"rescaled time {tau} maps to t={t}, outside snapshot coverage [{ts[0]}, {ts[-1]}]")
        j = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)) if len(ts) > 1 else 0
        if len(ts) == 1:
            data = snapshots[0][1].data
        else:
            w = (t - ts[j]) / (ts[j + 1] - ts[j])
            w = float(np.clip(w, 0.0, 1.0))
            a, b = snapshots[j][1].data, snapshots[j + 1][1].data
            data = a if w == 0.0 else (b if w == 1.0 else (1 - w) * a + w * b)
        f = resample(Field(grid, snapshots[0][1].rank, data), n_target)
        out.append((float(tau), Field(new_grid, f.rank, f.data)))
    return out
