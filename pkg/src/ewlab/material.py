"""Admissible harmonic material: right-hand sides, Piola identity, acoustic metrics.

Displacement gradients follow ``A[j, k] = d_j U^k`` and ``F = I + A``.
Stress polynomials are evaluated on a padded grid and truncated back to
the 2/3 band, so products of band-limited inputs are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .grid_spectral import (
    Field,
    Grid3,
    Wavenumbers,
    deriv_coefs,
    from_padded,
    padded_size,
    second_deriv_coefs,
    to_padded,
    truncate,
)


@dataclass(frozen=True)
class MaterialSpec:
    """Wave speeds, Piola coefficient and the entrywise stored-energy profile.

    ``gamma = (k2, k3, ...)`` defines ``gamma(m) = sum_p k_p m^p / p`` and the
    scalar ``G(A) = sum_jk gamma(A_jk)``.
    """

    c1: float = 1.0
    c2: float = 0.5
    b_coef: float = 0.5
    gamma: tuple[float, ...] = (0.4, 0.1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "gamma", tuple(float(k) for k in self.gamma))
        if not (np.isfinite(self.c1) and np.isfinite(self.c2)) or not self.c1 > self.c2 > 0:
            raise ValueError(f"need c1 > c2 > 0, got c1={self.c1}, c2={self.c2}")
        if not np.isfinite(self.b_coef):
            raise ValueError("b_coef must be finite")
        if not all(np.isfinite(k) for k in self.gamma):
            raise ValueError("gamma coefficients must be finite")

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialSpec":
        return cls(
            c1=float(d.get("c1", 1.0)),
            c2=float(d.get("c2", 0.5)),
            b_coef=float(d.get("b_coef", 0.5)),
            gamma=tuple(d.get("gamma", (0.4, 0.1))),
        )

    def to_dict(self) -> dict:
        return {"c1": self.c1, "c2": self.c2, "b_coef": self.b_coef, "gamma": list(self.gamma)}

    @property
    def powers(self) -> list[tuple[int, float]]:
        return [(p, k) for p, k in enumerate(self.gamma, start=2) if k != 0.0]

    @property
    def degree(self) -> int:
        """Highest power p with a nonzero coefficient (0 for the linear material)."""
        ps = [p for p, _ in self.powers]
        return max(ps) if ps else 0

    @property
    def is_linear(self) -> bool:
        return self.degree == 0

    def gamma_fn(self, m: np.ndarray) -> np.ndarray:
        return sum((k / p) * m**p for p, k in self.powers) + 0.0 * m

    def dgamma(self, m: np.ndarray) -> np.ndarray:
        return sum(k * m ** (p - 1) for p, k in self.powers) + 0.0 * m

    def d2gamma(self, m: np.ndarray) -> np.ndarray:
        return sum(k * (p - 1) * m ** (p - 2) for p, k in self.powers) + 0.0 * m

    def d3gamma(self, m: np.ndarray) -> np.ndarray:
        return sum(k * (p - 1) * (p - 2) * m ** (p - 3) for p, k in self.powers if p >= 3) + 0.0 * m


# ---------------------------------------------------------------------------
# coefficient-level kernels shared by the evolution code
# ---------------------------------------------------------------------------


def grad_coefs(uc: np.ndarray, wn: Wavenumbers) -> np.ndarray:
    """Coefficients of A[j, k] = d_j U^k, shape (3, 3, ...)."""
    return np.stack([deriv_coefs(uc, wn, j) for j in range(3)])


def _padded_grad(uc: np.ndarray, wn: Wavenumbers, n: int, m: int) -> np.ndarray:
    return to_padded(grad_coefs(uc, wn), n, m)


def _padded_hessian(uc: np.ndarray, wn: Wavenumbers, n: int, m: int) -> np.ndarray:
    """H[i, j, k] = d_i d_j U^k on the padded grid."""
    pairs = [(i, j) for i in range(3) for j in range(i, 3)]
    stacked = np.stack([second_deriv_coefs(uc, wn, i, j) for i, j in pairs])
    vals = to_padded(stacked, n, m)
    out = np.empty((3, 3) + vals.shape[1:])
    for idx, (i, j) in enumerate(pairs):
        out[i, j] = vals[idx]
        out[j, i] = vals[idx]
    return out


def nonlinearity_coefs(uc: np.ndarray, spec: MaterialSpec, grid: Grid3, flip_sign_power: int | None = None) -> np.ndarray:
    """Coefficients of f_i = sum_jk gamma'(A_jk) d_i A_jk."""
    wn = grid.wavenumbers()
    if spec.is_linear:
        return np.zeros_like(uc)
    n = grid.n
    m = padded_size(n, spec.degree)
    a = _padded_grad(uc, wn, n, m)
    h = _padded_hessian(uc, wn, n, m)
    ga = spec.dgamma(a)
    f = np.einsum("jk...,ijk...->i...", ga, h)
    return from_padded(f, n)


def stored_energy_coefs(uc: np.ndarray, spec: MaterialSpec, grid: Grid3) -> np.ndarray:
    """Coefficients of the scalar G(dU) = sum_jk gamma(d_j U^k)."""
    wn = grid.wavenumbers()
    if spec.is_linear:
        return np.zeros_like(uc[0])
    n = grid.n
    m = padded_size(n, spec.degree)
    a = _padded_grad(uc, wn, n, m)
    return from_padded(spec.gamma_fn(a).sum(axis=(0, 1)), n)


def cofactor_coefs(uc: np.ndarray, grid: Grid3, degree: int = 2) -> np.ndarray:
    """Coefficients of cof(F) with F = I + dU, assembled from quadratic 2x2 minors."""
    wn = grid.wavenumbers()
    n = grid.n
    m = padded_size(n, max(2, degree))
    a = _padded_grad(uc, wn, n, m)
    f = a.copy()
    for i in range(3):
        f[i, i] += 1.0
    cof = np.empty_like(f)
    for j in range(3):
        j1, j2 = (j + 1) % 3, (j + 2) % 3
        for k in range(3):
            k1, k2 = (k + 1) % 3, (k + 2) % 3
            cof[j, k] = f[j1, k1] * f[j2, k2] - f[j1, k2] * f[j2, k1]
    return from_padded(cof, n)


def linear_acceleration_coefs(uc: np.ndarray, spec: MaterialSpec, wn: Wavenumbers) -> np.ndarray:
    lap = -wn.xi2 * uc
    div = sum(deriv_coefs(uc[a], wn, a) for a in range(3))
    grad_div = np.stack([deriv_coefs(div, wn, a) for a in range(3)])
    return spec.c2**2 * lap + (spec.c1**2 - spec.c2**2) * grad_div


def acceleration_coefs(uc: np.ndarray, spec: MaterialSpec, grid: Grid3) -> np.ndarray:
    wn = grid.wavenumbers()
    return truncate(linear_acceleration_coefs(uc, spec, wn), wn) + nonlinearity_coefs(uc, spec, grid)


# ---------------------------------------------------------------------------
# public field-level operations
# ---------------------------------------------------------------------------


def _vector_coefs(u: Field) -> np.ndarray:
    if u.rank != "vector3":
        raise ValueError("displacement must be a vector field")
    return truncate(u.coefficients(), u.grid.wavenumbers())


def deformation_gradient(u: Field) -> Field:
    """F = I + dU with entry (j, k) = delta_jk + d_j U^k."""
    uc = u.coefficients() if u.rank == "vector3" else None
    if uc is None:
        raise ValueError("displacement must be a vector field")
    a = Field.from_coefficients(u.grid, "matrix3x3", grad_coefs(uc, u.grid.wavenumbers()).reshape(9, *uc.shape[1:]))
    data = a.data.copy()
    for i in range(3):
        data[3 * i + i] += 1.0
    return Field(u.grid, "matrix3x3", data)


def piola_identity_residual(u: Field) -> tuple[Field, float]:
    """Pointwise div cof(F), contracted on the derivative (row) index, and its max norm."""
    grid = u.grid
    wn = grid.wavenumbers()
    cof = cofactor_coefs(_vector_coefs(u), grid)
    res = sum(np.stack([deriv_coefs(cof[j, k], wn, j) for k in range(3)]) for j in range(3))
    f = Field.from_coefficients(grid, "vector3", res)
    return f, f.max_norm()


def nonlinearity(u: Field, spec: MaterialSpec) -> Field:
    """f_i = sum_jk gamma'(d_j U^k) d_i d_j U^k, evaluated directly."""
    return Field.from_coefficients(u.grid, "vector3", nonlinearity_coefs(_vector_coefs(u), spec, u.grid))


def nonlinearity_gradient_form(u: Field, spec: MaterialSpec) -> Field:
    """The same force evaluated as the spectral gradient of G(dU)."""
    wn = u.grid.wavenumbers()
    g = stored_energy_coefs(_vector_coefs(u), spec, u.grid)
    return Field.from_coefficients(u.grid, "vector3", np.stack([deriv_coefs(g, wn, a) for a in range(3)]))


def acceleration(u: Field, spec: MaterialSpec, verify: bool = False, tol: float = 1e-8) -> Field:
    """Reduced right-hand side c2^2 Lap U + (c1^2 - c2^2) grad div U + f.

    With ``verify`` the unreduced form div{G I + b cof(F)} is also evaluated
    and the two are required to agree to ``tol`` in max norm.
    """
    uc = _vector_coefs(u)
    out = Field.from_coefficients(u.grid, "vector3", acceleration_coefs(uc, spec, u.grid))
    if verify:
        other = acceleration_unreduced(u, spec)
        gap = (out - other).max_norm()
        if gap > tol:
            raise ArithmeticError(f"reduced and unreduced right sides differ by {gap:.3e}")
    return out


def acceleration_unreduced(u: Field, spec: MaterialSpec) -> Field:
    """Right-hand side with the stress divergence div{G(dU) I + b cof(F)} kept intact."""
    grid = u.grid
    wn = grid.wavenumbers()
    uc = _vector_coefs(u)
    lin = truncate(linear_acceleration_coefs(uc, spec, wn), wn)
    g = stored_energy_coefs(uc, spec, grid)
    cof = cofactor_coefs(uc, grid)
    stress_div = np.stack(
        [deriv_coefs(g, wn, k) + spec.b_coef * sum(deriv_coefs(cof[j, k], wn, j) for j in range(3)) for k in range(3)]
    )
    return Field.from_coefficients(grid, "vector3", lin + stress_div)


# ---------------------------------------------------------------------------
# metrics and monitors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSample:
    """Inverse acoustic metric of the fast wave, its inverse, and the slow-wave pair at one point."""

    g_inv: np.ndarray
    g: np.ndarray
    h_inv: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class MetricField:
    """Acoustic metrics at every grid point; arrays have shape (4, 4, n, n, n)."""

    g_inv: np.ndarray
    g: np.ndarray
    h_inv: np.ndarray
    h: np.ndarray

    def sample(self, i: int, j: int, k: int) -> MetricSample:
        return MetricSample(
            self.g_inv[:, :, i, j, k].copy(), self.g[:, :, i, j, k].copy(), self.h_inv.copy(), self.h.copy()
        )

    @property
    def spatial_inv(self) -> np.ndarray:
        return self.g_inv[1:, 1:]

    @property
    def spatial(self) -> np.ndarray:
        return self.g[1:, 1:]


def _mat_last(a: np.ndarray) -> np.ndarray:
    """(3, 3, ...) -> (..., 3, 3)."""
    return np.moveaxis(np.moveaxis(a, 0, -1), 0, -1)


def _mat_first(a: np.ndarray) -> np.ndarray:
    """(..., 3, 3) -> (3, 3, ...)."""
    return np.moveaxis(np.moveaxis(a, -1, 0), -1, 0)


def spatial_inverse_metric(a: np.ndarray, spec: MaterialSpec) -> np.ndarray:
    """c1^2 delta_jk + (gamma'(A_jk) + gamma'(A_kj)) / 2 for a (3, 3, ...) gradient array."""
    ga = spec.dgamma(a)
    out = 0.5 * (ga + np.swapaxes(ga, 0, 1))
    for i in range(3):
        out[i, i] = out[i, i] + spec.c1**2
    return out


def slow_metric(spec: MaterialSpec) -> tuple[np.ndarray, np.ndarray]:
    h_inv = np.diag([-1.0, spec.c2**2, spec.c2**2, spec.c2**2])
    h = np.diag([-1.0, spec.c2**-2, spec.c2**-2, spec.c2**-2])
    return h_inv, h


def _as_matrix_array(f: Field | np.ndarray) -> np.ndarray:
    if isinstance(f, Field):
        if f.rank != "matrix3x3":
            raise ValueError("expected a matrix field")
        return f.data.reshape(3, 3, *f.data.shape[1:])
    return np.asarray(f)


def metric_from_gradient(a: np.ndarray, spec: MaterialSpec, check: bool = True) -> MetricField:
    """Acoustic metrics from the full gradient array A = dphi + dpsi of shape (3, 3, ...)."""
    sp_inv = spatial_inverse_metric(a, spec)
    sp_last = _mat_last(sp_inv)
    if check:
        lam = np.linalg.eigvalsh(sp_last)
        if np.min(lam) <= 0:
            raise ArithmeticError("spatial block of g^-1 is not positive definite: hyperbolicity lost")
    sp = _mat_first(np.linalg.inv(sp_last))
    shape = a.shape[2:]
    g_inv = np.zeros((4, 4) + shape)
    g = np.zeros((4, 4) + shape)
    g_inv[0, 0] = -1.0
    g[0, 0] = -1.0
    g_inv[1:, 1:] = sp_inv
    g[1:, 1:] = sp
    h_inv, h = slow_metric(spec)
    return MetricField(g_inv, g, h_inv, h)


def acoustic_metrics(dphi: Field | np.ndarray, dpsi: Field | np.ndarray, spec: MaterialSpec) -> MetricField:
    """Fast-wave metric built from the symmetrised gamma' of dphi + dpsi, plus the constant slow metric."""
    a = _as_matrix_array(dphi) + _as_matrix_array(dpsi)
    return metric_from_gradient(a, spec)


class Hyperbolicity(NamedTuple):
    ok: bool
    margin: float
    lam_max: float
    bound: float


def hyperbolicity_check(du: Field | np.ndarray, spec: MaterialSpec) -> Hyperbolicity:
    """Minimum eigenvalue of the symmetrised (c1^2 - c2^2) delta + gamma'(dU) over the grid.

    ``bound`` is the two-sided constant ``C = max(lam_max, 1 / lam_min)``.
    """
    a = _as_matrix_array(du)
    ga = spec.dgamma(a)
    mat = 0.5 * (ga + np.swapaxes(ga, 0, 1))
    for i in range(3):
        mat[i, i] = mat[i, i] + (spec.c1**2 - spec.c2**2)
    lam = np.linalg.eigvalsh(_mat_last(mat))
    lo = float(lam[..., 0].min())
    hi = float(lam[..., -1].max())
    ok = bool(lo > 0 and np.isfinite(hi))
    bound = max(hi, 1.0 / lo) if lo > 0 else float("inf")
    return Hyperbolicity(ok, lo, hi, bound)


def ellipticity_check(g_spatial: np.ndarray | MetricField, spec: MaterialSpec) -> tuple[bool, tuple[float, float]]:
    """Checks g^-1 - h^-1 > 0 and g - h < 0 on the spatial blocks.

    Accepts either a :class:`MetricField` or the (3, 3, ...) spatial block of
    the covariant metric ``g``.  The margins are the smallest eigenvalue of
    the first difference and the smallest |eigenvalue| of the second.
    """
    if isinstance(g_spatial, MetricField):
        sp = g_spatial.spatial
    else:
        sp = np.asarray(g_spatial)
    sp_last = _mat_last(sp)
    sp_inv_last = np.linalg.inv(sp_last)
    eye = np.eye(3)
    lam1 = np.linalg.eigvalsh(sp_inv_last - spec.c2**2 * eye)
    lam2 = np.linalg.eigvalsh(sp_last - spec.c2**-2 * eye)
    m1 = float(lam1[..., 0].min())
    m2 = float(-lam2[..., -1].max())
    return bool(m1 > 0 and m2 > 0), (m1, m2)


# ---------------------------------------------------------------------------
# Christoffel symbols and wave operators on gridded snapshots
# ---------------------------------------------------------------------------


def _time_weights(ts: Sequence[float], k: int) -> tuple[float, float, float]:
    """Second-order first-derivative weights at ts[k] from ts[k-1], ts[k], ts[k+1]."""
    h1 = ts[k] - ts[k - 1]
    h2 = ts[k + 1] - ts[k]
    return -h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2))


def _spatial_grad_array(values: np.ndarray, grid: Grid3) -> np.ndarray:
    """Spectral d_i of each leading component: (..., n, n, n) -> (3, ..., n, n, n)."""
    wn = grid.wavenumbers()
    from .grid_spectral import _fwd, _inv

    c = _fwd(values)
    return np.stack([_inv(deriv_coefs(c, wn, a), grid.n) for a in range(3)])


def christoffel(
    metric_snapshots: Sequence[tuple[float, np.ndarray]], grid: Grid3, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Christoffel symbols at snapshot ``k`` from gridded covariant metrics.

    ``metric_snapshots`` holds ``(t, g)`` pairs with ``g`` of shape
    (4, 4, n, n, n).  Spatial derivatives are spectral, the time derivative a
    second-order central difference.  Returns ``(lower, upper, contracted)``
    with ``lower[a, k, l] = Gamma_{akl}``, ``upper[b, k, l] = Gamma^b_{kl}``
    and ``contracted[a] = Gamma_{akl} (g^-1)^{kl}``.
    """
    if len(metric_snapshots) < 3 or not 0 < k < len(metric_snapshots) - 1:
        raise ValueError("need snapshots on both sides of the requested time")
    ts = [t for t, _ in metric_snapshots]
    w = _time_weights(ts, k)
    g = metric_snapshots[k][1]
    dg = np.empty((4,) + g.shape)
    dg[0] = sum(wi * metric_snapshots[k - 1 + i][1] for i, wi in enumerate(w))
    dg[1:] = _spatial_grad_array(g, grid)
    lower = 0.5 * (np.einsum("kal...->akl...", dg) + np.einsum("lak...->akl...", dg) - dg)
    g_inv = _mat_first(np.linalg.inv(np.moveaxis(np.moveaxis(g, 0, -1), 0, -1)))
    upper = np.einsum("ba...,akl...->bkl...", g_inv, lower)
    contracted = np.einsum("akl...,kl...->a...", lower, g_inv)
    return lower, upper, contracted


def wave_operator(
    phi_snapshots: Sequence[tuple[float, Field]],
    metric_snapshots: Sequence[tuple[float, np.ndarray]],
    k: int,
    reduced: bool,
) -> Field:
    """Reduced (g^ab d_a d_b) or Laplace-Beltrami wave operator at snapshot ``k``.

    The metric must have the acoustic block structure g^{0i} = 0.  Time
    derivatives are second-order differences on the snapshot sequence.
    """
    if len(phi_snapshots) != len(metric_snapshots):
        raise ValueError("field and metric snapshot sequences differ in length")
    if not 0 < k < len(phi_snapshots) - 1:
        raise ValueError("need snapshots on both sides of the requested time")
    grid = phi_snapshots[k][1].grid
    for (tp, fp), (tm, gm) in zip(phi_snapshots, metric_snapshots):
        if abs(tp - tm) > 1e-12 or fp.grid != grid or gm.shape[2:] != (grid.n,) * 3:
            raise ValueError("field and metric snapshots are on mismatched grids or times")
    ts = [t for t, _ in phi_snapshots]
    h1, h2 = ts[k] - ts[k - 1], ts[k + 1] - ts[k]
    phis = [phi_snapshots[k + d][1].data[0] for d in (-1, 0, 1)]
    gs = [metric_snapshots[k + d][1] for d in (-1, 0, 1)]
    g = gs[1]
    if np.max(np.abs(g[0, 1:])) > 0:
        raise ValueError("wave operator expects g_{0i} = 0")
    g_inv = _mat_first(np.linalg.inv(np.moveaxis(np.moveaxis(g, 0, -1), 0, -1)))
    dphi = _spatial_grad_array(phis[1], grid)
    if reduced:
        d2t = 2.0 * (h1 * phis[2] - (h1 + h2) * phis[1] + h2 * phis[0]) / (h1 * h2 * (h1 + h2))
        out = g_inv[0, 0] * d2t
        hess = _spatial_grad_array(dphi, grid)
        out = out + np.einsum("ij...,ij...->...", g_inv[1:, 1:], hess)
        return Field(grid, "scalar", out)
    vol = [np.sqrt(np.abs(np.linalg.det(np.moveaxis(np.moveaxis(gg, 0, -1), 0, -1)))) for gg in gs]
    ginv00 = [_mat_first(np.linalg.inv(np.moveaxis(np.moveaxis(gg, 0, -1), 0, -1)))[0, 0] for gg in gs]
    a_plus = 0.5 * (vol[2] * ginv00[2] + vol[1] * ginv00[1])
    a_minus = 0.5 * (vol[1] * ginv00[1] + vol[0] * ginv00[0])
    flux_p = a_plus * (phis[2] - phis[1]) / h2
    flux_m = a_minus * (phis[1] - phis[0]) / h1
    time_part = (flux_p - flux_m) / (0.5 * (h1 + h2))
    spatial_flux = vol[1] * np.einsum("ij...,j...->i...", g_inv[1:, 1:], dphi)
    space_part = sum(_spatial_grad_array(spatial_flux[i], grid)[i] for i in range(3))
    return Field(grid, "scalar", (time_part + space_part) / vol[1])
