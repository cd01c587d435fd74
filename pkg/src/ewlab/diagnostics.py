"""Energies, decoupling monitors and equation residuals evaluated along trajectories."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .evolve import Trajectory, linear_curl_part, series_csv
from .grid_spectral import (
    Field,
    Grid3,
    coef_energy,
    curl_coefs,
    deriv_coefs,
    div_coefs,
    helmholtz_coefs,
    laplacian_coefs,
    lp_bands,
    from_padded,
    padded_size,
    second_deriv_coefs,
    sobolev_norm,
    to_padded,
    truncate,
    _inv,
)
from .material import (
    MaterialSpec,
    MetricField,
    _mat_last,
    grad_coefs,
    hyperbolicity_check,
    metric_from_gradient,
    slow_metric,
)

# default LP weight exponent: delta0 = eps0^2 with eps0 = (N - 3) / 10 at N = 3.1
DELTA0 = 1e-4
# regularity index of the default data; sets the H^s ladder s = N - 1 - k
N_DEFAULT = 3.1
# snapshots per time-difference stencil (sixth-order first derivative)
STENCIL_WIDTH = 7


# ---------------------------------------------------------------------------
# finite differences in time
# ---------------------------------------------------------------------------


def fd_weights(offsets: Sequence[float], order: int) -> np.ndarray:
    """Weights w with sum_i w_i f(t + offsets_i) ~ f^(order)(t), exact for polynomials of degree < len(offsets)."""
    x = np.asarray(offsets, dtype=float)
    npts = len(x)
    if order >= npts:
        raise ValueError("need more points than the derivative order")
    vander = np.vander(x, npts, increasing=True).T
    rhs = np.zeros(npts)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(vander, rhs)


def stencil(times: np.ndarray, k: int, width: int = STENCIL_WIDTH) -> np.ndarray:
    """Indices of the ``width`` snapshots nearest to ``k`` (centred when possible)."""
    if len(times) < width:
        raise ValueError(f"need at least {width} snapshots for time differences")
    lo = min(max(k - width // 2, 0), len(times) - width)
    return np.arange(lo, lo + width)


def time_derivative(values: Sequence[np.ndarray], times: np.ndarray, k: int, order: int = 1, width: int = STENCIL_WIDTH) -> np.ndarray:
    """Finite difference of a snapshot sequence at index ``k`` from ``width`` neighbours."""
    idx = stencil(times, k, width)
    w = fd_weights(times[idx] - times[k], order)
    return sum(wi * values[i] for wi, i in zip(w, idx))


# ---------------------------------------------------------------------------
# per-snapshot split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSnapshot:
    """Helmholtz parts of (U, V) at one time in coefficient form."""

    t: float
    phi: np.ndarray
    psi: np.ndarray
    phi_t: np.ndarray
    psi_t: np.ndarray


def split_snapshots(traj: Trajectory) -> list[SplitSnapshot]:
    wn = traj.grid.wavenumbers()
    out = []
    for s in traj.snapshots:
        p, q, _ = helmholtz_coefs(truncate(s.U.coefficients(), wn), wn)
        pt, qt, _ = helmholtz_coefs(truncate(s.V.coefficients(), wn), wn)
        out.append(SplitSnapshot(s.t, p, q, pt, qt))
    return out


def _grad_values(c: np.ndarray, grid: Grid3) -> np.ndarray:
    """d_j of each component: (C, ...) coefficients -> (3, C, n, n, n) samples."""
    wn = grid.wavenumbers()
    return _inv(np.stack([deriv_coefs(c, wn, j) for j in range(3)]), grid.n)


def dd_values(c: np.ndarray, ct: np.ndarray, grid: Grid3) -> np.ndarray:
    """Space-time derivatives of the spatial gradient: d_a d_j u^k for a in (t, x, y, z)."""
    wn = grid.wavenumbers()
    grad_t = np.stack([deriv_coefs(ct, wn, j) for j in range(3)])
    hess = np.stack([second_deriv_coefs(c, wn, i, j) for i in range(3) for j in range(3)])
    return _inv(np.concatenate([grad_t, hess]), grid.n)


# ---------------------------------------------------------------------------
# energy-momentum tensor and energies
# ---------------------------------------------------------------------------


def energy_momentum_tensor(dphi: np.ndarray, g: np.ndarray, g_inv: np.ndarray) -> np.ndarray:
    """Q_{mu nu} = d_mu phi d_nu phi - 1/2 g_{mu nu} g^{ab} d_a phi d_b phi.

    ``dphi`` has shape (4, ...); metrics have shape (4, 4, ...) or (4, 4).
    """
    dphi = np.asarray(dphi, dtype=float)
    extra = dphi.ndim - 1
    g = np.asarray(g).reshape(g.shape + (1,) * (extra + 2 - g.ndim))
    g_inv = np.asarray(g_inv).reshape(g_inv.shape + (1,) * (extra + 2 - g_inv.ndim))
    quad = np.einsum("ab...,a...,b...->...", g_inv, dphi, dphi)
    return np.einsum("m...,n...->mn...", dphi, dphi) - 0.5 * g * quad


def energy_momentum(phi: Field, phi_t: Field, metric: MetricField) -> np.ndarray:
    """Q_{mu nu} of a scalar field at one time; time derivative supplied directly."""
    if phi.rank != "scalar" or phi_t.rank != "scalar":
        raise ValueError("energy-momentum tensor is defined for scalar fields")
    d = _grad_values(phi.coefficients(), phi.grid)[:, 0]
    dphi = np.concatenate([phi_t.data, d])
    return energy_momentum_tensor(dphi, metric.g, metric.g_inv)


def _q00(ft: np.ndarray, grad: np.ndarray, sp_inv: np.ndarray) -> np.ndarray:
    """Q^{00} for block metrics with g^{00} = -1, g^{0i} = 0, summed over components.

    ``ft`` is (C, ...), ``grad`` is (3, C, ...) and ``sp_inv`` the spatial
    inverse metric (3, 3, ...) or (3, 3).
    """
    if sp_inv.ndim == 2:
        quad = np.einsum("ij,ic...,jc...->...", sp_inv, grad, grad)
    else:
        quad = np.einsum("ij...,ic...,jc...->...", sp_inv, grad, grad)
    return 0.5 * np.sum(ft**2, axis=0) + 0.5 * quad


@dataclass(frozen=True)
class EnergyParts:
    """Energy of the curl-free part under g and of the solenoidal part under h."""

    wave_div: float
    wave_curl: float
    mass_div: float
    mass_curl: float

    @property
    def wave(self) -> float:
        return self.wave_div + self.wave_curl

    @property
    def standard(self) -> float:
        return self.wave + self.mass_div + self.mass_curl


def energy_parts(snap: SplitSnapshot, grid: Grid3, spec: MaterialSpec) -> EnergyParts:
    """Integrals of Q^{00} and of the squared field, with dx weighted by sqrt(det g) (resp. h)."""
    n = grid.n
    a = _inv(grad_coefs(snap.phi + snap.psi, grid.wavenumbers()), n)
    metric = metric_from_gradient(a, spec, check=False)
    vol_g = np.sqrt(np.abs(np.linalg.det(_mat_last(metric.spatial))))
    vol_h = spec.c2**-3
    phi, psi = _inv(snap.phi, n), _inv(snap.psi, n)
    dv = grid.cell_volume
    q_div = _q00(_inv(snap.phi_t, n), _grad_values(snap.phi, grid), metric.spatial_inv)
    h_inv, _ = slow_metric(spec)
    q_curl = _q00(_inv(snap.psi_t, n), _grad_values(snap.psi, grid), h_inv[1:, 1:])
    return EnergyParts(
        wave_div=float(np.sum(q_div * vol_g) * dv),
        wave_curl=float(np.sum(q_curl) * vol_h * dv),
        mass_div=float(np.sum(np.sum(phi**2, axis=0) * vol_g) * dv),
        mass_curl=float(np.sum(np.sum(psi**2, axis=0)) * vol_h * dv),
    )


def standard_energy(state, spec: MaterialSpec) -> float:
    """Integral of Q^{00} + |u|^2 over the slice for both Helmholtz parts of the state."""
    wn = state.grid.wavenumbers()
    p, q, _ = helmholtz_coefs(truncate(state.U.coefficients(), wn), wn)
    pt, qt, _ = helmholtz_coefs(truncate(state.V.coefficients(), wn), wn)
    return energy_parts(SplitSnapshot(state.t, p, q, pt, qt), state.grid, spec).standard


def wave_energy(state, spec: MaterialSpec) -> float:
    """Q^{00} part only; conserved by the linear system."""
    wn = state.grid.wavenumbers()
    p, q, _ = helmholtz_coefs(truncate(state.U.coefficients(), wn), wn)
    pt, qt, _ = helmholtz_coefs(truncate(state.V.coefficients(), wn), wn)
    return energy_parts(SplitSnapshot(state.t, p, q, pt, qt), state.grid, spec).wave


def _cumulative_trapezoid(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y, dtype=float)
    if len(y) > 1:
        out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def energy_inequality_fit(traj: Trajectory) -> tuple[float | None, dict]:
    """Least C with E(t) <= E(0) exp(C int_0^t (||dd phi, dd psi||_inf + 1)) at every snapshot.

    The minimiser has the closed form ``max_k max(0, log(E_k / E_0) / I_k)``,
    so no search over C is needed.  Returns ``(None, report)`` for a
    zero-energy trajectory.
    """
    if len(traj.snapshots) < 10:
        raise ValueError("energy inequality fit needs at least 10 snapshots")
    grid, spec = traj.grid, traj.spec
    splits = split_snapshots(traj)
    times = np.array([s.t for s in splits])
    energies = np.array([energy_parts(s, grid, spec).standard for s in splits])
    sup = np.array(
        [max(np.abs(dd_values(s.phi, s.phi_t, grid)).max(), np.abs(dd_values(s.psi, s.psi_t, grid)).max()) for s in splits]
    )
    integral = _cumulative_trapezoid(sup + 1.0, times)
    report = {"t": times.tolist(), "energy": energies.tolist(), "integral": integral.tolist()}
    if not energies[0] > 0:
        report["note"] = "zero initial energy; no fit"
        return None, report
    ratios = np.log(np.maximum(energies[1:], 1e-300) / energies[0]) / integral[1:]
    c_fit = float(max(0.0, ratios.max()))
    report["C_fit"] = c_fit
    return c_fit, report


# ---------------------------------------------------------------------------
# decoupling and residual monitors
# ---------------------------------------------------------------------------


def curl_h1_norm(uc: np.ndarray, grid: Grid3) -> float:
    wn = grid.wavenumbers()
    return sobolev_norm(Field.from_coefficients(grid, "vector3", curl_coefs(uc, wn)), 1.0)


def psi_equation_residual(splits: list[SplitSnapshot], grid: Grid3, spec: MaterialSpec) -> np.ndarray:
    """Relative L^2 residual of d_t^2 curl psi = c2^2 Lap curl psi at each snapshot.

    The second time derivative is the finite-difference first derivative of
    the solenoidal part of V across neighbouring snapshots.  Normalised by ||Lap curl psi||_L2 (absolute when
    that vanishes).
    """
    wn = grid.wavenumbers()
    times = np.array([s.t for s in splits])
    curl_vt = [curl_coefs(s.psi_t, wn) for s in splits]
    out = np.empty(len(splits))
    for k, s in enumerate(splits):
        d2 = time_derivative(curl_vt, times, k, 1)
        lap = laplacian_coefs(curl_coefs(s.psi, wn), wn)
        res = Field.from_coefficients(grid, "vector3", d2 - spec.c2**2 * lap)
        den = sobolev_norm(Field.from_coefficients(grid, "vector3", spec.c2**2 * lap), 0.0)
        num = sobolev_norm(res, 0.0)
        out[k] = num / den if den > 0 else num
    return out


def decoupling_monitor(traj: Trajectory, splits: list[SplitSnapshot] | None = None) -> dict:
    """Series of ||curl U||_H1, the psi gap to the exact linear evolution and the psi-equation residual."""
    grid = traj.grid
    wn = grid.wavenumbers()
    splits = splits if splits is not None else split_snapshots(traj)
    times = np.array([s.t for s in splits])
    u0 = truncate(traj.snapshots[0].U.coefficients(), wn)
    h2 = sobolev_norm(Field.from_coefficients(grid, "vector3", u0), 2.0)
    curl = [curl_h1_norm(s.phi + s.psi, grid) for s in splits]
    gaps = []
    for s in splits:
        lin = linear_curl_part(traj, s.t)
        psi = _inv(s.psi, grid.n)
        den = float(np.sqrt(np.sum(lin**2)))
        num = float(np.sqrt(np.sum((psi - lin) ** 2)))
        gaps.append(num / den if den > 0 else num)
    out = {"t": times.tolist(), "curl_norm": curl, "u0_h2": h2, "psi_gap": gaps}
    if len(splits) >= STENCIL_WIDTH:
        out["psi_residual"] = psi_equation_residual(splits, grid, traj.spec).tolist()
    return out


def _coef_l2(c: np.ndarray, grid: Grid3) -> float:
    """L^2 norm over the box of the field with coefficients ``c`` (Plancherel)."""
    return math.sqrt(grid.volume * coef_energy(c, grid.wavenumbers()))


def divpart_source(phi: np.ndarray, psi: np.ndarray, grid: Grid3, spec: MaterialSpec, flip_second: bool = False) -> np.ndarray:
    """Coefficients of P = sum_jk gamma'(A_jk) Lap d_j psi^k + gamma''(A_jk) sum_i (d_i A_jk)^2.

    ``A = d(phi + psi)``.  Products are formed on the padded grid and cut
    back to the band, like the evolution's nonlinearity.  ``flip_second``
    reverses the sign of the gamma'' term (mutation hook).
    """
    wn = grid.wavenumbers()
    n = grid.n
    if spec.is_linear:
        return np.zeros_like(phi[0])
    m = padded_size(n, spec.degree)
    u = phi + psi
    a = to_padded(grad_coefs(u, wn), n, m)
    lap_dpsi = to_padded(grad_coefs(laplacian_coefs(psi, wn), wn), n, m)
    da = to_padded(np.stack([grad_coefs(deriv_coefs(u, wn, i), wn) for i in range(3)]), n, m)
    first = np.sum(spec.dgamma(a) * lap_dpsi, axis=(0, 1))
    second = np.sum(spec.d2gamma(a) * np.sum(da**2, axis=0), axis=(0, 1))
    return from_padded(first - second if flip_second else first + second, n)


def reduced_box_divphi(phi: np.ndarray, psi: np.ndarray, d2t: np.ndarray, grid: Grid3, spec: MaterialSpec) -> np.ndarray:
    """Coefficients of g^{ab} d_a d_b (div phi) given the coefficients of d_t^2 div phi."""
    wn = grid.wavenumbers()
    n = grid.n
    dphi = div_coefs(phi, wn)
    out = -d2t + spec.c1**2 * laplacian_coefs(dphi, wn)
    if spec.is_linear:
        return out
    m = padded_size(n, spec.degree)
    ga = spec.dgamma(to_padded(grad_coefs(phi + psi, wn), n, m))
    hess = to_padded(np.stack([grad_coefs(deriv_coefs(dphi, wn, i), wn) for i in range(3)]), n, m)
    # symmetric Hessian: the symmetrised gamma' contracts like gamma' itself
    return out + from_padded(np.einsum("ij...,ij...->...", ga, hess), n)


def divpart_residual(traj: Trajectory, flip_second: bool = False, splits: list[SplitSnapshot] | None = None) -> dict:
    """Residual of the reduced wave equation for div phi on the evolved solution.

    At every snapshot evaluates ``g^{ab} d_a d_b (div phi) + P`` where the
    second time derivative is a finite-difference first derivative of
    div(phi_t) across neighbouring snapshots.  The reported relative value
    divides the L^2 norm by ``||d d phi||_L2`` (all second spatial
    derivatives).
    """
    grid, spec = traj.grid, traj.spec
    wn = grid.wavenumbers()
    splits = splits if splits is not None else split_snapshots(traj)
    times = np.array([s.t for s in splits])
    div_vt = [div_coefs(s.phi_t, wn) for s in splits]
    absolute, relative = [], []
    for k, s in enumerate(splits):
        d2t = time_derivative(div_vt, times, k, 1)
        res = reduced_box_divphi(s.phi, s.psi, d2t, grid, spec) + divpart_source(s.phi, s.psi, grid, spec, flip_second)
        num = _coef_l2(res, grid)
        den = _coef_l2(np.stack([second_deriv_coefs(s.phi, wn, i, j) for i in range(3) for j in range(3)]), grid)
        absolute.append(num)
        relative.append(num / den if den > 0 else num)
    return {"t": times.tolist(), "absolute": absolute, "relative": relative}


# ---------------------------------------------------------------------------
# Strichartz-type running norms
# ---------------------------------------------------------------------------


def _lp_weighted_sup(dd: np.ndarray, grid: Grid3, delta0: float) -> float:
    """sum_nu nu^(2 delta0) ||P_nu dd||_inf^2 over the bands stored on the grid."""
    from .grid_spectral import _fwd, _lp_multiplier

    c = _fwd(dd)
    total = 0.0
    for band in lp_bands(grid):
        piece = _inv(c * _lp_multiplier(grid, band.nu), grid.n)
        total += band.nu ** (2.0 * delta0) * float(np.abs(piece).max()) ** 2
    return total


def strichartz_norms(traj: Trajectory, delta0: float = DELTA0, splits: list[SplitSnapshot] | None = None) -> dict:
    """Running integrals of ||dd phi||_inf^2 and of its nu-weighted LP sum."""
    grid = traj.grid
    splits = splits if splits is not None else split_snapshots(traj)
    times = np.array([s.t for s in splits])
    sup2, lp = [], []
    for s in splits:
        dd = dd_values(s.phi, s.phi_t, grid)
        sup2.append(float(np.abs(dd).max()) ** 2)
        lp.append(_lp_weighted_sup(dd, grid, delta0))
    return {
        "t": times.tolist(),
        "sup2": sup2,
        "lp_weighted": lp,
        "strichartz_partial": _cumulative_trapezoid(np.array(sup2), times).tolist(),
        "lp_sum": _cumulative_trapezoid(np.array(lp), times).tolist(),
    }


# ---------------------------------------------------------------------------
# the per-snapshot record and CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyRecord:
    t: float
    E_std: float
    E_wave: float
    E_kinetic: float
    div_ladder: tuple[float, ...]
    curl_ladder: tuple[float, ...]
    curl_norm: float
    psi_gap: float
    psi_residual: float
    divpart_residual: float
    hyper_margin: float
    strichartz_partial: float
    lp_sum: float


def sobolev_ladder(c: np.ndarray, ct: np.ndarray, grid: Grid3, levels: Sequence[float]) -> tuple[float, ...]:
    """sqrt(||grad u||_{H^s}^2 + ||u_t||_{H^s}^2) for each s."""
    wn = grid.wavenumbers()
    grad = Field.from_coefficients(grid, "matrix3x3", grad_coefs(c, wn).reshape((9,) + c.shape[1:]))
    vel = Field.from_coefficients(grid, "vector3", ct)
    return tuple(math.hypot(sobolev_norm(grad, s), sobolev_norm(vel, s)) for s in levels)


def ladder_levels(n_reg: float = N_DEFAULT) -> tuple[float, ...]:
    return tuple(round(n_reg - 1 - k, 10) for k in range(3))


def energy_records(traj: Trajectory, delta0: float = DELTA0, n_reg: float = N_DEFAULT) -> list[EnergyRecord]:
    """All diagnostics of a trajectory, one record per snapshot."""
    grid, spec = traj.grid, traj.spec
    splits = split_snapshots(traj)
    levels = ladder_levels(n_reg)
    dec = decoupling_monitor(traj, splits)
    nan = [math.nan] * len(splits)
    psi_res = dec.get("psi_residual", nan)
    div_res = divpart_residual(traj, splits=splits)["relative"] if len(splits) >= STENCIL_WIDTH else nan
    stri = strichartz_norms(traj, delta0, splits)
    records = []
    for k, s in enumerate(splits):
        parts = energy_parts(s, grid, spec)
        kinetic = 0.5 * float(np.sum(_inv(s.phi_t + s.psi_t, grid.n) ** 2) * grid.cell_volume)
        a = _inv(grad_coefs(s.phi + s.psi, grid.wavenumbers()), grid.n)
        records.append(
            EnergyRecord(
                t=s.t,
                E_std=parts.standard,
                E_wave=parts.wave,
                E_kinetic=kinetic,
                div_ladder=sobolev_ladder(s.phi, s.phi_t, grid, levels),
                curl_ladder=sobolev_ladder(s.psi, s.psi_t, grid, levels),
                curl_norm=dec["curl_norm"][k],
                psi_gap=dec["psi_gap"][k],
                psi_residual=psi_res[k],
                divpart_residual=div_res[k],
                hyper_margin=hyperbolicity_check(a, spec).margin,
                strichartz_partial=stri["strichartz_partial"][k],
                lp_sum=stri["lp_sum"][k],
            )
        )
    return records


def records_csv(records: list[EnergyRecord], n_reg: float = N_DEFAULT) -> str:
    levels = ladder_levels(n_reg)
    rows = []
    for r in records:
        d = asdict(r)
        row = {"t": r.t, "E_std": r.E_std, "E_wave": r.E_wave, "E_kinetic": r.E_kinetic}
        for s, v in zip(levels, r.div_ladder):
            row[f"div_H{s:g}"] = v
        for s, v in zip(levels, r.curl_ladder):
            row[f"curl_H{s:g}"] = v
        for key in ("curl_norm", "psi_gap", "psi_residual", "divpart_residual", "hyper_margin", "strichartz_partial", "lp_sum"):
            row[key] = d[key]
        rows.append(row)
    return series_csv(rows)
