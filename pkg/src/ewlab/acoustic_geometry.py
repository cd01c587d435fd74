"""Null-cone geometry of the fast acoustic metric.

Rays of the cone with tip ``(u, x0)`` are integrated with time as the
parameter, so the tangent ``L = (1, N)`` keeps ``L^0 = 1`` identically.
Along the rays the module builds a null frame, the null second fundamental
form, the conformal factor, curvature, the Raychaudhuri residual, the
slow-metric normal of the cone and the null fluxes of a field.

Metrics are objects with ``t_min``, ``t_max``, ``spacing`` and
``evaluate(t, x, order)`` returning a :class:`MetricEval`; the module ships a
flat metric, an analytic scale-factor metric and a cubic-spline metric built
from a trajectory.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.fft as sfft
from scipy.interpolate import BSpline, make_interp_spline

from .evolve import Trajectory, format_number, series_csv
from .grid_spectral import fft_workers, helmholtz_coefs, truncate, _inv
from .icosphere import Icosphere, icosphere, snap_count
from .material import MaterialSpec, grad_coefs, slow_metric, spatial_inverse_metric, _mat_first, _mat_last

# symmetric index pairs used to store spatial metric components
SYM_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
NULL_FLAG = 1e-4


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricEval:
    """Covariant metric and its coordinate derivatives at P points.

    ``dg[p, a, m, n] = d_a g_mn`` and ``ddg[p, a, b, m, n] = d_a d_b g_mn``
    with index 0 the time coordinate.
    """

    g: np.ndarray
    dg: np.ndarray | None = None
    ddg: np.ndarray | None = None


def _spatial_to_eval(val: np.ndarray, d: np.ndarray | None, dd: np.ndarray | None) -> MetricEval:
    """Assemble 4x4 metrics with g_00 = -1, g_0i = 0 from stored spatial components."""
    p = val.shape[0]
    g = np.zeros((p, 4, 4))
    g[:, 0, 0] = -1.0
    for c, (i, j) in enumerate(SYM_PAIRS):
        g[:, i + 1, j + 1] = val[:, c]
        g[:, j + 1, i + 1] = val[:, c]
    dg = ddg = None
    if d is not None:
        dg = np.zeros((p, 4, 4, 4))
        for c, (i, j) in enumerate(SYM_PAIRS):
            dg[:, :, i + 1, j + 1] = d[:, :, c]
            dg[:, :, j + 1, i + 1] = d[:, :, c]
    if dd is not None:
        ddg = np.zeros((p, 4, 4, 4, 4))
        for c, (i, j) in enumerate(SYM_PAIRS):
            ddg[:, :, :, i + 1, j + 1] = dd[:, :, :, c]
            ddg[:, :, :, j + 1, i + 1] = dd[:, :, :, c]
    return MetricEval(g, dg, ddg)


@dataclass(frozen=True)
class FlatMetric:
    """g = -dt^2 + c1^-2 |dx|^2, the acoustic metric of the undeformed state."""

    c1: float = 1.0
    spacing: float = 2.0 * math.pi / 32
    t_min: float = -math.inf
    t_max: float = math.inf

    def evaluate(self, t: float, x: np.ndarray, order: int = 1) -> MetricEval:
        p = len(x)
        g = np.broadcast_to(np.diag([-1.0] + [self.c1**-2] * 3), (p, 4, 4)).copy()
        dg = np.zeros((p, 4, 4, 4)) if order >= 1 else None
        ddg = np.zeros((p, 4, 4, 4, 4)) if order >= 2 else None
        return MetricEval(g, dg, ddg)


@dataclass(frozen=True)
class ScaleFactorMetric:
    """g = -dt^2 + c1^-2 a(t)^2 |dx|^2 with a(t) = 1 + eps sin(freq t).

    Its Ricci tensor is known in closed form: Ric_00 = -3 a''/a and
    Ric_ij = c1^-2 (a a'' + 2 a'^2) delta_ij.
    """

    eps: float = 0.1
    freq: float = 1.0
    c1: float = 1.0
    spacing: float = 2.0 * math.pi / 32
    t_min: float = -math.inf
    t_max: float = math.inf

    def scale(self, t: float) -> tuple[float, float, float]:
        w = self.freq
        return 1.0 + self.eps * math.sin(w * t), self.eps * w * math.cos(w * t), -self.eps * w * w * math.sin(w * t)

    def evaluate(self, t: float, x: np.ndarray, order: int = 1) -> MetricEval:
        p = len(x)
        a, da, dda = self.scale(t)
        k = self.c1**-2
        val = np.zeros((p, 6))
        val[:, [0, 3, 5]] = k * a * a
        d = dd = None
        if order >= 1:
            d = np.zeros((p, 4, 6))
            d[:, 0, [0, 3, 5]] = 2.0 * k * a * da
        if order >= 2:
            dd = np.zeros((p, 4, 4, 6))
            dd[:, 0, 0, [0, 3, 5]] = 2.0 * k * (da * da + a * dda)
        return _spatial_to_eval(val, d, dd)

    def ricci_exact(self, t: float) -> np.ndarray:
        a, da, dda = self.scale(t)
        ric = np.zeros((4, 4))
        ric[0, 0] = -3.0 * dda / a
        for i in range(1, 4):
            ric[i, i] = self.c1**-2 * (a * dda + 2.0 * da * da)
        return ric


@lru_cache(maxsize=4)
def _cardinal(degree: int) -> BSpline:
    return BSpline.basis_element(np.arange(degree + 2, dtype=float), extrapolate=False)


@lru_cache(maxsize=4)
def _piece_polys(degree: int) -> np.ndarray:
    """Polynomial coefficients (order, node, power) of the cardinal pieces as functions of u in [0, 1)."""
    card = _cardinal(degree)
    uu = (np.arange(degree + 1) + 0.5) / (degree + 1)
    pieces = np.arange(degree, -1, -1, dtype=float)
    out = np.zeros((3, degree + 1, degree + 1))
    for j, piece in enumerate(pieces):
        coef = np.polyfit(uu, card(uu + piece), degree)
        for o in range(3):
            out[o, j, o:] = np.polyder(coef, o) if o else coef
    return out


def _bspline_weights(u: np.ndarray, order: int, degree: int = 3) -> np.ndarray:
    """Uniform B-spline weights (P, degree + 1) for nodes i - (degree-1)/2 .. i + (degree+1)/2.

    ``u`` is the fractional offset of the point inside cell i and ``order``
    the derivative order in units of the node spacing.
    """
    coef = _piece_polys(degree)[order]
    out = np.zeros((len(u), degree + 1))
    for c in coef.T:
        out = out * u[:, None] + c[None, :]
    return out


class PeriodicSpline:
    """B-spline interpolant of gridded snapshots: periodic in space, not-a-knot in time.

    ``values`` has shape (K, C, n, n, n).  The interpolant reproduces every
    stored sample exactly.  The default odd ``degree`` 5 is C^4, so curvature
    and the transport of the null expansion along rays stay smooth across
    cell and snapshot boundaries; degree 3 is available for comparison.
    """

    def __init__(self, times: np.ndarray, values: np.ndarray, box_len: float, degree: int = 5):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.ndim != 5 or len(times) != values.shape[0]:
            raise ValueError("values must have shape (K, C, n, n, n) matching times")
        if np.any(np.diff(times) <= 0):
            raise ValueError("snapshot times must increase strictly")
        if degree not in (3, 5):
            raise ValueError("degree must be 3 or 5")
        n = values.shape[-1]
        self.n = n
        self.degree = degree
        self.box_len = float(box_len)
        self.spacing = self.box_len / n
        self.components = values.shape[1]
        # Fourier symbol of the cardinal spline sampled at the nodes
        half = (degree + 1) // 2
        offs = np.arange(-half + 1, half)
        node_vals = np.nan_to_num(_cardinal(degree)(offs + (degree + 1) / 2.0))
        m = np.fft.fftfreq(n, d=1.0 / n)
        sym = np.real(np.sum(node_vals[None, :] * np.exp(2j * np.pi * np.outer(m, offs) / n), axis=1))
        symr = sym[: n // 2 + 1]
        denom = sym[:, None, None] * sym[None, :, None] * symr[None, None, :]
        coefs = sfft.irfftn(
            sfft.rfftn(values, axes=(-3, -2, -1), workers=fft_workers()) / denom,
            s=(n, n, n),
            axes=(-3, -2, -1),
            workers=fft_workers(),
        )
        # (K, n^3, C): one contiguous row of components per node
        coefs = np.ascontiguousarray(np.moveaxis(coefs, 1, -1).reshape(len(times), n**3, self.components))
        self.t_min, self.t_max = float(times[0]), float(times[-1])
        if len(times) == 1:
            self._static = coefs[0]
            self._bs = None
        else:
            self._static = None
            k = min(degree, len(times) - 1)
            self._bs = make_interp_spline(times, coefs, k=k, axis=0)
            self._basis = BSpline(self._bs.t, np.eye(self._bs.c.shape[0]), k, extrapolate=False)
        self._cache: dict[tuple[float, int], np.ndarray] = {}

    def _time_coefs(self, t: float, nu: int) -> np.ndarray:
        if self._bs is None:
            return self._static if nu == 0 else np.zeros_like(self._static)
        key = (float(t), nu)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if not (self.t_min - 1e-12 <= t <= self.t_max + 1e-12):
            raise ValueError(f"time {t} outside the spline coverage [{self.t_min}, {self.t_max}]")
        tc = min(max(t, self.t_min), self.t_max)
        w = np.nan_to_num(self._basis(tc, nu))
        idx = np.nonzero(w)[0]
        out = np.tensordot(w[idx], self._bs.c[idx], axes=(0, 0))
        if len(self._cache) > 16:
            self._cache.clear()
        self._cache[key] = out
        return out

    def evaluate(self, t: float, x: np.ndarray, order: int = 1) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
        """Values (P, C), space-time gradient (P, 4, C) and Hessian (P, 4, 4, C)."""
        x = np.asarray(x, dtype=float)
        deg, n = self.degree, self.n
        p = len(x)
        s = x / self.spacing
        base = np.floor(s)
        u = s - base
        base = base.astype(np.int64)
        offs = np.arange(-(deg - 1) // 2, (deg + 1) // 2 + 1)
        idx = [(base[:, a, None] + offs[None, :]) % n for a in range(3)]
        lin = ((idx[0][:, :, None, None] * n + idx[1][:, None, :, None]) * n + idx[2][:, None, None, :]).reshape(p, -1)
        w = [[_bspline_weights(u[:, a], o, deg) / self.spacing**o for o in range(order + 1)] for a in range(3)]

        def combo(o: tuple[int, int, int]) -> np.ndarray:
            return (w[0][o[0]][:, :, None, None] * w[1][o[1]][:, None, :, None] * w[2][o[2]][:, None, None, :]).reshape(p, -1)

        def apply(c: np.ndarray, orders: list[tuple[int, int, int]]) -> np.ndarray:
            block = c[lin]  # (P, (deg+1)^3, C)
            weights = np.stack([combo(o) for o in orders], axis=1)
            return np.matmul(weights, block)  # (P, len(orders), C)

        def unit(*axes: int) -> tuple[int, int, int]:
            o = [0, 0, 0]
            for a in axes:
                o[a] += 1
            return tuple(o)

        first = [unit(a) for a in range(3)]
        second = [unit(a, b) for a in range(3) for b in range(a, 3)]
        orders0 = [(0, 0, 0)] + (first if order >= 1 else []) + (second if order >= 2 else [])
        r0 = apply(self._time_coefs(t, 0), orders0)
        val = r0[:, 0]
        if order < 1:
            return val, None, None
        r1 = apply(self._time_coefs(t, 1), [(0, 0, 0)] + (first if order >= 2 else []))
        d = np.empty((p, 4, self.components))
        d[:, 0] = r1[:, 0]
        d[:, 1:] = r0[:, 1:4]
        if order < 2:
            return val, d, None
        dd = np.empty((p, 4, 4, self.components))
        dd[:, 0, 0] = apply(self._time_coefs(t, 2), [(0, 0, 0)])[:, 0]
        dd[:, 0, 1:] = dd[:, 1:, 0] = r1[:, 1:4]
        k = 4
        for a in range(3):
            for b in range(a, 3):
                dd[:, a + 1, b + 1] = dd[:, b + 1, a + 1] = r0[:, k]
                k += 1
        return val, d, dd


class SplineMetric:
    """Fast acoustic metric of a trajectory, interpolated by :class:`PeriodicSpline`."""

    def __init__(self, times: np.ndarray, g_spatial: np.ndarray, box_len: float, degree: int = 5):
        vals = np.stack([g_spatial[:, i, j] for i, j in SYM_PAIRS], axis=1)
        self.spline = PeriodicSpline(times, vals, box_len, degree)
        self.spacing = self.spline.spacing
        self.t_min, self.t_max = self.spline.t_min, self.spline.t_max

    @classmethod
    def from_trajectory(cls, traj: Trajectory, degree: int = 5) -> "SplineMetric":
        grid, spec = traj.grid, traj.spec
        wn = grid.wavenumbers()
        gs = []
        for s in traj.snapshots:
            a = _inv(grad_coefs(truncate(s.U.coefficients(), wn), wn), grid.n)
            gs.append(_mat_first(np.linalg.inv(_mat_last(spatial_inverse_metric(a, spec)))))
        return cls(traj.times, np.stack(gs), grid.box_len, degree)

    def evaluate(self, t: float, x: np.ndarray, order: int = 1) -> MetricEval:
        val, d, dd = self.spline.evaluate(t, x, order)
        return _spatial_to_eval(val, d, dd)


# ---------------------------------------------------------------------------
# Christoffel symbols and curvature at points
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointChristoffel:
    lower: np.ndarray
    upper: np.ndarray
    contracted: np.ndarray
    g_inv: np.ndarray


def christoffel_at(ev: MetricEval) -> PointChristoffel:
    """Gamma_{a m n} = (d_m g_an + d_n g_am - d_a g_mn) / 2, raised and contracted."""
    dg = ev.dg
    lower = 0.5 * (np.einsum("pman->pamn", dg) + np.einsum("pnam->pamn", dg) - dg)
    g_inv = np.linalg.inv(ev.g)
    upper = np.einsum("pab,pbmn->pamn", g_inv, lower)
    contracted = np.einsum("pamn,pmn->pa", lower, g_inv)
    return PointChristoffel(lower, upper, contracted, g_inv)


def _christoffel_derivs(ev: MetricEval, ch: PointChristoffel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d_s Gamma_{a m n}, d_s g^{ab} and d_s Gamma^r_{m n}, derivative index s second."""
    dd = ev.ddg
    d_lower = 0.5 * (
        np.einsum("psman->psamn", dd) + np.einsum("psnam->psamn", dd) - dd
    )
    d_ginv = -np.einsum("pac,pscd,pdb->psab", ch.g_inv, ev.dg, ch.g_inv)
    d_upper = np.einsum("psra,pamn->psrmn", d_ginv, ch.lower) + np.einsum("pra,psamn->psrmn", ch.g_inv, d_lower)
    return d_lower, d_ginv, d_upper


def ricci_tensor(ev: MetricEval) -> np.ndarray:
    """Ric_mn = d_r G^r_mn - d_n G^r_rm + G^r_rl G^l_mn - G^r_nl G^l_rm."""
    if ev.ddg is None:
        raise ValueError("Ricci tensor needs second metric derivatives")
    ch = christoffel_at(ev)
    _, _, d_up = _christoffel_derivs(ev, ch)
    up = ch.upper
    term1 = np.einsum("prrmn->pmn", d_up)
    term2 = np.einsum("pnrrm->pmn", d_up)
    term3 = np.einsum("prrl,plmn->pmn", up, up)
    term4 = np.einsum("prnl,plrm->pmn", up, up)
    return term1 - term2 + term3 - term4


def ricci_principal(ev: MetricEval) -> np.ndarray:
    """-1/2 g^{mn} d_m d_n g_ab + (d_a Gamma_b + d_b Gamma_a) / 2 with Gamma_a = Gamma_{akl} g^{kl}."""
    ch = christoffel_at(ev)
    d_lower, d_ginv, _ = _christoffel_derivs(ev, ch)
    box = np.einsum("pmn,pmnab->pab", ch.g_inv, ev.ddg)
    d_gamma = np.einsum("psbkl,pkl->psb", d_lower, ch.g_inv) + np.einsum("pbkl,pskl->psb", ch.lower, d_ginv)
    return -0.5 * box + 0.5 * (d_gamma + np.swapaxes(d_gamma, 1, 2))


def ricci_LL(metric, t: float, x: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Ric(L, L) at points ``x`` (P, 3) for tangent vectors ``L`` (P, 4)."""
    ev = metric.evaluate(t, np.atleast_2d(x), order=2)
    ric = ricci_tensor(ev)
    return np.einsum("pmn,pm,pn->p", ric, L, L)


# ---------------------------------------------------------------------------
# ray tracing
# ---------------------------------------------------------------------------


def _ray_rhs(metric, t: float, x: np.ndarray, n_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, MetricEval]:
    ev = metric.evaluate(t, x, order=1)
    ch = christoffel_at(ev)
    lvec = np.concatenate([np.ones((len(x), 1)), n_vec], axis=1)
    acc = -np.einsum("pamn,pm,pn->pa", ch.upper, lvec, lvec)
    stretch = 0.5 * np.einsum("pij,pi,pj->p", ev.dg[:, 0, 1:, 1:], n_vec, n_vec)
    n_dot = acc[:, 1:] + stretch[:, None] * n_vec
    sigma_dot = 0.5 * np.einsum("pa,pa->p", ch.contracted, lvec)
    return n_vec, n_dot, sigma_dot, ev


def _null_defect(g: np.ndarray, n_vec: np.ndarray) -> np.ndarray:
    lvec = np.concatenate([np.ones((len(n_vec), 1)), n_vec], axis=1)
    return np.einsum("pmn,pm,pn->p", g, lvec, lvec)


@dataclass
class RaySet:
    """Sampled rays: times (S,), positions and spatial tangents (S, W, 3), conformal factor (S, W)."""

    times: np.ndarray
    x: np.ndarray
    n_vec: np.ndarray
    sigma: np.ndarray
    null_drift: np.ndarray
    truncated: bool
    stop_reason: str


def trace_rays(metric, t0: float, x0: np.ndarray, n0: np.ndarray, sigma0: np.ndarray, t_end: float, dt: float) -> RaySet:
    """Classical RK4 on (x, N, sigma) with t as parameter and L = (1, N).

    dN^i/dt = -Gamma^i_{kl} L^k L^l + 1/2 (d_t g)_{jk} N^j N^k N^i,
    dx/dt = N and d sigma/dt = Gamma_a L^a / 2.  Steps are uniform; the run
    stops early (``truncated``) when the next step would leave the metric's
    time coverage or the spatial metric loses positivity.
    """
    x = np.array(x0, dtype=float)
    nv = np.array(n0, dtype=float)
    sg = np.array(sigma0, dtype=float)
    n_steps = int(round((t_end - t0) / dt))
    if n_steps < 0 or abs(t0 + n_steps * dt - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError("t_end - t0 must be a non-negative multiple of dt")
    times, xs, ns, sgs, drift = [t0], [x.copy()], [nv.copy()], [sg.copy()], []
    ev0 = metric.evaluate(t0, x, order=0)
    drift.append(_null_defect(ev0.g, nv))
    truncated, reason = False, "complete"
    for k in range(n_steps):
        t = t0 + k * dt
        if t + dt > metric.t_max + 1e-12:
            truncated, reason = True, "time coverage"
            break
        k1x, k1n, k1s, _ = _ray_rhs(metric, t, x, nv)
        k2x, k2n, k2s, _ = _ray_rhs(metric, t + 0.5 * dt, x + 0.5 * dt * k1x, nv + 0.5 * dt * k1n)
        k3x, k3n, k3s, _ = _ray_rhs(metric, t + 0.5 * dt, x + 0.5 * dt * k2x, nv + 0.5 * dt * k2n)
        k4x, k4n, k4s, _ = _ray_rhs(metric, t + dt, x + dt * k3x, nv + dt * k3n)
        x = x + (dt / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        nv = nv + (dt / 6.0) * (k1n + 2 * k2n + 2 * k3n + k4n)
        sg = sg + (dt / 6.0) * (k1s + 2 * k2s + 2 * k3s + k4s)
        t_new = t0 + (k + 1) * dt
        ev = metric.evaluate(t_new, x, order=0)
        if not np.all(np.isfinite(x)) or np.min(np.linalg.eigvalsh(ev.g[:, 1:, 1:])) <= 0:
            truncated, reason = True, "signature"
            break
        times.append(t_new)
        xs.append(x.copy())
        ns.append(nv.copy())
        sgs.append(sg.copy())
        drift.append(_null_defect(ev.g, nv))
    return RaySet(np.array(times), np.stack(xs), np.stack(ns), np.stack(sgs), np.stack(drift), truncated, reason)


def initial_directions(metric, t: float, x0: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """Spatial tangents N = omega / sqrt(g(omega, omega)) at the tip (flat-start convention)."""
    pts = np.broadcast_to(np.asarray(x0, dtype=float), omegas.shape)
    g = metric.evaluate(t, pts, order=0).g[:, 1:, 1:]
    nrm = np.sqrt(np.einsum("pij,pi,pj->p", g, omegas, omegas))
    return omegas / nrm[:, None]


# ---------------------------------------------------------------------------
# frames and connection coefficients
# ---------------------------------------------------------------------------


def _g_dot(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("pij,pi,pj->p", g, a, b)


def orthonormal_frame(g: np.ndarray, n_vec: np.ndarray, seeds: np.ndarray, fallback: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """g-orthonormal (e_1, e_2), g-orthogonal to N, by Gram-Schmidt on the seeds.

    ``g`` is the spatial metric (W, 3, 3), ``seeds`` and ``fallback`` are
    (W, 2, 3).  Returns the frame and a mask of rays that had to be reseeded
    from ``fallback`` because a seed collapsed.
    """
    nn = _g_dot(g, n_vec, n_vec)

    def build(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e1 = s[:, 0] - (_g_dot(g, s[:, 0], n_vec) / nn)[:, None] * n_vec
        l1 = np.sqrt(np.maximum(_g_dot(g, e1, e1), 0.0))
        e2 = s[:, 1] - (_g_dot(g, s[:, 1], n_vec) / nn)[:, None] * n_vec
        with np.errstate(invalid="ignore", divide="ignore"):
            e1 = e1 / l1[:, None]
            e2 = e2 - _g_dot(g, e2, e1)[:, None] * e1
            l2 = np.sqrt(np.maximum(_g_dot(g, e2, e2), 0.0))
            e2 = e2 / l2[:, None]
        ref = np.sqrt(np.maximum(np.einsum("pij,pai,paj->pa", g, s, s).min(axis=1), 1e-300))
        bad = (l1 < 1e-3 * ref) | (l2 < 1e-3 * ref) | ~np.isfinite(l1 + l2)
        return np.stack([e1, e2], axis=1), bad

    frame, bad = build(seeds)
    if np.any(bad):
        alt, _ = build(fallback[bad])
        frame[bad] = alt
    return frame, bad


@dataclass
class GeodesicBundle:
    """Rays of one cone with frames and connection coefficients per sample.

    Arrays are indexed (sample, ray, ...).  Coefficients are NaN at samples
    with ``r < r_min`` (too close to the tip for the angular mesh).
    """

    u: float
    tip: np.ndarray
    sphere: Icosphere
    rays: RaySet
    dt_ray: float
    r_min: float
    valid: np.ndarray
    frame: np.ndarray
    coeffs: dict[str, np.ndarray] = field(default_factory=dict)
    reseeded: int = 0
    crossing: np.ndarray | None = None

    @property
    def times(self) -> np.ndarray:
        return self.rays.times

    @property
    def r(self) -> np.ndarray:
        return self.rays.times - self.u

    @property
    def n_omega(self) -> int:
        return self.sphere.count

    @property
    def L(self) -> np.ndarray:
        n = self.rays.n_vec
        return np.concatenate([np.ones(n.shape[:2] + (1,)), n], axis=2)

    @property
    def flagged_rays(self) -> np.ndarray:
        return np.max(np.abs(self.rays.null_drift), axis=0) > NULL_FLAG


def _crossing_mask(sphere: Icosphere, x: np.ndarray, n_vec: np.ndarray) -> np.ndarray:
    """Vertices touching a mapped triangle whose orientation flipped against N."""
    f = sphere.faces
    nrm = np.cross(x[f[:, 1]] - x[f[:, 0]], x[f[:, 2]] - x[f[:, 0]])
    flip = np.einsum("fi,fi->f", nrm, n_vec[f].mean(axis=1)) <= 0
    mask = np.zeros(len(x), dtype=bool)
    mask[f[flip].ravel()] = True
    return mask


def connection_coefficients(
    metric,
    t: float,
    sphere: Icosphere,
    x: np.ndarray,
    n_vec: np.ndarray,
    frame: np.ndarray,
    companions: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float] | None = None,
) -> dict[str, np.ndarray]:
    """Connection coefficients on one sphere S_{t,u} sampled by the rays.

    Angular derivatives of x and N come from the icosphere least-squares
    weights; a frame vector e_A acts on N through tangent coordinates
    ``beta_A`` chosen so that the mapped tangent d x / d beta, taken modulo
    N, reproduces e_A.

    ``companions`` = (x_minus, N_minus, x_plus, N_plus, du) are the same rays
    on the cones u - du and u + du at time t; with them the full spatial
    gradient of N is available and torsion zeta and null lapse b are added.
    """
    ev = metric.evaluate(t, x, order=1)
    ch = christoffel_at(ev)
    g = ev.g[:, 1:, 1:]
    dtg = ev.dg[:, 0, 1:, 1:]
    jx = np.swapaxes(sphere.angular_gradient(x), 1, 2)  # (W, 3, 2)
    jn = np.swapaxes(sphere.angular_gradient(n_vec), 1, 2)
    # the discrete tangents carry a small normal error; match e_A after removing the N component
    nn = np.einsum("pij,pi,pj->p", g, n_vec, n_vec)
    jp = jx - np.einsum("pi,pij,pja->pa", n_vec, g, jx)[:, None, :] * (n_vec / nn[:, None])[:, :, None]
    gram = np.einsum("pia,pij,pjb->pab", jp, g, jp)
    rhs = np.einsum("pia,pij,pBj->paB", jp, g, frame)
    beta = np.linalg.solve(gram, rhs)  # (W, 2, A)
    dn = np.einsum("pia,paA->pAi", jn, beta)  # e_A(N^i)
    gam_sp = ch.upper[:, 1:, 1:, 1:]  # Gamma^j_{ik}
    gam_t = ch.upper[:, 1:, 1:, 0]  # Gamma^j_{i0}
    d_n = dn + np.einsum("pjik,pAi,pk->pAj", gam_sp, frame, n_vec)
    d_t = np.einsum("pji,pAi->pAj", gam_t, frame)
    theta = np.einsum("pAj,pjk,pBk->pAB", d_n, g, frame)
    k_ab = -np.einsum("pAj,pjk,pBk->pAB", d_t, g, frame)
    chi = np.einsum("pAj,pjk,pBk->pAB", d_n + d_t, g, frame)
    chi_sym = 0.5 * (chi + np.swapaxes(chi, 1, 2))
    tr = chi_sym[:, 0, 0] + chi_sym[:, 1, 1]
    chi_hat = chi_sym - 0.5 * tr[:, None, None] * np.eye(2)[None]
    lvec = np.concatenate([np.ones((len(x), 1)), n_vec], axis=1)
    out = {
        "trchi": tr,
        "chi": chi,
        "chi_via_theta": theta - k_ab,
        "chi_hat": chi_hat,
        "chi_hat_sq": np.einsum("pab,pab->p", chi_hat, chi_hat),
        "theta": theta,
        "k": k_ab,
        "k_NN": -0.5 * np.einsum("pij,pi,pj->p", dtg, n_vec, n_vec),
        "gamma_L": np.einsum("pa,pa->p", ch.contracted, lvec),
    }
    if companions is not None:
        xm, nm, xp, np_, du = companions
        jxu = (xp - xm) / (2.0 * du)
        jnu = (np_ - nm) / (2.0 * du)
        full_x = np.concatenate([jx, jxu[:, :, None]], axis=2)
        full_n = np.concatenate([jn, jnu[:, :, None]], axis=2)
        grad_n = np.einsum("piq,pqj->pij", full_n, np.linalg.inv(full_x))  # d_j N^i
        _, n_dot, _, _ = _ray_rhs(metric, t, x, n_vec)
        dt_n = n_dot - np.einsum("pij,pj->pi", grad_n, n_vec)
        lbar = np.concatenate([np.ones((len(x), 1)), -n_vec], axis=1)
        dl = np.zeros((len(x), 4))
        dl[:, 1:] = dt_n - np.einsum("pij,pj->pi", grad_n, n_vec)
        dl = dl + np.einsum("pamn,pm,pn->pa", ch.upper, lbar, lvec)
        out["zeta"] = 0.5 * np.einsum("pj,pjk,pAk->pA", dl[:, 1:], g, frame) + 0.5 * np.einsum(
            "p,pk,pAk->pA", dl[:, 0], ev.g[:, 0, 1:], frame
        )
        out["b"] = -np.einsum("pi,pij,pj->p", n_vec, g, jxu)
    return out


def trace_bundle(
    metric,
    tip: tuple[float, float, float, float],
    n_omega: int = 642,
    dt_ray: float = 0.01,
    t_end: float | None = None,
    r_min: float | None = None,
    companions: bool = False,
) -> GeodesicBundle:
    """Trace the null cone with vertex ``tip = (u, x, y, z)`` and evaluate its geometry.

    ``n_omega`` is snapped to an icosphere count.  ``t_end`` defaults to the
    end of the metric's coverage (rounded down to a whole number of steps).
    With ``companions`` the neighbouring cones u -+ dt_ray are traced too and
    the torsion and null lapse are added to the coefficients.
    """
    u = float(tip[0])
    x0 = np.asarray(tip[1:], dtype=float)
    if not (metric.t_min <= u < metric.t_max):
        raise ValueError(f"tip time {u} outside the metric coverage [{metric.t_min}, {metric.t_max}]")
    count, level = snap_count(n_omega)
    sphere = icosphere(level)
    omegas = sphere.vertices
    if t_end is None:
        if not math.isfinite(metric.t_max):
            raise ValueError("t_end is required for metrics without a time bound")
        t_end = metric.t_max
    steps = int(math.floor((t_end - u) / dt_ray + 1e-9))
    t_end = u + steps * dt_ray
    r_min = 2.0 * metric.spacing if r_min is None else float(r_min)

    def cone(u0: float) -> RaySet:
        n0 = initial_directions(metric, u0, x0, omegas)
        return trace_rays(metric, u0, np.broadcast_to(x0, omegas.shape), n0, np.zeros(len(omegas)), t_end, dt_ray)

    rays = cone(u)
    side = None
    if companions and u - dt_ray >= metric.t_min and u + dt_ray < t_end:
        side = (cone(u - dt_ray), cone(u + dt_ray))
    s_count = len(rays.times)
    r = rays.times - u
    valid = r >= r_min - 1e-12
    frame = np.full((s_count, count, 2, 3), np.nan)
    keys = ("trchi", "chi_hat_sq", "k_NN", "gamma_L", "z", "ric_LL", "chi_route_gap", "chi_asym")
    coeffs = {k: np.full((s_count, count), np.nan) for k in keys}
    coeffs["chi_hat"] = np.full((s_count, count, 2, 2), np.nan)
    if side is not None:
        coeffs["zeta"] = np.full((s_count, count, 2), np.nan)
        coeffs["b"] = np.full((s_count, count), np.nan)
    crossing = np.zeros((s_count, count), dtype=bool)
    seeds = sphere.tangent.copy()
    reseeded = 0
    fallback = np.broadcast_to(np.eye(3)[None, :2], (count, 2, 3))
    for s in np.nonzero(valid)[0]:
        t = rays.times[s]
        x, nv = rays.x[s], rays.n_vec[s]
        g = metric.evaluate(t, x, order=0).g[:, 1:, 1:]
        e, bad = orthonormal_frame(g, nv, seeds, fallback)
        reseeded += int(bad.sum())
        frame[s] = e
        seeds = e
        comp = None
        if side is not None:
            sm = s + 1  # the u - du cone started one step earlier
            sp = s - 1
            if 0 <= sp < len(side[1].times) and sm < len(side[0].times) and r[s] - dt_ray >= r_min:
                comp = (side[0].x[sm], side[0].n_vec[sm], side[1].x[sp], side[1].n_vec[sp], dt_ray)
        cc = connection_coefficients(metric, t, sphere, x, nv, e, comp)
        coeffs["trchi"][s] = cc["trchi"]
        coeffs["chi_hat"][s] = cc["chi_hat"]
        coeffs["chi_hat_sq"][s] = cc["chi_hat_sq"]
        coeffs["k_NN"][s] = cc["k_NN"]
        coeffs["gamma_L"][s] = cc["gamma_L"]
        coeffs["z"][s] = cc["trchi"] + cc["gamma_L"] - 2.0 / r[s]
        coeffs["chi_route_gap"][s] = np.abs(cc["chi"] - cc["chi_via_theta"]).max(axis=(1, 2))
        coeffs["chi_asym"][s] = np.abs(cc["chi"][:, 0, 1] - cc["chi"][:, 1, 0])
        lvec = np.concatenate([np.ones((count, 1)), nv], axis=1)
        coeffs["ric_LL"][s] = ricci_LL(metric, t, x, lvec)
        if "zeta" in cc:
            coeffs["zeta"][s] = cc["zeta"]
            coeffs["b"][s] = cc["b"]
        crossing[s] = _crossing_mask(sphere, x, nv)
    if np.any(crossing):
        warnings.warn(f"ray crossing detected at {int(crossing.any(axis=1).sum())} samples", stacklevel=2)
    return GeodesicBundle(u, x0, sphere, rays, dt_ray, r_min, valid, frame, coeffs, reseeded, crossing)


def frame_gram_defect(bundle: GeodesicBundle, metric) -> np.ndarray:
    """Per valid sample, the largest deviation of the null-frame Gram matrix from its ideal values.

    Checks g(L,L) = g(Lbar,Lbar) = 0, g(L,Lbar) = -2, g(N,N) = 1,
    g(e_A,e_B) = delta_AB and g(e_A, L) = g(e_A, Lbar) = 0.
    """
    out = np.full(len(bundle.times), np.nan)
    for s in np.nonzero(bundle.valid)[0]:
        t = bundle.times[s]
        nv = bundle.rays.n_vec[s]
        g = metric.evaluate(t, bundle.rays.x[s], order=0).g
        w = len(nv)
        lv = np.concatenate([np.ones((w, 1)), nv], axis=1)
        lb = np.concatenate([np.ones((w, 1)), -nv], axis=1)
        ea = np.concatenate([np.zeros((w, 2, 1)), bundle.frame[s]], axis=2)
        vecs = np.concatenate([lv[:, None], lb[:, None], ea], axis=1)  # L, Lbar, e1, e2
        gram = np.einsum("pam,pmn,pbn->pab", vecs, g, vecs)
        ideal = np.zeros((4, 4))
        ideal[0, 1] = ideal[1, 0] = -2.0
        ideal[2, 2] = ideal[3, 3] = 1.0
        out[s] = np.abs(gram - ideal[None]).max()
    return out


# ---------------------------------------------------------------------------
# structure equations, conformal factor, slow-metric checks
# ---------------------------------------------------------------------------


def z_sigma(bundle: GeodesicBundle) -> tuple[np.ndarray, np.ndarray]:
    """z = tr chi + Gamma_L - 2 / r (NaN near the tip) and the transported conformal factor sigma."""
    return bundle.coeffs["z"], bundle.rays.sigma


def _along_ray_derivative(values: np.ndarray, dt: float, width: int = 7) -> np.ndarray:
    """Central derivative along rays (axis 0), NaN where the stencil touches NaN or the ends."""
    half = width // 2
    offs = np.arange(-half, half + 1, dtype=float)
    vander = np.vander(offs, width, increasing=True).T
    rhs = np.zeros(width)
    rhs[1] = 1.0
    w = np.linalg.solve(vander, rhs) / dt
    out = np.full_like(values, np.nan)
    for s in range(half, len(values) - half):
        out[s] = np.tensordot(w, values[s - half : s + half + 1], axes=(0, 0))
    return out


def raychaudhuri_residual(bundle: GeodesicBundle, drop_knn: bool = False) -> np.ndarray:
    """L tr chi + tr chi^2 / 2 + |chi_hat|^2 + k_NN tr chi + Ric(L, L) at every sample.

    ``L tr chi`` is the seven-point derivative of tr chi along the ray.  With
    ``drop_knn`` the k_NN tr chi term is omitted (mutation hook).
    """
    c = bundle.coeffs
    tr = c["trchi"]
    ltr = _along_ray_derivative(tr, bundle.dt_ray)
    res = ltr + 0.5 * tr**2 + c["chi_hat_sq"] + c["ric_LL"]
    if not drop_knn:
        res = res + c["k_NN"] * tr
    return res


@dataclass(frozen=True)
class HSpacelike:
    H: np.ndarray
    V: np.ndarray
    ok: bool
    normalisation_defect: float
    offending: list


def h_spacelike_check(bundle: GeodesicBundle, spec: MaterialSpec, metric=None) -> HSpacelike:
    """h(L, L) and the future h-unit normal V of the cone at every valid sample.

    V is h^-1 applied to the covector annihilating L, e_1, e_2, scaled to
    h(V, V) = -1 with V^0 > 0.  When H <= 0 somewhere and ``metric`` is
    given, the ellipticity margin g - h at the offending point is recorded.
    """
    h_inv, h = slow_metric(spec)
    lv = bundle.L
    H = np.einsum("mn,swm,swn->sw", h, lv, lv)
    V = np.full(lv.shape, np.nan)
    defect = 0.0
    for s in np.nonzero(bundle.valid)[0]:
        e = bundle.frame[s]
        w = len(e)
        rows = np.concatenate([lv[s][:, None], np.concatenate([np.zeros((w, 2, 1)), e], axis=2)], axis=1)  # (W, 3, 4)
        _, _, vh = np.linalg.svd(rows)
        covec = vh[:, -1]
        vec = covec @ h_inv.T
        norm = np.einsum("pm,mn,pn->p", vec, h, vec)
        vec = vec / np.sqrt(-norm)[:, None]
        vec = vec * np.sign(vec[:, 0])[:, None]
        V[s] = vec
        unit = (vec[:, 0] ** 2 - spec.c2**-2 * np.sum(vec[:, 1:] ** 2, axis=1)) - 1.0
        defect = max(defect, float(np.abs(unit).max()))
    bad = np.argwhere(~(H > 0))
    offending = []
    for s, w in bad[:10]:
        rec = {"sample": int(s), "ray": int(w), "H": float(H[s, w])}
        if metric is not None:
            g = metric.evaluate(bundle.times[s], bundle.rays.x[s, w][None], order=0).g[0, 1:, 1:]
            rec["g_minus_h_max_eig"] = float(np.linalg.eigvalsh(g - h[1:, 1:]).max())
        offending.append(rec)
    return HSpacelike(H, V, bool(np.all(H > 0)), defect, offending)


# ---------------------------------------------------------------------------
# fields on the cone and null fluxes
# ---------------------------------------------------------------------------


class ScalarField:
    """Space-time interpolant of one component of a Helmholtz part of U."""

    def __init__(self, spline: PeriodicSpline):
        self.spline = spline

    @classmethod
    def from_trajectory(cls, traj: Trajectory, part: str = "phi", component: int = 0) -> "ScalarField":
        if part not in ("phi", "psi", "U"):
            raise ValueError("part must be 'phi', 'psi' or 'U'")
        wn = traj.grid.wavenumbers()
        vals = []
        for s in traj.snapshots:
            c = truncate(s.U.coefficients(), wn)
            if part != "U":
                p, q, _ = helmholtz_coefs(c, wn)
                c = p if part == "phi" else q
            vals.append(_inv(c[component], traj.grid.n))
        return cls(PeriodicSpline(traj.times, np.stack(vals)[:, None], traj.grid.box_len))

    def derivatives(self, t: float, x: np.ndarray) -> np.ndarray:
        """(P, 4) space-time gradient."""
        _, d, _ = self.spline.evaluate(t, x, order=1)
        return d[:, :, 0]


@dataclass(frozen=True)
class AnalyticField:
    """Field given by a callable returning the (P, 4) space-time gradient at (t, x)."""

    gradient: Callable[[float, np.ndarray], np.ndarray]

    def derivatives(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.gradient(t, x)


def sphere_vertex_weights(sphere: Icosphere, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Lumped vertex areas of the mapped triangulation under the spatial metric g (W, 3, 3)."""
    f = sphere.faces
    e1 = x[f[:, 1]] - x[f[:, 0]]
    e2 = x[f[:, 2]] - x[f[:, 0]]
    gf = g[f].mean(axis=1)
    a11 = np.einsum("fij,fi,fj->f", gf, e1, e1)
    a22 = np.einsum("fij,fi,fj->f", gf, e2, e2)
    a12 = np.einsum("fij,fi,fj->f", gf, e1, e2)
    area = 0.5 * np.sqrt(np.maximum(a11 * a22 - a12**2, 0.0))
    w = np.zeros(len(x))
    np.add.at(w, f.ravel(), np.repeat(area / 3.0, 3))
    return w


def null_fluxes(bundle: GeodesicBundle, metric, fld, spec: MaterialSpec) -> dict:
    """F1 = int (L phi)^2 + |angular grad phi|^2, F2 = int Q_h(T, V), and int |d phi|^2 over the cone.

    Integrals use lumped triangle areas of S_{t,u} under g and the
    trapezoid rule in t over the valid samples.  ``coercive_ratio`` is
    F2 / int |d phi|^2.
    """
    hs = h_spacelike_check(bundle, spec)
    idx = np.nonzero(bundle.valid)[0]
    if len(idx) < 2:
        raise ValueError("fewer than two valid samples on the cone")
    f1, f2, dn = [], [], []
    for s in idx:
        t = bundle.times[s]
        x, nv, e = bundle.rays.x[s], bundle.rays.n_vec[s], bundle.frame[s]
        g = metric.evaluate(t, x, order=0).g[:, 1:, 1:]
        wts = sphere_vertex_weights(bundle.sphere, x, g)
        d = fld.derivatives(t, x)
        ft, grad = d[:, 0], d[:, 1:]
        l_phi = ft + np.einsum("pi,pi->p", nv, grad)
        ang = np.einsum("pAi,pi->pA", e, grad)
        v = hs.V[s]
        v_phi = v[:, 0] * ft + np.einsum("pi,pi->p", v[:, 1:], grad)
        q_tv = ft * v_phi + 0.5 * v[:, 0] * (-(ft**2) + spec.c2**2 * np.sum(grad**2, axis=1))
        f1.append(float(np.sum(wts * (l_phi**2 + np.sum(ang**2, axis=1)))))
        f2.append(float(np.sum(wts * q_tv)))
        dn.append(float(np.sum(wts * (ft**2 + np.sum(grad**2, axis=1)))))
    t = bundle.times[idx]
    F1, F2, den = (float(np.trapezoid(np.array(a), t)) for a in (f1, f2, dn))
    return {
        "u": bundle.u,
        "F1": F1,
        "F2": F2,
        "denom": den,
        "coercive_ratio": F2 / den if den > 0 else math.nan,
        "excluded_samples": int((~bundle.valid).sum()),
    }


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def geodesics_csv(bundle: GeodesicBundle, spec: MaterialSpec) -> str:
    """One row per (ray, sample): u, ray_id, t, x, y, z, L0..L3, trchi, zsmall, sigma, H, null_drift."""
    hs = h_spacelike_check(bundle, spec)
    rays = bundle.rays
    rows = []
    for w in range(bundle.n_omega):
        for s in range(len(rays.times)):
            x = rays.x[s, w]
            nv = rays.n_vec[s, w]
            rows.append(
                {
                    "u": bundle.u, "ray_id": w, "t": rays.times[s],
                    "x": x[0], "y": x[1], "z": x[2],
                    "L0": 1.0, "L1": nv[0], "L2": nv[1], "L3": nv[2],
                    "trchi": bundle.coeffs["trchi"][s, w], "zsmall": bundle.coeffs["z"][s, w],
                    "sigma": rays.sigma[s, w], "H": hs.H[s, w], "null_drift": rays.null_drift[s, w],
                }
            )
    return series_csv(rows)


def fluxes_csv(records: list[dict]) -> str:
    keys = ["u", "F1", "F2", "denom", "coercive_ratio"]
    return series_csv([{k: r[k] for k in keys} for r in records])


__all__ = [
    "AnalyticField", "FlatMetric", "GeodesicBundle", "HSpacelike", "MetricEval", "PeriodicSpline",
    "ScalarField", "ScaleFactorMetric", "SplineMetric", "christoffel_at", "connection_coefficients",
    "format_number", "frame_gram_defect", "geodesics_csv", "fluxes_csv", "h_spacelike_check",
    "initial_directions", "null_fluxes", "orthonormal_frame", "raychaudhuri_residual", "ricci_LL",
    "ricci_principal", "ricci_tensor", "sphere_vertex_weights", "trace_bundle", "trace_rays", "z_sigma",
]
