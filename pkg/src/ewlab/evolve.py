"""Time integration of the elastic wave system and of its decoupled curl sector."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import canonical_json, config_hash, validate_config
from .ewf import read_ewf, write_ewf
from .grid_spectral import (
    Field,
    Grid3,
    deriv_coefs,
    helmholtz_coefs,
    rough_coefficients,
    rough_random_field,
    sobolev_norm,
    truncate,
    _fwd,
    _inv,
)
from .material import (
    MaterialSpec,
    acceleration_coefs,
    grad_coefs,
    hyperbolicity_check,
    spatial_inverse_metric,
    _mat_last,
)


@dataclass(frozen=True)
class State:
    """Phase point (U, V = dU/dt) at time t."""

    U: Field
    V: Field
    t: float

    def __post_init__(self) -> None:
        if self.U.rank != "vector3" or self.V.rank != "vector3":
            raise ValueError("U and V must be vector fields")
        if self.U.grid != self.V.grid:
            raise ValueError("U and V live on different grids")

    @property
    def grid(self) -> Grid3:
        return self.U.grid

    def gradient(self) -> np.ndarray:
        """A[j, k] = d_j U^k, shape (3, 3, n, n, n)."""
        wn = self.grid.wavenumbers()
        return _inv(grad_coefs(self.U.coefficients(), wn), self.grid.n)


@dataclass
class Trajectory:
    """Snapshots at a uniform output stride plus the run's provenance."""

    grid: Grid3
    spec: MaterialSpec
    config: dict
    dt: float
    out_stride: int
    snapshots: list[State] = field(default_factory=list)
    series: list[dict] = field(default_factory=list)
    failure: dict | None = None
    blowup_threshold: float = math.inf

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def dt_out(self) -> float:
        return self.dt * self.out_stride

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(canonical_json(self.config), encoding="utf-8")
        (d / "series.csv").write_text(series_csv(self.series), encoding="utf-8")
        meta = {
            "config_hash": self.config_hash,
            "dt": self.dt,
            "out_stride": self.out_stride,
            "snapshots": len(self.snapshots),
            "blowup_threshold": None if math.isinf(self.blowup_threshold) else self.blowup_threshold,
            "failure": self.failure,
        }
        (d / "run.json").write_text(canonical_json(meta), encoding="utf-8")
        for idx, s in enumerate(self.snapshots):
            data = np.concatenate([s.U.data, s.V.data])
            write_ewf(d / f"state_{idx:06d}.ewf", data, self.grid.box_len, "state", s.t)
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "Trajectory":
        d = Path(directory)
        cfg = validate_config(json.loads((d / "config.json").read_text(encoding="utf-8")))
        meta = json.loads((d / "run.json").read_text(encoding="utf-8"))
        grid = Grid3(cfg["grid"]["n"], cfg["grid"]["box_len"])
        spec = MaterialSpec.from_dict(cfg["material"])
        snaps = []
        for idx in range(meta["snapshots"]):
            header, data = read_ewf(d / f"state_{idx:06d}.ewf")
            snaps.append(State(Field(grid, "vector3", data[:3]), Field(grid, "vector3", data[3:]), header["time"]))
        series = list(csv.DictReader(io.StringIO((d / "series.csv").read_text(encoding="utf-8"))))
        series = [{k: float(v) for k, v in row.items()} for row in series]
        thr = meta.get("blowup_threshold")
        return cls(grid, spec, cfg, meta["dt"], meta["out_stride"], snaps, series, meta.get("failure"),
                   math.inf if thr is None else thr)


def series_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    keys = list(rows[0].keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([format_number(r[k]) for k in keys])
    return buf.getvalue()


def format_number(x: Any) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def max_speed_squared(a: np.ndarray, spec: MaterialSpec) -> float:
    """Largest eigenvalue of the spatial block of g^-1 over the grid."""
    lam = np.linalg.eigvalsh(_mat_last(spatial_inverse_metric(a, spec)))
    return float(lam[..., -1].max())


def cfl_dt(state: State, spec: MaterialSpec, safety: float = 0.4) -> float:
    """safety * spacing / c_max with c_max^2 the top eigenvalue of the spatial g^-1."""
    if not safety > 0:
        raise ValueError("CFL safety factor must be positive")
    c2max = max(max_speed_squared(state.gradient(), spec), spec.c1**2)
    return safety * state.grid.spacing / math.sqrt(c2max)


def _rk4_coefs(uc: np.ndarray, vc: np.ndarray, dt: float, spec: MaterialSpec, grid: Grid3) -> tuple[np.ndarray, np.ndarray]:
    acc = lambda u: acceleration_coefs(u, spec, grid)  # noqa: E731
    k1u, k1v = vc, acc(uc)
    k2u, k2v = vc + 0.5 * dt * k1v, acc(uc + 0.5 * dt * k1u)
    k3u, k3v = vc + 0.5 * dt * k2v, acc(uc + 0.5 * dt * k2u)
    k4u, k4v = vc + dt * k3v, acc(uc + dt * k3u)
    u_new = uc + (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    v_new = vc + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return u_new, v_new


def rk4_step(state: State, dt: float, spec: MaterialSpec, safety: float | None = 0.4) -> State:
    """One classical Runge-Kutta step of dU/dt = V, dV/dt = acceleration(U).

    Steps longer than 1.01 times ``cfl_dt(state, spec, safety)`` are refused;
    pass ``safety=None`` to skip the check (convergence studies do).
    """
    if safety is not None and dt > 1.01 * cfl_dt(state, spec, safety):
        raise ValueError(f"time step {dt} exceeds the CFL limit")
    grid = state.grid
    wn = grid.wavenumbers()
    uc = truncate(state.U.coefficients(), wn)
    vc = truncate(state.V.coefficients(), wn)
    u_new, v_new = _rk4_coefs(uc, vc, dt, spec, grid)
    u_vals, v_vals = _inv(u_new, grid.n), _inv(v_new, grid.n)
    if not (np.all(np.isfinite(u_vals)) and np.all(np.isfinite(v_vals))):
        raise FloatingPointError(f"non-finite values after step from t={state.t}")
    return State(Field(grid, "vector3", u_vals), Field(grid, "vector3", v_vals), state.t + dt)


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


def _unit_mode(grid: Grid3, mode: list[int]) -> tuple[np.ndarray, np.ndarray]:
    m = np.array(mode, dtype=float)
    if not np.any(m):
        raise ValueError("plane-wave mode must be nonzero")
    xi = 2.0 * np.pi * m / grid.box_len
    khat = xi / np.linalg.norm(xi)
    trial = np.array([0.0, 0.0, 1.0]) if abs(khat[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    pol = np.cross(khat, trial)
    return xi, pol / np.linalg.norm(pol)


def plane_wave(grid: Grid3, mode: list[int], amp_long: float, amp_trans: float, spec: MaterialSpec,
               t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Traveling longitudinal and transverse plane waves U = A e sin(xi.x - c|xi| t), and their V."""
    xi, pol = _unit_mode(grid, mode)
    khat = xi / np.linalg.norm(xi)
    x = grid.coordinates()
    phase = xi[0] * x[0] + xi[1] * x[1] + xi[2] * x[2]
    k = np.linalg.norm(xi)
    w1, w2 = spec.c1 * k, spec.c2 * k
    u = amp_long * khat[:, None, None, None] * np.sin(phase - w1 * t) + amp_trans * pol[:, None, None, None] * np.sin(phase - w2 * t)
    v = -w1 * amp_long * khat[:, None, None, None] * np.cos(phase - w1 * t) - w2 * amp_trans * pol[:, None, None, None] * np.cos(phase - w2 * t)
    return u, v


def _normalised_part(coefs: np.ndarray, grid: Grid3, s: float, amp: float) -> np.ndarray:
    f = Field.from_coefficients(grid, "vector3", coefs)
    nrm = sobolev_norm(f, s)
    return coefs * (amp / nrm) if nrm > 0 and amp > 0 else coefs * 0.0


def initial_state(cfg: dict) -> State:
    """Initial (U, V) described by the ``data`` section of a validated config.

    Rough data take independent random fields for the curl-free and the
    divergence-free parts, each rescaled after projection to the requested
    H^s amplitude.  Plane data superpose a longitudinal wave (amplitude
    ``amp_div``) and a transverse wave (``amp_curl``) along ``mode``.
    """
    grid = Grid3(cfg["grid"]["n"], cfg["grid"]["box_len"])
    spec = MaterialSpec.from_dict(cfg["material"])
    d = cfg["data"]
    wn = grid.wavenumbers()
    seed = int(d["seed"])
    uc = np.zeros((3,) + wn.xi2.shape, dtype=complex)
    vc = np.zeros_like(uc)
    if d["kind"] in ("rough", "mixed"):
        raw_div = np.stack([rough_coefficients(grid, d["s_div"], seed, c) for c in range(3)])
        raw_curl = np.stack([rough_coefficients(grid, d["s_curl"], seed, 3 + c) for c in range(3)])
        phi, _, _ = helmholtz_coefs(raw_div, wn)
        _, psi, _ = helmholtz_coefs(raw_curl, wn)
        uc = uc + _normalised_part(phi, grid, d["s_div"], d["amp_div"])
        uc = uc + _normalised_part(psi, grid, d["s_curl"], d["amp_curl"])
        if d["velocity"] == "traveling":
            xi, _ = _unit_mode(grid, d["mode"])
            khat = xi / np.linalg.norm(xi)
            pc, sc, _ = helmholtz_coefs(uc, wn)
            dir_deriv = lambda c: sum(khat[a] * deriv_coefs(c, wn, a) for a in range(3))  # noqa: E731
            vc = vc - spec.c1 * dir_deriv(pc) - spec.c2 * dir_deriv(sc)
    if d["kind"] in ("plane", "mixed"):
        u, v = plane_wave(grid, d["mode"], d["amp_div"], d["amp_curl"], spec)
        uc = uc + truncate(_fwd(u), wn)
        if d["velocity"] == "traveling":
            vc = vc + truncate(_fwd(v), wn)
    if d["velocity"] == "rough" and d["amp_vel"] > 0:
        r = rough_random_field(grid, d["s_div"], d["amp_vel"], seed, components=3, stream=7)
        vc = vc + truncate(r.coefficients(), wn)
    return State(Field.from_coefficients(grid, "vector3", uc), Field.from_coefficients(grid, "vector3", vc), 0.0)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _monitor_row(step: int, t: float, a: np.ndarray, spec: MaterialSpec) -> dict:
    hyp = hyperbolicity_check(a, spec)
    return {"step": step, "t": t, "hyper_margin": hyp.margin, "grad_max": float(np.max(np.abs(a)))}


def simulate(cfg: dict, initial: State | None = None) -> Trajectory:
    """Advance the configured initial data to ``t_end`` or until a stability monitor fires.

    The time step is fixed for the whole run (CFL bound of the initial state,
    shortened so that ``t_end`` is hit exactly) unless ``time.dt`` is given.
    Failures truncate the trajectory and are recorded in ``failure``.
    """
    cfg = validate_config(cfg)
    grid = Grid3(cfg["grid"]["n"], cfg["grid"]["box_len"])
    spec = MaterialSpec.from_dict(cfg["material"])
    tcfg = cfg["time"]
    state = initial if initial is not None else initial_state(cfg)
    t_end = float(tcfg["t_end"])
    if tcfg.get("dt"):
        dt = float(tcfg["dt"])
        n_steps = max(1, int(round(t_end / dt)))
    else:
        dt_cfl = cfl_dt(state, spec, tcfg["cfl_safety"])
        n_steps = max(1, math.ceil(t_end / dt_cfl - 1e-12)) if t_end > 0 else 0
        dt = t_end / n_steps if n_steps else dt_cfl
    stride = int(tcfg["out_stride"])
    force = bool(tcfg.get("force", False))
    traj = Trajectory(grid, spec, cfg, dt, stride)

    wn = grid.wavenumbers()
    uc = truncate(state.U.coefficients(), wn)
    vc = truncate(state.V.coefficients(), wn)
    a0 = _inv(grad_coefs(uc, wn), grid.n)
    hyp0 = hyperbolicity_check(a0, spec)
    g2 = np.abs(spec.d2gamma(a0)).max() if not spec.is_linear else 0.0
    traj.blowup_threshold = 10.0 * hyp0.margin / g2 if g2 > 0 else math.inf
    traj.snapshots.append(State(Field(grid, "vector3", _inv(uc, grid.n)), Field(grid, "vector3", _inv(vc, grid.n)), 0.0 + state.t))
    traj.series.append(_monitor_row(0, state.t, a0, spec))
    if not hyp0.ok and not force:
        traj.failure = {"time": state.t, "cause": "hyperbolicity", "margin": hyp0.margin}
        return traj
    t0 = state.t
    for step in range(1, n_steps + 1):
        uc, vc = _rk4_coefs(uc, vc, dt, spec, grid)
        t = t0 + step * dt
        u_vals = _inv(uc, grid.n)
        v_vals = _inv(vc, grid.n)
        if not (np.all(np.isfinite(u_vals)) and np.all(np.isfinite(v_vals))):
            traj.failure = {"time": t, "cause": "nonfinite"}
            break
        a = _inv(grad_coefs(uc, wn), grid.n)
        row = _monitor_row(step, t, a, spec)
        failed = None
        if row["hyper_margin"] <= 0 and not force:
            failed = {"time": t, "cause": "hyperbolicity", "margin": row["hyper_margin"]}
        elif row["grad_max"] > traj.blowup_threshold:
            failed = {"time": t, "cause": "blowup", "grad_max": row["grad_max"], "threshold": traj.blowup_threshold}
        if step % stride == 0 or step == n_steps or failed:
            traj.snapshots.append(State(Field(grid, "vector3", u_vals), Field(grid, "vector3", v_vals), t))
            traj.series.append(row)
        if failed:
            traj.failure = failed
            break
    return traj


@dataclass
class FieldSeries:
    """Time series of one derived field (e.g. the curl-free part of U)."""

    name: str
    times: np.ndarray
    fields: list[Field]


def linear_curl_part(traj: Trajectory, t: float) -> np.ndarray:
    """Divergence-free part evolved exactly mode by mode at speed c2 from the initial snapshot."""
    grid = traj.grid
    wn = grid.wavenumbers()
    s0 = traj.snapshots[0]
    _, p0, _ = helmholtz_coefs(truncate(s0.U.coefficients(), wn), wn)
    _, q0, _ = helmholtz_coefs(truncate(s0.V.coefficients(), wn), wn)
    w = traj.spec.c2 * np.sqrt(wn.xi2)
    tau = t - s0.t
    safe = np.where(w == 0, 1.0, w)
    sinc = np.where(w == 0, tau, np.sin(w * tau) / safe)
    return _inv(p0 * np.cos(w * tau) + q0 * sinc, grid.n)


def simulate_decomposed(cfg: dict, traj: Trajectory | None = None) -> tuple[FieldSeries, FieldSeries, dict]:
    """Full evolution re-split by Helmholtz, compared with the exactly evolved curl sector.

    Returns the curl-free and divergence-free series of the full solution and
    a report with the relative gap ``||psi_full - psi_linear|| / ||psi_linear||``
    and the divergence-part equation residual at every snapshot.
    """
    from .diagnostics import STENCIL_WIDTH, divpart_residual

    traj = traj if traj is not None else simulate(cfg)
    grid = traj.grid
    wn = grid.wavenumbers()
    phis, psis, gaps = [], [], []
    for s in traj.snapshots:
        pc, sc, _ = helmholtz_coefs(truncate(s.U.coefficients(), wn), wn)
        phi = Field.from_coefficients(grid, "vector3", pc)
        psi = Field.from_coefficients(grid, "vector3", sc)
        lin = linear_curl_part(traj, s.t)
        den = float(np.sqrt(np.sum(lin**2)))
        num = float(np.sqrt(np.sum((psi.data - lin) ** 2)))
        gaps.append(num / den if den > 0 else num)
        phis.append(phi)
        psis.append(psi)
    times = traj.times
    report = {"t": times.tolist(), "psi_gap": gaps, "failure": traj.failure}
    if len(traj.snapshots) >= STENCIL_WIDTH:
        res = divpart_residual(traj)
        report["divpart_t"] = res["t"]
        report["divpart_residual"] = res["relative"]
    return FieldSeries("phi", times, phis), FieldSeries("psi", times, psis), report
