"""Acceptance suites: each check measures one property and compares it with a tolerance.

Every suite returns a :class:`SuiteReport`; checks carry the number of the
acceptance criterion they belong to.  Trajectories are cached per config
within a process, so suites that share a run simulate it once.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import acoustic_geometry as geo
from . import diagnostics
from .config import canonical_json, make_config, validate_config
from .diagnostics import (
    decoupling_monitor,
    divpart_residual,
    energy_inequality_fit,
    energy_parts,
    energy_records,
    records_csv,
    split_snapshots,
)
from .evolve import Trajectory, simulate
from .grid_spectral import (
    Field,
    Grid3,
    band_limited_field,
    curl_coefs,
    helmholtz_coefs,
    lp_bands,
    lp_low,
    lp_project,
    lp_sobolev_norm,
    rough_random_field,
    sobolev_norm,
)
from .material import (
    MaterialSpec,
    deformation_gradient,
    nonlinearity,
    nonlinearity_gradient_form,
    piola_identity_residual,
)

TWO_PI = 2.0 * math.pi
BASE_TIP = (0.1, 1.0, 2.0, 3.0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    """One measured quantity against its tolerance (``lo <= measured <= hi``)."""

    criterion: int
    name: str
    measured: float
    lo: float = -math.inf
    hi: float = math.inf
    note: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured) and self.lo <= self.measured <= self.hi)

    @property
    def tolerance(self) -> str:
        if math.isinf(self.lo):
            return f"<= {self.hi:.3g}"
        if math.isinf(self.hi):
            return f">= {self.lo:.3g}"
        return f"in [{self.lo:.3g}, {self.hi:.3g}]"

    def line(self, suite: str) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.note})" if self.note else ""
        label = f"criterion {self.criterion:>2}" if self.criterion else "study       "
        return f"{tag} {label} {suite}/{self.name}: measured {self.measured:.6g}, tolerance {self.tolerance}{extra}"

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "name": self.name,
            "measured": None if not np.isfinite(self.measured) else float(self.measured),
            "tolerance": self.tolerance,
            "pass": self.passed,
            "note": self.note,
        }


@dataclass
class SuiteReport:
    suite: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def lines(self) -> list[str]:
        return [c.line(self.suite) for c in self.checks]

    def by_criterion(self, criterion: int) -> list[Check]:
        return [c for c in self.checks if c.criterion == criterion]

    def to_json(self) -> str:
        """Deterministic serialisation (wall time is left out)."""
        body = {"suite": self.suite, "pass": self.passed, "checks": [c.to_dict() for c in self.checks]}
        return json.dumps(body, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# shared runs
# ---------------------------------------------------------------------------

_RUNS: dict[str, Trajectory] = {}


def run_cached(cfg: dict) -> Trajectory:
    """simulate() memoised on the canonical form of the validated config."""
    full = validate_config(cfg)
    key = canonical_json(full)
    if key not in _RUNS:
        _RUNS[key] = simulate(full)
    return _RUNS[key]


def clear_cache() -> None:
    _RUNS.clear()


def baseline_config(**over) -> dict:
    """Baseline run: n = 32, L = 2 pi, c1 = 1, c2 = 0.5, kappa2 = 0.4, amplitude 0.05."""
    sections = {"time": {"t_end": 1.0}}
    for k, v in over.items():
        sections[k] = {**sections.get(k, {}), **v} if isinstance(v, dict) else v
    return make_config(**sections)


def _scaled_gradient_field(grid: Grid3, seed: int, grad_max: float, kmax: int = 6) -> Field:
    u = band_limited_field(grid, kmax, seed)
    a = deformation_gradient(u).data - np.eye(3).reshape(9, 1, 1, 1)
    return u.scaled(grad_max / float(np.abs(a).max()))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def suite_piola(seeds: int = 50, grad_max: float = 0.2) -> SuiteReport:
    """Criteria 1 and 2: the Piola identity and the gradient structure of the nonlinearity."""
    rep = SuiteReport("piola")
    grid = Grid3(32, TWO_PI)
    spec = MaterialSpec()
    wn = grid.wavenumbers()
    piola, curl, gap = [], [], []
    for seed in range(seeds):
        u = _scaled_gradient_field(grid, seed, grad_max)
        piola.append(piola_identity_residual(u)[1])
        f = nonlinearity(u, spec)
        curl.append(Field.from_coefficients(grid, "vector3", curl_coefs(f.coefficients(), wn)).max_norm())
        gap.append((f - nonlinearity_gradient_form(u, spec)).max_norm())
    rep.add(Check(1, "piola_residual_max", max(piola), hi=1e-8, note=f"{seeds} seeds, |grad U|_inf = {grad_max}"))
    rep.add(Check(2, "curl_nonlinearity_max", max(curl), hi=1e-9, note=f"{seeds} seeds"))
    rep.add(Check(2, "direct_vs_gradient_gap_max", max(gap), hi=1e-9, note=f"{seeds} seeds"))
    return rep


def _broken_helmholtz(leak: float) -> Callable:
    def broken(coefs, wn):
        phi, psi, mean = helmholtz_coefs(coefs, wn)
        return phi, psi + leak * phi, mean

    return broken


@contextlib.contextmanager
def broken_projector(leak: float = 1e-3) -> Iterator[None]:
    """Test hook: the diagnostics' Helmholtz split leaks a fraction of phi into psi."""
    saved = diagnostics.helmholtz_coefs
    diagnostics.helmholtz_coefs = _broken_helmholtz(leak)
    try:
        yield
    finally:
        diagnostics.helmholtz_coefs = saved


def suite_decoupling(break_projector: bool = False) -> SuiteReport:
    """Criteria 3, 4 and 11: curl decoupling, psi-sector linearity, divergence-part residual."""
    rep = SuiteReport("decoupling")
    ctx = broken_projector() if break_projector else contextlib.nullcontext()
    with ctx:
        irrot = run_cached(baseline_config(data={"amp_curl": 0.0}))
        dec = decoupling_monitor(irrot)
        rep.add(
            Check(3, "curl_H1_over_U0_H2", max(dec["curl_norm"]) / dec["u0_h2"], hi=1e-6,
                  note="pseudo-irrotational data, t <= 1")
        )
        coarse = run_cached(baseline_config(time={"t_end": 0.5, "cfl_safety": 0.1}))
        fine = run_cached(baseline_config(time={"t_end": 0.5, "cfl_safety": 0.05}))
        sc, sf = split_snapshots(coarse), split_snapshots(fine)
        dc, df = decoupling_monitor(coarse, sc), decoupling_monitor(fine, sf)
        psi_c, psi_f = max(dc["psi_residual"]), max(df["psi_residual"])
        rep.add(Check(3, "psi_residual_dt_halving_ratio", psi_c / psi_f, lo=4.0,
                      note=f"psi-equation residual {psi_c:.3g} -> {psi_f:.3g}"))
        rep.add(Check(4, "psi_gap_t0.5", dc["psi_gap"][-1], hi=1e-4, note="dt = cfl/4"))
        rep.add(Check(4, "psi_gap_refinement_ratio", dc["psi_gap"][-1] / df["psi_gap"][-1], lo=1.0,
                      note=f"{dc['psi_gap'][-1]:.3g} -> {df['psi_gap'][-1]:.3g}"))
        rc = np.array(divpart_residual(coarse, splits=sc)["relative"])
        rf = np.array(divpart_residual(fine, splits=sf)["relative"])
        mf = np.array(divpart_residual(fine, flip_second=True, splits=sf)["relative"])
        mc = np.array(divpart_residual(coarse, flip_second=True, splits=sc)["relative"])
        rep.add(Check(11, "divpart_residual_rel", rc.max(), hi=1e-3, note="relative to ||dd phi||_L2, dt = cfl/4"))
        rep.add(Check(11, "divpart_refinement_ratio", rc.max() / rf.max(), lo=4.0,
                      note=f"{rc.max():.3g} -> {rf.max():.3g}"))
        rep.add(Check(11, "divpart_mutation_inflation", float((mf / rf).min()), lo=100.0,
                      note=f"dt = cfl/8; at cfl/4 the inflation is {float((mc / rc).min()):.3g}"))
    return rep


def plane_wave_return_errors(kind: str, steps: tuple[int, ...], n: int = 32) -> list[float]:
    """Max-norm error after one period of a linear plane wave, relative to its amplitude."""
    spec = MaterialSpec()
    speed = spec.c1 if kind == "long" else spec.c2
    period = TWO_PI / speed
    amps = {"long": {"amp_div": 1e-3, "amp_curl": 0.0}, "trans": {"amp_div": 0.0, "amp_curl": 1e-3}}[kind]
    errs = []
    for nst in steps:
        cfg = make_config(
            grid={"n": n},
            material={"gamma": [0.0]},
            data={"kind": "plane", "velocity": "traveling", "mode": [1, 0, 0], **amps},
            time={"t_end": period, "dt": period / nst, "out_stride": nst},
        )
        tr = run_cached(cfg)
        u0, u1 = tr.snapshots[0].U.data, tr.snapshots[-1].U.data
        errs.append(float(np.abs(u1 - u0).max() / np.abs(u0).max()))
    return errs


def energy_drift(cfg: dict) -> float:
    tr = run_cached(cfg)
    e = np.array([energy_parts(s, tr.grid, tr.spec).wave for s in split_snapshots(tr)])
    return float(np.abs(e - e[0]).max() / e[0])


def suite_linear_waves() -> SuiteReport:
    """Criteria 5 and 6: dispersion and RK4 order, energy conservation and the energy inequality."""
    rep = SuiteReport("linear-waves")
    for kind, label in (("long", "c1"), ("trans", "c2")):
        e = plane_wave_return_errors(kind, (64, 128))
        rep.add(Check(5, f"{kind}_period_return_error", e[1], hi=1e-5, note=f"speed {label}, 128 steps per period"))
        rep.add(Check(5, f"{kind}_richardson_factor", e[0] / e[1], lo=12.0, hi=20.0, note="64 -> 128 steps"))
    linear = baseline_config(material={"gamma": [0.0]}, time={"cfl_safety": 0.05, "out_stride": 4})
    drift = energy_drift(linear)
    rep.add(Check(6, "linear_energy_drift", drift, hi=1e-8, note="E_wave over t = 1 at dt = cfl/8"))
    rough_v = {"velocity": "rough", "amp_vel": 0.05}
    c_a, _ = energy_inequality_fit(run_cached(baseline_config(data=rough_v)))
    c_b, _ = energy_inequality_fit(run_cached(baseline_config(data=rough_v, time={"cfl_safety": 0.2})))
    ok = c_a is not None and c_b is not None and c_a > 0
    rep.add(Check(6, "C_fit", c_a if c_a is not None else math.nan, lo=0.0, hi=1e6, note="finite"))
    rel = abs(c_b / c_a - 1.0) if ok else math.nan
    rep.add(Check(6, "C_fit_dt_halving_change", rel, hi=0.2, note=f"{c_a:.5g} -> {c_b:.5g}" if ok else "no fit"))
    return rep


def flat_cone_measures(c1: float, dt_ray: float = 0.01, n_omega: int = 642) -> dict:
    m = geo.FlatMetric(c1=c1)
    tip = np.array([1.0, 2.0, 3.0])
    b = geo.trace_bundle(m, (0.0, *tip), n_omega=n_omega, dt_ray=dt_ray, t_end=1.0)
    v = b.valid
    exact = tip + c1 * b.r[:, None, None] * b.sphere.vertices[None]
    return {
        "straight": float(np.abs(b.rays.x - exact).max()),
        "trchi_r": float(np.abs(b.coeffs["trchi"][v] * b.r[v, None] - 2.0).max()),
        "z": float(np.nanmax(np.abs(b.coeffs["z"]))),
        "sigma": float(np.abs(b.rays.sigma).max()),
        "raychaudhuri": float(np.nanmax(np.abs(geo.raychaudhuri_residual(b)))),
        "bundle": b,
    }


def curved_metric(seed: int = 0) -> tuple[Trajectory, geo.SplineMetric]:
    tr = run_cached(baseline_config(seed=seed))
    return tr, geo.SplineMetric.from_trajectory(tr)


def raychaudhuri_levels(levels: list[tuple[int, float]], seed: int = 0) -> list[tuple[float, float]]:
    """(residual, k_NN-mutated residual) maxima on the baseline cone for each (n_omega, dt_ray)."""
    _, m = curved_metric(seed)
    out = []
    for n_omega, dt in levels:
        b = geo.trace_bundle(m, BASE_TIP, n_omega=n_omega, dt_ray=dt, t_end=0.9)
        out.append(
            (
                float(np.nanmax(np.abs(geo.raychaudhuri_residual(b)))),
                float(np.nanmax(np.abs(geo.raychaudhuri_residual(b, drop_knn=True)))),
            )
        )
    return out


def suite_raychaudhuri() -> SuiteReport:
    """Criteria 7 and 8: flat-cone exactness and the Raychaudhuri residual."""
    rep = SuiteReport("raychaudhuri")
    flat_res = 0.0
    for c1 in (0.5, 1.0, 2.0):
        f = flat_cone_measures(c1)
        rep.add(Check(7, f"flat_c1={c1:g}_ray_straightness", f["straight"], hi=1e-10))
        rep.add(Check(7, f"flat_c1={c1:g}_trchi_r_minus_2", f["trchi_r"], hi=1e-4))
        rep.add(Check(7, f"flat_c1={c1:g}_z", f["z"], hi=1e-4))
        rep.add(Check(7, f"flat_c1={c1:g}_sigma", f["sigma"], hi=1e-10))
        flat_res = max(flat_res, f["raychaudhuri"])
    rep.add(Check(8, "flat_residual", flat_res, hi=1e-6, note="c1 in {0.5, 1, 2}"))
    (r0, _), (r1, m1) = raychaudhuri_levels([(162, 0.02), (642, 0.01)])
    rep.add(Check(8, "curved_residual", r1, hi=1e-3, note="baseline cone, n_omega 642, dt_ray 0.01"))
    rep.add(Check(8, "curved_refinement_ratio", r0 / r1, lo=4.0, note=f"(162, 0.02) -> (642, 0.01): {r0:.3g} -> {r1:.3g}"))
    rep.add(Check(8, "kNN_mutation_inflation", m1 / r1, lo=10.0))
    return rep


def coercive_ratio(seed: int, n_omega: int = 162, dt_ray: float = 0.02) -> tuple[float, bool, float]:
    """(F2 / int |d phi|^2, H > 0 everywhere, smallest H) on the baseline cone of run ``seed``."""
    tr, m = curved_metric(seed)
    b = geo.trace_bundle(m, BASE_TIP, n_omega=n_omega, dt_ray=dt_ray, t_end=0.9)
    hs = geo.h_spacelike_check(b, tr.spec, m)
    fl = geo.null_fluxes(b, m, geo.ScalarField.from_trajectory(tr, "phi", 0), tr.spec)
    return fl["coercive_ratio"], hs.ok, float(np.nanmin(hs.H))


def suite_coercive(runs: int = 10) -> SuiteReport:
    """Criterion 9: the cone is h-spacelike and the slow-wave flux is coercive."""
    rep = SuiteReport("coercive")
    spec = MaterialSpec()
    b = geo.trace_bundle(geo.FlatMetric(1.0), (0.0, 1.0, 2.0, 3.0), n_omega=162, dt_ray=0.02, t_end=0.6)
    hs = geo.h_spacelike_check(b, spec)
    v0 = hs.V[b.valid][..., 0]
    rep.add(Check(9, "flat_V0_error", float(np.abs(v0 - 1.0 / math.sqrt(1.0 - spec.c2**2 / spec.c1**2)).max()), hi=1e-8))
    ratios, h_ok, h_min = [], True, math.inf
    for seed in range(runs):
        tr, _ = curved_metric(seed)
        if tr.failure:
            continue
        r, ok, hm = coercive_ratio(seed)
        ratios.append(r)
        h_ok &= ok
        h_min = min(h_min, hm)
    rep.add(Check(9, "H_min_over_runs", h_min if h_ok else min(h_min, 0.0), lo=0.0, hi=math.inf,
                  note=f"{len(ratios)} ellipticity-passing runs"))
    rep.add(Check(9, "coercive_ratio_min", min(ratios), lo=0.1, hi=10.0))
    rep.add(Check(9, "coercive_ratio_max", max(ratios), lo=0.1, hi=10.0))
    fine, _, _ = coercive_ratio(0, n_omega=642, dt_ray=0.01)
    rep.add(Check(9, "coercive_ratio_refinement_change", abs(fine / ratios[0] - 1.0), hi=0.3,
                  note=f"{ratios[0]:.4g} -> {fine:.4g}"))
    return rep


def suite_lp(seeds: int = 5) -> SuiteReport:
    """Criterion 10: Littlewood-Paley partition of unity and LP-Sobolev comparability."""
    rep = SuiteReport("lp")
    grid = Grid3(32, TWO_PI)
    pou = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(seeds):
            f = rough_random_field(grid, 2.0, 1.0, seed)
            rec = lp_low(f).data + sum(lp_project(f, b).data for b in lp_bands(grid))
            pou = max(pou, float(np.abs(rec - f.data).max()))
    rep.add(Check(10, "partition_of_unity", pou, hi=1e-10))
    for s in (1.0, 2.0, 3.1):
        ratios = []
        for seed in range(seeds):
            for f in (rough_random_field(grid, s + 0.5, 1.0, seed), band_limited_field(grid, 8, seed)):
                ratios.append(lp_sobolev_norm(f, s) / sobolev_norm(f, s))
        rep.add(Check(10, f"lp_sobolev_ratio_min_s={s:g}", min(ratios), lo=1 / 8, hi=8.0))
        rep.add(Check(10, f"lp_sobolev_ratio_max_s={s:g}", max(ratios), lo=1 / 8, hi=8.0))
        rep.add(Check(10, f"lp_sobolev_seed_spread_s={s:g}", max(ratios) / min(ratios), hi=1.5,
                      note=f"{seeds} seeds, rough and band-limited"))
    return rep


def _tree_digest(directory: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _deterministic_outputs(directory: Path) -> str:
    cfg = make_config(grid={"n": 16}, time={"t_end": 0.3}, seed=3)
    tr = simulate(cfg)
    tr.save(directory / "traj")
    (directory / "diagnostics.csv").write_text(records_csv(energy_records(tr)), encoding="utf-8")
    m = geo.SplineMetric.from_trajectory(tr)
    b = geo.trace_bundle(m, (0.0, 1.0, 1.0, 1.0), n_omega=42, dt_ray=0.02, t_end=0.3, r_min=0.1)
    (directory / "geodesics.csv").write_text(geo.geodesics_csv(b, tr.spec), encoding="utf-8")
    (directory / "report.json").write_text(suite_piola(seeds=3).to_json(), encoding="utf-8")
    return _tree_digest(directory)


def suite_determinism() -> SuiteReport:
    """Criterion 12: identical runs give byte-identical trajectories and reports."""
    rep = SuiteReport("determinism")
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        da, db = _deterministic_outputs(Path(a)), _deterministic_outputs(Path(b))
    rep.add(Check(12, "byte_identical_outputs", 0.0 if da == db else 1.0, hi=0.0, note=f"sha256 {da[:12]}"))
    return rep


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------


def observed_orders(errors: list[float]) -> list[float] | None:
    """log2 ratios of successive errors under halving; None when not monotone decreasing."""
    e = np.asarray(errors, dtype=float)
    if len(e) < 2 or np.any(~np.isfinite(e)) or np.any(e <= 0) or np.any(e[1:] >= e[:-1]):
        return None
    return list(np.log2(e[:-1] / e[1:]))


def _order_check(rep: SuiteReport, name: str, errors: list[float], lo: float, hi: float = math.inf) -> None:
    orders = observed_orders(errors)
    errs = ", ".join(f"{x:.3g}" for x in errors)
    if orders is None:
        rep.add(Check(0, f"{name}_order", math.nan, lo=lo, hi=hi, note=f"order n/a: errors {errs}"))
    else:
        rep.add(Check(0, f"{name}_order", orders[-1], lo=lo, hi=hi, note=f"errors {errs}"))


def tracer_errors(levels: int) -> list[float]:
    m = geo.ScaleFactorMetric(eps=0.2, freq=1.3)
    dirs = geo.icosphere(1).vertices
    x0 = np.ones(3)

    def endpoint(dt: float) -> np.ndarray:
        n0 = geo.initial_directions(m, 0.0, x0, dirs)
        return geo.trace_rays(m, 0.0, np.broadcast_to(x0, dirs.shape), n0, np.zeros(len(dirs)), 1.0, dt).x[-1]

    dts = [0.04 / 2**k for k in range(levels)]
    ref = endpoint(dts[-1] / 8)
    return [float(np.abs(endpoint(dt) - ref).max()) for dt in dts]


def suite_convergence(levels: int = 2, cfg: dict | None = None) -> SuiteReport:
    """Observed orders: solver (4), tracer (4), Raychaudhuri residual (>= 2), divergence-part residual (>= 2)."""
    if levels < 2:
        raise ValueError("convergence needs at least two levels")
    rep = SuiteReport("convergence")
    n = validate_config(cfg or {})["grid"]["n"]
    steps = tuple(64 * 2**k for k in range(max(levels, 2)))
    _order_check(rep, "solver", plane_wave_return_errors("long", steps, n=n), 3.7, 4.3)
    _order_check(rep, "tracer", tracer_errors(max(levels, 2)), 3.7)
    ray_levels = [(162, 0.02), (642, 0.01), (2562, 0.005)][: min(levels, 3)]
    _order_check(rep, "raychaudhuri", [r for r, _ in raychaudhuri_levels(ray_levels)], 2.0)
    div = []
    for k in range(min(levels, 3)):
        tr = run_cached(baseline_config(time={"t_end": 0.5, "cfl_safety": 0.1 / 2**k}))
        div.append(float(np.max(divpart_residual(tr)["relative"])))
    _order_check(rep, "divpart", div, 2.0)
    return rep


SUITES: dict[str, Callable[[], SuiteReport]] = {
    "piola": suite_piola,
    "decoupling": suite_decoupling,
    "linear-waves": suite_linear_waves,
    "raychaudhuri": suite_raychaudhuri,
    "coercive": suite_coercive,
    "lp": suite_lp,
    "determinism": suite_determinism,
    "convergence": suite_convergence,
}


def run_suite(name: str) -> SuiteReport:
    """Run one suite, or every suite for ``all`` (one line per check)."""
    if name == "all":
        agg = SuiteReport("all")
        t0 = time.perf_counter()
        for key, fn in SUITES.items():
            sub = fn()
            agg.checks.extend(Check(c.criterion, f"{key}/{c.name}", c.measured, c.lo, c.hi, c.note) for c in sub.checks)
        agg.seconds = time.perf_counter() - t0
        return agg
    if name not in SUITES:
        raise KeyError(name)
    t0 = time.perf_counter()
    rep = SUITES[name]()
    rep.seconds = time.perf_counter() - t0
    return rep


__all__ = ["Check", "SuiteReport", "SUITES", "broken_projector", "observed_orders", "run_cached", "run_suite"]
