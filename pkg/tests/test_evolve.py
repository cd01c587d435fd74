import numpy as np
import pytest

from ewlab.config import make_config
from ewlab.evolve import (
    State,
    Trajectory,
    cfl_dt,
    initial_state,
    plane_wave,
    rk4_step,
    simulate,
    simulate_decomposed,
)
from ewlab.grid_spectral import Field, helmholtz_decompose, rough_random_field, vector
from ewlab.material import MaterialSpec

from conftest import TWO_PI, max_abs


def _state(grid, u, v=None, t=0.0):
    v = np.zeros_like(u) if v is None else v
    return State(vector(grid, u), vector(grid, v), t)


def test_cfl_dt_formula(grid32, spec):
    zero = _state(grid32, np.zeros((3, 32, 32, 32)))
    assert cfl_dt(zero, spec) == pytest.approx(0.4 * TWO_PI / 32, rel=1e-15)
    with pytest.raises(ValueError):
        cfl_dt(zero, spec, safety=0.0)


def test_cfl_dt_decreases_with_amplitude(grid16, spec):
    base = rough_random_field(grid16, 3.1, 1.0, seed=2, components=3).data
    dts = [cfl_dt(_state(grid16, a * base), spec) for a in (1.0, 10.0, 40.0, 80.0)]
    assert all(b < a for a, b in zip(dts, dts[1:]))


def test_rk4_zero_state_is_fixed(grid16, spec):
    zero = _state(grid16, np.zeros((3, 16, 16, 16)))
    out = rk4_step(zero, 0.05, spec)
    assert out.U.max_norm() == 0.0 and out.V.max_norm() == 0.0
    assert out.t == 0.05


def test_rk4_refuses_steps_over_cfl(grid16, spec):
    zero = _state(grid16, np.zeros((3, 16, 16, 16)))
    with pytest.raises(ValueError):
        rk4_step(zero, 10.0, spec)


def test_transverse_plane_wave_one_period(grid32):
    spec = MaterialSpec(gamma=(0.0,))
    u, v = plane_wave(grid32, [1, 0, 0], 0.0, 1e-3, spec)
    period = TWO_PI / spec.c2
    dt = period / 512
    s = _state(grid32, u, v)
    for _ in range(512):
        s = rk4_step(s, dt, spec, safety=None)
    assert max_abs(s.U.data - u) / max_abs(u) <= 1e-6


def test_linear_superposition_matches_exact_solution():
    cfg = make_config(
        material={"gamma": [0.0], "b_coef": 0.0},
        data={"kind": "plane", "velocity": "traveling", "mode": [1, 1, 0], "amp_div": 1e-3, "amp_curl": 1e-3},
        time={"t_end": 1.0},
    )
    tr = simulate(cfg)
    u, _ = plane_wave(tr.grid, [1, 1, 0], 1e-3, 1e-3, tr.spec, t=1.0)
    assert tr.times[-1] == pytest.approx(1.0, abs=1e-14)
    assert max_abs(tr.snapshots[-1].U.data - u) <= 1e-5


def test_nonlinear_run_keeps_hyperbolicity(small_traj):
    margins = [row["hyper_margin"] for row in small_traj.series]
    assert small_traj.failure is None
    assert min(margins) > 0.5 * margins[0]


def test_huge_amplitude_is_stopped():
    """Amplitudes are H^s norms; about 200 is needed before the gradient breaks hyperbolicity."""
    for amp in (100.0, 200.0):
        tr = simulate(make_config(grid={"n": 16}, data={"amp_div": amp, "amp_curl": amp}, time={"t_end": 1.0}))
        assert tr.failure is not None
        assert tr.failure["cause"] in ("hyperbolicity", "blowup")
        assert tr.times[-1] < 1.0


def test_initial_data_parts_have_requested_norms(grid32):
    from ewlab.grid_spectral import sobolev_norm

    cfg = make_config(seed=4)
    s = initial_state(cfg)
    phi, psi, _ = helmholtz_decompose(s.U)
    assert sobolev_norm(phi, 3.1) == pytest.approx(0.05, rel=1e-12)
    assert sobolev_norm(psi, 3.1) == pytest.approx(0.05, rel=1e-12)
    assert s.V.max_norm() == 0.0


def test_trajectory_round_trip(tmp_path, small_traj):
    small_traj.save(tmp_path / "run")
    back = Trajectory.load(tmp_path / "run")
    assert back.config == small_traj.config
    assert back.dt == small_traj.dt
    assert np.array_equal(back.times, small_traj.times)
    for a, b in zip(back.snapshots, small_traj.snapshots):
        assert np.array_equal(a.U.data, b.U.data) and np.array_equal(a.V.data, b.V.data)


def test_output_stride():
    cfg = make_config(grid={"n": 16}, material={"gamma": [0.0]}, time={"t_end": 0.4, "dt": 0.05, "out_stride": 3})
    tr = simulate(cfg)
    # steps 0, 3, 6 and the final step 8
    assert np.allclose(tr.times, [0.0, 0.15, 0.3, 0.4])


def test_divergence_free_linear_data_stay_divergence_free():
    cfg = make_config(grid={"n": 16}, material={"gamma": [0.0]}, data={"amp_div": 0.0}, time={"t_end": 0.5})
    phis, psis, report = simulate_decomposed(cfg)
    assert max(f.max_norm() for f in phis.fields) <= 1e-8
    assert max(report["psi_gap"]) <= 1e-4  # RK4 error of the rough curl part


def test_state_validation(grid16):
    with pytest.raises(ValueError):
        State(Field(grid16, "scalar", np.zeros(16**3)), vector(grid16, np.zeros((3, 16, 16, 16))), 0.0)
