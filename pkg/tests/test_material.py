import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ewlab.grid_spectral import Field, Grid3, band_limited_field, spectral_derivative, vector
from ewlab.material import (
    MaterialSpec,
    acceleration,
    acceleration_unreduced,
    acoustic_metrics,
    christoffel,
    deformation_gradient,
    ellipticity_check,
    hyperbolicity_check,
    metric_from_gradient,
    nonlinearity,
    nonlinearity_gradient_form,
    piola_identity_residual,
    wave_operator,
)

from conftest import TWO_PI, max_abs


def _scaled(grid, seed, grad_max, kmax=6):
    u = band_limited_field(grid, kmax, seed)
    a = spectral_derivative(u, "grad").max_norm()
    return u.scaled(grad_max / a)


def _zero(grid):
    return vector(grid, np.zeros((3, grid.n, grid.n, grid.n)))


# --- MaterialSpec -----------------------------------------------------------


def test_spec_invariants():
    with pytest.raises(ValueError):
        MaterialSpec(c1=0.5, c2=0.5)
    with pytest.raises(ValueError):
        MaterialSpec(c1=1.0, c2=0.0)
    s = MaterialSpec(gamma=(0.4, 0.0, 0.2))
    assert s.powers == [(2, 0.4), (4, 0.2)] and s.degree == 4
    assert MaterialSpec(gamma=(0.0,)).is_linear
    assert MaterialSpec.from_dict(s.to_dict()) == s


def test_gamma_derivatives_consistent():
    s = MaterialSpec(gamma=(0.4, 0.1, -0.3))
    m = np.linspace(-0.5, 0.5, 11)
    e = 1e-6
    assert max_abs((s.gamma_fn(m + e) - s.gamma_fn(m - e)) / (2 * e) - s.dgamma(m)) <= 1e-9
    assert max_abs((s.dgamma(m + e) - s.dgamma(m - e)) / (2 * e) - s.d2gamma(m)) <= 1e-9
    assert max_abs((s.d2gamma(m + e) - s.d2gamma(m - e)) / (2 * e) - s.d3gamma(m)) <= 1e-8


# --- deformation gradient and Piola identity ---------------------------------


def test_deformation_gradient_of_zero_and_shear(grid16):
    f = deformation_gradient(_zero(grid16))
    assert max_abs(f.data - np.eye(3).reshape(9, 1, 1, 1)) == 0.0
    x = grid16.coordinates()
    eps = 0.01
    u = vector(grid16, np.stack([eps * np.sin(x[1]), 0 * x[0], 0 * x[0]]))
    fd = deformation_gradient(u).data.reshape(3, 3, 16, 16, 16).copy()
    # entry (j, k) = delta_jk + d_j U^k: only (1, 0) varies
    assert max_abs(fd[1, 0] - eps * np.cos(x[1])) <= 1e-14
    fd[1, 0] = 0.0
    assert max_abs(fd - np.eye(3)[:, :, None, None, None]) <= 1e-14


def test_det_f_positive_for_small_gradients(grid16):
    for seed in range(5):
        f = deformation_gradient(_scaled(grid16, seed, 0.2, kmax=4)).data
        det = np.linalg.det(np.moveaxis(f.reshape(3, 3, -1), -1, 0))
        assert det.min() > 0


def test_piola_residual_zero_field(grid16):
    _, r = piola_identity_residual(_zero(grid16))
    assert r == 0.0


def test_piola_residual_single_mode(grid32):
    x = grid32.coordinates()
    u = vector(grid32, 0.1 * np.stack([np.sin(x[1] + 2 * x[2]), np.cos(x[0]), np.sin(x[0] - x[1])]))
    _, r = piola_identity_residual(u)
    assert r <= 1e-9


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31))
def test_piola_residual_random(seed):
    grid = Grid3(16, TWO_PI)
    _, r = piola_identity_residual(_scaled(grid, seed, 0.2, kmax=4))
    assert r <= 1e-8


# --- nonlinearity -------------------------------------------------------------


def test_nonlinearity_vanishes(grid16):
    u = _scaled(grid16, 1, 0.1, kmax=4)
    assert nonlinearity(_zero(grid16), MaterialSpec()).max_norm() == 0.0
    assert nonlinearity(u, MaterialSpec(gamma=(0.0,))).max_norm() == 0.0


def test_nonlinearity_quadratic_closed_form(grid16):
    """gamma(m) = k m^2 / 2 gives f = (k / 2) grad sum (d_j U^k)^2."""
    kappa = 0.4
    spec = MaterialSpec(gamma=(kappa,))
    x = grid16.coordinates()
    a = 0.05
    u = vector(grid16, np.stack([a * np.sin(x[0]), 0 * x[0], 0 * x[0]]))
    # sum (d_j U^k)^2 = a^2 cos^2 x; half its gradient times kappa
    expect = np.stack([-kappa * a * a * np.cos(x[0]) * np.sin(x[0]), 0 * x[0], 0 * x[0]])
    assert max_abs(nonlinearity(u, spec).data - expect) <= 1e-15
    assert max_abs(nonlinearity_gradient_form(u, spec).data - expect) <= 1e-15


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31))
def test_nonlinearity_is_a_gradient(seed):
    grid = Grid3(16, TWO_PI)
    spec = MaterialSpec()
    u = _scaled(grid, seed, 0.2, kmax=4)
    f = nonlinearity(u, spec)
    assert spectral_derivative(f, "curl").max_norm() <= 1e-9
    assert (f - nonlinearity_gradient_form(u, spec)).max_norm() <= 1e-9


# --- acceleration -------------------------------------------------------------


def test_acceleration_zero(grid16, spec):
    assert acceleration(_zero(grid16), spec).max_norm() == 0.0


@pytest.mark.parametrize("kind", ["long", "trans"])
def test_acceleration_plane_wave_dispersion(grid16, kind):
    spec = MaterialSpec(gamma=(0.0,))
    x = grid16.coordinates()
    xi = 2.0
    s = 1e-3 * np.sin(xi * x[0])
    comps = [s, 0 * s, 0 * s] if kind == "long" else [0 * s, s, 0 * s]
    u = vector(grid16, np.stack(comps))
    c = spec.c1 if kind == "long" else spec.c2
    assert max_abs(acceleration(u, spec).data + c**2 * xi**2 * u.data) <= 1e-15


def test_reduced_and_unreduced_agree(grid16):
    spec = MaterialSpec(b_coef=0.7)
    for seed in range(3):
        u = _scaled(grid16, seed, 0.2, kmax=4)
        gap = (acceleration(u, spec) - acceleration_unreduced(u, spec)).max_norm()
        assert gap <= 1e-8
    acceleration(u, spec, verify=True)


# --- metrics ------------------------------------------------------------------


def test_metrics_of_undeformed_state(grid16, spec):
    z = np.zeros((3, 3, 16, 16, 16))
    m = acoustic_metrics(z, z, spec)
    s = m.sample(0, 0, 0)
    assert np.array_equal(s.g_inv, np.diag([-1.0, 1.0, 1.0, 1.0]))
    assert np.allclose(s.g @ s.g_inv, np.eye(4), atol=1e-15)
    assert np.array_equal(s.h_inv, np.diag([-1.0, 0.25, 0.25, 0.25]))


def test_metric_single_entry(spec):
    a = np.zeros((3, 3, 1))
    a[0, 0] = 0.03
    m = metric_from_gradient(a, MaterialSpec(gamma=(0.4,)))
    expect = np.eye(3)
    expect[0, 0] += 0.4 * 0.03
    assert np.allclose(m.spatial_inv[..., 0], expect, atol=1e-16)


def test_metric_symmetric_for_random_gradients(grid16, spec):
    a = np.random.default_rng(0).normal(scale=0.1, size=(3, 3, 4, 4, 4))
    m = metric_from_gradient(a, spec)
    assert np.array_equal(m.g_inv, np.swapaxes(m.g_inv, 0, 1))


def test_metric_refuses_lost_hyperbolicity(spec):
    a = np.zeros((3, 3, 1))
    a[0, 0] = -5.0
    with pytest.raises(ArithmeticError):
        metric_from_gradient(a, MaterialSpec(gamma=(1.0,)))


def test_hyperbolicity_margin():
    spec = MaterialSpec(gamma=(1.0,))
    gap = spec.c1**2 - spec.c2**2
    assert hyperbolicity_check(np.zeros((3, 3, 2)), spec).margin == pytest.approx(gap)
    a = np.zeros((3, 3, 2))
    for i in range(3):
        a[i, i] = -gap + 1e-6
    h = hyperbolicity_check(a, spec)
    assert h.ok and h.margin == pytest.approx(1e-6, abs=1e-15)
    for i in range(3):
        a[i, i] = -gap - 1e-6
    assert not hyperbolicity_check(a, spec).ok


def test_hyperbolicity_under_gershgorin_bound(spec):
    rng = np.random.default_rng(3)
    bound = (spec.c1**2 - spec.c2**2) / (2 * spec.gamma[0] * 3)
    for _ in range(20):
        a = rng.uniform(-bound, bound, size=(3, 3, 8))
        assert hyperbolicity_check(a, MaterialSpec(gamma=(spec.gamma[0],))).ok


def test_ellipticity_closed_form(spec):
    m = metric_from_gradient(np.zeros((3, 3, 1)), spec)
    ok, (m1, m2) = ellipticity_check(m, spec)
    assert ok and m1 == pytest.approx(0.75) and m2 == pytest.approx(3.0)


def test_hyperbolic_implies_elliptic(spec):
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.normal(scale=0.02, size=(3, 3, 4))
        if hyperbolicity_check(a, spec).ok:
            assert ellipticity_check(metric_from_gradient(a, spec).spatial, spec)[0]


# --- Christoffel symbols and wave operators on snapshots -----------------------


def _flat_snaps(grid, ts):
    g = np.zeros((4, 4) + (grid.n,) * 3)
    g[0, 0] = -1.0
    for i in range(1, 4):
        g[i, i] = 1.0
    return [(t, g) for t in ts]


def test_christoffel_flat(grid16):
    lower, upper, contracted = christoffel(_flat_snaps(grid16, [0.0, 0.1, 0.2]), grid16, 1)
    assert max_abs(lower) <= 1e-10 and max_abs(upper) <= 1e-10 and max_abs(contracted) <= 1e-10


def test_christoffel_one_mode_closed_form(grid16):
    x = grid16.coordinates()
    eps = 0.1
    g = np.zeros((4, 4) + (16,) * 3)
    g[0, 0] = -1.0
    g[1, 1] = 1.0 + eps * np.sin(x[0])
    g[2, 2] = g[3, 3] = 1.0
    lower, upper, _ = christoffel([(t, g) for t in (0.0, 0.1, 0.2)], grid16, 1)
    # only d_1 g_11 != 0: Gamma_{111} = 1/2 d_1 g_11
    half = 0.5 * eps * np.cos(x[0])
    assert max_abs(lower[1, 1, 1] - half) <= 1e-6
    assert max_abs(upper[1, 1, 1] - half / g[1, 1]) <= 1e-6
    lower[1, 1, 1] = 0.0
    assert max_abs(lower) <= 1e-12
    assert np.array_equal(upper, np.swapaxes(upper, 1, 2))


def test_wave_operator_flat_cases(grid16):
    x = grid16.coordinates()
    c1 = 1.0
    dt = 1e-3
    ts = [0.3 - dt, 0.3, 0.3 + dt]
    g = np.zeros((4, 4) + (16,) * 3)
    g[0, 0] = -1.0
    for i in range(1, 4):
        g[i, i] = c1**-2
    metric = [(t, g) for t in ts]
    wave = [(t, Field(grid16, "scalar", np.sin(x[0] - c1 * t)[None])) for t in ts]
    for reduced in (True, False):
        assert wave_operator(wave, metric, 1, reduced).max_norm() <= 1e-6
    static = [(t, Field(grid16, "scalar", np.cos(2 * x[1])[None])) for t in ts]
    out = wave_operator(static, metric, 1, True)
    assert max_abs(out.data[0] + 4 * c1**2 * np.cos(2 * x[1])) <= 1e-12


def test_wave_operators_agree_on_one_mode_metric(grid16):
    """Laplace-Beltrami minus reduced operator equals the first-order Christoffel term."""
    x = grid16.coordinates()
    dt = 1e-3
    ts = [0.5 - dt, 0.5, 0.5 + dt]

    def gmat(t):
        g = np.zeros((4, 4) + (16,) * 3)
        g[0, 0] = -1.0
        g[1, 1] = 1.0 + 0.1 * np.sin(x[0] + t)
        g[2, 2] = g[3, 3] = 1.0
        return g

    metric = [(t, gmat(t)) for t in ts]
    phi = [(t, Field(grid16, "scalar", np.sin(x[0] - t)[None])) for t in ts]
    red = wave_operator(phi, metric, 1, True)
    lb = wave_operator(phi, metric, 1, False)
    _, _, contracted = christoffel(metric, grid16, 1)
    ginv = 1.0 / gmat(0.5)[1, 1]
    # box_g phi = g^ab d_a d_b phi - Gamma^c d_c phi with Gamma^c = g^ca Gamma_a
    gamma_up = [-contracted[0], ginv * contracted[1]]
    dphi = [-np.cos(x[0] - 0.5), np.cos(x[0] - 0.5)]
    expect = red.data[0] - gamma_up[0] * dphi[0] - gamma_up[1] * dphi[1]
    assert max_abs(lb.data[0] - expect) <= 1e-4
