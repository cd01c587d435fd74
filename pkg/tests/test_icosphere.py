import numpy as np
import pytest

from ewlab.icosphere import icosphere, icosphere_count, snap_count


@pytest.mark.parametrize("level", [0, 1, 2, 3])
def test_mesh_counts_and_topology(level):
    sp = icosphere(level)
    assert sp.count == icosphere_count(level)
    # Euler characteristic of the sphere
    edges = {tuple(sorted(e)) for f in sp.faces for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))}
    assert sp.count - len(edges) + len(sp.faces) == 2
    assert np.allclose(np.linalg.norm(sp.vertices, axis=1), 1.0, atol=1e-15)


def test_faces_point_outward():
    sp = icosphere(2)
    v = sp.vertices[sp.faces]
    nrm = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.all(np.einsum("fi,fi->f", nrm, v.mean(axis=1)) > 0)


def test_tangent_basis_orthonormal():
    sp = icosphere(2)
    t = sp.tangent
    gram = np.einsum("wai,wbi->wab", t, t)
    assert np.allclose(gram, np.eye(2), atol=1e-14)
    assert np.abs(np.einsum("wai,wi->wa", t, sp.vertices)).max() <= 1e-14


def test_snap_count_warns():
    assert snap_count(642) == (642, 3)
    with pytest.warns(UserWarning, match="icosphere"):
        assert snap_count(100) == (162, 2)


@pytest.mark.parametrize("level, tol", [(2, 2e-4), (3, 2e-5)])
def test_angular_gradient_of_linear_function(level, tol):
    sp = icosphere(level)
    a = np.array([0.3, -0.5, 0.8])
    got = sp.angular_gradient(sp.vertices @ a)
    exact = np.einsum("wai,i->wa", sp.tangent, a)
    assert np.abs(got - exact).max() <= tol


def test_angular_gradient_converges():
    a = np.array([1.0, 2.0, -0.5])
    errs = []
    for level in (2, 3, 4):
        sp = icosphere(level)
        f = np.sin(sp.vertices @ a)
        exact = np.cos(sp.vertices @ a)[:, None] * np.einsum("wai,i->wa", sp.tangent, a)
        errs.append(np.abs(sp.angular_gradient(f) - exact).max())
    assert errs[0] / errs[1] > 4 and errs[1] / errs[2] > 4
