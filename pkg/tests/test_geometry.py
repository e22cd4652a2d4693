"""Distances, transforms, meshes, mass properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kirchhoffkit import geometry as geo


RNG = np.random.default_rng(7)


def random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, np.pi)
    return geo.rotation_exponential(axis, angle)


def make_state(rng, shape, shift=0.3):
    return geo.RigidState(
        x_B=shape.center + rng.uniform(-shift, shift, size=3),
        Q=random_rotation(rng),
        ell=rng.normal(size=3),
        r=rng.normal(size=3),
        t=rng.uniform(0, 1),
        x0=shape.center.copy(),
    )


# ---------------------------------------------------------------------------
# outer signed distance
# ---------------------------------------------------------------------------


def test_outer_distance_trivial():
    dom = geo.OuterDomain(radius=1.0)
    assert geo.signed_distance_outer(dom, np.zeros(3)) == pytest.approx(-1.0)
    x = np.array([0.6, -0.8, 0.0])
    assert geo.signed_distance_outer(dom, x) == pytest.approx(0.0, abs=1e-14)


def test_outer_tensors_against_sympy():
    import sympy as sp

    xs = sp.symbols("x0 x1 x2", real=True)
    rho = sp.sqrt(xs[0] ** 2 + xs[1] ** 2 + xs[2] ** 2) - 1
    exprs = {1: [sp.diff(rho, xs[i]) for i in range(3)]}
    for s in (2, 3, 4):
        prev = exprs[s - 1]
        exprs[s] = [sp.diff(e, xs[i]) for e in prev for i in range(3)]

    pts = RNG.uniform(-1, 1, size=(5, 3))
    pts = pts[np.linalg.norm(pts, axis=1) > 0.5]
    for p in pts:
        subs = dict(zip(xs, p))
        for s in (1, 2, 3, 4):
            ours = geo.outer_distance_tensor(s, p).reshape(-1)
            theirs = np.array([float(e.subs(subs)) for e in exprs[s]])
            assert np.allclose(ours, theirs, atol=1e-10), s


def test_outer_tensor_factorial_bound_on_shell():
    # |grad^s rho| <= c_rho^s s! with c_rho = 5 on 0.8 <= |x| <= 1, R = 1
    c_rho = 5.0
    rng = np.random.default_rng(3)
    for s in (1, 2, 3, 4):
        worst = 0.0
        for _ in range(200):
            x = rng.normal(size=3)
            x *= rng.uniform(0.8, 1.0) / np.linalg.norm(x)
            T = geo.outer_distance_tensor(s, x)
            for _ in range(20):
                vs = rng.normal(size=(s, 3))
                vs /= np.linalg.norm(vs, axis=1, keepdims=True)
                val = T
                for v in vs:
                    val = np.tensordot(val, v, axes=([0], [0]))
                worst = max(worst, abs(float(val)))
        assert worst <= c_rho**s * math.factorial(s)


# ---------------------------------------------------------------------------
# body signed distance
# ---------------------------------------------------------------------------


def test_body_distance_sphere_center():
    shape = geo.SolidShape("sphere", radius=1.0)
    assert shape.signed_distance0(np.zeros(3)) == pytest.approx(1.0)


def test_rigid_invariance_exact():
    shape = geo.SolidShape("ellipsoid", semi_axes=(1.0, 0.7, 0.4),
                           x0=(0.1, -0.2, 0.05))
    rng = np.random.default_rng(11)
    state = make_state(rng, shape)
    for _ in range(100):
        y = shape.center + rng.uniform(-1.5, 1.5, size=3)
        lhs = geo.signed_distance_body(shape, state, state.place(y))
        rhs = shape.signed_distance0(y)
        assert abs(lhs - rhs) < 1e-12


def test_hessian_frame_covariance():
    shape = geo.SolidShape("sphere", radius=0.8, x0=(0.2, 0.0, -0.1))
    rng = np.random.default_rng(5)
    state = make_state(rng, shape)
    h = 1e-3  # large enough that roundoff/(4h^2) stays below the target

    def fd_hessian(f, x, u1, u2):
        return (f(x + h * u1 + h * u2) - f(x + h * u1 - h * u2)
                - f(x - h * u1 + h * u2) + f(x - h * u1 - h * u2)) / (4 * h * h)

    for _ in range(10):
        y = shape.center + rng.uniform(-0.5, 0.5, size=3)
        if abs(shape.signed_distance0(y)) > 0.6:
            continue
        x = state.place(y)
        u1, u2 = rng.normal(size=3), rng.normal(size=3)
        lhs = fd_hessian(lambda p: geo.signed_distance_body(shape, state, p),
                         x, u1, u2)
        rhs = fd_hessian(shape.signed_distance0, state.unplace(x),
                         state.Q.T @ u1, state.Q.T @ u2)
        assert abs(lhs - rhs) < 1e-10


def test_body_hessian_closed_form_vs_fd():
    shape = geo.SolidShape("ellipsoid", semi_axes=(1.2, 0.9, 0.6))
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        y = shape.surface_points(d) * rng.uniform(0.9, 1.1)
        H = shape.hessian0(y)
        for _ in range(3):
            u1, u2 = rng.normal(size=3), rng.normal(size=3)
            fd = (shape.signed_distance0(y + h * u1 + h * u2)
                  - shape.signed_distance0(y + h * u1 - h * u2)
                  - shape.signed_distance0(y - h * u1 + h * u2)
                  + shape.signed_distance0(y - h * u1 - h * u2)) / (4 * h * h)
            assert abs(u1 @ H @ u2 - fd) < 5e-5


def test_body_normal_unit_and_inward():
    shape = geo.SolidShape("ellipsoid", semi_axes=(1.0, 0.8, 0.5))
    rng = np.random.default_rng(4)
    for _ in range(50):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        y = shape.surface_points(d)
        n = shape.normal0(y)
        assert abs(np.linalg.norm(n) - 1.0) < 1e-8
        # stepping along n goes inside (rho increases)
        assert shape.signed_distance0(y + 1e-4 * n) > shape.signed_distance0(y)


# ---------------------------------------------------------------------------
# rotation stepping
# ---------------------------------------------------------------------------


def test_advance_rotation_zero_rate():
    Q = random_rotation(np.random.default_rng(1))
    assert np.allclose(geo.advance_rotation(Q, np.zeros(3), 0.1), Q)


def test_advance_rotation_matches_exponential():
    omega = 0.9
    dt = 0.05
    Q = geo.advance_rotation(np.eye(3), (0, 0, omega), dt)
    exact = geo.rotation_exponential((0, 0, omega), dt)
    assert np.linalg.norm(Q - exact) < 5.0 * (omega * dt) ** 5


def test_orthogonality_drift_long_run():
    rng = np.random.default_rng(8)
    Q = np.eye(3)
    r = rng.normal(size=3)
    for _ in range(10_000):
        Q = geo.advance_rotation(Q, r, 0.01)
    assert np.linalg.norm(Q.T @ Q - np.eye(3)) < 1e-9
    assert abs(np.linalg.det(Q) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# mass properties
# ---------------------------------------------------------------------------


def test_sphere_mass_properties_closed_form():
    shape = geo.SolidShape("sphere", radius=1.0, density=1.0)
    m, x0, J0 = geo.solid_mass_properties(shape)
    assert m == pytest.approx(4 * np.pi / 3, rel=1e-14)
    assert np.allclose(x0, 0)
    assert np.allclose(J0, (8 * np.pi / 15) * np.eye(3), rtol=1e-14)


def test_center_of_mass_is_shape_center():
    shape = geo.SolidShape("ellipsoid", semi_axes=(1.0, 0.5, 0.25),
                           x0=(3.0, -1.0, 0.5), density=4.0)
    _, x0, _ = geo.solid_mass_properties(shape)
    assert np.allclose(x0, shape.center)


def test_inertia_monte_carlo():
    shape = geo.SolidShape("ellipsoid", semi_axes=(1.0, 0.7, 0.4), density=2.5)
    m, x0, J0 = geo.solid_mass_properties(shape)
    rng = np.random.default_rng(12)
    n = 1_000_000
    box = shape.axes
    pts = rng.uniform(-box, box, size=(n, 3))
    inside = np.sum((pts / box) ** 2, axis=1) <= 1.0
    vol_box = 8.0 * np.prod(box)
    w = shape.density * vol_box / n
    pts = pts[inside]
    m_mc = w * len(pts)
    r2 = np.sum(pts**2, axis=1)
    J_mc = w * (np.eye(3) * np.sum(r2) - pts.T @ pts)
    assert m_mc == pytest.approx(m, rel=5e-3)
    assert np.allclose(J_mc, J0, rtol=5e-3, atol=5e-3 * np.max(np.abs(J0)))


# ---------------------------------------------------------------------------
# clearance
# ---------------------------------------------------------------------------


def test_clearance_trivial_cases():
    outer = geo.OuterDomain(radius=3.0)
    shape = geo.SolidShape("sphere", radius=1.0)
    state = geo.RigidState.initial(shape)
    assert geo.min_clearance(state, shape, outer) == pytest.approx(2.0)
    state.x_B = np.array([1.5, 0.0, 0.0])
    assert geo.min_clearance(state, shape, outer) == pytest.approx(0.5)


def test_clearance_ellipsoid_vs_vertex_sweep():
    outer = geo.OuterDomain(radius=3.0)
    shape = geo.SolidShape("ellipsoid", semi_axes=(1.0, 0.6, 0.3))
    rng = np.random.default_rng(3)
    state = make_state(rng, shape, shift=0.4)
    mesh = geo.mesh_surface(shape, 3)
    got = geo.min_clearance(state, shape, outer, mesh=mesh)
    fine = geo.mesh_surface(shape, 4)
    pts = state.place(fine.vertices)
    brute = outer.radius - np.max(np.linalg.norm(pts, axis=1))
    # level-3 vertex sweep resolves the support point to O(h^2) ~ 5e-3
    assert got == pytest.approx(brute, abs=6e-3)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


def test_mesh_invariants_sphere_reference():
    shape = geo.SolidShape("sphere", radius=1.0)
    mesh = geo.mesh_surface(shape, 3)
    assert np.all(mesh.areas > 0)
    assert abs(np.linalg.norm(mesh.normals, axis=1) - 1).max() < 1e-12
    assert abs(mesh.total_area() - 4 * np.pi) / (4 * np.pi) < 0.01


def test_mesh_area_error_halves_under_refinement():
    shape = geo.SolidShape("sphere", radius=1.0)
    errs = []
    for level in (1, 2, 3):
        mesh = geo.mesh_surface(shape, level)
        errs.append(abs(mesh.total_area() - 4 * np.pi))
    assert errs[1] <= 0.6 * errs[0]
    assert errs[2] <= 0.6 * errs[1]


def test_mesh_closure_identities():
    # closed-surface quadrature: sum n dA = 0 and sum (x-c) x n dA = 0
    shape = geo.SolidShape("ellipsoid", semi_axes=(1.1, 0.8, 0.55))
    mesh = geo.mesh_surface(shape, 2)
    vec = np.einsum("pi,p->i", mesh.normals, mesh.areas)
    assert np.linalg.norm(vec) < 1e-10
    mom = np.einsum("pi,p->i",
                    np.cross(mesh.centroids - shape.center, mesh.normals),
                    mesh.areas)
    assert np.linalg.norm(mom) < 1e-10


def test_transform_mesh_is_exact_rigid_motion():
    shape = geo.SolidShape("sphere", radius=0.7, x0=(0.3, 0.1, 0.0))
    mesh = geo.mesh_surface(shape, 2)
    rng = np.random.default_rng(9)
    state = make_state(rng, shape)
    moved = geo.transform_mesh(mesh, state)
    assert np.allclose(moved.areas, mesh.areas)
    assert np.allclose(moved.centroids, state.place(mesh.centroids))
    assert abs(np.linalg.norm(moved.normals, axis=1) - 1).max() < 1e-12


def test_obj_export(tmp_path):
    shape = geo.SolidShape("sphere", radius=1.0)
    mesh = geo.mesh_surface(shape, 0)
    path = tmp_path / "ico.obj"
    geo.save_obj(mesh, path)
    text = path.read_text()
    assert text.count("\nf ") == 20 - 1 + 1 or text.count("f ") == 20


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_rigid_roundtrip_place_unplace(seed):
    rng = np.random.default_rng(seed)
    shape = geo.SolidShape("sphere", radius=1.0, x0=tuple(rng.normal(size=3)))
    state = make_state(rng, shape)
    y = rng.normal(size=3)
    assert np.allclose(state.unplace(state.place(y)), y, atol=1e-12)
