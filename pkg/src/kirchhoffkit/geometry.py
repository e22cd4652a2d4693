"""Shapes, signed distances, rigid transforms, surface meshes, mass properties.

Conventions (used consistently everywhere):

* the outer wall distance rho_outer is negative inside the domain, so its
  gradient is the outward unit normal on the wall;
* the body distance rho_body is positive inside the solid, so its gradient is
  the unit normal pointing *into* the solid, i.e. out of the fluid;
* consequently every panel normal stored in a mesh points out of the fluid,
  on both boundary components.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import OutOfTube

__all__ = [
    "skew",
    "polar_orthonormalize",
    "advance_rotation",
    "rotation_exponential",
    "OuterDomain",
    "SolidShape",
    "RigidState",
    "PanelMesh",
    "icosphere",
    "mesh_surface",
    "transform_mesh",
    "signed_distance_outer",
    "outer_distance_tensor",
    "signed_distance_body",
    "body_normal",
    "body_hessian",
    "solid_mass_properties",
    "min_clearance",
    "save_obj",
]


def skew(r):
    """Matrix of the cross product r ∧ · ."""
    r = np.asarray(r, dtype=float)
    return np.array([
        [0.0, -r[2], r[1]],
        [r[2], 0.0, -r[0]],
        [-r[1], r[0], 0.0],
    ])


def rotation_exponential(r, dt):
    """Rodrigues formula for exp(dt · skew(r))."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r) * dt
    if theta < 1e-300:
        return np.eye(3)
    axis = r / np.linalg.norm(r)
    K = skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def polar_orthonormalize(Q):
    """Nearest rotation matrix (polar factor) to Q."""
    U, _, Vt = np.linalg.svd(Q)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1.0
        R = U @ Vt
    return R


def advance_rotation(Q, r, dt):
    """One RK4 step of Q' = (r ∧ ·) Q followed by polar re-orthonormalization.

    r is held constant over the step.
    """
    A = skew(r)
    k1 = A @ Q
    k2 = A @ (Q + 0.5 * dt * k1)
    k3 = A @ (Q + 0.5 * dt * k2)
    k4 = A @ (Q + dt * k3)
    Qn = Q + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return polar_orthonormalize(Qn)


# ---------------------------------------------------------------------------
# outer domain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OuterDomain:
    """Spherical outer domain of radius `radius` centered at the origin."""

    radius: float
    kind: str = "sphere"

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x, axis=-1) - self.radius

    def normal(self, x):
        """Outward unit normal field (gradient of the signed distance)."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / r

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x)
        u = x / r
        return (np.eye(3) - np.outer(u, u)) / r


def signed_distance_outer(domain: OuterDomain, x):
    """rho_Omega(x) = |x| - R, negative inside the domain."""
    return domain.signed_distance(x)


def outer_distance_tensor(s, x):
    """s-th derivative tensor of rho_Omega = |x| - R at x, for s in 1..4.

    Closed forms for derivatives of |x|; independent of R for s >= 1.
    """
    x = np.asarray(x, dtype=float)
    r = float(np.linalg.norm(x))
    u = x / r
    I = np.eye(3)
    if s == 1:
        return u
    if s == 2:
        return (I - np.outer(u, u)) / r
    if s == 3:
        uuu = np.einsum("i,j,k->ijk", u, u, u)
        du = (
            np.einsum("ij,k->ijk", I, u)
            + np.einsum("ik,j->ijk", I, u)
            + np.einsum("jk,i->ijk", I, u)
        )
        return (3.0 * uuu - du) / r**2
    if s == 4:
        uu = np.outer(u, u)
        d_uu = (
            np.einsum("ij,kl->ijkl", I, uu)
            + np.einsum("ik,jl->ijkl", I, uu)
            + np.einsum("il,jk->ijkl", I, uu)
            + np.einsum("jk,il->ijkl", I, uu)
            + np.einsum("jl,ik->ijkl", I, uu)
            + np.einsum("kl,ij->ijkl", I, uu)
        )
        dd = (
            np.einsum("ij,kl->ijkl", I, I)
            + np.einsum("ik,jl->ijkl", I, I)
            + np.einsum("il,jk->ijkl", I, I)
        )
        u4 = np.einsum("i,j,k,l->ijkl", u, u, u, u)
        return (3.0 * d_uu - dd - 15.0 * u4) / r**3
    raise ValueError(f"outer_distance_tensor implemented for s <= 4, got {s}")


# ---------------------------------------------------------------------------
# solid shapes
# ---------------------------------------------------------------------------


def _ellipsoid_foot_parameter(y, axes):
    """Lagrange parameter t of the nearest surface point of the ellipsoid.

    The foot point of y is p_i = y_i a_i^2/(a_i^2+t); t is the largest root of
    f(t) = sum (y_i a_i / (a_i^2+t))^2 - 1, which is monotone decreasing on
    (-a_min^2, +inf). This choice of root gives the global nearest point, for
    y inside or outside.
    """
    a2 = axes**2
    a2min = float(np.min(a2))

    def f(t):
        return float(np.sum((y * axes) ** 2 / (a2 + t) ** 2) - 1.0)

    lo = -a2min
    # move the bracket's left end inside the domain of f
    step = 1e-12 * max(1.0, a2min)
    while True:
        lo_in = lo + step
        val = f(lo_in)
        if np.isfinite(val) and val > 0:
            break
        step *= 10.0
        if step > a2min:
            # y has (numerically) no component along the tight axis; the
            # limit value at t -> -a2min is finite and may be below 1
            lo_in = lo + 1e-9 * max(1.0, a2min)
            break
    hi = float(np.linalg.norm(y * axes) + np.max(a2))
    while f(hi) > 0:
        hi *= 2.0
    return brentq(f, lo_in, hi, xtol=1e-14, rtol=8.9e-16, maxiter=200)


@dataclass(frozen=True)
class SolidShape:
    """Sphere or axis-aligned ellipsoid placed at x0 in the reference frame."""

    kind: str
    radius: float | None = None
    semi_axes: tuple[float, float, float] | None = None
    x0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    density: float = 1.0

    def __post_init__(self):
        if self.kind == "sphere":
            if self.radius is None or self.radius <= 0:
                raise ValueError("sphere needs a positive radius")
        elif self.kind == "ellipsoid":
            if self.semi_axes is None or min(self.semi_axes) <= 0:
                raise ValueError("ellipsoid needs three positive semi-axes")
        else:
            raise ValueError(f"unknown solid kind {self.kind!r}")

    @property
    def axes(self):
        if self.kind == "sphere":
            return np.full(3, float(self.radius))
        return np.asarray(self.semi_axes, dtype=float)

    @property
    def center(self):
        return np.asarray(self.x0, dtype=float)

    @property
    def tube_halfwidth(self):
        """Half the minimal curvature radius (chosen tube width, see notes)."""
        a = self.axes
        return float(np.min(a) ** 2 / np.max(a)) / 2.0

    # -- reference-frame distance field (positive inside the solid) --------

    def signed_distance0(self, y):
        y = np.asarray(y, dtype=float) - self.center
        if self.kind == "sphere":
            return float(self.radius - np.linalg.norm(y))
        axes = self.axes
        if np.linalg.norm(y) < 1e-14:
            return float(np.min(axes))
        t = _ellipsoid_foot_parameter(y, axes)
        p = y * axes**2 / (axes**2 + t)
        d = float(np.linalg.norm(y - p))
        return -d if t > 0 else d

    def normal0(self, y):
        """Unit gradient of signed_distance0 (points into the solid)."""
        y = np.asarray(y, dtype=float) - self.center
        if self.kind == "sphere":
            n = -y / np.linalg.norm(y)
            return n
        axes = self.axes
        t = _ellipsoid_foot_parameter(y, axes)
        p = y * axes**2 / (axes**2 + t)
        grad_F = 2.0 * p / axes**2
        nu = grad_F / np.linalg.norm(grad_F)  # outward at the foot point
        return -nu

    def hessian0(self, y):
        """Hessian of signed_distance0 at y (exact for sphere/ellipsoid)."""
        y = np.asarray(y, dtype=float) - self.center
        if self.kind == "sphere":
            s = np.linalg.norm(y)
            u = y / s
            return -(np.eye(3) - np.outer(u, u)) / s
        axes = self.axes
        t = _ellipsoid_foot_parameter(y, axes)
        p = y * axes**2 / (axes**2 + t)
        grad_F = 2.0 * p / axes**2
        gn = np.linalg.norm(grad_F)
        nu = grad_F / gn
        P = np.eye(3) - np.outer(nu, nu)
        HF = 2.0 * np.diag(1.0 / axes**2)
        S = P @ HF @ P / gn  # shape operator at the foot point (outward nu)
        d_out = float(np.linalg.norm(y - p)) * (1.0 if t > 0 else -1.0)
        # transport the curvature form to the offset point
        M = np.linalg.solve(np.eye(3) + d_out * S, S)
        M = 0.5 * (M + M.T)
        return -(P @ M @ P)

    def surface_points(self, directions):
        """Map unit directions to surface points (reference frame)."""
        d = np.asarray(directions, dtype=float)
        return self.center + d * self.axes

    def mass_properties(self):
        """(m, x0, J0) for the uniform density solid.

        Closed forms: a solid ellipsoid with semi-axes (a, b, c) has
        m = rho (4/3) pi a b c and J0 = (m/5) diag(b^2+c^2, a^2+c^2, a^2+b^2).
        """
        a = self.axes
        m = self.density * 4.0 / 3.0 * np.pi * float(np.prod(a))
        J0 = m / 5.0 * np.diag([
            a[1] ** 2 + a[2] ** 2,
            a[0] ** 2 + a[2] ** 2,
            a[0] ** 2 + a[1] ** 2,
        ])
        return m, self.center.copy(), J0


def solid_mass_properties(shape: SolidShape):
    return shape.mass_properties()


# ---------------------------------------------------------------------------
# rigid state
# ---------------------------------------------------------------------------


@dataclass
class RigidState:
    """Solid configuration and velocity at time t.

    The placement map is S(t) = { x_B + Q (y - x0) : y in S_0 }.
    """

    x_B: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    r: np.ndarray
    t: float = 0.0
    x0: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.x_B = np.asarray(self.x_B, dtype=float).reshape(3)
        self.Q = np.asarray(self.Q, dtype=float).reshape(3, 3)
        self.ell = np.asarray(self.ell, dtype=float).reshape(3)
        self.r = np.asarray(self.r, dtype=float).reshape(3)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(3)

    @classmethod
    def initial(cls, shape: SolidShape, ell=(0, 0, 0), r=(0, 0, 0)):
        return cls(
            x_B=shape.center.copy(),
            Q=np.eye(3),
            ell=np.asarray(ell, dtype=float),
            r=np.asarray(r, dtype=float),
            t=0.0,
            x0=shape.center.copy(),
        )

    def place(self, y):
        """Reference point(s) -> current placement."""
        y = np.asarray(y, dtype=float)
        return self.x_B + (y - self.x0) @ self.Q.T

    def unplace(self, x):
        """Current point(s) -> reference frame (the map X-hat)."""
        x = np.asarray(x, dtype=float)
        return self.x0 + (x - self.x_B) @ self.Q

    def velocity_at(self, x):
        """Rigid velocity field v = ell + r ∧ (x - x_B)."""
        x = np.asarray(x, dtype=float)
        return self.ell + np.cross(self.r, x - self.x_B)

    def copy(self):
        return replace(
            self,
            x_B=self.x_B.copy(),
            Q=self.Q.copy(),
            ell=self.ell.copy(),
            r=self.r.copy(),
            x0=self.x0.copy(),
        )


def signed_distance_body(shape: SolidShape, state: RigidState, x):
    """rho_B(t, x) = rho_0(x0 + Q^T (x - x_B)), positive inside the solid."""
    return shape.signed_distance0(state.unplace(x))


def body_normal(shape: SolidShape, state: RigidState, x):
    """grad rho_B = Q grad rho_0 (X-hat); unit, points out of the fluid."""
    return state.Q @ shape.normal0(state.unplace(x))


def body_hessian(shape: SolidShape, state: RigidState, x):
    """Hessian of rho_B, frame-covariant: Q H0(X-hat) Q^T."""
    return state.Q @ shape.hessian0(state.unplace(x)) @ state.Q.T


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


@dataclass
class PanelMesh:
    """Flat-triangle surface mesh with per-panel collocation data.

    normals are analytic unit normals of the underlying smooth surface,
    oriented out of the fluid; areas are the flat-panel areas; collocation
    points are the flat centroids. Meshes are immutable after construction.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    centroids: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    component: str  # "outer" or "solid"

    @property
    def n_panels(self):
        return len(self.triangles)

    def total_area(self):
        return float(np.sum(self.areas))


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=float)

_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=int)


def icosphere(refinement: int):
    """Unit icosphere: (vertices, triangles), outward-oriented faces.

    The vertex set is antipodally and coordinate-reflection symmetric, which
    several quadrature identities in the test-suite rely on.
    """
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    for _ in range(refinement):
        edge_mid = {}
        new_faces = []
        verts_list = [v for v in verts]

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = verts_list[i] + verts_list[j]
                m /= np.linalg.norm(m)
                verts_list.append(m)
                edge_mid[key] = len(verts_list) - 1
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=int)
    return verts, faces


def _flat_panel_data(verts, tris):
    p0 = verts[tris[:, 0]]
    p1 = verts[tris[:, 1]]
    p2 = verts[tris[:, 2]]
    centroids = (p0 + p1 + p2) / 3.0
    cr = np.cross(p1 - p0, p2 - p0)
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    return centroids, areas


def mesh_surface(obj, refinement: int) -> PanelMesh:
    """Triangulate a solid shape (reference frame) or the outer wall.

    Spheres/ellipsoids use a mapped icosphere; normals are the analytic
    surface normals at the centroids, oriented out of the fluid.
    """
    verts_u, tris = icosphere(refinement)
    if isinstance(obj, OuterDomain):
        verts = verts_u * obj.radius
        centroids, areas = _flat_panel_data(verts, tris)
        normals = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
        return PanelMesh(verts, tris, centroids, normals, areas, "outer")
    if isinstance(obj, SolidShape):
        verts = obj.center + verts_u * obj.axes
        centroids, areas = _flat_panel_data(verts, tris)
        # analytic inward normal: -grad F/|grad F| at the radially scaled point
        rel = (centroids - obj.center) / obj.axes
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        gF = (rel * obj.axes) / obj.axes**2  # grad of sum(y^2/a^2) at surface, /2
        normals = -gF / np.linalg.norm(gF, axis=1, keepdims=True)
        return PanelMesh(verts, tris, centroids, normals, areas, "solid")
    raise TypeError(f"cannot mesh object of type {type(obj)!r}")


def transform_mesh(mesh: PanelMesh, state: RigidState) -> PanelMesh:
    """Move a reference solid mesh by the rigid placement of `state`."""
    Q = state.Q
    verts = state.place(mesh.vertices)
    centroids = state.place(mesh.centroids)
    normals = mesh.normals @ Q.T
    return PanelMesh(verts, mesh.triangles.copy(), centroids, normals,
                     mesh.areas.copy(), mesh.component)


def min_clearance(state: RigidState, shape: SolidShape, outer: OuterDomain,
                  mesh: PanelMesh | None = None):
    """Distance between the displaced solid surface and the outer wall."""
    if shape.kind == "sphere":
        return float(outer.radius - np.linalg.norm(state.x_B) - shape.radius)
    if mesh is None:
        mesh = mesh_surface(shape, 3)
    pts = state.place(mesh.vertices)
    return float(outer.radius - np.max(np.linalg.norm(pts, axis=1)))


def save_obj(mesh: PanelMesh, path):
    """Dump the mesh as a Wavefront OBJ file for inspection."""
    with open(path, "w") as fh:
        fh.write(f"# kirchhoffkit {mesh.component} mesh\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.12g} {v[1]:.12g} {v[2]:.12g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0]+1} {t[1]+1} {t[2]+1}\n")
