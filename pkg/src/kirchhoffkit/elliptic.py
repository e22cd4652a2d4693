"""Boundary-integral Neumann solver and div-curl velocity reconstruction.

The discretization is constant-density flat-panel collocation with a dense
direct solve. Normals point out of the fluid on every boundary component
(see geometry); collocation is at flat centroids from the fluid side, so the
second-kind equation reads  q/2 + K'q = g.

Single-layer value and gradient integrals over a flat triangle are evaluated
in closed form (edge log terms plus a solid-angle term) for panel pairs that
are close, and by one-point quadrature otherwise.

Volume (Newtonian) potentials use midpoint quadrature over grid cells with an
equal-volume-ball mollification that also handles the self cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import GridTooCoarse, IncompatibleData, SingularSystem
from .geometry import PanelMesh

__all__ = [
    "triangle_potential",
    "triangle_potential_gradient",
    "BoundarySet",
    "NeumannProblem",
    "BoundaryOperator",
    "HarmonicField",
    "solve_neumann",
    "VorticitySupport",
    "biot_savart",
    "biot_savart_jacobian",
    "blob_vorticity_kernel",
    "VelocityField",
    "reconstruct_velocity",
    "VolumeGrid",
    "solve_div_curl_full",
    "circulation",
    "circle_loop",
]

FOUR_PI = 4.0 * np.pi
_EPS = 1e-30


# ---------------------------------------------------------------------------
# analytic flat-triangle integrals
# ---------------------------------------------------------------------------


def _pair_edge_terms(verts, x):
    """Shared edge quantities of the closed-form integrals, per (panel, point)
    pair.

    verts: (M, 3, 3) triangle vertices; x: (M, 3) observation points.
    Returns (w0, f, beta, u_hats, n_hat, ts, grad_f, seg) with f, ts (M, 3),
    u_hats (M, 3, 3), grad_f (M, 3, 3) edge log-gradients and seg (M, 3) the
    segment factors of the solid-angle gradient.
    """
    v = np.asarray(verts, dtype=float)
    x = np.asarray(x, dtype=float)
    n_hat = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n_hat = n_hat / np.linalg.norm(n_hat, axis=1, keepdims=True)
    w0 = np.einsum("mi,mi->m", x - v[:, 0], n_hat)
    aw = np.abs(w0)

    a = v                                # (M, 3 edges, 3)
    b = v[:, [1, 2, 0], :]
    ldir = b - a
    ldir = ldir / np.linalg.norm(ldir, axis=2, keepdims=True)
    u_hats = np.cross(ldir, n_hat[:, None, :])
    xa = x[:, None, :] - a
    xb = x[:, None, :] - b
    sm = -np.einsum("mei,mei->me", xa, ldir)
    sp = -np.einsum("mei,mei->me", xb, ldir)
    ts = -np.einsum("mei,mei->me", xa, u_hats)
    Rm = np.maximum(np.linalg.norm(xa, axis=2), _EPS)
    Rp = np.maximum(np.linalg.norm(xb, axis=2), _EPS)
    R0sq = np.maximum(ts * ts + w0[:, None] ** 2, _EPS)
    f = np.log(np.maximum(Rp + sp, _EPS) / np.maximum(Rm + sm, _EPS))
    beta = (np.arctan2(ts * sp, R0sq + aw[:, None] * Rp)
            - np.arctan2(ts * sm, R0sq + aw[:, None] * Rm)).sum(axis=1)
    grad_f = (xb / Rp[:, :, None] - ldir) \
        / np.maximum(Rp + sp, _EPS)[:, :, None]
    grad_f -= (xa / Rm[:, :, None] - ldir) \
        / np.maximum(Rm + sm, _EPS)[:, :, None]
    seg = (sp / Rp - sm / Rm) / R0sq
    return w0, f, beta, u_hats, n_hat, ts, grad_f, seg


def pair_potential(verts, x):
    """Exact single-layer value per (panel, point) pair."""
    w0, f, beta, _, _, ts, _, _ = _pair_edge_terms(verts, x)
    return (np.einsum("me,me->m", ts, f) - np.abs(w0) * beta) / FOUR_PI


def pair_potential_gradient(verts, x):
    """Exact single-layer gradient per (panel, point) pair.

    At points in the panel plane (within a relative tolerance) the normal
    part is the principal value (zero); side limits off the plane carry the
    usual +-(1/2) jump, which callers account for.
    """
    w0, f, beta, u_hats, n_hat, _, _, _ = _pair_edge_terms(verts, x)
    scale = np.linalg.norm(verts[:, 1] - verts[:, 0], axis=1)
    side = np.where(np.abs(w0) < 1e-12 * scale, 0.0, np.sign(w0))
    grad = -np.einsum("me,mej->mj", f, u_hats)
    grad -= (side * beta)[:, None] * n_hat
    return grad / FOUR_PI


def pair_potential_hessian(verts, x):
    """Exact single-layer Hessian per (panel, point) pair (off-plane points).

    Edge log-gradients plus the Biot-Savart field of the oriented edge loop
    (the gradient of the signed solid angle).
    """
    w0, f, beta, u_hats, n_hat, ts, grad_f, seg = _pair_edge_terms(verts, x)
    H = -np.einsum("mei,mej->mij", u_hats, grad_f)
    grad_omega = np.einsum("me,mi,me->mi", -ts, n_hat, seg) \
        - np.einsum("m,mei,me->mi", w0, u_hats, seg)
    H -= np.einsum("mi,mj->mij", n_hat, grad_omega)
    return H / FOUR_PI


def _pairify(verts, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.broadcast_to(np.asarray(verts, dtype=float), (len(x), 3, 3))
    return v, x


def triangle_potential(verts, x):
    """Exact integral of 1/(4 pi R) over one flat triangle, at points x."""
    return pair_potential(*_pairify(verts, x))


def triangle_potential_gradient(verts, x):
    """Exact gradient of the single-layer potential of one flat triangle."""
    return pair_potential_gradient(*_pairify(verts, x))


# ---------------------------------------------------------------------------
# boundary sets and the dense Neumann operator
# ---------------------------------------------------------------------------


@dataclass
class BoundarySet:
    """Concatenation of the outer and (optionally) solid panel meshes."""

    meshes: list

    def __post_init__(self):
        self.centroids = np.concatenate([m.centroids for m in self.meshes])
        self.normals = np.concatenate([m.normals for m in self.meshes])
        self.areas = np.concatenate([m.areas for m in self.meshes])
        tris = []
        offsets = []
        start = 0
        for m in self.meshes:
            offsets.append(slice(start, start + m.n_panels))
            tris.append(m.vertices[m.triangles])
            start += m.n_panels
        self.slices = offsets
        self.panel_verts = np.concatenate(tris)  # (N, 3, 3)
        d = self.panel_verts - self.centroids[:, None, :]
        self.panel_radius = np.linalg.norm(d, axis=2).max(axis=1)
        self.n_panels = len(self.centroids)

    def component_slice(self, name):
        for m, sl in zip(self.meshes, self.slices):
            if m.component == name:
                return sl
        raise KeyError(name)

    def has(self, name):
        return any(m.component == name for m in self.meshes)


def _point_value_kernel(targets, sources, areas):
    d = targets[:, None, :] - sources[None, :, :]
    r = np.linalg.norm(d, axis=2)
    return areas[None, :] / (FOUR_PI * np.maximum(r, _EPS))


def _point_grad_kernel(targets, sources, areas):
    d = targets[:, None, :] - sources[None, :, :]
    r = np.maximum(np.linalg.norm(d, axis=2), _EPS)
    return -d * (areas[None, :] / (FOUR_PI * r**3))[:, :, None]


def _near_pairs(targets, boundary, factor):
    d = np.linalg.norm(
        targets[:, None, :] - boundary.centroids[None, :, :], axis=2)
    return d < factor * boundary.panel_radius[None, :]


def layer_value_matrix(boundary: BoundarySet, targets, near_factor=4.0,
                       chunk=2048):
    """Matrix V with (V q)_i = single-layer potential at target i."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    out = np.empty((len(targets), boundary.n_panels))
    for lo in range(0, len(targets), chunk):
        sl = slice(lo, min(lo + chunk, len(targets)))
        T = targets[sl]
        V = _point_value_kernel(T, boundary.centroids, boundary.areas)
        ti, pj = np.nonzero(_near_pairs(T, boundary, near_factor))
        if len(ti):
            V[ti, pj] = pair_potential(boundary.panel_verts[pj], T[ti])
        out[sl] = V
    return out


def _panel_edge_geometry(boundary: BoundarySet):
    """Per-panel edge frames, cached on the boundary set."""
    geom = getattr(boundary, "_edge_geometry", None)
    if geom is None:
        v = boundary.panel_verts
        a = v
        b = v[:, [1, 2, 0], :]
        ldir = b - a
        ldir = ldir / np.linalg.norm(ldir, axis=2, keepdims=True)
        n_hat = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        n_hat = n_hat / np.linalg.norm(n_hat, axis=1, keepdims=True)
        u_hat = np.cross(ldir, n_hat[:, None, :])
        geom = (a, b, ldir, u_hat, n_hat)
        boundary._edge_geometry = geom
    return geom


def panel_mean_fluxes(boundary: BoundarySet, points, masses=None, W=None,
                      chunk=1024, near_factor=3.0):
    """Per-panel mean normal flux of point/ball volume sources.

    For a unit point mass at y (or a uniform ball not crossing the panel,
    by Newton's theorem), int over panel i of grad_x G(x, y) dA(x) is in
    closed form; it is applied to near (panel, source) pairs, which are the
    ones whose centroid sampling aliases the Neumann data, while far pairs
    keep the one-point kernel. masses drives a grad N[scalar] field; W a
    curl N[vector] field; either may be None. Returns flux / area.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(boundary.n_panels)
    W = np.asarray(W, dtype=float) if W is not None else None
    n = boundary.normals
    areas = boundary.areas
    for lo in range(0, len(points), chunk):
        pts = points[lo:lo + chunk]
        d = boundary.centroids[:, None, :] - pts[None, :, :]
        r = np.maximum(np.linalg.norm(d, axis=2), _EPS)
        # far part: point kernel, T ~ grad G(centroid - y) * area
        Tfar = -d / (FOUR_PI * r**3)[:, :, None] * areas[:, None, None]
        near = r < near_factor * boundary.panel_radius[:, None]
        pi, ci = np.nonzero(near)
        if len(pi):
            exact = -pair_potential_gradient(boundary.panel_verts[pi],
                                             pts[ci])
            Tfar[pi, ci, :] = exact
        if masses is not None:
            out += np.einsum("pcj,pj,c->p", Tfar, n, masses[lo:lo + chunk])
        if W is not None:
            out += np.einsum("pj,pcj->p", n,
                             np.cross(Tfar, W[lo:lo + chunk][None, :, :]))
    return out / areas


def layer_grad_matrix(boundary: BoundarySet, targets, near_factor=4.0,
                      chunk=1024):
    """Tensor G with (G q)_i = gradient of the single-layer potential.

    At collocation points exactly on a panel the entry is the principal
    value; callers add jump terms themselves.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    out = np.empty((len(targets), boundary.n_panels, 3))
    for lo in range(0, len(targets), chunk):
        sl = slice(lo, min(lo + chunk, len(targets)))
        T = targets[sl]
        G = _point_grad_kernel(T, boundary.centroids, boundary.areas)
        ti, pj = np.nonzero(_near_pairs(T, boundary, near_factor))
        if len(ti):
            G[ti, pj, :] = pair_potential_gradient(boundary.panel_verts[pj],
                                                   T[ti])
        out[sl] = G
    return out


@dataclass
class NeumannProblem:
    """Neumann data g per panel (flux out of the fluid) on a boundary set.

    scale, when given, is the reference data norm for the compatibility
    check (needed when g itself is a near-cancellation of large pieces).
    """

    boundary: BoundarySet
    g: np.ndarray
    compat_tol: float = 1e-6
    scale: float | None = None


class BoundaryOperator:
    """Factored second-kind operator for one boundary placement.

    Holds the LU of the bordered collocation matrix plus the collocation
    value matrix, so that many Neumann problems on the same placement are
    each a cheap pair of triangular solves.
    """

    def __init__(self, boundary: BoundarySet):
        self.boundary = boundary
        n = boundary.n_panels
        G = layer_grad_matrix(boundary, boundary.centroids)
        Kp = np.einsum("ij,itj->it", boundary.normals, G)
        # Gauss-identity deflation of the self term, per component: for y on
        # a closed surface C, the principal value of int_C dG/dn_x dGamma(x)
        # is -1/2 (outward normals: the wall) or +1/2 (into-solid normals),
        # so each diagonal entry is set from its own component's column sum,
        # absorbing the local curvature quadrature error without coupling
        # the two meshes' discretization errors
        areas = boundary.areas
        np.fill_diagonal(Kp, 0.0)
        for m, sl in zip(boundary.meshes, boundary.slices):
            const = -0.5 if m.component == "outer" else 0.5
            block = Kp[sl, sl]
            colsum = (areas[sl][:, None] * block / areas[sl][None, :]).sum(axis=0)
            idx = np.arange(sl.start, sl.stop)
            Kp[idx, idx] = const - colsum
        A = Kp + 0.5 * np.eye(n)
        # bordered system: the column spreads any residual incompatibility,
        # the row gauges the one-dimensional density kernel
        c = boundary.areas.copy()
        d = np.zeros(n)
        d[boundary.component_slice("outer")] = \
            boundary.areas[boundary.component_slice("outer")]
        B = np.zeros((n + 1, n + 1))
        B[:n, :n] = A
        B[:n, n] = c
        B[n, :n] = d
        self.matrix = A
        try:
            self.lu = lu_factor(B)
        except Exception as exc:  # pragma: no cover
            raise SingularSystem(str(exc)) from exc
        if not np.all(np.isfinite(B)):
            raise SingularSystem("non-finite entries in collocation matrix")
        self.value_at_collocation = layer_value_matrix(
            boundary, boundary.centroids)
        self._collocation_gradient = None

    def collocation_gradient(self):
        """Principal-value gradient tensor at the collocation points (lazy)."""
        if self._collocation_gradient is None:
            self._collocation_gradient = layer_grad_matrix(
                self.boundary, self.boundary.centroids)
        return self._collocation_gradient

    def project_compatible(self, g, compat_tol, scale=None):
        areas = self.boundary.areas
        total = float(g @ areas)
        norm = float(np.abs(g) @ areas)
        ref = max(norm, scale or 0.0)
        defect = abs(total) / max(ref, 1e-30)
        if ref > 0 and defect > compat_tol:
            raise IncompatibleData(
                f"raw Neumann incompatibility {defect:.3e} exceeds "
                f"{compat_tol:.1e}", defect=defect)
        return g - total / float(np.sum(areas)), defect

    def solve(self, problem: NeumannProblem) -> "HarmonicField":
        g, defect = self.project_compatible(problem.g, problem.compat_tol,
                                            problem.scale)
        rhs = np.append(g, 0.0)
        sol = lu_solve(self.lu, rhs)
        q = sol[:-1]
        field = HarmonicField(self, q, raw_defect=defect)
        field.apply_boundary_mean_gauge()
        return field


class HarmonicField:
    """Single-layer harmonic field: density per panel plus a value offset."""

    def __init__(self, operator: BoundaryOperator, density, raw_defect=0.0):
        self.operator = operator
        self.boundary = operator.boundary
        self.density = np.asarray(density, dtype=float)
        self.offset = 0.0
        self.raw_defect = raw_defect

    def apply_boundary_mean_gauge(self):
        vals = self.operator.value_at_collocation @ self.density
        areas = self.boundary.areas
        self.offset = -float(vals @ areas) / float(np.sum(areas))

    def potential(self, x):
        V = layer_value_matrix(self.boundary, x)
        return V @ self.density + self.offset

    def gradient(self, x):
        G = layer_grad_matrix(self.boundary, x)
        return np.einsum("itj,t->ij", G, self.density)

    def surface_values(self):
        """Potential at the collocation points (cheap; cached matrix)."""
        return self.operator.value_at_collocation @ self.density + self.offset

    def normal_derivative_at_collocation(self):
        """n . grad from the fluid side, by the jump relation."""
        return self.operator.matrix @ self.density

    def jacobian(self, x, near_factor=4.0, chunk=1024):
        """d grad_i / d x_j: point-source kernels with analytic near panels."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((len(x), 3, 3))
        b = self.boundary
        w = b.areas * self.density
        for lo in range(0, len(x), chunk):
            sl = slice(lo, min(lo + chunk, len(x)))
            T = x[sl]
            d = T[:, None, :] - b.centroids[None, :, :]
            r = np.maximum(np.linalg.norm(d, axis=2),
                           0.5 * b.panel_radius[None, :])
            shat = d / r[:, :, None]
            J = 3.0 * np.einsum("mp,mpi,mpj->mij", w / (FOUR_PI * r**3),
                                shat, shat)
            J -= np.einsum("mp,ij->mij", w / (FOUR_PI * r**3), np.eye(3))
            ti, pj = np.nonzero(_near_pairs(T, b, near_factor))
            if len(ti):
                dd = T[ti] - b.centroids[pj]
                rr = np.maximum(np.linalg.norm(dd, axis=1),
                                0.5 * b.panel_radius[pj])
                ss = dd / rr[:, None]
                scale = w[pj] / (FOUR_PI * rr**3)
                pt = 3.0 * np.einsum("m,mi,mj->mij", scale, ss, ss)
                pt -= np.einsum("m,ij->mij", scale, np.eye(3))
                corr = self.density[pj, None, None] * pair_potential_hessian(
                    b.panel_verts[pj], T[ti]) - pt
                np.add.at(J, ti, corr)
            out[sl] = J
        return out


def solve_neumann(problem: NeumannProblem,
                  operator: BoundaryOperator | None = None) -> HarmonicField:
    op = operator if operator is not None else BoundaryOperator(problem.boundary)
    return op.solve(problem)


# ---------------------------------------------------------------------------
# regularized Biot-Savart
# ---------------------------------------------------------------------------


@dataclass
class VorticitySupport:
    """Vortex particles: positions, vector strengths (omega * volume), blob radius."""

    positions: np.ndarray
    strengths: np.ndarray
    delta: float

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.strengths = np.atleast_2d(np.asarray(self.strengths, dtype=float))
        if self.delta <= 0:
            raise ValueError("blob radius must be positive")
        if not np.all(np.isfinite(self.strengths)):
            raise ValueError("strengths must be finite")

    @property
    def n(self):
        return len(self.positions)


def _blob_g(r2, delta):
    """Velocity kernel factor g(r) = (r^2 + 2.5 d^2)/(r^2 + d^2)^{5/2}."""
    d2 = delta * delta
    return (r2 + 2.5 * d2) / (r2 + d2) ** 2.5


def blob_vorticity_kernel(r, delta):
    """High-order algebraic mollifier zeta_d(r); integrates to one."""
    d2 = delta * delta
    return (15.0 / (8.0 * np.pi)) * d2 * d2 / (r * r + d2) ** 3.5


def biot_savart(support: VorticitySupport, x):
    """Regularized Biot-Savart velocity at points x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if support.n == 0:
        return np.zeros_like(x)
    s = x[:, None, :] - support.positions[None, :, :]
    r2 = np.einsum("mpi,mpi->mp", s, s)
    g = _blob_g(r2, support.delta)
    wxs = np.cross(support.strengths[None, :, :], s)
    return np.einsum("mp,mpi->mi", g, wxs) / FOUR_PI


def biot_savart_jacobian(support: VorticitySupport, x):
    """d u_i / d x_j of the regularized Biot-Savart field (trace-free)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if support.n == 0:
        return np.zeros((len(x), 3, 3))
    s = x[:, None, :] - support.positions[None, :, :]
    r2 = np.einsum("mpi,mpi->mp", s, s)
    r = np.sqrt(r2)
    d2 = support.delta**2
    g = _blob_g(r2, support.delta)
    # dg/dr = -1.5 r (2 r^2 + 7 d^2) / (r^2 + d^2)^{7/2}
    dg = -1.5 * r * (2.0 * r2 + 7.0 * d2) / (r2 + d2) ** 3.5
    wxs = np.cross(support.strengths[None, :, :], s)
    shat = s / np.maximum(r, _EPS)[:, :, None]
    jac = np.einsum("mp,mpi,mpj->mij", dg, wxs, shat)
    W = np.zeros((support.n, 3, 3))
    W[:, 0, 1] = -support.strengths[:, 2]
    W[:, 0, 2] = support.strengths[:, 1]
    W[:, 1, 0] = support.strengths[:, 2]
    W[:, 1, 2] = -support.strengths[:, 0]
    W[:, 2, 0] = -support.strengths[:, 1]
    W[:, 2, 1] = support.strengths[:, 0]
    jac += np.einsum("mp,pij->mij", g, W)
    return jac / FOUR_PI


# ---------------------------------------------------------------------------
# composite velocity fields
# ---------------------------------------------------------------------------


class VelocityField:
    """Sum of analytic components, each providing velocity and jacobian."""

    def __init__(self, components):
        self.components = list(components)

    def velocity(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        for c in self.components:
            out += c.velocity(x)
        return out

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((len(x), 3, 3))
        for c in self.components:
            out += c.jacobian(x)
        return out

    def divergence(self, x):
        return np.trace(self.jacobian(x), axis1=1, axis2=2)

    def curl(self, x):
        J = self.jacobian(x)
        return np.stack([
            J[:, 2, 1] - J[:, 1, 2],
            J[:, 0, 2] - J[:, 2, 0],
            J[:, 1, 0] - J[:, 0, 1],
        ], axis=1)


class BlobComponent:
    def __init__(self, support: VorticitySupport):
        self.support = support

    def velocity(self, x):
        return biot_savart(self.support, x)

    def jacobian(self, x):
        return biot_savart_jacobian(self.support, x)


class LayerGradient:
    def __init__(self, field: HarmonicField):
        self.field = field

    def velocity(self, x):
        return self.field.gradient(x)

    def jacobian(self, x):
        return self.field.jacobian(x)


class AnalyticComponent:
    """Closed-form field for manufactured-solution tests."""

    def __init__(self, velocity_fn, jacobian_fn=None, fd_step=1e-5):
        self._vel = velocity_fn
        self._jac = jacobian_fn
        self._h = fd_step

    def velocity(self, x):
        return self._vel(np.atleast_2d(np.asarray(x, dtype=float)))

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._jac is not None:
            return self._jac(x)
        out = np.empty((len(x), 3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = self._h
            out[:, :, j] = (self._vel(x + e) - self._vel(x - e)) / (2 * self._h)
        return out


def reconstruct_velocity(support, state, boundary_op: BoundaryOperator,
                         circulations=(), compat_tol=1e-6):
    """Velocity with curl u = omega, u.n = 0 on the wall, u.n = v.n on the body.

    u = u_omega + grad phi; phi solves the Neumann problem cancelling the blob
    flux on the wall and matching the rigid normal velocity on the body. The
    phase-1 fluid domains are simply connected (g = 0) so `circulations` must
    be empty; loop circulations are then determined by the vorticity (Stokes).
    """
    if len(circulations) != 0:
        raise ValueError(
            "no homology generators in a sphere-in-sphere domain (g = 0); "
            "prescribed circulations are not available")
    boundary = boundary_op.boundary
    g = np.zeros(boundary.n_panels)
    u_omega = biot_savart(support, boundary.centroids) if support.n else 0.0
    if support.n:
        g -= np.einsum("ij,ij->i", u_omega, boundary.normals)
    if state is not None and boundary.has("solid"):
        sl = boundary.component_slice("solid")
        v = state.velocity_at(boundary.centroids[sl])
        g[sl] += np.einsum("ij,ij->i", v, boundary.normals[sl])
    phi = boundary_op.solve(NeumannProblem(boundary, g, compat_tol))
    comps = [LayerGradient(phi)]
    if support.n:
        comps.append(BlobComponent(support))
    field = VelocityField(comps)
    field.flow_potential = phi
    return field


# ---------------------------------------------------------------------------
# volume grid and Newtonian potentials
# ---------------------------------------------------------------------------


class _ConvexHalfspaces:
    """Inside test / plane distance for a convex flat-panel polyhedron."""

    def __init__(self, mesh: PanelMesh, orientation=1.0):
        v = mesh.vertices[mesh.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        self.normals = orientation * n  # outward of the enclosed volume
        self.offsets = np.einsum("fi,fi->f", self.normals, mesh.centroids)

    def depth(self, pts):
        """min over faces of (offset - n . p): > 0 strictly inside."""
        s = self.offsets[None, :] - pts @ self.normals.T
        return s.min(axis=1)


class VolumeGrid:
    """Cartesian midpoint quadrature over the fluid region.

    When panel meshes are supplied, cells are classified against the actual
    flat-panel polyhedra: every retained cell then lies strictly inside the
    surface the boundary solver collocates on, which is what keeps the
    Neumann compatibility defect at the continuum-consistency level. Cut
    cells get sub-sampled partial weights so that moving-body integrals
    vary smoothly in time.
    """

    @classmethod
    def two_level(cls, outer, n_coarse, solid, state, outer_mesh=None,
                  solid_mesh=None, refine=2, band=0.5, subsample=3,
                  box_half=None):
        """Coarse grid everywhere plus a refined box around the body.

        The fine box is snapped to the coarse cell-corner lattice so the two
        grids tile the domain exactly.
        """
        half = float(box_half) if box_half is not None else float(outer.radius)
        h = 2.0 * half / n_coarse
        c_snap = h * np.round(np.asarray(state.x_B, float) / h)
        m = int(np.ceil((float(np.max(solid.axes)) + band) / h))
        fine_half = m * h
        coarse = cls(outer, n_coarse, solid=solid, state=state,
                     subsample=subsample, outer_mesh=outer_mesh,
                     solid_mesh=solid_mesh, box_half=half,
                     exclude_box=(c_snap, fine_half))
        fine = cls(outer, 2 * m * refine, solid=solid, state=state,
                   subsample=subsample, outer_mesh=outer_mesh,
                   solid_mesh=solid_mesh, box_center=c_snap,
                   box_half=fine_half)
        return cls.combine([coarse, fine])

    @classmethod
    def combine(cls, grids):
        out = cls.__new__(cls)
        out.points = np.concatenate([g.points for g in grids])
        out.weights = np.concatenate([g.weights for g in grids])
        out.moll_radius = np.concatenate([g.moll_radius for g in grids])
        out.depth = np.concatenate([g.depth for g in grids])
        out.h = min(g.h for g in grids)
        out.cell_radius = min(g.cell_radius for g in grids)
        return out

    def __init__(self, outer, n_cells, solid=None, state=None, subsample=3,
                 box_center=(0.0, 0.0, 0.0), box_half=None,
                 outer_mesh=None, solid_mesh=None, exclude_box=None):
        outer_hs = _ConvexHalfspaces(outer_mesh) if outer_mesh is not None \
            else None
        solid_hs = None
        if solid is not None and solid_mesh is not None:
            # reference-frame polyhedron of the body; its stored triangles
            # are oriented outward of the solid
            solid_hs = _ConvexHalfspaces(solid_mesh)

        def fluid_depth(p):
            """Positive inside the fluid; distance-like near boundaries."""
            if outer_hs is not None:
                d = outer_hs.depth(p)
            else:
                d = outer.radius - np.linalg.norm(p, axis=1)
            if solid is not None and state is not None:
                y = state.unplace(p)
                if solid_hs is not None:
                    ds = -solid_hs.depth(y)
                else:
                    rel = np.linalg.norm((y - solid.center) / solid.axes,
                                         axis=1)
                    ds = (rel - 1.0) * float(np.min(solid.axes))
                d = np.minimum(d, ds)
            return d

        half = float(box_half) if box_half is not None else float(outer.radius)
        c = np.asarray(box_center, dtype=float)
        h = 2.0 * half / n_cells
        axis = -half + h * (np.arange(n_cells) + 0.5)
        X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
        pts = c + np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        pts = pts[np.linalg.norm(pts, axis=1) < outer.radius + h]
        if exclude_box is not None:
            bc, bh = exclude_box
            keep_out = np.max(np.abs(pts - np.asarray(bc, float)),
                              axis=1) > bh
            pts = pts[keep_out]

        depth = fluid_depth(pts)
        frac = (depth > 0).astype(float)
        band = np.abs(depth) < h
        if np.any(band):
            m = subsample
            offs = (np.arange(m) + 0.5) / m - 0.5
            ox, oy, oz = np.meshgrid(offs, offs, offs, indexing="ij")
            sub = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1) * h
            counts = np.zeros(band.sum())
            wet_sum = np.zeros((band.sum(), 3))
            for s in sub:
                p = pts[band] + s
                ins = fluid_depth(p) > 0
                counts += ins
                wet_sum += np.where(ins[:, None], p, 0.0)
            frac[band] = counts / len(sub)
            # cut cells carry their mass at the wet centroid so that it
            # stays strictly inside the collocation surface
            wet = counts > 0
            moved = pts[band]
            moved[wet] = wet_sum[wet] / counts[wet, None]
            pts[band] = moved

        keep = frac > 0
        self.points = pts[keep]
        self.weights = frac[keep] * h**3
        self.h = h
        self.cell_radius = (3.0 * h**3 / FOUR_PI) ** (1.0 / 3.0)
        # mollification radius capped by the distance to the boundary so
        # smeared source mass cannot leak across the collocation surface
        dist = np.maximum(fluid_depth(self.points), 0.0)
        self.depth = dist
        self.moll_radius = np.clip(0.95 * dist, 0.2 * self.cell_radius,
                                   self.cell_radius)


def _mollified_inverse_distance(targets, sources, a):
    """1/(4 pi r) smoothed inside radius a (uniform-ball potential).

    a may be a scalar or a per-source vector.
    """
    d = targets[:, None, :] - sources[None, :, :]
    r = np.linalg.norm(d, axis=2)
    a = np.broadcast_to(np.asarray(a, dtype=float), (r.shape[1],))
    far = r >= a[None, :]
    out = np.where(far, 1.0 / (FOUR_PI * np.maximum(r, _EPS)), 0.0)
    if not np.all(far):
        A = np.broadcast_to(a[None, :], r.shape)
        near = ~far
        out[near] = (3.0 * A[near] ** 2 - r[near] ** 2) \
            / (8.0 * np.pi * A[near] ** 3)
    return out, d, r


def _mollified_grad_factor(r, a):
    """Scalar f(r) with grad(1/4pi r) = -f(r) * d; matches the ball potential.

    a may be a scalar or a per-source vector.
    """
    a = np.broadcast_to(np.asarray(a, dtype=float), (r.shape[1],))
    far = r >= a[None, :]
    out = np.where(far, 1.0 / (FOUR_PI * np.maximum(r, _EPS) ** 3), 0.0)
    if not np.all(far):
        A = np.broadcast_to(a[None, :], r.shape)
        near = ~far
        out[near] = 1.0 / (FOUR_PI * A[near] ** 3)
    return out


class NewtonValue:
    """Scalar Newtonian potential N[f], -Delta N[f] = f."""

    def __init__(self, grid: VolumeGrid, source_values):
        self.grid = grid
        self.fw = np.asarray(source_values, dtype=float) * grid.weights

    def value(self, x, chunk=2048):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(len(x))
        for lo in range(0, len(x), chunk):
            sl = slice(lo, min(lo + chunk, len(x)))
            K, _, _ = _mollified_inverse_distance(
                x[sl], self.grid.points, self.grid.moll_radius)
            out[sl] = K @ self.fw
        return out

    def gradient(self, x, chunk=2048):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((len(x), 3))
        for lo in range(0, len(x), chunk):
            sl = slice(lo, min(lo + chunk, len(x)))
            d = x[sl][:, None, :] - self.grid.points[None, :, :]
            r = np.linalg.norm(d, axis=2)
            f = _mollified_grad_factor(r, self.grid.moll_radius)
            out[sl] = -np.einsum("mp,mpi->mi", f * self.fw[None, :], d)
        return out


class NewtonGradient:
    """Vector field grad N[f] as a velocity component (div = -f, curl = 0).

    Jacobians are the exact derivatives of the mollified representation:
    (3 s s^T - I)/(4 pi r^3) outside the mollification ball, -I/(4 pi a^3)
    inside it (the kernel is linear there).
    """

    def __init__(self, newton: NewtonValue):
        self.newton = newton

    def velocity(self, x):
        return self.newton.gradient(x)

    def jacobian(self, x, chunk=1024):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        grid = self.newton.grid
        fw = self.newton.fw
        a = np.broadcast_to(np.asarray(grid.moll_radius, dtype=float),
                            (len(grid.points),))
        out = np.empty((len(x), 3, 3))
        for lo in range(0, len(x), chunk):
            sl = slice(lo, min(lo + chunk, len(x)))
            d = x[sl][:, None, :] - grid.points[None, :, :]
            r = np.maximum(np.linalg.norm(d, axis=2), _EPS)
            far = r >= a[None, :]
            inv3 = np.where(far, 1.0 / (FOUR_PI * r**3), 0.0) * fw[None, :]
            shat = d / r[:, :, None]
            J = 3.0 * np.einsum("mp,mpi,mpj->mij", inv3, shat, shat)
            trace_w = inv3 + np.where(far, 0.0,
                                      1.0 / (FOUR_PI * a[None, :] ** 3)) \
                * fw[None, :]
            J -= np.einsum("mp,ij->mij", trace_w, np.eye(3))
            out[sl] = J
        return out


class NewtonCurl:
    """Vector field curl N[W] (div = 0; curl = W for div-free W).

    Jacobians are exact for the mollified representation (see
    NewtonGradient).
    """

    def __init__(self, grid: VolumeGrid, W_values):
        self.grid = grid
        self.Ww = np.asarray(W_values, dtype=float) * grid.weights[:, None]

    def velocity(self, x, chunk=2048):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((len(x), 3))
        for lo in range(0, len(x), chunk):
            sl = slice(lo, min(lo + chunk, len(x)))
            d = x[sl][:, None, :] - self.grid.points[None, :, :]
            r = np.linalg.norm(d, axis=2)
            f = _mollified_grad_factor(r, self.grid.moll_radius)
            gradG = -f[:, :, None] * d
            out[sl] = np.sum(np.cross(gradG, self.Ww[None, :, :]), axis=1)
        return out

    def jacobian(self, x, chunk=1024):
        # d_j v_i with v = -g(r) (d x W):
        #   -g'(r) (d_j/r)(d x W)_i - g(r) skew(W)_{ij}
        x = np.atleast_2d(np.asarray(x, dtype=float))
        grid = self.grid
        a = np.broadcast_to(np.asarray(grid.moll_radius, dtype=float),
                            (len(grid.points),))
        SW = np.zeros((len(grid.points), 3, 3))
        W = self.Ww
        SW[:, 0, 1] = -W[:, 2]
        SW[:, 0, 2] = W[:, 1]
        SW[:, 1, 0] = W[:, 2]
        SW[:, 1, 2] = -W[:, 0]
        SW[:, 2, 0] = -W[:, 1]
        SW[:, 2, 1] = W[:, 0]
        out = np.empty((len(x), 3, 3))
        for lo in range(0, len(x), chunk):
            sl = slice(lo, min(lo + chunk, len(x)))
            d = x[sl][:, None, :] - grid.points[None, :, :]
            r = np.maximum(np.linalg.norm(d, axis=2), _EPS)
            far = r >= a[None, :]
            g = np.where(far, 1.0 / (FOUR_PI * r**3),
                         1.0 / (FOUR_PI * a[None, :] ** 3))
            minus_gp_over_r = np.where(far, 3.0 / (FOUR_PI * r**5), 0.0)
            dxW = np.cross(d, W[None, :, :])
            J = np.einsum("mp,mpi,mpj->mij", minus_gp_over_r, dxW, d)
            J += np.einsum("mp,pij->mij", g, SW)
            out[sl] = J
        return out


def solve_div_curl_full(grid: VolumeGrid, div_data, curl_data, normal_data,
                        boundary_op: BoundaryOperator, circulations=(),
                        residual_tol=0.5, residual_probes=24, rng=None,
                        compat_tol=0.05):
    """w = grad N[div] + curl N[curl] + harmonic correction.

    normal_data: desired w . n per boundary panel (out-of-fluid normals).
    A centered-difference residual check on interior probes guards against
    under-resolved grids (GridTooCoarse).
    """
    if len(circulations) != 0:
        raise ValueError("g = 0 in phase-1 domains; no circulation dofs")
    boundary = boundary_op.boundary
    comps = []
    div_data = np.asarray(div_data, dtype=float)
    curl_data = np.asarray(curl_data, dtype=float)
    have_div = np.any(div_data != 0.0)
    have_curl = np.any(curl_data != 0.0)
    if have_div:
        # -Delta N[f] = f, so div grad N[-f] = +f
        comps.append(NewtonGradient(NewtonValue(grid, -div_data)))
    if have_curl:
        comps.append(NewtonCurl(grid, curl_data))
    g = np.asarray(normal_data, dtype=float).copy()
    scale = float(np.abs(g) @ boundary.areas)
    L_char = np.sqrt(float(np.sum(boundary.areas)) / FOUR_PI)
    if have_div:
        g -= panel_mean_fluxes(boundary, grid.points,
                               masses=-div_data * grid.weights)
        scale += float(np.sum(np.abs(div_data) * grid.weights))
    if have_curl:
        g -= panel_mean_fluxes(boundary, grid.points,
                               W=curl_data * grid.weights[:, None])
        scale += float(np.sum(np.linalg.norm(curl_data, axis=1)
                              * grid.weights)) / L_char
    phi = boundary_op.solve(NeumannProblem(boundary, g, compat_tol,
                                           scale=scale))
    comps.append(LayerGradient(phi))
    field = VelocityField(comps)
    field.flow_potential = phi

    if have_div or have_curl:
        rng = rng or np.random.default_rng(0)
        # residual probes stay clear of the boundaries, where the mollified
        # cell representation cannot (and need not) reproduce local data
        interior = np.nonzero(grid.depth > 2.5 * grid.h)[0]
        if len(interior) == 0:
            interior = np.argsort(grid.depth)[-residual_probes:]
        idx = rng.choice(interior, size=min(residual_probes, len(interior)),
                         replace=False)
        probes = grid.points[idx]
        hfd = grid.h
        div_fd = _fd_divergence(field, probes, hfd)
        curl_fd = _fd_curl(field, probes, hfd)
        scale = max(float(np.sqrt(np.mean(div_data**2))) if have_div else 0.0,
                    float(np.sqrt(np.mean(curl_data**2) * 3.0))
                    if have_curl else 0.0, 1e-30)
        err_div = (float(np.sqrt(np.mean((div_fd - div_data[idx]) ** 2)))
                   / scale if have_div else 0.0)
        err_curl = (float(np.sqrt(np.mean((curl_fd - curl_data[idx]) ** 2) * 3.0))
                    / scale if have_curl else 0.0)
        field.residuals = (err_div, err_curl)
        if max(err_div, err_curl) > residual_tol:
            raise GridTooCoarse(
                f"div/curl residuals {err_div:.2f}/{err_curl:.2f} exceed "
                f"{residual_tol}")
    return field


def _fd_divergence(field, x, h):
    out = np.zeros(len(x))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        out += (field.velocity(x + e)[:, j] - field.velocity(x - e)[:, j]) / (2 * h)
    return out


def _fd_curl(field, x, h):
    grads = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        grads.append((field.velocity(x + e) - field.velocity(x - e)) / (2 * h))
    J = np.stack(grads, axis=2)  # J[m, i, j] = d u_i / d x_j
    return np.stack([
        J[:, 2, 1] - J[:, 1, 2],
        J[:, 0, 2] - J[:, 2, 0],
        J[:, 1, 0] - J[:, 0, 1],
    ], axis=1)


# ---------------------------------------------------------------------------
# circulation probes
# ---------------------------------------------------------------------------


def circle_loop(center, normal, radius, n=128):
    """Equispaced closed loop (circle) for circulation quadrature."""
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    a = np.array([1.0, 0.0, 0.0])
    if abs(normal @ a) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(normal, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    th = 2 * np.pi * np.arange(n) / n
    return (np.asarray(center, dtype=float)
            + radius * (np.outer(np.cos(th), e1) + np.outer(np.sin(th), e2)))


def circulation(field, loop_points):
    """Midpoint-rule line integral of the velocity around a closed polygon."""
    P = np.asarray(loop_points, dtype=float)
    nxt = np.roll(P, -1, axis=0)
    mids = 0.5 * (P + nxt)
    seg = nxt - P
    u = field.velocity(mids) if hasattr(field, "velocity") else field(mids)
    return float(np.einsum("ij,ij->", u, seg))
