"""The quadratic pressure part mu, its boundary data, and the full split.

p = mu - Phi . [l; r]', with mu solving

    -Delta mu = tr{grad u . grad u}          in the fluid,
    d mu/d n  = grad^2 rho_Omega {u, u}      on the wall,
    d mu/d n  = sigma                        on the body,

n out of the fluid on both components. The wall sign follows from the k = 1
normal-trace identity together with compatibility (the centripetal check:
for a rotating flow the pressure must grow outward).
"""

from __future__ import annotations

import numpy as np

from .elliptic import NeumannProblem, NewtonValue
from .geometry import body_hessian, outer_distance_tensor

__all__ = [
    "sigma_boundary",
    "wall_quadratic_flux",
    "surface_velocity",
    "solve_mu",
    "MuField",
    "PressureSplit",
    "total_pressure_gradient",
]


def surface_velocity(field, operator):
    """Fluid-side velocity at every collocation point of the boundary.

    Layer components attached to this boundary contribute their principal
    value plus the half-density jump along the out-of-fluid normal.
    """
    boundary = operator.boundary
    x = boundary.centroids
    out = np.zeros_like(x)
    for comp in field.components:
        harmonic = getattr(comp, "field", None)
        if harmonic is not None and harmonic.boundary is boundary:
            G = operator.collocation_gradient()
            pv = np.einsum("itj,t->ij", G, harmonic.density)
            out += pv + 0.5 * harmonic.density[:, None] * boundary.normals
        else:
            out += comp.velocity(x)
    return out


def sigma_boundary(state, shape, u_solid, boundary):
    """sigma = grad^2 rho {u-v, u-v} - n . (r ∧ (2u - v - l)) per body panel."""
    sl = boundary.component_slice("solid")
    x = boundary.centroids[sl]
    n = boundary.normals[sl]
    v = state.velocity_at(x)
    w = u_solid - v
    out = np.empty(len(x))
    for i in range(len(x)):
        H = body_hessian(shape, state, x[i])
        out[i] = w[i] @ H @ w[i]
    spin = np.cross(state.r, 2.0 * u_solid - v - state.ell)
    out -= np.einsum("ij,ij->i", n, spin)
    return out


def wall_quadratic_flux(u_wall, boundary):
    """grad^2 rho_Omega {u, u} per wall panel (out-of-fluid normal data)."""
    sl = boundary.component_slice("outer")
    x = boundary.centroids[sl]
    out = np.empty(len(x))
    for i in range(len(x)):
        H = outer_distance_tensor(2, x[i])
        out[i] = u_wall[i] @ H @ u_wall[i]
    return out


class MuField:
    """mu = Newtonian potential of the source plus a harmonic correction."""

    def __init__(self, newton, harmonic, compat_defect):
        self.newton = newton
        self.harmonic = harmonic
        self.compat_defect = compat_defect

    def value(self, x):
        out = self.harmonic.potential(x)
        if self.newton is not None:
            out = out + self.newton.value(x)
        return out

    def gradient(self, x):
        out = self.harmonic.gradient(x)
        if self.newton is not None:
            out = out + self.newton.gradient(x)
        return out

    def surface_values(self):
        out = self.harmonic.surface_values()
        if self.newton is not None:
            out = out + self.newton.value(self.harmonic.boundary.centroids)
        return out


def solve_mu(grid, u_field, state, shape, operator, compat_tol=1e-2):
    """Solve the quadratic pressure problem on the current placement.

    state/shape may be None for the fluid-only (no body) configuration.
    compat_tol bounds the raw Neumann-data incompatibility relative to the
    data norm; beyond it the discretization is inconsistent (hard error).
    """
    boundary = operator.boundary
    J = u_field.jacobian(grid.points)
    source = np.einsum("mij,mji->m", J, J)
    newton = NewtonValue(grid, source) if np.any(source != 0.0) else None

    u_surf = surface_velocity(u_field, operator)
    g = np.zeros(boundary.n_panels)
    osl = boundary.component_slice("outer")
    g[osl] = wall_quadratic_flux(u_surf[osl], boundary)
    if state is not None and boundary.has("solid"):
        ssl = boundary.component_slice("solid")
        g[ssl] = sigma_boundary(state, shape, u_surf[ssl], boundary)
    if newton is not None:
        from .elliptic import panel_mean_fluxes
        g_h = g - panel_mean_fluxes(boundary, grid.points,
                                    masses=source * grid.weights)
    else:
        g_h = g

    # defect of the continuous compatibility: sum g dGamma + int source dV -> 0
    defect = float(g @ boundary.areas + (source * grid.weights).sum()
                   if newton is not None else g @ boundary.areas)
    scale = float(np.abs(g) @ boundary.areas) + abs(
        float((np.abs(source) * grid.weights).sum())) if newton is not None \
        else float(np.abs(g) @ boundary.areas)
    rel_defect = abs(defect) / max(scale, 1e-30)

    harmonic = operator.solve(NeumannProblem(boundary, g_h, compat_tol))
    return MuField(newton, harmonic, rel_defect)


class PressureSplit:
    """p = mu - Phi . [l; r]'; only gradients and boundary forms are used."""

    def __init__(self, mu: MuField, potentials, phi_dot):
        self.mu = mu
        self.potentials = list(potentials)
        self.phi_dot = np.asarray(phi_dot, dtype=float)

    def gradient(self, x):
        out = self.mu.gradient(x)
        for a, phi in enumerate(self.potentials):
            out = out - self.phi_dot[a] * phi.gradient(x)
        return out


def total_pressure_gradient(split: PressureSplit, x):
    return split.gradient(np.atleast_2d(np.asarray(x, dtype=float)))
