"""Vorticity transport, Picard fixed points, and the production time stepper.

The appendix-style constructive scheme: a prescribed-motion inner fixed
point (iterate flow -> pushforward -> reconstruct -> new flow) and an outer
coupled fixed point updating the body velocities through the added-mass ODE.
The production stepper integrates the same right-hand sides with RK4,
bypassing the iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import elliptic as ell
from . import kirchhoff as kh
from . import pressure as pr
from .errors import (CollisionImminent, DegenerateJacobian, NoContraction)
from .geometry import (OuterDomain, RigidState, SolidShape, advance_rotation,
                       mesh_surface, min_clearance, polar_orthonormalize,
                       skew, transform_mesh)

__all__ = [
    "FluidState",
    "PicardReport",
    "SolverSetup",
    "pushforward_vorticity",
    "advance_flow",
    "body_acceleration",
    "step_production",
    "fixed_point_prescribed",
    "fixed_point_coupled",
    "lipschitz_probe",
    "energy_fluid",
    "energy_solid",
]


@dataclass
class FluidState:
    """Vortex particles plus the loop-circulation bookkeeping (g = 0 here)."""

    positions: np.ndarray
    strengths: np.ndarray
    volumes: np.ndarray
    delta: float
    circulations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    spacing: float | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, float))
        self.strengths = np.atleast_2d(np.asarray(self.strengths, float))
        self.volumes = np.atleast_1d(np.asarray(self.volumes, float))
        self.circulations = np.asarray(self.circulations, float)

    @property
    def n(self):
        return len(self.positions)

    def support(self):
        return ell.VorticitySupport(self.positions, self.strengths, self.delta)

    def total_strength(self):
        return self.strengths.sum(axis=0) if self.n else np.zeros(3)

    def copy(self):
        return FluidState(self.positions.copy(), self.strengths.copy(),
                          self.volumes.copy(), self.delta,
                          self.circulations.copy(), self.spacing)


@dataclass
class PicardReport:
    distances: list
    ratios: list
    converged: bool
    iterations: int


def pushforward_vorticity(grad_eta, strengths0):
    """omega_p(t) = grad eta(t, x_p) . omega_p(0); strengths carry volumes."""
    grad_eta = np.asarray(grad_eta, float)
    dets = np.linalg.det(grad_eta)
    if len(dets) and (dets.min() < 0.9 or dets.max() > 1.1):
        raise DegenerateJacobian(
            f"det grad eta in [{dets.min():.3f}, {dets.max():.3f}]")
    return np.einsum("pij,pj->pi", grad_eta, np.atleast_2d(strengths0))


class SolverSetup:
    """Meshes and numerics shared by the steppers for one scenario."""

    def __init__(self, outer: OuterDomain, shape: SolidShape,
                 outer_refinement=2, solid_refinement=2, grid_n=16,
                 mu_grid_n=None, collision_floor=None, subsample=3):
        self.outer = outer
        self.shape = shape
        self.outer_mesh = mesh_surface(outer, outer_refinement)
        self.solid_mesh0 = mesh_surface(shape, solid_refinement)
        self.grid_n = grid_n
        self.mu_grid_n = mu_grid_n or grid_n
        self.collision_floor = collision_floor
        self.subsample = subsample
        self._op_cache = {}

    def operator(self, state: RigidState, cache_key=None):
        if cache_key is not None and cache_key in self._op_cache:
            return self._op_cache[cache_key]
        moved = transform_mesh(self.solid_mesh0, state)
        boundary = ell.BoundarySet([self.outer_mesh, moved])
        op = ell.BoundaryOperator(boundary)
        if cache_key is not None:
            self._op_cache[cache_key] = op
        return op

    def clear_cache(self):
        self._op_cache.clear()

    def volume_grid(self, state, n=None, **kw):
        return ell.VolumeGrid(self.outer, n or self.mu_grid_n,
                              solid=self.shape, state=state,
                              outer_mesh=self.outer_mesh,
                              solid_mesh=self.solid_mesh0,
                              subsample=self.subsample, **kw)

    def check_clearance(self, state):
        floor = self.collision_floor
        if floor is None:
            return
        c = min_clearance(state, self.shape, self.outer, mesh=self.solid_mesh0)
        if c < floor:
            raise CollisionImminent(
                f"clearance {c:.4f} below floor {floor:.4f}")

    def velocity_field(self, state, fluid: FluidState, op=None,
                       compat_tol=2e-2):
        op = op or self.operator(state)
        return ell.reconstruct_velocity(fluid.support(), state, op,
                                        circulations=fluid.circulations,
                                        compat_tol=compat_tol), op


def advance_flow(positions, grads, field_at, t, dt, spacing=None):
    """RK4 step of particle positions and deformation gradients.

    field_at(t) must return a velocity field (frozen fields are admissible,
    time-interpolated histories too). The deformation gradients follow the
    variational equation dF/dt = J_u F.
    """
    def rhs(tau, X, F):
        f = field_at(tau)
        u = f.velocity(X)
        J = f.jacobian(X)
        return u, np.einsum("pij,pjk->pik", J, F)

    if spacing is not None:
        umax = float(np.max(np.linalg.norm(rhs(t, positions, grads)[0],
                                           axis=1), initial=0.0))
        if umax * dt > 0.2 * spacing:
            raise ValueError(
                f"CFL-like bound violated: |u| dt = {umax * dt:.3f} > "
                f"0.2 spacing = {0.2 * spacing:.3f}")

    k1u, k1F = rhs(t, positions, grads)
    k2u, k2F = rhs(t + dt / 2, positions + dt / 2 * k1u, grads + dt / 2 * k1F)
    k3u, k3F = rhs(t + dt / 2, positions + dt / 2 * k2u, grads + dt / 2 * k2F)
    k4u, k4F = rhs(t + dt, positions + dt * k3u, grads + dt * k3F)
    new_pos = positions + dt / 6 * (k1u + 2 * k2u + 2 * k3u + k4u)
    new_grads = grads + dt / 6 * (k1F + 2 * k2F + 2 * k3F + k4F)
    return new_pos, new_grads


def body_acceleration(setup: SolverSetup, state, fluid, op=None,
                      mass_props=None, mu_compat_tol=1e-2):
    """(l', r') from the added-mass ODE at the current instant."""
    u_field, op = setup.velocity_field(state, fluid, op=op)
    potentials, K = kh.solve_kirchhoff(op, state)
    boundary = op.boundary
    M2 = kh.added_mass(potentials, K, boundary)
    m, _, J0 = mass_props if mass_props is not None \
        else setup.shape.mass_properties()
    J = kh.inertia_transport(state.Q, J0)
    grid = setup.volume_grid(state)
    mu = pr.solve_mu(grid, u_field, state, setup.shape, op,
                     compat_tol=mu_compat_tol)
    Xi = kh.xi_forcing(mu.surface_values()[boundary.component_slice("solid")],
                       K, boundary)
    system = kh.AddedMassSystem(m=m, J=J, M2=M2, Xi=Xi, r=state.r)
    dl, dr = kh.body_ode_rhs(system)
    return dl, dr, u_field, system


def step_production(setup: SolverSetup, state: RigidState, fluid: FluidState,
                    dt, tracers=None):
    """One RK4 step of the coupled body + particle system.

    Deformation gradients are integrated across the step (starting from the
    identity) and applied to the strengths at the end; tracer loops, when
    given, ride along with velocity-only updates.
    """
    setup.check_clearance(state)
    n = fluid.n
    F0 = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    tr0 = [np.asarray(T, float) for T in (tracers or [])]

    def stage(state_s, pos_s, F_s):
        st = state_s
        fs = FluidState(pos_s, pushforward_vorticity(F_s, fluid.strengths),
                        fluid.volumes, fluid.delta, fluid.circulations,
                        fluid.spacing)
        dl, dr, u_field, _ = body_acceleration(setup, st, fs)
        du = u_field.velocity(pos_s) if n else np.zeros((0, 3))
        dF = np.einsum("pij,pjk->pik", u_field.jacobian(pos_s), F_s) \
            if n else F_s * 0.0
        dtr = [u_field.velocity(T) for T in tr0] if tr0 else []
        return (state_s.ell.copy(), skew(st.r) @ st.Q, dl, dr, du, dF, dtr,
                u_field)

    def advance(state0, k, h):
        st = state0.copy()
        st.x_B = state0.x_B + h * k[0]
        st.Q = state0.Q + h * k[1]
        st.ell = state0.ell + h * k[2]
        st.r = state0.r + h * k[3]
        st.t = state0.t + h
        return st

    tr_stage = [t.copy() for t in tr0]
    k1 = stage(state, fluid.positions, F0)
    st2 = advance(state, k1, dt / 2)
    k2 = stage(st2, fluid.positions + dt / 2 * k1[4], F0 + dt / 2 * k1[5])
    st3 = advance(state, k2, dt / 2)
    k3 = stage(st3, fluid.positions + dt / 2 * k2[4], F0 + dt / 2 * k2[5])
    st4 = advance(state, k3, dt)
    k4 = stage(st4, fluid.positions + dt * k3[4], F0 + dt * k3[5])

    def comb(i):
        return (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) / 6.0

    new_state = state.copy()
    new_state.x_B = state.x_B + dt * comb(0)
    new_state.Q = polar_orthonormalize(state.Q + dt * comb(1))
    new_state.ell = state.ell + dt * comb(2)
    new_state.r = state.r + dt * comb(3)
    new_state.t = state.t + dt

    new_pos = fluid.positions + dt * comb(4)
    F_final = F0 + dt * comb(5)
    new_strengths = pushforward_vorticity(F_final, fluid.strengths)
    new_fluid = FluidState(new_pos, new_strengths, fluid.volumes, fluid.delta,
                           fluid.circulations, fluid.spacing)
    new_tracers = None
    if tr0:
        new_tracers = [T + dt * (k1[6][i] + 2 * k2[6][i] + 2 * k3[6][i]
                                 + k4[6][i]) / 6.0
                       for i, T in enumerate(tr0)]
    return new_state, new_fluid, new_tracers


# ---------------------------------------------------------------------------
# Picard fixed points
# ---------------------------------------------------------------------------


def _prescribed_states(shape, lr_fn, t_nodes, substeps=8):
    """Integrate the rigid placement for a prescribed (l, r) curve."""
    states = []
    st = RigidState.initial(shape)
    lr0 = lr_fn(0.0)
    st.ell, st.r = lr0[:3].copy(), lr0[3:].copy()
    states.append(st.copy())
    for k in range(1, len(t_nodes)):
        t0, t1 = t_nodes[k - 1], t_nodes[k]
        h = (t1 - t0) / substeps
        for j in range(substeps):
            t = t0 + j * h
            lr_mid = lr_fn(t + h / 2)
            st.x_B = st.x_B + h * _lr_average(lr_fn, t, h)[:3]
            st.Q = advance_rotation(st.Q, lr_mid[3:], h)
        lr1 = lr_fn(t1)
        st.ell, st.r = lr1[:3].copy(), lr1[3:].copy()
        st.t = t1
        states.append(st.copy())
    return states


def _lr_average(lr_fn, t, h):
    # Simpson for the translation integral
    return (lr_fn(t) + 4.0 * lr_fn(t + h / 2) + lr_fn(t + h)) / 6.0


class _InterpolatedHistory:
    """Linear-in-time blend of per-node velocity fields."""

    def __init__(self, t_nodes, fields):
        self.t_nodes = np.asarray(t_nodes, float)
        self.fields = fields

    def __call__(self, t):
        k = np.searchsorted(self.t_nodes, t) - 1
        k = int(np.clip(k, 0, len(self.t_nodes) - 2))
        t0, t1 = self.t_nodes[k], self.t_nodes[k + 1]
        w = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        return _BlendField(self.fields[k], self.fields[k + 1], w)


class _BlendField:
    def __init__(self, f0, f1, w):
        self.f0, self.f1, self.w = f0, f1, w

    def velocity(self, x):
        if self.w == 0.0:
            return self.f0.velocity(x)
        if self.w == 1.0:
            return self.f1.velocity(x)
        return (1 - self.w) * self.f0.velocity(x) + self.w * self.f1.velocity(x)

    def jacobian(self, x):
        if self.w == 0.0:
            return self.f0.jacobian(x)
        if self.w == 1.0:
            return self.f1.jacobian(x)
        return (1 - self.w) * self.f0.jacobian(x) + self.w * self.f1.jacobian(x)


def fixed_point_prescribed(setup: SolverSetup, lr_fn, fluid0: FluidState,
                           T, n_nodes=12, tol=1e-4, max_iter=25,
                           identity_bound=0.5):
    """Banach-Picard iteration for the flow under a prescribed body motion.

    lr_fn(t) -> 6-vector (l, r). The iterate is the particle trajectory
    (positions and deformation gradients at the time nodes); each sweep
    pushes the vorticity along the current iterate, reconstructs the
    velocity at every node, and re-advects from the identity.
    Returns (trajectory dict, PicardReport).
    """
    t_nodes = np.linspace(0.0, T, n_nodes + 1)
    states = _prescribed_states(setup.shape, lr_fn, t_nodes)
    for st in states:
        setup.check_clearance(st)
    ops = [setup.operator(st, cache_key=("presc", id(lr_fn), k))
           for k, st in enumerate(states)]

    n = fluid0.n
    pos = np.repeat(fluid0.positions[None], len(t_nodes), axis=0)
    grads = np.repeat(np.broadcast_to(np.eye(3), (n, 3, 3))[None],
                      len(t_nodes), axis=0)

    distances, ratios = [], []
    converged = False
    fields = None
    it = 0
    for it in range(1, max_iter + 1):
        fields = []
        for k, st in enumerate(states):
            fs = FluidState(pos[k], pushforward_vorticity(grads[k],
                                                          fluid0.strengths),
                            fluid0.volumes, fluid0.delta,
                            fluid0.circulations, fluid0.spacing)
            f, _ = setup.velocity_field(st, fs, op=ops[k])
            fields.append(f)
        hist = _InterpolatedHistory(t_nodes, fields)

        new_pos = np.empty_like(pos)
        new_grads = np.empty_like(grads)
        new_pos[0] = fluid0.positions
        new_grads[0] = np.broadcast_to(np.eye(3), (n, 3, 3))
        for k in range(len(t_nodes) - 1):
            new_pos[k + 1], new_grads[k + 1] = advance_flow(
                new_pos[k], new_grads[k], hist, t_nodes[k],
                t_nodes[k + 1] - t_nodes[k])

        # identity-neighborhood guard of the construction
        drift = float(np.max(np.linalg.norm(new_pos - new_pos[0][None],
                                            axis=2), initial=0.0))
        if drift > identity_bound:
            raise NoContraction(
                f"flow left the identity neighborhood (sup {drift:.3f})",
                report=PicardReport(distances, ratios, False, it))

        d = float(np.max(np.linalg.norm(new_pos - pos, axis=2), initial=0.0)
                  + np.max(np.abs(new_grads - grads), initial=0.0))
        pos, grads = new_pos, new_grads
        distances.append(d)
        if len(distances) > 1 and distances[-2] > 0:
            ratios.append(distances[-1] / distances[-2])
        if d < tol:
            converged = True
            break
        if len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
            raise NoContraction(
                "three consecutive non-contracting sweeps",
                report=PicardReport(distances, ratios, False, it))

    report = PicardReport(distances, ratios, converged, it)
    return {
        "t_nodes": t_nodes,
        "states": states,
        "positions": pos,
        "grads": grads,
        "fields": fields,
        "operators": ops,
    }, report


def fixed_point_coupled(setup: SolverSetup, ell0, r0, fluid0: FluidState,
                        T, n_nodes=10, tol=1e-3, max_iter=20,
                        inner_tol_factor=0.1):
    """Outer Picard iteration on the body velocity curve (l, r)(t).

    Each sweep solves the prescribed-motion problem for the current curve,
    assembles M(t) and Xi(t) at the nodes, and integrates the body ODE with
    the trapezoid rule. Returns (trajectory dict, PicardReport).
    """
    t_nodes = np.linspace(0.0, T, n_nodes + 1)
    lr = np.repeat(np.concatenate([ell0, r0])[None], len(t_nodes), axis=0)
    m, _, J0 = setup.shape.mass_properties()

    distances, ratios = [], []
    converged = False
    inner = None
    it = 0
    for it in range(1, max_iter + 1):
        lr_fn = _CurveInterp(t_nodes, lr)
        setup.clear_cache()
        inner, _ = fixed_point_prescribed(
            setup, lr_fn, fluid0, T, n_nodes=n_nodes,
            tol=tol * inner_tol_factor, max_iter=30)
        rhs = np.empty_like(lr)
        for k, st in enumerate(inner["states"]):
            op = inner["operators"][k]
            u_field = inner["fields"][k]
            potentials, K = kh.solve_kirchhoff(op, st)
            M2 = kh.added_mass(potentials, K, op.boundary)
            J = kh.inertia_transport(st.Q, J0)
            grid = setup.volume_grid(st)
            mu = pr.solve_mu(grid, u_field, st, setup.shape, op)
            Xi = kh.xi_forcing(
                mu.surface_values()[op.boundary.component_slice("solid")],
                K, op.boundary)
            system = kh.AddedMassSystem(m=m, J=J, M2=M2, Xi=Xi, r=lr[k, 3:])
            dl, dr = kh.body_ode_rhs(system)
            rhs[k] = np.concatenate([dl, dr])
        new_lr = np.empty_like(lr)
        new_lr[0] = np.concatenate([ell0, r0])
        for k in range(len(t_nodes) - 1):
            h = t_nodes[k + 1] - t_nodes[k]
            new_lr[k + 1] = new_lr[k] + 0.5 * h * (rhs[k] + rhs[k + 1])

        d = float(np.max(np.abs(new_lr - lr)))
        lr = new_lr
        distances.append(d)
        if len(distances) > 1 and distances[-2] > 0:
            ratios.append(distances[-1] / distances[-2])
        if d < tol:
            converged = True
            break
        if len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
            raise NoContraction("three consecutive non-contracting sweeps",
                                report=PicardReport(distances, ratios,
                                                    False, it))

    report = PicardReport(distances, ratios, converged, it)
    return {"t_nodes": t_nodes, "lr": lr, "inner": inner}, report


class _CurveInterp:
    def __init__(self, t_nodes, values):
        self.t = np.asarray(t_nodes, float)
        self.v = np.asarray(values, float)

    def __call__(self, t):
        k = int(np.clip(np.searchsorted(self.t, t) - 1, 0, len(self.t) - 2))
        t0, t1 = self.t[k], self.t[k + 1]
        w = 0.0 if t1 == t0 else np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        return (1 - w) * self.v[k] + w * self.v[k + 1]


def lipschitz_probe(run_fn, eps, base_key="base"):
    """Sensitivity of trajectories to an eps-sized data perturbation.

    run_fn(eps) must return (eta_samples, lr_samples): particle trajectory
    samples (T, N, 3) and body velocity samples (T, 6). Returns the two
    sup-distance ratios divided by eps.
    """
    eta0, lr0 = run_fn(0.0)
    eta1, lr1 = run_fn(eps)
    d_eta = float(np.max(np.linalg.norm(eta1 - eta0, axis=-1), initial=0.0))
    d_lr = float(np.max(np.abs(lr1 - lr0), initial=0.0))
    return d_eta / eps, d_lr / eps


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def energy_solid(state: RigidState, m, J0):
    J = kh.inertia_transport(state.Q, J0)
    return 0.5 * m * float(state.ell @ state.ell) \
        + 0.5 * float((J @ state.r) @ state.r)


def energy_fluid(setup: SolverSetup, state, fluid, u_field=None, grid=None):
    """E_F = 1/2 int |u|^2 over the fluid, cut-cell midpoint quadrature."""
    if u_field is None:
        u_field, _ = setup.velocity_field(state, fluid)
    if grid is None:
        grid = setup.volume_grid(state, n=setup.grid_n, subsample=4)
    u = u_field.velocity(grid.points)
    return 0.5 * float(np.einsum("ij,ij->i", u, u) @ grid.weights)
