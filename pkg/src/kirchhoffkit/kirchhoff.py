"""Kirchhoff potentials, added mass, inertia transport, body accelerations.

The six potentials respond to unit body translations/rotations; the added
mass is their Gram matrix, evaluated as the boundary form
sum over solid panels of Phi_a K_b dGamma (the volume integral of
grad Phi_a . grad Phi_b reduces to it by Green's identity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .elliptic import BoundaryOperator, NeumannProblem
from .errors import NotPositiveDefinite

__all__ = [
    "kirchhoff_data",
    "solve_kirchhoff",
    "added_mass",
    "xi_forcing",
    "inertia_transport",
    "AddedMassSystem",
    "body_ode_rhs",
]


def kirchhoff_data(state, boundary):
    """Per-panel fluxes K_1..K_6 (zero on the wall, n / (x-x_B) ∧ n on the body)."""
    K = np.zeros((6, boundary.n_panels))
    sl = boundary.component_slice("solid")
    sn = boundary.normals[sl]
    sc = boundary.centroids[sl]
    K[0:3, sl] = sn.T
    K[3:6, sl] = np.cross(sc - state.x_B, sn).T
    return K


def solve_kirchhoff(operator: BoundaryOperator, state):
    """The six Kirchhoff potentials for the current placement."""
    K = kirchhoff_data(state, operator.boundary)
    return [operator.solve(NeumannProblem(operator.boundary, K[a]))
            for a in range(6)], K


def added_mass(potentials, K, boundary, raw_asym_tol=1e-6):
    """M2[a][b] = sum over the solid of Phi_a K_b dGamma, symmetrized.

    The raw asymmetry (before symmetrization) is a discretization
    diagnostic; it must stay below raw_asym_tol relative.
    """
    sl = boundary.component_slice("solid")
    sa = boundary.areas[sl]
    M2 = np.empty((6, 6))
    for a in range(6):
        va = potentials[a].surface_values()[sl]
        M2[a, :] = (va * sa) @ K[:, sl].T
    asym = np.abs(M2 - M2.T).max() / max(np.abs(M2).max(), 1e-30)
    if asym > raw_asym_tol:
        raise NotPositiveDefinite(
            f"added-mass raw asymmetry {asym:.2e} exceeds {raw_asym_tol:.0e}")
    return 0.5 * (M2 + M2.T)


def xi_forcing(mu_surface_solid, K, boundary):
    """Xi_a = sum over the solid of mu K_a dGamma (same Green duality)."""
    sl = boundary.component_slice("solid")
    sa = boundary.areas[sl]
    return (mu_surface_solid * sa) @ K[:, sl].T


def inertia_transport(Q, J0):
    """J = Q J0 Q^T; symmetric with the eigenvalues of J0."""
    J = Q @ J0 @ Q.T
    return 0.5 * (J + J.T)


@dataclass
class AddedMassSystem:
    """Virtual inertia M = M1 + M2 plus the force data of the body ODE."""

    m: float
    J: np.ndarray
    M2: np.ndarray
    Xi: np.ndarray
    r: np.ndarray

    @property
    def M1(self):
        out = np.zeros((6, 6))
        out[:3, :3] = self.m * np.eye(3)
        out[3:, 3:] = self.J
        return out

    @property
    def M(self):
        return self.M1 + self.M2

    @property
    def gyroscopic(self):
        out = np.zeros(6)
        out[3:] = np.cross(self.J @ self.r, self.r)
        return out


def body_ode_rhs(system: AddedMassSystem):
    """Solve M [l; r]' = [0; Jr ∧ r] + Xi by Cholesky; returns (l', r')."""
    M = system.M
    try:
        cf = cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if np.min(np.diag(cf[0])) <= 0:
        raise NotPositiveDefinite("virtual inertia lost positive definiteness")
    accel = cho_solve(cf, system.gyroscopic + system.Xi)
    return accel[:3], accel[3:]
