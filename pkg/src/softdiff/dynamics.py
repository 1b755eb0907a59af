"""Implicit-Euler assembly and the two-stage velocity update.

One Newton linearization per step: A dv = b with
    A = M + h D + h^2 K,   D = alpha M + beta K,
    b = -h^2 K v - h f_int(x) + h P,
then corrections h A^{-1} H^T lambda for actuation and contact, and the
semi-explicit position update x_f = x_i + h v_f.

Projective constraints fix DOFs by row/column identity projection, which
keeps A symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import internal_forces, stiffness
from .errors import DimensionMismatch, FactorizationFailure
from .mesh import DofMask

SOLVE_REL_TOL = 1e-8


@dataclass
class State:
    """Node positions x (3n,), velocities v (3n,), time t."""

    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, float).ravel()
        self.v = np.asarray(self.v, float).ravel()
        if self.x.shape != self.v.shape:
            raise DimensionMismatch("x and v dimensions differ")
        if not (np.isfinite(self.x).all() and np.isfinite(self.v).all()):
            raise ValueError("state contains non-finite entries")

    def copy(self):
        return State(self.x.copy(), self.v.copy(), self.t)


@dataclass
class SimParams:
    """Time step h (s), gravity (3,), optional extra constant loads (3n,),
    and the projective-constraint mask."""

    h: float = 0.01
    gravity: tuple = (0.0, 0.0, -9.81)
    extra_forces: np.ndarray | None = None
    dof_mask: DofMask = field(default_factory=DofMask)

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("time step must be positive")


def lumped_mass(mesh, density):
    """Diagonal mass (3n,): each node gets rho V_e / 4 per incident tet."""
    m_node = np.zeros(mesh.n_nodes)
    share = density * mesh.volumes / 4.0
    np.add.at(m_node, mesh.tets.ravel(), np.repeat(share, 4))
    return np.repeat(m_node, 3)


class SystemAssembly:
    """Factorized linear system of one step at a given state.

    Attributes: M (3n diag array), K, D (unprojected sparse), A (projected
    sparse), b (projected rhs), x, v snapshots, h, free mask.
    """

    def __init__(self, M, K, D, A, b, x, v, h, free_mask):
        self.M = M
        self.K = K
        self.D = D
        self.A = A
        self.b = b
        self.x = x
        self.v = v
        self.h = h
        self.free_mask = free_mask
        try:
            self._lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise FactorizationFailure(f"sparse factorization failed: {exc}") from exc

    def project(self, vec):
        """Zero the fixed-DOF entries of a vector (copy)."""
        out = np.array(vec, float)
        out[~self.free_mask] = 0.0
        return out

    def solve(self, rhs):
        """A^{-1} rhs with fixed DOFs projected out of the input.

        Residual-checked (<= 1e-8 relative) with one step of iterative
        refinement before failing.
        """
        r = self.project(rhs)
        x = self._lu.solve(r)
        scale = np.linalg.norm(r)
        res = np.linalg.norm(self.A @ x - r)
        if res > SOLVE_REL_TOL * scale + 1e-12:
            x = x + self._lu.solve(r - self.A @ x)
            res = np.linalg.norm(self.A @ x - r)
            if res > SOLVE_REL_TOL * scale + 1e-12:
                raise FactorizationFailure(
                    f"solve residual {res:g} above tolerance for scale {scale:g}"
                )
        return x


@dataclass
class StepResult:
    """Velocity decomposition of one step: v_f = v_free + delta_a + delta_c,
    and x_f = x_i + h v_f (exact identities)."""

    v_free: np.ndarray
    delta_a: np.ndarray
    delta_c: np.ndarray
    v_f: np.ndarray
    x_f: np.ndarray


def assemble(mesh, state, params, sim):
    """Build and factorize the implicit-Euler system at ``state``."""
    n3 = 3 * mesh.n_nodes
    if state.x.size != n3:
        raise DimensionMismatch(f"state has {state.x.size} DOFs, mesh needs {n3}")
    sim.dof_mask.validate(mesh.n_nodes)

    M = lumped_mass(mesh, params.density)
    K = stiffness(mesh, state.x, params)
    f_int = internal_forces(mesh, state.x, params)
    h = sim.h
    alpha, beta = params.rayleigh_mass, params.rayleigh_stiff
    Mdiag = sp.diags(M)
    D = alpha * Mdiag + beta * K
    A = Mdiag + h * D + (h * h) * K

    P = M * np.tile(np.asarray(sim.gravity, float), mesh.n_nodes)
    if sim.extra_forces is not None:
        P = P + np.asarray(sim.extra_forces, float).ravel()
    b = -(h * h) * (K @ state.v) - h * f_int + h * P

    free = np.ones(n3, dtype=bool)
    fixed = sim.dof_mask.dof_indices(mesh.n_nodes)
    free[fixed] = False
    d_free = sp.diags(free.astype(float))
    d_fixed = sp.diags((~free).astype(float))
    A_proj = (d_free @ A @ d_free + d_fixed).tocsc()
    b = np.where(free, b, 0.0)
    return SystemAssembly(M, K, D, A_proj, b, state.x.copy(), state.v.copy(), h, free)


def free_velocity(assembly, state):
    """v_free = v + A^{-1} b; fixed DOFs exactly zero."""
    return assembly.project(state.v) + assembly.solve(assembly.b)


def apply_corrections(assembly, state, v_free, H_a, lam_a, H_c, lam_c, h):
    """Actuation/contact corrections and the final state update.

    delta_a = h A^{-1} H_a^T lam_a, delta_c likewise; H_* may be None for
    "no rows" (then lam must be empty or None).
    """

    def correction(H, lam):
        if H is None or H.shape[0] == 0:
            if lam is not None and np.size(lam) != 0:
                raise DimensionMismatch("multipliers given without a Jacobian")
            return np.zeros_like(v_free)
        lam = np.asarray(lam, float).ravel()
        if lam.size != H.shape[0]:
            raise DimensionMismatch(f"{lam.size} multipliers for {H.shape[0]} rows")
        return h * assembly.solve(H.T @ lam)

    delta_a = correction(H_a, lam_a)
    delta_c = correction(H_c, lam_c)
    v_f = v_free + delta_a + delta_c
    x_f = state.x + h * v_f
    return StepResult(v_free=v_free, delta_a=delta_a, delta_c=delta_c, v_f=v_f, x_f=x_f)
