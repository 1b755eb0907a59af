"""Scene composition and the full step pipeline.

A scene bundles one or more deformable bodies (block-diagonal assembly over
a concatenated DOF vector), actuators addressed by global node indices,
static obstacles, and contact-solver settings. One step runs:

    assemble -> free velocity -> actuation correction -> detect contacts
    -> Delassus NCP -> contact correction -> semi-explicit update,

returning the new state plus a StepRecord retaining every intermediate the
sensitivity module needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import actuation as act
from . import collision as col
from . import contact_solver as csol
from .constitutive import internal_forces, stiffness
from .dynamics import State, StepResult, SystemAssembly, lumped_mass
from .mesh import DofMask


@dataclass
class Body:
    mesh: object
    material: object
    fixed_nodes: frozenset = field(default_factory=frozenset)
    friction: float = 0.5
    name: str = ""


@dataclass
class ContactSettings:
    """Contact solve settings at the scene level.

    max_iter = 0 picks scene defaults (20000 PGS / 10000 ADMM): assembled
    Delassus matrices of resting meshes are routinely rank deficient and
    need more budget than the bare solver defaults.
    """

    solver: str = "admm"
    tol: float = 1e-10
    max_iter: int = 0
    margin: float = 1e-3

    def solve(self, problem, lam0=None):
        if self.solver == "pgs":
            iters = self.max_iter or 20000
            return csol.solve_ncp_pgs(problem, tol=self.tol, max_iter=iters, lam0=lam0)
        if self.solver == "admm":
            iters = self.max_iter or 10000
            return csol.solve_ncp_admm(problem, tol=self.tol, max_iter=iters, lam0=lam0)
        raise ValueError(f"unknown contact solver {self.solver!r}")


@dataclass
class StepRecord:
    """Everything retained from one completed step."""

    scene: object
    state_in: State
    lam_a: np.ndarray
    assembly: SystemAssembly
    H_a: sp.csr_matrix | None
    contact_set: col.ContactSet
    delassus: csol.DelassusProblem | None
    ncp: csol.NcpSolution | None
    result: StepResult
    materials: list


class Scene:
    """Simulation scene; immutable configuration, stateless step()."""

    def __init__(self, bodies, h=0.01, gravity=(0.0, 0.0, -9.81), actuators=(),
                 obstacles=(), contact=None, tau_rel=col.DEFAULT_TAU_REL,
                 extra_forces=None, seed=0):
        self.bodies = list(bodies)
        self.h = float(h)
        self.gravity = np.asarray(gravity, float)
        self.actuators = list(actuators)
        self.obstacles = list(obstacles)
        self.contact = contact or ContactSettings()
        self.tau_rel = float(tau_rel)
        self.seed = int(seed)
        self.node_offsets = np.cumsum([0] + [b.mesh.n_nodes for b in self.bodies])
        self.n_nodes = int(self.node_offsets[-1])
        self.n_dof = 3 * self.n_nodes
        if extra_forces is not None:
            extra_forces = np.asarray(extra_forces, float).ravel()
            assert extra_forces.size == self.n_dof
        self.extra_forces = extra_forces
        fixed = []
        for i, b in enumerate(self.bodies):
            DofMask(b.fixed_nodes).validate(b.mesh.n_nodes)
            fixed.extend(int(n) + self.node_offsets[i] for n in b.fixed_nodes)
        self._fixed_nodes = sorted(fixed)
        self.n_actuators = len(self.actuators)

    # -- slicing helpers ---------------------------------------------------

    def dof_slice(self, body_idx):
        return slice(3 * self.node_offsets[body_idx], 3 * self.node_offsets[body_idx + 1])

    def rest_positions(self):
        return np.concatenate([b.mesh.rest_positions.ravel() for b in self.bodies])

    def initial_state(self, t=0.0):
        return State(self.rest_positions(), np.zeros(self.n_dof), t)

    def free_mask(self):
        free = np.ones(self.n_dof, dtype=bool)
        for n in self._fixed_nodes:
            free[3 * n : 3 * n + 3] = False
        return free

    # -- assembly ----------------------------------------------------------

    def assemble(self, state, materials=None):
        materials = materials or [b.material for b in self.bodies]
        h = self.h
        M_parts, K_parts, D_parts, b_parts = [], [], [], []
        for i, body in enumerate(self.bodies):
            mat = materials[i]
            sl = self.dof_slice(i)
            x_b, v_b = state.x[sl], state.v[sl]
            M_b = lumped_mass(body.mesh, mat.density)
            K_b = stiffness(body.mesh, x_b, mat)
            f_b = internal_forces(body.mesh, x_b, mat)
            D_b = mat.rayleigh_mass * sp.diags(M_b) + mat.rayleigh_stiff * K_b
            P_b = M_b * np.tile(self.gravity, body.mesh.n_nodes)
            if self.extra_forces is not None:
                P_b = P_b + self.extra_forces[sl]
            M_parts.append(M_b)
            K_parts.append(K_b)
            D_parts.append(D_b)
            b_parts.append(-(h * h) * (K_b @ v_b) - h * f_b + h * P_b)
        M = np.concatenate(M_parts)
        K = sp.block_diag(K_parts, format="csr")
        D = sp.block_diag(D_parts, format="csr")
        A = sp.diags(M) + h * D + (h * h) * K
        b = np.concatenate(b_parts)
        free = self.free_mask()
        d_free = sp.diags(free.astype(float))
        d_fixed = sp.diags((~free).astype(float))
        A_proj = (d_free @ A @ d_free + d_fixed).tocsc()
        b = np.where(free, b, 0.0)
        return SystemAssembly(M, K, D, A_proj, b, state.x.copy(), state.v.copy(), h, free)

    def actuation(self, x):
        if not self.actuators:
            return None
        return act.actuation_jacobian(self.actuators, x)

    def collision_bodies(self, x):
        out = []
        for i, body in enumerate(self.bodies):
            out.append(
                col.CollisionBody(
                    mesh=body.mesh,
                    x=x[self.dof_slice(i)],
                    offset=3 * self.node_offsets[i],
                    friction=body.friction,
                    body_id=i,
                )
            )
        return out

    def detect(self, x):
        return col.detect(
            self.collision_bodies(x), self.obstacles, self.contact.margin,
            self.n_dof, tau_rel=self.tau_rel,
        )

    # -- stepping ----------------------------------------------------------

    def step(self, state, lam_a=None, materials=None, warm_lambda=None):
        """Advance one step; returns (new_state, StepRecord)."""
        materials = materials or [b.material for b in self.bodies]
        lam_a = np.zeros(self.n_actuators) if lam_a is None else np.asarray(lam_a, float)
        assembly = self.assemble(state, materials)
        v_free = assembly.project(state.v) + assembly.solve(assembly.b)
        H_a = self.actuation(state.x)
        if H_a is not None and lam_a.size:
            delta_a = self.h * assembly.solve(H_a.T @ lam_a)
        else:
            delta_a = np.zeros(self.n_dof)

        contact_set = self.detect(state.x)
        if len(contact_set):
            G, g, Z = csol.build_delassus(assembly, contact_set.H, v_free, delta_a)
            problem = csol.DelassusProblem(
                G=G, g=g, mus=contact_set.frictions(), h=self.h, Z=Z
            )
            lam0 = warm_lambda if warm_lambda is not None and warm_lambda.size == g.size else None
            ncp = self.contact.solve(problem, lam0=lam0)
            delta_c = self.h * (Z @ ncp.lam)
        else:
            problem = None
            ncp = None
            delta_c = np.zeros(self.n_dof)

        v_f = v_free + delta_a + delta_c
        x_f = state.x + self.h * v_f
        result = StepResult(v_free=v_free, delta_a=delta_a, delta_c=delta_c, v_f=v_f, x_f=x_f)
        record = StepRecord(
            scene=self, state_in=state.copy(), lam_a=lam_a.copy(), assembly=assembly,
            H_a=H_a, contact_set=contact_set, delassus=problem, ncp=ncp,
            result=result, materials=list(materials),
        )
        new_state = State(x_f.copy(), v_f.copy(), state.t + self.h)
        return new_state, record

    def mode_pattern(self, record):
        """(contact key, mode) list; the stability signature used by the
        finite-difference oracle."""
        if record.ncp is None:
            return []
        return [
            (c.key, m) for c, m in zip(record.contact_set.contacts, record.ncp.modes)
        ]


def simulate(scene, state, n_steps, lam_a=None, callback=None, warm_start=True):
    """Run n_steps; returns the final state and the last record."""
    record = None
    warm = None
    for k in range(n_steps):
        state, record = scene.step(state, lam_a, warm_lambda=warm if warm_start else None)
        if warm_start and record.ncp is not None:
            warm = record.ncp.lam
        else:
            warm = None
        if callback is not None:
            callback(k, state, record)
    return state, record
