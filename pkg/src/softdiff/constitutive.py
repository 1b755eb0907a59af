"""Material laws: strain measures, stress, internal forces, stiffness.

Three laws are supported: small-strain corotational elasticity and the
Saint-Venant-Kirchhoff / compressible Neo-Hookean hyperelastic energies.
Stress evaluation is affine in the Lame pair (lambda, mu), which the
sensitivity module exploits: evaluating any quantity with (dlam, dmu)
substituted for (lam, mu) yields its derivative along a material direction.

Adopted energy densities (standard compressible forms):
  StVK:        psi = lam/2 tr(E)^2 + mu tr(E^2)
  Neo-Hookean: psi = mu/2 (tr C - 3) - mu ln J + lam/2 (ln J)^2
Corotational applies linear elasticity in a per-element rotated frame, with
the rotation held constant when differentiating (fixed-R approximation).

Internal forces follow f_{e,i} = V_e F_e S_e grad(N_i), assembled per node;
the volume weight uses single-point quadrature of linear tets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvertedElement

COROTATIONAL = "corotational"
STVK = "stvk"
NEOHOOKEAN = "neohookean"
LAWS = (COROTATIONAL, STVK, NEOHOOKEAN)


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic material: law, Young E (Pa), Poisson nu, density rho
    (kg/m^3), Rayleigh coefficients alpha (1/s) and beta (s)."""

    law: str = STVK
    young: float = 1e6
    poisson: float = 0.3
    density: float = 1000.0
    rayleigh_mass: float = 0.0
    rayleigh_stiff: float = 0.0

    def __post_init__(self):
        if self.law not in LAWS:
            raise ValueError(f"unknown law {self.law!r}; expected one of {LAWS}")
        if not self.young > 0:
            raise ValueError("Young modulus must be positive")
        if not -1.0 < self.poisson < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.rayleigh_mass < 0 or self.rayleigh_stiff < 0:
            raise ValueError("Rayleigh coefficients must be >= 0")

    @property
    def lame(self):
        return lame_from_young_poisson(self.young, self.poisson)


def lame_from_young_poisson(young, poisson):
    """(lambda, mu) from (E, nu)."""
    lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    mu = young / (2.0 * (1.0 + poisson))
    return lam, mu


def lame_jacobian(young, poisson):
    """2x2 Jacobian d(lambda, mu)/d(E, nu)."""
    e, nu = young, poisson
    dl_de = nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    dl_dnu = e * (1.0 + 2.0 * nu**2) / ((1.0 + nu) ** 2 * (1.0 - 2.0 * nu) ** 2)
    dm_de = 1.0 / (2.0 * (1.0 + nu))
    dm_dnu = -e / (2.0 * (1.0 + nu) ** 2)
    return np.array([[dl_de, dl_dnu], [dm_de, dm_dnu]])


@dataclass
class ElementKinematics:
    """Deformation gradient F, Green-Lagrange strain and right Cauchy-Green
    tensor of one element."""

    F: np.ndarray
    E_strain: np.ndarray
    C: np.ndarray


def deformation_gradient(grads, x_nodes):
    """Kinematics of one tet: F = sum_i x_i (grad N_i)^T.

    grads: (4, 3) rest shape gradients; x_nodes: (4, 3) current positions.
    """
    F = np.einsum("ia,ib->ab", np.asarray(x_nodes, float), grads)
    C = F.T @ F
    return ElementKinematics(F=F, E_strain=0.5 * (C - np.eye(3)), C=C)


def deformation_gradients(mesh, x):
    """Batched F over all elements; x is flat (3n,) or (n, 3)."""
    xn = np.asarray(x, float).reshape(-1, 3)
    return np.einsum("eia,eib->eab", xn[mesh.tets], mesh.grads)


def pk2_stress(law, kin, params, lame=None):
    """Second Piola-Kirchhoff stress of one element.

    The corotational law has no PK2 form (it is defined at force level);
    requesting it raises ValueError.
    """
    lam, mu = params.lame if lame is None else lame
    if law == STVK:
        E = kin.E_strain
        return lam * np.trace(E) * np.eye(3) + 2.0 * mu * E
    if law == NEOHOOKEAN:
        J = np.linalg.det(kin.F)
        if J <= 0.0:
            raise InvertedElement(f"det F = {J:g} <= 0 for Neo-Hookean")
        Ci = np.linalg.inv(kin.C)
        return mu * (np.eye(3) - Ci) + lam * np.log(J) * Ci
    raise ValueError("corotational stress is defined at force level only")


# ---------------------------------------------------------------------------
# batched hyperelastic kernels
# ---------------------------------------------------------------------------


class _HyperCtx:
    """Per-assembly cache of batched element quantities for one law."""

    def __init__(self, law, F, lam, mu, check=True):
        self.law = law
        self.F = F
        self.lam = lam
        self.mu = mu
        if law == NEOHOOKEAN:
            J = np.linalg.det(F)
            if check and (J <= 0.0).any():
                e = int(np.argmax(J <= 0.0))
                raise InvertedElement(f"element {e} inverted (det F = {J[e]:g})")
            C = np.einsum("eca,ecb->eab", F, F)
            self.Ci = np.linalg.inv(C)
            self.logJ = np.log(J)
            self.S = mu * (np.eye(3) - self.Ci) + lam * self.logJ[:, None, None] * self.Ci
        elif law == STVK:
            C = np.einsum("eca,ecb->eab", F, F)
            E = 0.5 * (C - np.eye(3))
            trE = np.trace(E, axis1=1, axis2=2)
            self.S = lam * trE[:, None, None] * np.eye(3) + 2.0 * mu * E
        else:
            raise ValueError(law)

    def dS(self, dF):
        """Directional stress derivative for a batched direction dF (m,3,3)."""
        F, lam, mu = self.F, self.lam, self.mu
        if self.law == STVK:
            dE = 0.5 * (np.einsum("eca,ecb->eab", dF, F) + np.einsum("eca,ecb->eab", F, dF))
            tr = np.trace(dE, axis1=1, axis2=2)
            return lam * tr[:, None, None] * np.eye(3) + 2.0 * mu * dE
        dC = np.einsum("eca,ecb->eab", dF, F)
        dC = dC + np.swapaxes(dC, 1, 2)
        return self._dS_dC(dC)

    def _dS_dC(self, dC):
        Ci, logJ, lam, mu = self.Ci, self.logJ, self.lam, self.mu
        CidC = np.einsum("eab,ebc->eac", Ci, dC)
        coeff = (mu - lam * logJ)[:, None, None]
        return coeff * np.einsum("eab,ebc->eac", CidC, Ci) + 0.5 * lam * np.trace(
            CidC, axis1=1, axis2=2
        )[:, None, None] * Ci

    def d2S(self, dF1, dF2):
        """Second directional stress derivative (symmetric in dF1, dF2)."""
        F, lam, mu = self.F, self.lam, self.mu
        if self.law == STVK:
            d2E = 0.5 * (
                np.einsum("eca,ecb->eab", dF1, dF2) + np.einsum("eca,ecb->eab", dF2, dF1)
            )
            tr = np.trace(d2E, axis1=1, axis2=2)
            return lam * tr[:, None, None] * np.eye(3) + 2.0 * mu * d2E
        Ci, logJ = self.Ci, self.logJ
        dC1 = np.einsum("eca,ecb->eab", dF1, F)
        dC1 = dC1 + np.swapaxes(dC1, 1, 2)
        dC2 = np.einsum("eca,ecb->eab", dF2, F)
        dC2 = dC2 + np.swapaxes(dC2, 1, 2)
        d2C = np.einsum("eca,ecb->eab", dF1, dF2)
        d2C = d2C + np.swapaxes(d2C, 1, 2)
        A1 = np.einsum("eab,ebc->eac", Ci, dC1)  # Ci dC1
        A2 = np.einsum("eab,ebc->eac", Ci, dC2)
        A1Ci = np.einsum("eab,ebc->eac", A1, Ci)  # Ci dC1 Ci
        A2Ci = np.einsum("eab,ebc->eac", A2, Ci)
        tr1 = np.trace(A1, axis1=1, axis2=2)[:, None, None]
        tr2 = np.trace(A2, axis1=1, axis2=2)[:, None, None]
        tr12 = np.trace(np.einsum("eab,ebc->eac", A2, A1), axis1=1, axis2=2)[:, None, None]
        coeff = (mu - lam * logJ)[:, None, None]
        out = -0.5 * lam * tr2 * A1Ci
        out -= coeff * (
            np.einsum("eab,ebc->eac", A2, A1Ci) + np.einsum("eab,ebc->eac", A1, A2Ci)
        )
        out -= 0.5 * lam * tr12 * Ci
        out -= 0.5 * lam * tr1 * A2Ci
        out += self._dS_dC(d2C)
        return out


def _canonical_dF(mesh, j, b):
    """Batched dF for perturbing coordinate b of local node j: e_b (grad N_j)^T."""
    m = mesh.tets.shape[0]
    dF = np.zeros((m, 3, 3))
    dF[:, b, :] = mesh.grads[:, j, :]
    return dF


def _direction_dF(mesh, u):
    """Batched dF for a global displacement direction u (3n,)."""
    un = np.asarray(u, float).reshape(-1, 3)
    return np.einsum("eia,eib->eab", un[mesh.tets], mesh.grads)


# ---------------------------------------------------------------------------
# corotational support
# ---------------------------------------------------------------------------


def _voigt_B(mesh):
    """Strain-displacement matrices B (m, 6, 12), engineering shear rows."""
    m = mesh.tets.shape[0]
    B = np.zeros((m, 6, 12))
    g = mesh.grads
    for i in range(4):
        c = 3 * i
        B[:, 0, c + 0] = g[:, i, 0]
        B[:, 1, c + 1] = g[:, i, 1]
        B[:, 2, c + 2] = g[:, i, 2]
        B[:, 3, c + 0] = g[:, i, 1]
        B[:, 3, c + 1] = g[:, i, 0]
        B[:, 4, c + 1] = g[:, i, 2]
        B[:, 4, c + 2] = g[:, i, 1]
        B[:, 5, c + 0] = g[:, i, 2]
        B[:, 5, c + 2] = g[:, i, 0]
    return B


def _linear_klocal(mesh, lam, mu):
    """Per-element 12x12 linear-elastic stiffness V_e B^T C B."""
    B = _voigt_B(mesh)
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[0, 0] = C[1, 1] = C[2, 2] = lam + 2.0 * mu
    C[3, 3] = C[4, 4] = C[5, 5] = mu
    K = np.einsum("esi,st,etj->eij", B, C, B)
    return K * mesh.volumes[:, None, None]


def _polar_rotations(F):
    """Closest rotations to batched F (SVD with determinant correction)."""
    U, _, Vt = np.linalg.svd(F)
    R = U @ Vt
    neg = np.linalg.det(R) < 0
    if neg.any():
        U = U.copy()
        U[neg, :, -1] *= -1.0
        R = U @ Vt
    return R


def _corot_context(mesh, x, lam, mu):
    F = deformation_gradients(mesh, x)
    R = _polar_rotations(F)
    Klocal = _linear_klocal(mesh, lam, mu)
    xe = np.asarray(x, float).reshape(-1, 3)[mesh.tets]          # (m,4,3)
    Xe = mesh.rest_positions[mesh.tets]
    u_rot = np.einsum("eba,eib->eia", R, xe) - Xe                # R^T x - X
    return R, Klocal, u_rot


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def internal_forces(mesh, x, params, lame=None):
    """Assembled internal force vector f (3n,), f = d(total energy)/dx.

    With ``lame`` given, evaluates at that (lambda, mu) pair instead of the
    material's own; since stress is affine in the pair this doubles as the
    material-direction derivative of f.
    """
    lam, mu = params.lame if lame is None else lame
    n = mesh.n_nodes
    f = np.zeros((n, 3))
    if params.law == COROTATIONAL:
        R, Klocal, u_rot = _corot_context(mesh, x, lam, mu)
        floc = np.einsum("eij,ej->ei", Klocal, u_rot.reshape(-1, 12)).reshape(-1, 4, 3)
        fe = np.einsum("eab,eib->eia", R, floc)
    else:
        ctx = _HyperCtx(params.law, deformation_gradients(mesh, x), lam, mu)
        FS = np.einsum("eab,ebc->eac", ctx.F, ctx.S)
        fe = mesh.volumes[:, None, None] * np.einsum("eab,eib->eia", FS, mesh.grads)
    np.add.at(f, mesh.tets.ravel(), fe.reshape(-1, 3))
    return f.ravel()


def elastic_energy(mesh, x, params, lame=None):
    """Total strain energy (J)."""
    lam, mu = params.lame if lame is None else lame
    if params.law == COROTATIONAL:
        _, Klocal, u_rot = _corot_context(mesh, x, lam, mu)
        u = u_rot.reshape(-1, 12)
        return float(0.5 * np.einsum("ei,eij,ej->", u, Klocal, u))
    F = deformation_gradients(mesh, x)
    if params.law == STVK:
        C = np.einsum("eca,ecb->eab", F, F)
        E = 0.5 * (C - np.eye(3))
        trE = np.trace(E, axis1=1, axis2=2)
        psi = 0.5 * lam * trE**2 + mu * np.einsum("eab,eab->e", E, E)
    else:
        J = np.linalg.det(F)
        if (J <= 0.0).any():
            raise InvertedElement("inverted element in energy evaluation")
        trC = np.einsum("eaa->e", np.einsum("eca,ecb->eab", F, F))
        psi = 0.5 * mu * (trC - 3.0) - mu * np.log(J) + 0.5 * lam * np.log(J) ** 2
    return float((mesh.volumes * psi).sum())


def _scatter_indices(mesh):
    cache = getattr(mesh, "_softdiff_scatter", None)
    if cache is None:
        dofs = (3 * mesh.tets[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 12)
        rows = np.repeat(dofs, 12, axis=1).ravel()
        cols = np.tile(dofs, (1, 12)).ravel()
        cache = (rows, cols)
        mesh._softdiff_scatter = cache
    return cache


def _scatter(mesh, blocks):
    """Scatter per-element (m,4,3,4,3) blocks into a 3n x 3n CSR matrix."""
    rows, cols = _scatter_indices(mesh)
    n3 = 3 * mesh.n_nodes
    mat = sp.coo_matrix((blocks.reshape(-1), (rows, cols)), shape=(n3, n3))
    return mat.tocsr()


def _hyper_k_blocks(mesh, ctx):
    m, V = mesh.tets.shape[0], mesh.volumes
    blocks = np.empty((m, 4, 3, 4, 3))
    SG = np.einsum("eab,eib->eia", ctx.S, mesh.grads)  # S g_i
    for j in range(4):
        for b in range(3):
            dF = _canonical_dF(mesh, j, b)
            dS = ctx.dS(dF)
            dfe = np.einsum("eab,eib->eia", dF, SG)
            dfe += np.einsum("eab,ecb,eic->eia", ctx.F, dS, mesh.grads)
            blocks[:, :, :, j, b] = V[:, None, None] * dfe
    return blocks


def stiffness(mesh, x, params, lame=None):
    """Tangent stiffness K = df/dx as sparse 3n x 3n.

    Corotational uses the fixed-rotation approximation (R constant in the
    derivative), making K symmetric here as well.
    """
    lam, mu = params.lame if lame is None else lame
    if params.law == COROTATIONAL:
        R, Klocal, _ = _corot_context(mesh, x, lam, mu)
        m = mesh.tets.shape[0]
        Rb = np.zeros((m, 12, 12))
        for i in range(4):
            Rb[:, 3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = R
        Ke = np.einsum("eik,ekl,ejl->eij", Rb, Klocal, Rb)
        return _scatter(mesh, Ke.reshape(-1, 4, 3, 4, 3))
    ctx = _HyperCtx(params.law, deformation_gradients(mesh, x), lam, mu)
    return _scatter(mesh, _hyper_k_blocks(mesh, ctx))


def stiffness_product_derivative(mesh, x, params, V, lame=None):
    """d(K(x) V)/dx for a fixed vector V, as sparse 3n x 3n.

    Exact for the hyperelastic laws. For corotational the fixed-rotation
    approximation makes K independent of x, so the result is zero.
    """
    lam, mu = params.lame if lame is None else lame
    n3 = 3 * mesh.n_nodes
    if params.law == COROTATIONAL:
        return sp.csr_matrix((n3, n3))
    ctx = _HyperCtx(params.law, deformation_gradients(mesh, x), lam, mu)
    dFV = _direction_dF(mesh, V)
    dS_V = ctx.dS(dFV)
    m, Vol = mesh.tets.shape[0], mesh.volumes
    blocks = np.empty((m, 4, 3, 4, 3))
    dSVG = np.einsum("eab,eib->eia", dS_V, mesh.grads)  # dS_V g_i
    for j in range(4):
        for b in range(3):
            dF = _canonical_dF(mesh, j, b)
            d2S = ctx.d2S(dFV, dF)
            dfe = np.einsum("eab,eib->eia", dF, dSVG)
            dfe += np.einsum("eab,ecb,eic->eia", dFV, ctx.dS(dF), mesh.grads)
            dfe += np.einsum("eab,ecb,eic->eia", ctx.F, d2S, mesh.grads)
            blocks[:, :, :, j, b] = Vol[:, None, None] * dfe
    return _scatter(mesh, blocks)


def dKv_dx(mesh, x, params, V):
    """Spec-facing alias of stiffness_product_derivative."""
    return stiffness_product_derivative(mesh, x, params, V)


def dKv_dp(mesh, x, params, V, which):
    """(dK/dp) V for p in {'young', 'poisson'}, via the Lame chain rule."""
    J = lame_jacobian(params.young, params.poisson)
    col = {"young": 0, "poisson": 1}[which]
    dlam, dmu = J[0, col], J[1, col]
    K_dir = stiffness(mesh, x, params, lame=(dlam, dmu))
    return K_dir @ np.asarray(V, float)
