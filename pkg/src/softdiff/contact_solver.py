"""Frictional-contact NCP on the Delassus reduction.

The problem per step, in each contact's local frame (t1, t2, n):
    K_mu ∋ lam  ⊥  sigma + Gamma_mu(sigma) ∈ K_mu*,   sigma = G lam + g,
with Gamma_mu(sigma) = (0, 0, mu ||sigma_T||) the De Saxce correction.
lam carries force units; G = h H_c A^{-1} H_c^T absorbs exactly one factor
of the time step so that sigma is the contact-point velocity.

Two solvers: a projected Gauss-Seidel sweep and an ADMM splitting with the
De Saxce term refreshed in the consensus step. Both accept a solution only
at NCP residual <= tol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence

BREAKING = "breaking"
STICKING = "sticking"
SLIDING = "sliding"

DEFAULT_PGS_MAX_ITER = 2000
DEFAULT_ADMM_MAX_ITER = 500
DEFAULT_TOL = 1e-10
DEFAULT_EPS_MODE = 1e-6


@dataclass
class DelassusProblem:
    """G (dense 3nc x 3nc, PSD), free contact velocity g, friction per
    contact; Z = A^{-1} H_c^T is kept for reuse by corrections and
    sensitivities."""

    G: np.ndarray
    g: np.ndarray
    mus: np.ndarray
    h: float = 1.0
    Z: np.ndarray | None = None

    @property
    def n_contacts(self):
        return self.g.size // 3


@dataclass
class NcpSolution:
    lam: np.ndarray
    sigma: np.ndarray
    modes: list
    ambiguous: np.ndarray
    residual: float
    iterations: int
    converged: bool
    solver: str = ""


def build_delassus(assembly, H_c, v_free, delta_a):
    """Delassus problem of one step: G = h H A^{-1} H^T, g = H (v_free + delta_a)."""
    n_rows = H_c.shape[0]
    Ht = H_c.T.toarray() if hasattr(H_c.T, "toarray") else np.asarray(H_c.T)
    Z = np.empty_like(Ht)
    for j in range(n_rows):
        Z[:, j] = assembly.solve(Ht[:, j])
    G = assembly.h * (H_c @ Z)
    G = 0.5 * (G + G.T)
    g = H_c @ (v_free + delta_a)
    return G, g, Z


def project_cone(lam3, mu):
    """Euclidean projection onto the friction cone ||lam_T|| <= mu lam_N."""
    return project_cone_case(lam3, mu)[0]


def project_cone_case(lam3, mu):
    """(projection, case): case is the mode the projection lands in
    (sticking = interior/unchanged, breaking = polar apex, sliding = cone
    boundary)."""
    lt = float(np.hypot(lam3[0], lam3[1]))
    ln = float(lam3[2])
    if lt <= mu * ln:
        return np.array(lam3, float), STICKING
    if mu * lt <= -ln:
        return np.zeros(3), BREAKING
    a = (mu * lt + ln) / (mu * mu + 1.0)
    if lt > 0.0:
        scale = mu * a / lt
        return np.array([scale * lam3[0], scale * lam3[1], a]), SLIDING
    return np.array([0.0, 0.0, a]), SLIDING


def de_saxce(sigma, mus):
    """sigma + Gamma_mu(sigma) per contact."""
    out = np.array(sigma, float)
    for i, mu in enumerate(mus):
        st = np.hypot(out[3 * i], out[3 * i + 1])
        out[3 * i + 2] += mu * st
    return out


def ncp_residual(lam, sigma, mus):
    """Max violation over contacts of primal cone membership, dual-cone
    membership of the De Saxce-corrected velocity, and their
    complementarity, normalized by the problem scale."""
    lam = np.asarray(lam, float)
    sigma = np.asarray(sigma, float)
    scale = max(1.0, np.abs(lam).max(initial=0.0), np.abs(sigma).max(initial=0.0))
    worst = 0.0
    for i, mu in enumerate(mus):
        l3 = lam[3 * i : 3 * i + 3]
        s3 = sigma[3 * i : 3 * i + 3]
        y = np.array([s3[0], s3[1], s3[2] + mu * np.hypot(s3[0], s3[1])])
        primal = max(0.0, np.hypot(l3[0], l3[1]) - mu * l3[2], -l3[2])
        dual = max(0.0, mu * np.hypot(y[0], y[1]) - y[2], -y[2] if mu == 0.0 else 0.0)
        comp = abs(float(l3 @ y)) / scale
        worst = max(worst, primal / scale, dual / scale, comp)
    return worst


def solve_ncp_pgs(problem, tol=DEFAULT_TOL, max_iter=DEFAULT_PGS_MAX_ITER, lam0=None):
    """Per-contact projected Gauss-Seidel sweeps."""
    G, g, mus = problem.G, problem.g, problem.mus
    nc = problem.n_contacts
    lam = np.zeros(3 * nc) if lam0 is None else np.array(lam0, float)
    if nc == 0:
        return NcpSolution(lam, g.copy(), [], np.zeros(0, bool), 0.0, 0, True, "pgs")
    diag = np.diagonal(G).copy()
    floor = 1e-14 * max(diag.max(initial=0.0), 1e-300)
    diag = np.maximum(diag, floor)
    best = None
    for sweep in range(1, max_iter + 1):
        for i in range(nc):
            b = 3 * i
            sig_n = G[b + 2] @ lam + g[b + 2]
            lam[b + 2] = max(0.0, lam[b + 2] - sig_n / diag[b + 2])
            sig_t = G[b : b + 2] @ lam + g[b : b + 2]
            r = max(diag[b], diag[b + 1])
            lam[b : b + 2] -= sig_t / r
            cap = mus[i] * lam[b + 2]
            lt = np.hypot(lam[b], lam[b + 1])
            if lt > cap:
                lam[b : b + 2] *= 0.0 if lt == 0.0 else cap / lt
        sigma = G @ lam + g
        res = ncp_residual(lam, sigma, mus)
        if best is None or res < best[0]:
            best = (res, lam.copy(), sigma.copy())
        if res <= tol:
            modes, amb = classify_modes(lam, sigma, mus)
            return NcpSolution(lam, sigma, modes, amb, res, sweep, True, "pgs")
    raise NoConvergence(
        f"PGS residual {best[0]:g} after {max_iter} sweeps (tol {tol:g})",
        best=best[1], residual=best[0], iterations=max_iter,
    )


def _fixed_mode_system(G, g, mus, lam, modes):
    """Residual R(lam) and Jacobian dR/dlam of the fixed-mode KKT equations.

    breaking: lam = 0; sticking: sigma = 0; sliding: sigma_N = 0 and
    lam_T + mu lam_N sigma_T/||sigma_T|| = 0.
    """
    n = lam.size
    sigma = G @ lam + g
    R = np.zeros(n)
    J = np.zeros((n, n))
    for i, mode in enumerate(modes):
        b = 3 * i
        if mode == BREAKING:
            R[b : b + 3] = lam[b : b + 3]
            J[b : b + 3, b : b + 3] = np.eye(3)
        elif mode == STICKING:
            R[b : b + 3] = sigma[b : b + 3]
            J[b : b + 3, :] = G[b : b + 3, :]
        else:  # sliding
            st = sigma[b : b + 2]
            nst = np.linalg.norm(st)
            if nst < 1e-300:
                return None, None  # slip direction undefined
            shat = st / nst
            mu = mus[i]
            R[b : b + 2] = lam[b : b + 2] + mu * lam[b + 2] * shat
            R[b + 2] = sigma[b + 2]
            P = (np.eye(2) - np.outer(shat, shat)) / nst
            J[b : b + 2, :] = mu * lam[b + 2] * (P @ G[b : b + 2, :])
            J[b : b + 2, b : b + 2] += np.eye(2)
            J[b : b + 2, b + 2] += mu * shat
            J[b + 2, :] = G[b + 2, :]
    return R, J


def _mode_newton_polish(G, g, mus, lam0, tol, iters=20, projection_modes=None):
    """Semismooth endgame: Newton on the fixed-mode KKT equations from an
    approximate iterate; returns a polished lam or None.

    The mode pattern guessed from a loose iterate can be wrong for grazing
    contacts, so a small ladder of variants is tried (the cone-projection
    cases of the ADMM iterate first, when available); any candidate is
    accepted only if the full NCP residual passes tol.
    """
    lam0 = np.asarray(lam0, float)
    sigma0 = G @ lam0 + g
    base, _ = classify_modes(lam0, sigma0, mus, eps_mode=1e-3)
    scale_n = max(lam0[2::3].max(initial=0.0), 1e-300)
    scale_s = max(sigma0[2::3].max(initial=0.0), 1e-300)
    variants = []
    if projection_modes is not None:
        variants.append(list(projection_modes))
    if base not in variants:
        variants.append(base)
    demoted = [
        BREAKING if (m != BREAKING and lam0[3 * i + 2] < 1e-2 * scale_n) else m
        for i, m in enumerate(base)
    ]
    if demoted not in variants:
        variants.append(demoted)
    # a clearly separating velocity marks a breaking contact even when the
    # loose iterate still carries force on it
    by_sigma = [
        BREAKING if sigma0[3 * i + 2] > 1e-2 * scale_s else m
        for i, m in enumerate(base)
    ]
    if by_sigma not in variants:
        variants.append(by_sigma)
    stuck = [STICKING if m == SLIDING else m for m in demoted]
    if stuck not in variants:
        variants.append(stuck)

    for modes in variants:
        lam = lam0.copy()
        best_lam, best_r = None, np.inf
        for _ in range(iters):
            R, J = _fixed_mode_system(G, g, mus, lam, modes)
            if R is None:
                break
            r = np.linalg.norm(R, np.inf)
            if r < best_r:
                best_r, best_lam = r, lam.copy()
            if r > 10.0 * best_r:
                break  # diverging
            # lstsq: hyperstatic contact makes the sticking block singular;
            # candidates are only accepted on a full NCP residual pass
            step, *_ = np.linalg.lstsq(J, R, rcond=None)
            if not np.isfinite(step).all() or np.abs(step).max() > 1e3 * (1.0 + np.abs(lam).max()):
                break
            if np.abs(step).max() <= 1e-15 * (1.0 + np.abs(lam).max()):
                break  # stalled at rounding floor
            lam = lam - step
        if best_lam is not None and ncp_residual(best_lam, G @ best_lam + g, mus) <= tol:
            return best_lam
    return None


def _power_iteration_eigmax(G, iters=20):
    v = np.ones(G.shape[0]) / np.sqrt(G.shape[0])
    for _ in range(iters):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(v @ G @ v)


def solve_ncp_admm(problem, tol=DEFAULT_TOL, max_iter=DEFAULT_ADMM_MAX_ITER,
                   rho0=None, lam0=None):
    """ADMM with cone projection inside a De Saxce fixed point.

    The outer (Cadoux) loop freezes Gamma(sigma) as a constant shift of g,
    making the inner problem a convex cone-constrained QP solved by ADMM
    with adaptive penalty; the shift is refreshed from the consensus
    iterate until the true NCP residual passes. max_iter caps the total
    inner iteration count.
    """
    G, g, mus = problem.G, problem.g, problem.mus
    nc = problem.n_contacts
    if nc == 0:
        return NcpSolution(np.zeros(0), g.copy(), [], np.zeros(0, bool), 0.0, 0, True, "admm")
    n = 3 * nc
    eig_max = max(_power_iteration_eigmax(G), 1e-12)
    rho = float(rho0) if rho0 is not None else max(1e-10, 0.1 * eig_max)
    x = np.zeros(n) if lam0 is None else np.array(lam0, float)
    z = x.copy()
    u = np.zeros(n)
    ident = np.eye(n)
    inv = np.linalg.inv(G + rho * ident)
    shift = np.zeros(n)  # frozen Gamma(sigma) term
    best = None
    used = 0
    prev_res = np.inf
    stalls = 0
    while used < max_iter:
        sigma_z = G @ z + g
        # average the fixed-point update once the outer residual stalls
        # (the plain De Saxce iteration can 2-cycle at large friction)
        damp = 0.5 if stalls >= 3 else 1.0
        shift = (1.0 - damp) * shift + damp * (de_saxce(sigma_z, mus) - sigma_z)
        gtil = g + shift
        inner_scale = max(1.0, np.abs(z).max(initial=0.0))
        # loose inner solves early on; tighten as the outer residual falls
        inner_tol = max(0.05 * tol, min(1e-6, 0.03 * prev_res)) * inner_scale
        for _ in range(min(100, max_iter - used)):
            used += 1
            x = inv @ (rho * (z - u) - gtil)
            z_prev = z.copy()
            xr = 1.6 * x + (1.0 - 1.6) * z_prev  # over-relaxation
            z = np.empty(n)
            xu = xr + u
            for i in range(nc):
                z[3 * i : 3 * i + 3] = project_cone(xu[3 * i : 3 * i + 3], mus[i])
            u += xr - z
            prim = np.linalg.norm(x - z, np.inf)
            dual = rho * np.linalg.norm(z - z_prev, np.inf)
            if prim > 10.0 * dual:
                rho *= 2.0
                u /= 2.0
                inv = np.linalg.inv(G + rho * ident)
            elif dual > 10.0 * prim and rho > 1e-12:
                rho /= 2.0
                u *= 2.0
                inv = np.linalg.inv(G + rho * ident)
            if max(prim, dual) <= inner_tol:
                break
        sigma = G @ z + g
        res = ncp_residual(z, sigma, mus)
        if best is None or res < best[0]:
            best = (res, z.copy(), sigma.copy())
        if res <= tol:
            modes, amb = classify_modes(z, sigma, mus)
            return NcpSolution(z, sigma, modes, amb, res, used, True, "admm")
        if res < 1e-2:
            polished = _mode_newton_polish(G, g, mus, z, tol)
            if polished is not None:
                sigma = G @ polished + g
                res = ncp_residual(polished, sigma, mus)
                modes, amb = classify_modes(polished, sigma, mus)
                return NcpSolution(polished, sigma, modes, amb, res, used, True, "admm")
        # compare against the best seen: a 2-cycle "improves" every other
        # outer pass and would otherwise reset the counter
        stalls = 0 if res < 0.97 * best[0] else stalls + 1
        prev_res = res
    raise NoConvergence(
        f"ADMM residual {best[0]:g} after {max_iter} iterations (tol {tol:g})",
        best=best[1], residual=best[0], iterations=max_iter,
    )


def classify_modes(lam, sigma, mus, eps_mode=DEFAULT_EPS_MODE):
    """Per-contact mode from the force: breaking (zero), sticking (interior),
    sliding (cone boundary). Contacts fitting no bucket are flagged
    ambiguous and treated as sliding downstream."""
    lam = np.asarray(lam, float)
    nc = len(mus)
    scale = max(np.abs(lam).max(initial=0.0), 1e-300)
    modes = []
    ambiguous = np.zeros(nc, dtype=bool)
    for i, mu in enumerate(mus):
        ln = lam[3 * i + 2]
        lt = np.hypot(lam[3 * i], lam[3 * i + 1])
        if ln <= eps_mode * scale:
            modes.append(BREAKING)
        elif lt < mu * ln * (1.0 - eps_mode):
            modes.append(STICKING)
        elif lt <= mu * ln * (1.0 + eps_mode):
            modes.append(SLIDING)
        else:
            modes.append(SLIDING)
            ambiguous[i] = True
    return modes, ambiguous
