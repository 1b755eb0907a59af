"""Collision detection between tet bodies and convex obstacles.

Narrowphase is a min-norm GJK over the Minkowski difference; each detected
pair yields one contact at the witness point with an orthonormal frame
(t1, t2, n), n being the third column. Contact kinematics attach to mesh
nodes through temperature-smoothed support weights (softmax over vertex
argmin), which keeps the contact Jacobian H_c a smooth function of node
positions and gives the implicit-differentiation system a closed form.

Derivatives of the witness vector follow from the support fixed point
    F(x) = x - s1(x/|x|) + s2(-x/|x|) = 0,
where s_i is the (smoothed) argmin support of shape i; solving
dF/dx dx = -dF/dq per vertex q yields dx*/dq.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import MaxIterations, SingularSystem

DEFAULT_TAU_REL = 1e-4
DEFAULT_GJK_TOL = 1e-10
GJK_MAX_ITER = 128


# ---------------------------------------------------------------------------
# obstacles
# ---------------------------------------------------------------------------


class Obstacle:
    """Static convex obstacle with an exact support function."""

    friction = 0.5

    def support(self, d):
        """(point, tag) maximizing d . x; tag identifies the feature."""
        raise NotImplementedError

    def aabb(self):
        raise NotImplementedError

    def diameter(self):
        raise NotImplementedError

    def smooth_side(self, tau_rel):
        """Side context for derivative assembly (see _PolytopeSide)."""
        raise NotImplementedError


def _frame_from_axis(n):
    """Deterministic tangents for a unit axis.

    The helper axis is x unless the normal is nearly parallel to it; the
    0.9 threshold keeps the branch stable for the axis-aligned normals that
    planes and boxes produce (an exact-tie argmin rule would flip the frame
    under rounding noise).
    """
    e = np.array([1.0, 0.0, 0.0]) if abs(n[0]) <= 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(e, n)
    t1 /= np.linalg.norm(t1)
    return e, t1, np.cross(n, t1)


class BoxObstacle(Obstacle):
    """Oriented box: center, half extents, optional rotation (world = R local)."""

    def __init__(self, center, half_extents, rotation=None, friction=0.5):
        self.center = np.asarray(center, float)
        self.half = np.asarray(half_extents, float)
        self.R = np.eye(3) if rotation is None else np.asarray(rotation, float)
        self.friction = float(friction)
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float)
        self.corners = self.center + (signs * self.half) @ self.R.T

    def support(self, d):
        dots = self.corners @ d
        tag = int(np.argmax(dots))
        return self.corners[tag], tag

    def aabb(self):
        return self.corners.min(axis=0), self.corners.max(axis=0)

    def diameter(self):
        return 2.0 * float(np.linalg.norm(self.half))

    def smooth_side(self, tau_rel):
        return _PolytopeSide(self.corners, tau_rel * self.diameter(), node_ids=None)


class PlaneObstacle(BoxObstacle):
    """Half-space {x : n . (x - point) <= 0}, realized as a large box whose
    top face is the plane; `extent` must exceed the scene's lateral size.
    The narrowphase and derivatives use the exact infinite-extent limit."""

    def __init__(self, point, normal, friction=0.5, extent=100.0, depth=20.0):
        n = np.asarray(normal, float)
        n = n / np.linalg.norm(n)
        _, t1, t2 = _frame_from_axis(n)
        R = np.column_stack([t1, t2, n])
        center = np.asarray(point, float) - 0.5 * depth * n
        super().__init__(center, (extent, extent, 0.5 * depth), rotation=R, friction=friction)
        self.point = np.asarray(point, float)
        self.normal = n

    def smooth_side(self, tau_rel):
        return _HalfSpaceSide(self.point, self.normal)


class SphereObstacle(Obstacle):
    def __init__(self, center, radius, friction=0.5):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.friction = float(friction)

    def support(self, d):
        nd = np.linalg.norm(d)
        u = d / nd if nd > 0 else np.array([1.0, 0.0, 0.0])
        return self.center + self.radius * u, None

    def aabb(self):
        return self.center - self.radius, self.center + self.radius

    def diameter(self):
        return 2.0 * self.radius

    def smooth_side(self, tau_rel):
        return _SphereSide(self.center, self.radius)


# ---------------------------------------------------------------------------
# smoothed argmin-support sides
# ---------------------------------------------------------------------------


class _PolytopeSide:
    """Softmax-smoothed vertex argmin support of a point set.

    Weights are proportional to exp(-q_j . d / tau): they converge to the
    hard argmin as tau -> 0 and make the support a smooth function of both
    the direction and the vertices.
    """

    def __init__(self, verts, tau, node_ids=None):
        self.verts = np.asarray(verts, float)
        self.tau = float(tau)
        self.node_ids = node_ids  # global node indices or None for obstacles

    def eval(self, d):
        z = -(self.verts @ d) / self.tau
        z -= z.max()
        w = np.exp(z)
        w /= w.sum()
        s = w @ self.verts
        cov = (self.verts.T * w) @ self.verts - np.outer(s, s)
        return _SideEval(side=self, d=d, w=w, s=s, dS_dd=-cov / self.tau)


class _SphereSide:
    """Exact argmin support of a sphere: s(d) = c - r d."""

    def __init__(self, center, radius):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.node_ids = None

    def eval(self, d):
        P = np.eye(3) - np.outer(d, d)
        return _SideEval(
            side=self, d=d, w=None, s=self.center - self.radius * d, dS_dd=-self.radius * P
        )


class _HalfSpaceSide:
    """Infinite-extent limit of a flat obstacle side.

    The in-plane support covariance diverges, which drives the implicit
    system's inverse to d d^T exactly: the witness responds only along the
    (constant) plane normal.
    """

    node_ids = None

    def __init__(self, point, normal):
        self.point = np.asarray(point, float)
        self.normal = np.asarray(normal, float)

    def eval(self, d):
        return _SideEval(side=self, d=d, w=None, s=None, dS_dd=None, halfspace=True)


@dataclass
class _SideEval:
    side: object
    d: np.ndarray
    w: np.ndarray | None
    s: np.ndarray | None
    dS_dd: np.ndarray | None
    halfspace: bool = False

    def dF_dvertex(self, k, outer_sign):
        """Direct derivative of the fixed-point residual w.r.t. vertex k.

        outer_sign is -1 for side 1 (enters F as -s1) and +1 for side 2.
        """
        w, tau = self.w, self.side.tau
        block = w[k] * np.eye(3) + (w[k] / tau) * np.outer(self.s - self.side.verts[k], self.d)
        return outer_sign * block

    def dw_dd(self):
        """(4, 3) gradients of the weights w.r.t. the direction."""
        return (self.w[:, None] / self.side.tau) * (self.s[None, :] - self.side.verts)

    def dw_dvertex(self, n, k):
        """Gradient of weight n w.r.t. vertex k at fixed direction."""
        w, tau = self.w, self.side.tau
        return (w[n] * (w[k] - (1.0 if n == k else 0.0)) / tau) * self.d


# ---------------------------------------------------------------------------
# GJK
# ---------------------------------------------------------------------------


@dataclass
class Witness:
    """GJK result: separation vector x* = p1 - p2, closest points, and the
    supporting simplex (vertex tags + barycentric weights per side)."""

    x_star: np.ndarray
    distance: float
    colliding: bool
    p1: np.ndarray
    p2: np.ndarray
    bary: np.ndarray
    tags1: tuple
    tags2: tuple
    iterations: int = 0


def _min_norm_subset(P):
    """Min-norm point on the convex hull of up to 4 points.

    Returns (v, bary, kept_indices, is_interior_4simplex). Subsets are
    scanned smallest-first so ties keep the crispest witness feature.
    """
    k = P.shape[0]
    subsets = sorted(range(1, 2**k), key=lambda m: bin(m).count("1"))
    best = None
    for mask in subsets:
        idx = [i for i in range(k) if (mask >> i) & 1]
        S = P[idx]
        m = len(idx)
        if m == 1:
            lam = np.array([1.0])
            v = S[0]
        else:
            G = S @ S.T
            A = np.zeros((m + 1, m + 1))
            A[:m, :m] = G
            A[:m, m] = 1.0
            A[m, :m] = 1.0
            rhs = np.zeros(m + 1)
            rhs[m] = 1.0
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                continue
            lam = sol[:m]
            if not np.isfinite(lam).all():
                continue
            v = lam @ S
        if (lam >= -1e-12).all():
            d2 = float(v @ v)
            if best is None or d2 < best[0] * (1.0 - 1e-12) - 1e-300:
                lam = np.clip(lam, 0.0, None)
                lam = lam / lam.sum()
                best = (d2, v, lam, idx, m == 4)
    return best[1], best[2], best[3], best[4]


def _gjk_core(sup1, sup2, d0, tol, max_iter, scale):
    def support(d):
        a, ta = sup1(d)
        b, tb = sup2(-d)
        return a - b, a, b, ta, tb

    entries = [support(d0)]
    visited = {(entries[0][3], entries[0][4])}
    best = None
    for it in range(1, max_iter + 1):
        P = np.array([e[0] for e in entries])
        v, bary, idx, interior = _min_norm_subset(P)
        entries = [entries[i] for i in idx]
        nv = np.linalg.norm(v)
        if interior or nv <= 1e-14 * scale:
            return v, bary, entries, True, it
        if best is None or nv < best[0]:
            best = (nv, v, bary, list(entries))
        new = support(-v)
        # exact termination: support feature already in the simplex
        dup = any(
            (e[3] == new[3] and e[4] == new[4] and e[3] is not None and e[4] is not None)
            or np.linalg.norm(e[0] - new[0]) <= 1e-15 * scale
            for e in entries
        )
        gap = float(v @ v - v @ new[0])
        if dup or gap <= tol * max(nv, 1e-30):
            return v, bary, entries, False, it
        tag = (new[3], new[4])
        if tag[0] is not None and tag[1] is not None and tag in visited:
            # revisited a dropped support feature: the iteration is cycling
            # at flat-tie precision; return the best iterate
            nv_b, v_b, bary_b, entries_b = best
            return v_b, bary_b, entries_b, False, it
        visited.add(tag)
        entries.append(new)
    raise MaxIterations(f"GJK did not terminate in {max_iter} iterations")


def gjk(T1, T2, tol=DEFAULT_GJK_TOL, max_iter=GJK_MAX_ITER):
    """Distance query between two tetrahedra (vertex arrays (4, 3))."""
    V1 = np.asarray(T1, float)
    V2 = np.asarray(T2, float)

    def sup1(d):
        i = int(np.argmax(V1 @ d))
        return V1[i], i

    def sup2(d):
        i = int(np.argmax(V2 @ d))
        return V2[i], i

    return _gjk_pair(sup1, sup2, V1.mean(axis=0), V2.mean(axis=0), tol, max_iter)


def gjk_shape(T1, obstacle, tol=DEFAULT_GJK_TOL, max_iter=GJK_MAX_ITER):
    """Distance query between a tetrahedron and a convex obstacle.

    Planes and spheres take analytic shortcuts (GJK on the raw primitives
    either cycles on the infinite face or converges slowly on the smooth
    boundary); boxes run plain GJK.
    """
    V1 = np.asarray(T1, float)

    def sup1(d):
        i = int(np.argmax(V1 @ d))
        return V1[i], i

    if isinstance(obstacle, PlaneObstacle):
        return _plane_witness(V1, obstacle)
    if isinstance(obstacle, SphereObstacle):
        return _sphere_witness(V1, sup1, obstacle, tol, max_iter)
    lo, hi = obstacle.aabb()
    return _gjk_pair(sup1, obstacle.support, V1.mean(axis=0), 0.5 * (lo + hi), tol, max_iter)


def _plane_witness(V1, plane):
    # Half-space gaps are signed and never flagged colliding: the plane's
    # constant normal stays valid for shallow penetration (velocity-level
    # contact tolerates gap < 0 within one margin).
    n = plane.normal
    gaps = (V1 - plane.point) @ n
    k = int(np.argmin(gaps))
    g = float(gaps[k])
    p1 = V1[k]
    p2 = p1 - g * n
    return Witness(
        x_star=g * n,
        distance=g,
        colliding=False,
        p1=p1.copy(),
        p2=p2,
        bary=np.array([1.0]),
        tags1=(k,),
        tags2=(0,),
        iterations=1,
    )


def _sphere_witness(V1, sup1, sphere, tol, max_iter):
    def sup2(d):
        return sphere.center, 0

    w = _gjk_pair(sup1, sup2, V1.mean(axis=0), sphere.center, tol, max_iter)
    dist_c = np.linalg.norm(w.x_star) if not w.colliding else 0.0
    if w.colliding or dist_c <= sphere.radius:
        return Witness(
            x_star=np.zeros(3), distance=0.0, colliding=True, p1=w.p1, p2=w.p2,
            bary=w.bary, tags1=w.tags1, tags2=w.tags2, iterations=w.iterations,
        )
    d_hat = w.x_star / dist_c
    p2 = sphere.center + sphere.radius * d_hat
    return Witness(
        x_star=w.p1 - p2,
        distance=dist_c - sphere.radius,
        colliding=False,
        p1=w.p1,
        p2=p2,
        bary=w.bary,
        tags1=w.tags1,
        tags2=tuple(None for _ in w.tags2),
        iterations=w.iterations,
    )


def _gjk_pair(sup1, sup2, c1, c2, tol, max_iter):
    d0 = c1 - c2
    n0 = np.linalg.norm(d0)
    d0 = d0 / n0 if n0 > 1e-30 else np.array([1.0, 0.0, 0.0])
    scale = max(1.0, float(np.linalg.norm(c1)), float(np.linalg.norm(c2)))
    v, bary, entries, colliding, iters = _gjk_core(sup1, sup2, d0, tol, max_iter, scale)
    p1 = sum(b * e[1] for b, e in zip(bary, entries))
    p2 = sum(b * e[2] for b, e in zip(bary, entries))
    dist = 0.0 if colliding else float(np.linalg.norm(v))
    return Witness(
        x_star=np.asarray(v, float),
        distance=dist,
        colliding=bool(colliding),
        p1=np.asarray(p1, float),
        p2=np.asarray(p2, float),
        bary=np.asarray(bary, float),
        tags1=tuple(e[3] for e in entries),
        tags2=tuple(e[4] for e in entries),
        iterations=iters,
    )


# ---------------------------------------------------------------------------
# contacts
# ---------------------------------------------------------------------------


@dataclass
class CollisionBody:
    """A deformable body registered for detection: mesh, flat positions,
    node offset into the global DOF vector, friction, id."""

    mesh: object
    x: np.ndarray
    offset: int
    friction: float = 0.5
    body_id: int = 0


@dataclass
class ContactPoint:
    key: tuple
    point: np.ndarray
    normal: np.ndarray
    frame: np.ndarray  # columns (t1, t2, n)
    gap: float
    friction: float
    nodes1: np.ndarray        # global node ids of side-1 tet
    weights1: np.ndarray      # smoothed attachment weights over nodes1
    hard_weights1: np.ndarray
    nodes2: np.ndarray | None = None
    weights2: np.ndarray | None = None
    hard_weights2: np.ndarray | None = None
    degenerate: bool = False
    _ctx: object = None       # derivative context (sides, x*, J_F)


@dataclass
class _DerivCtx:
    eval1: _SideEval
    eval2: _SideEval
    x_star: np.ndarray
    ell: float
    d_hat: np.ndarray
    J_F: np.ndarray
    tangent_axis: np.ndarray  # helper axis e of the frame rule


@dataclass
class ContactSet:
    contacts: list
    H: sp.csr_matrix
    n_dof: int

    def __len__(self):
        return len(self.contacts)

    @property
    def n_contacts(self):
        return len(self.contacts)

    def frictions(self):
        return np.array([c.friction for c in self.contacts])


def _tet_aabbs(verts):
    return verts.min(axis=1), verts.max(axis=1)


def _rest_tet_diameters(mesh):
    """Per-tet bounding-box diagonal of the rest shape (smoothing scale).

    Rest-based so the temperature itself is not perturbation dependent.
    """
    cache = getattr(mesh, "_softdiff_tet_diam", None)
    if cache is None:
        v = mesh.rest_positions[mesh.tets]
        cache = np.linalg.norm(v.max(axis=1) - v.min(axis=1), axis=1)
        mesh._softdiff_tet_diam = cache
    return cache


def _refine_smoothed_root(side1, side2, x0, max_iter=40):
    """Newton-solve the smoothed support fixed point F(x) = 0 from the hard
    GJK witness.

    Contact geometry (direction, weights) is taken from this root so the
    detected quantities and their implicit derivatives describe the same
    smooth function of the vertex positions.
    """
    if isinstance(side2, _HalfSpaceSide):
        n = side2.normal
        e1 = side1.eval(n)
        gap = float(n @ (e1.s - side2.point))  # signed; may dip below zero
        return gap * n, n, e1, side2.eval(-n), None
    x = np.asarray(x0, float).copy()
    scale = max(float(np.linalg.norm(x0)), 1e-30)
    best = None
    for _ in range(max_iter):
        ell = np.linalg.norm(x)
        if ell < 1e-6 * scale:
            break  # root collapsed toward contact; keep best iterate
        d = x / ell
        e1 = side1.eval(d)
        e2 = side2.eval(-d)
        F = x - e1.s + e2.s
        nF = float(np.linalg.norm(F))
        P = np.eye(3) - np.outer(d, d)
        J = np.eye(3) - (e1.dS_dd + e2.dS_dd) @ (P / ell)
        if best is None or nF < best[0]:
            best = (nF, x.copy(), d, e1, e2, J)
        if nF <= 1e-13 * scale:
            return x, d, e1, e2, J
        try:
            x = x - np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("smoothed support fixed point is singular") from exc
    _, x, d, e1, e2, J = best
    return x, d, e1, e2, J


def _build_contact(w, side1, side2, key, nodes1, nodes2, friction):
    if w.colliding:
        return None, True  # degenerate: handled by caller
    x_star, n, eval1, eval2, J_F = _refine_smoothed_root(side1, side2, w.x_star)
    ell = float(n @ x_star)  # signed gap (negative only on half-spaces)
    e, t1, t2 = _frame_from_axis(n)
    ctx = _DerivCtx(eval1=eval1, eval2=eval2, x_star=x_star, ell=ell,
                    d_hat=n.copy(), J_F=J_F, tangent_axis=e)

    hard1 = np.zeros(4)
    for b, t in zip(w.bary, w.tags1):
        hard1[t] += b
    if nodes2 is not None:
        hard2 = np.zeros(4)
        for b, t in zip(w.bary, w.tags2):
            hard2[t] += b
        w2 = eval2.w
    else:
        hard2 = None
        w2 = None
    cp = ContactPoint(
        key=key,
        point=0.5 * (w.p1 + w.p2),
        normal=n,
        frame=np.column_stack([t1, t2, n]),
        gap=ell,
        friction=friction,
        nodes1=np.asarray(nodes1, np.int64),
        weights1=eval1.w.copy(),
        hard_weights1=hard1,
        nodes2=None if nodes2 is None else np.asarray(nodes2, np.int64),
        weights2=None if w2 is None else w2.copy(),
        hard_weights2=hard2,
        _ctx=ctx,
    )
    return cp, False


def _degenerate_contact(key, verts1, verts2, nodes1, nodes2, friction):
    c1 = verts1.mean(axis=0)
    c2 = verts2.mean(axis=0)
    d = c1 - c2
    nd = np.linalg.norm(d)
    n = d / nd if nd > 1e-30 else np.array([0.0, 0.0, 1.0])
    _, t1, t2 = _frame_from_axis(n)
    return ContactPoint(
        key=key,
        point=0.5 * (c1 + c2),
        normal=n,
        frame=np.column_stack([t1, t2, n]),
        gap=0.0,
        friction=friction,
        nodes1=np.asarray(nodes1, np.int64),
        weights1=np.full(4, 0.25),
        hard_weights1=np.full(4, 0.25),
        nodes2=None if nodes2 is None else np.asarray(nodes2, np.int64),
        weights2=None if nodes2 is None else np.full(4, 0.25),
        hard_weights2=None if nodes2 is None else np.full(4, 0.25),
        degenerate=True,
    )


def detect(bodies, obstacles, margin, n_dof, tau_rel=DEFAULT_TAU_REL,
           gjk_tol=DEFAULT_GJK_TOL):
    """Collision detection over all bodies and obstacles.

    Broadphase filters AABBs of surface-adjacent tets (expanded by margin);
    narrowphase runs GJK per candidate pair. Pairs with gap <= margin (or
    penetrating) emit one contact at the witness point. Contacts come out
    sorted by key, so the ordering is deterministic.
    """
    contacts = []
    verts_of = {}
    for body in bodies:
        xn = np.asarray(body.x, float).reshape(-1, 3)
        verts_of[body.body_id] = xn[body.mesh.tets]

    for body in bodies:
        surf = body.mesh.surface_tets
        verts = verts_of[body.body_id][surf]
        taus = tau_rel * _rest_tet_diameters(body.mesh)
        lo, hi = _tet_aabbs(verts)
        # body vs obstacles
        for oi, obs in enumerate(obstacles):
            olo, ohi = obs.aabb()
            hit = np.nonzero(
                (lo <= ohi + margin).all(axis=1) & (hi >= olo - margin).all(axis=1)
            )[0]
            for si in hit:
                e = int(surf[si])
                w = gjk_shape(verts[si], obs, tol=gjk_tol)
                if not w.colliding and w.distance > margin:
                    continue
                key = ("b", body.body_id, e, "o", oi, -1)
                nodes1 = body.mesh.tets[e] + body.offset // 3
                if w.colliding:
                    contacts.append(
                        _degenerate_contact(key, verts[si], obs.corners if hasattr(obs, "corners")
                                            else np.array([obs.center]), nodes1, None, obs.friction)
                    )
                    continue
                cp, _ = _build_contact(
                    w, _PolytopeSide(verts[si], taus[e], nodes1), obs.smooth_side(tau_rel),
                    key, nodes1, None, obs.friction,
                )
                contacts.append(cp)

    # body-body (including self) pairs
    for bi, body1 in enumerate(bodies):
        for bj in range(bi, len(bodies)):
            body2 = bodies[bj]
            same = bi == bj
            surf1 = body1.mesh.surface_tets
            surf2 = body2.mesh.surface_tets
            v1 = verts_of[body1.body_id][surf1]
            v2 = verts_of[body2.body_id][surf2]
            lo1, hi1 = _tet_aabbs(v1)
            lo2, hi2 = _tet_aabbs(v2)
            overlap = (lo1[:, None, :] <= hi2[None, :, :] + margin).all(axis=2) & (
                hi1[:, None, :] >= lo2[None, :, :] - margin
            ).all(axis=2)
            for si, sj in zip(*np.nonzero(overlap)):
                e1, e2 = int(surf1[si]), int(surf2[sj])
                if same:
                    if e2 <= e1:
                        continue
                    if set(body1.mesh.tets[e1]) & set(body2.mesh.tets[e2]):
                        continue  # topologically adjacent
                w = gjk(v1[si], v2[sj], tol=gjk_tol)
                if not w.colliding and w.distance > margin:
                    continue
                key = ("b", body1.body_id, e1, "b", body2.body_id, e2)
                nodes1 = body1.mesh.tets[e1] + body1.offset // 3
                nodes2 = body2.mesh.tets[e2] + body2.offset // 3
                mu = min(body1.friction, body2.friction)
                if w.colliding:
                    contacts.append(
                        _degenerate_contact(key, v1[si], v2[sj], nodes1, nodes2, mu)
                    )
                    continue
                tau1 = tau_rel * _rest_tet_diameters(body1.mesh)[e1]
                tau2 = tau_rel * _rest_tet_diameters(body2.mesh)[e2]
                cp, _ = _build_contact(
                    w,
                    _PolytopeSide(v1[si], tau1, nodes1),
                    _PolytopeSide(v2[sj], tau2, nodes2),
                    key, nodes1, nodes2, mu,
                )
                contacts.append(cp)

    contacts.sort(key=lambda c: c.key)
    H = _assemble_H(contacts, n_dof)
    return ContactSet(contacts=contacts, H=H, n_dof=n_dof)


def _assemble_H(contacts, n_dof):
    rows, cols, vals = [], [], []
    for ci, c in enumerate(contacts):
        for sign, nodes, weights in (
            (1.0, c.nodes1, c.weights1),
            (-1.0, c.nodes2, c.weights2),
        ):
            if nodes is None:
                continue
            for node, wgt in zip(nodes, weights):
                for alpha in range(3):
                    for beta in range(3):
                        rows.append(3 * ci + alpha)
                        cols.append(3 * node + beta)
                        vals.append(sign * wgt * c.frame[beta, alpha])
    return sp.coo_matrix((vals, (rows, cols)), shape=(3 * len(contacts), n_dof)).tocsr()


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------


@dataclass
class ContactDerivatives:
    """Derivatives of one contact's geometry w.r.t. the movable vertices.

    sources: list of (side, local_vertex, global_node); all arrays are
    indexed in the same order, blocks are 3x3 (d quantity / d vertex).
    """

    sources: list
    dxstar: list
    dnormal: list
    dpoint: list
    point_smooth: np.ndarray


def _movable_sources(contact):
    ctx = contact._ctx
    out = []
    if ctx.eval1.side.node_ids is not None:
        for k, gn in enumerate(ctx.eval1.side.node_ids):
            out.append((1, k, int(gn)))
    if ctx.eval2.side.node_ids is not None:
        for k, gn in enumerate(ctx.eval2.side.node_ids):
            out.append((2, k, int(gn)))
    return out


def _dxstar_blocks(contact):
    """Per movable vertex: dx*/dq (3x3) from the implicit fixed point."""
    ctx = contact._ctx
    if ctx.J_F is None:
        J_inv = np.outer(ctx.d_hat, ctx.d_hat)
    else:
        try:
            J_inv = np.linalg.inv(ctx.J_F)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(
                f"support fixed-point Jacobian singular at {contact.key}"
            ) from exc
    sources = _movable_sources(contact)
    blocks = []
    for side, k, _ in sources:
        ev = ctx.eval1 if side == 1 else ctx.eval2
        dF = ev.dF_dvertex(k, -1.0 if side == 1 else 1.0)
        blocks.append(-J_inv @ dF)
    return sources, blocks


def collision_derivatives(contact):
    """Witness, normal, and contact-point derivatives of one contact."""
    ctx = contact._ctx
    if ctx is None:
        raise SingularSystem(f"contact {contact.key} is degenerate (penetrating)")
    sources, dxstar = _dxstar_blocks(contact)
    ell, d_hat = ctx.ell, ctx.d_hat
    P = np.eye(3) - np.outer(d_hat, d_hat)
    Pl = P / ell
    dnormal = [Pl @ blk for blk in dxstar]
    dpoint = []
    half2 = ctx.eval2.halfspace
    for (side, k, _), blk in zip(sources, dxstar):
        if half2:
            chain = -0.5 * blk + 0.5 * ctx.eval1.dS_dd @ Pl @ blk  # c = s1 - x*/2
        else:
            chain = 0.5 * (ctx.eval1.dS_dd - ctx.eval2.dS_dd) @ Pl @ blk
        direct = np.zeros((3, 3))
        ev = ctx.eval1 if side == 1 else ctx.eval2
        if ev.w is not None:
            w, tau = ev.w, ev.side.tau
            direct = w[k] * np.eye(3) + (w[k] / tau) * np.outer(ev.s - ev.side.verts[k], ev.d)
            direct = direct if half2 and side == 1 else 0.5 * direct
        dpoint.append(direct + chain)
    if half2:
        c_smooth = ctx.eval1.s - 0.5 * ctx.x_star
    else:
        c_smooth = 0.5 * (ctx.eval1.s + ctx.eval2.s)
    return ContactDerivatives(
        sources=sources, dxstar=dxstar, dnormal=dnormal, dpoint=dpoint,
        point_smooth=c_smooth,
    )


def _frame_derivative_ops(contact):
    """Operators mapping dn (3,) to dt1, dt2 (3x3 each, applied to dn)."""
    ctx = contact._ctx
    n = ctx.d_hat
    e = ctx.tangent_axis
    u = np.cross(e, n)
    nu = np.linalg.norm(u)
    t1 = u / nu
    Mt1 = (np.eye(3) - np.outer(t1, t1)) @ _cross(e) / nu
    Mt2 = -_cross(t1) + _cross(n) @ Mt1
    return Mt1, Mt2


def _cross(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _weight_derivatives(contact, sources, dxstar):
    """dw/dq for both sides' attachment weights.

    Returns {1: (4, n_src, 3), 2: ...}: gradient of each weight w.r.t. each
    movable source vertex.
    """
    ctx = contact._ctx
    Pl = (np.eye(3) - np.outer(ctx.d_hat, ctx.d_hat)) / ctx.ell
    out = {}
    for side_no, ev, dsign in ((1, ctx.eval1, 1.0), (2, ctx.eval2, -1.0)):
        if ev.w is None or ev.side.node_ids is None:
            continue
        nw = len(ev.w)
        grads = np.zeros((nw, len(sources), 3))
        dwdd = ev.dw_dd()  # (nw, 3), w.r.t. this side's direction input
        for si, ((src_side, k, _), blk) in enumerate(zip(sources, dxstar)):
            # chain through the shared direction d_hat (side 2 sees -d_hat)
            chain = dsign * (dwdd @ (Pl @ blk))  # (nw, 3)
            grads[:, si, :] += chain
            if src_side == side_no:
                for nloc in range(nw):
                    grads[nloc, si, :] += ev.dw_dvertex(nloc, k)
        out[side_no] = grads
    return out


def contact_jacobian_vec_derivative(contact_set, vec, which):
    """Derivative of the contact Jacobian applied to a fixed vector.

    which='Ht_lam': vec has 3*n_c entries; returns d(H^T vec)/dx (n_dof sq).
    which='Hv':     vec has n_dof entries;  returns d(H vec)/dx (3n_c x n_dof).
    Degenerate (penetrating) contacts contribute zero.
    """
    n_dof = contact_set.n_dof
    rows, cols, vals = [], [], []
    vec = np.asarray(vec, float).ravel()

    for ci, c in enumerate(contact_set.contacts):
        if c._ctx is None:
            continue
        sources, dxstar = _dxstar_blocks(c)
        ctx = c._ctx
        Pl = (np.eye(3) - np.outer(ctx.d_hat, ctx.d_hat)) / ctx.ell
        Mt1, Mt2 = _frame_derivative_ops(c)
        dn = [Pl @ blk for blk in dxstar]
        dt1 = [Mt1 @ b for b in dn]
        dt2 = [Mt2 @ b for b in dn]
        wgrads = _weight_derivatives(c, sources, dxstar)
        t1, t2, n = c.frame[:, 0], c.frame[:, 1], c.frame[:, 2]

        if which == "Ht_lam":
            lam = vec[3 * ci : 3 * ci + 3]
            if not lam.any():
                continue
            Rlam = c.frame @ lam
            dRlam = [lam[0] * a + lam[1] * b2 + lam[2] * b3
                     for a, b2, b3 in zip(dt1, dt2, dn)]
            for side_no, nodes, weights, sgn in (
                (1, c.nodes1, c.weights1, 1.0),
                (2, c.nodes2, c.weights2, -1.0),
            ):
                if nodes is None:
                    continue
                grads = wgrads[side_no]
                for nloc, gnode in enumerate(nodes):
                    for si, (_, _, src_node) in enumerate(sources):
                        block = sgn * (
                            np.outer(Rlam, grads[nloc, si]) + weights[nloc] * dRlam[si]
                        )
                        for a in range(3):
                            for bcol in range(3):
                                rows.append(3 * gnode + a)
                                cols.append(3 * src_node + bcol)
                                vals.append(block[a, bcol])
        elif which == "Hv":
            vrel = np.zeros(3)
            for nodes, weights, sgn in (
                (c.nodes1, c.weights1, 1.0),
                (c.nodes2, c.weights2, -1.0),
            ):
                if nodes is None:
                    continue
                vn = vec.reshape(-1, 3)[nodes]
                vrel += sgn * (weights @ vn)
            axes_d = [dt1, dt2, dn]
            for alpha, axis in enumerate((t1, t2, n)):
                for si, (_, _, src_node) in enumerate(sources):
                    row_grad = axes_d[alpha][si].T @ vrel  # d axis . vrel
                    for side_no, nodes, sgn in ((1, c.nodes1, 1.0), (2, c.nodes2, -1.0)):
                        if nodes is None:
                            continue
                        vn = vec.reshape(-1, 3)[nodes]
                        grads = wgrads[side_no]
                        row_grad = row_grad + sgn * (vn.T @ grads[:, si, :]).T @ axis
                    for bcol in range(3):
                        rows.append(3 * ci + alpha)
                        cols.append(3 * src_node + bcol)
                        vals.append(row_grad[bcol])
        else:
            raise ValueError(f"unknown side {which!r}")

    shape = (n_dof, n_dof) if which == "Ht_lam" else (3 * len(contact_set.contacts), n_dof)
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
