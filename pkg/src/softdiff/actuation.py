"""Actuation Jacobians H_a for cable, pneumatic, and servo actuators.

Rows of H_a (n_a x 3n) hold the force direction per unit actuation effort:
cables pull adjacent path nodes together along the polyline, pneumatic
pressure pushes cavity vertices along one third of the incident oriented
triangle areas, and servos apply a constant unit direction at one node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateSegment, IndexOutOfRange

MIN_SEGMENT_LENGTH = 1e-12

CABLE = "cable"
PNEUMATIC = "pneumatic"
SERVO = "servo"


@dataclass
class ActuatorSpec:
    """One actuator row.

    kind='cable': nodes is the ordered path (first node is the pulled end);
    kind='pneumatic': triangles is the oriented cavity surface;
    kind='servo': node + unit direction.
    bounds are (lambda_min, lambda_max) used by the control tasks.
    """

    kind: str
    nodes: tuple = ()
    triangles: tuple = ()
    node: int = -1
    direction: tuple = (0.0, 0.0, 1.0)
    bounds: tuple = (-np.inf, np.inf)
    name: str = ""

    def __post_init__(self):
        if self.kind not in (CABLE, PNEUMATIC, SERVO):
            raise ValueError(f"unknown actuator kind {self.kind!r}")
        if self.kind == CABLE and len(self.nodes) < 2:
            raise ValueError("cable path needs at least two nodes")
        if self.kind == PNEUMATIC and len(self.triangles) == 0:
            raise ValueError("pneumatic cavity needs at least one triangle")
        if self.kind == SERVO:
            d = np.asarray(self.direction, float)
            if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise ValueError("servo direction must be unit length")
        if not self.bounds[0] <= self.bounds[1]:
            raise ValueError("bounds must satisfy min <= max")

    def node_indices(self):
        if self.kind == CABLE:
            return list(self.nodes)
        if self.kind == PNEUMATIC:
            return sorted({i for tri in self.triangles for i in tri})
        return [self.node]


def _check_indices(spec, n_nodes):
    for i in spec.node_indices():
        if i < 0 or i >= n_nodes:
            raise IndexOutOfRange(f"actuator references node {i} outside [0, {n_nodes})")


def _segments(spec, xn):
    """(a, b, u, length) per cable segment; raises on degenerate segments."""
    out = []
    for a, b in zip(spec.nodes[:-1], spec.nodes[1:]):
        d = xn[b] - xn[a]
        ell = np.linalg.norm(d)
        if ell <= MIN_SEGMENT_LENGTH:
            raise DegenerateSegment(f"cable segment {a}-{b} has length {ell:g}")
        out.append((a, b, d / ell, ell))
    return out


def actuation_jacobian(specs, x):
    """Sparse H_a (n_a x 3n) at positions x (flat 3n)."""
    x = np.asarray(x, float).ravel()
    xn = x.reshape(-1, 3)
    n = xn.shape[0]
    rows, cols, vals = [], [], []

    def add(r, node, vec):
        rows.extend([r, r, r])
        cols.extend([3 * node, 3 * node + 1, 3 * node + 2])
        vals.extend(vec)

    for r, spec in enumerate(specs):
        _check_indices(spec, n)
        if spec.kind == CABLE:
            for a, b, u, _ in _segments(spec, xn):
                add(r, a, u)
                add(r, b, -u)
        elif spec.kind == PNEUMATIC:
            for tri in spec.triangles:
                a, b, c = tri
                area = 0.5 * np.cross(xn[b] - xn[a], xn[c] - xn[a])
                for node in tri:
                    add(r, node, area / 3.0)
        else:
            add(r, spec.node, np.asarray(spec.direction, float))
    H = sp.coo_matrix((vals, (rows, cols)), shape=(len(specs), 3 * n))
    return H.tocsr()


def _cross_matrix(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def actuation_force_derivative(specs, x, lam):
    """d(H_a^T lam)/dx as sparse 3n x 3n (servo rows contribute zero)."""
    x = np.asarray(x, float).ravel()
    xn = x.reshape(-1, 3)
    n = xn.shape[0]
    rows, cols, vals = [], [], []

    def add_block(ni, nj, block):
        for a in range(3):
            for b in range(3):
                rows.append(3 * ni + a)
                cols.append(3 * nj + b)
                vals.append(block[a, b])

    for r, spec in enumerate(specs):
        _check_indices(spec, n)
        lr = float(lam[r])
        if lr == 0.0:
            continue
        if spec.kind == CABLE:
            for a, b, u, ell in _segments(spec, xn):
                # force on a is lam*u, on b is -lam*u; d u/d x_b = P/ell
                P = (np.eye(3) - np.outer(u, u)) / ell
                add_block(a, a, -lr * P)
                add_block(a, b, lr * P)
                add_block(b, a, lr * P)
                add_block(b, b, -lr * P)
        elif spec.kind == PNEUMATIC:
            for tri in spec.triangles:
                a, b, c = tri
                dA = {
                    a: -0.5 * _cross_matrix(xn[b] - xn[c]),
                    b: -0.5 * _cross_matrix(xn[c] - xn[a]),
                    c: -0.5 * _cross_matrix(xn[a] - xn[b]),
                }
                for target in tri:
                    for src, mat in dA.items():
                        add_block(target, src, (lr / 3.0) * mat)
    out = sp.coo_matrix((vals, (rows, cols)), shape=(3 * n, 3 * n))
    return out.tocsr()


def actuation_velocity_derivative(specs, x, v):
    """d(H_a v)/dx as sparse n_a x 3n for a fixed vector v."""
    x = np.asarray(x, float).ravel()
    xn = x.reshape(-1, 3)
    vn = np.asarray(v, float).reshape(-1, 3)
    n = xn.shape[0]
    rows, cols, vals = [], [], []

    def add(r, node, vec):
        for a in range(3):
            rows.append(r)
            cols.append(3 * node + a)
            vals.append(vec[a])

    for r, spec in enumerate(specs):
        _check_indices(spec, n)
        if spec.kind == CABLE:
            for a, b, u, ell in _segments(spec, xn):
                P = (np.eye(3) - np.outer(u, u)) / ell
                g = P @ (vn[a] - vn[b])  # row contribution is u.(v_a - v_b)
                add(r, a, -g)
                add(r, b, g)
        elif spec.kind == PNEUMATIC:
            for tri in spec.triangles:
                a, b, c = tri
                vsum = (vn[a] + vn[b] + vn[c]) / 3.0
                for src, mat in (
                    (a, -0.5 * _cross_matrix(xn[b] - xn[c])),
                    (b, -0.5 * _cross_matrix(xn[c] - xn[a])),
                    (c, -0.5 * _cross_matrix(xn[a] - xn[b])),
                ):
                    add(r, src, mat.T @ vsum)
    out = sp.coo_matrix((vals, (rows, cols)), shape=(len(specs), 3 * n))
    return out.tocsr()


def actuation_jacobian_vec_derivative(specs, x, V, side):
    """Spec-facing switch: side='Ht_lam' -> d(H^T V)/dx (V has n_a entries),
    side='Hv' -> d(H V)/dx (V has 3n entries)."""
    if side == "Ht_lam":
        return actuation_force_derivative(specs, x, np.asarray(V, float).ravel())
    if side == "Hv":
        return actuation_velocity_derivative(specs, x, V)
    raise ValueError(f"unknown side {side!r}")


def actuation_bounds(specs):
    """(lo, hi) arrays over actuators."""
    lo = np.array([s.bounds[0] for s in specs], float)
    hi = np.array([s.bounds[1] for s in specs], float)
    return lo, hi
