"""Tetrahedral meshes: loading, validation, and per-element precomputation.

All quantities are SI (meters). Loaders accept a ``unit_scale`` factor so
meshes authored in mm can be imported (positions are multiplied by it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateElement, IndexOutOfRange, ParseError

DEGENERATE_VOLUME = 1e-18  # m^3; below this, loading fails

# Outward-oriented faces of a positively oriented tet (i, j, k, l).
TET_FACES = ((0, 2, 1), (0, 1, 3), (1, 2, 3), (2, 0, 3))


def shape_gradients(verts):
    """Shape-function gradients and volume of one linear tetrahedron.

    Parameters
    ----------
    verts : (4, 3) array
        Rest vertex positions.

    Returns
    -------
    grads : (4, 3) array
        Constant gradients of the four barycentric shape functions in the
        global frame (1/m). Rows sum to zero.
    volume : float
        Signed volume (m^3); positive for a well-oriented tet.
    """
    verts = np.asarray(verts, dtype=float)
    dm = verts[1:] - verts[0]  # rows: edge vectors
    volume = np.linalg.det(dm.T) / 6.0
    if abs(volume) < DEGENERATE_VOLUME:
        raise DegenerateElement(f"tet volume {volume:g} below {DEGENERATE_VOLUME:g} m^3")
    inv = np.linalg.inv(dm.T)
    grads = np.empty((4, 3))
    grads[1:] = inv  # row i of inv(Dm^T) is the gradient of N_{i+1}
    grads[0] = -inv.sum(axis=0)
    return grads, volume


class TetMesh:
    """Immutable tetrahedral mesh with precomputed element quantities.

    Attributes
    ----------
    rest_positions : (n, 3) float array
    tets : (m, 4) int array, canonicalized to positive volume
    volumes : (m,) rest volumes V_e
    grads : (m, 4, 3) shape-function gradients per tet
    boundary_triangles : (b, 3) int array, outward oriented
    """

    def __init__(self, rest_positions, tets):
        rest = np.ascontiguousarray(rest_positions, dtype=float)
        tets = np.ascontiguousarray(tets, dtype=np.int64)
        if rest.ndim != 2 or rest.shape[1] != 3:
            raise ParseError("rest_positions must be (n, 3)")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise ParseError("tets must be (m, 4)")
        if tets.shape[0] < 1:
            raise ParseError("mesh has no tetrahedra")
        n = rest.shape[0]
        if tets.min() < 0 or tets.max() >= n:
            raise IndexOutOfRange(f"tet node index outside [0, {n})")

        tets = self._canonicalize(rest, tets)
        self.rest_positions = rest
        self.tets = tets
        self.n_nodes = n
        self.grads, self.volumes = self._precompute(rest, tets)
        self.boundary_triangles = self._boundary(tets)
        self._surface_nodes = np.unique(self.boundary_triangles)
        surf = np.zeros(n, dtype=bool)
        surf[self._surface_nodes] = True
        self._surface_tets = np.nonzero(surf[tets].any(axis=1))[0]
        self.rest_positions.setflags(write=False)
        self.tets.setflags(write=False)

    @staticmethod
    def _canonicalize(rest, tets):
        tets = tets.copy()
        d = rest[tets[:, 1:]] - rest[tets[:, :1]]
        vols = np.linalg.det(np.swapaxes(d, 1, 2)) / 6.0
        flip = vols < 0
        tets[flip, 2], tets[flip, 3] = tets[flip, 3], tets[flip, 2].copy()
        return tets

    @staticmethod
    def _precompute(rest, tets):
        m = tets.shape[0]
        d = rest[tets[:, 1:]] - rest[tets[:, :1]]          # (m, 3, 3) rows
        dmt = np.swapaxes(d, 1, 2)                         # Dm^T per tet
        vols = np.linalg.det(dmt) / 6.0
        bad = np.abs(vols) < DEGENERATE_VOLUME
        if bad.any():
            raise DegenerateElement(
                f"{int(bad.sum())} degenerate tet(s), first index {int(np.nonzero(bad)[0][0])}"
            )
        inv = np.linalg.inv(dmt)
        grads = np.empty((m, 4, 3))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        return grads, vols

    @staticmethod
    def _boundary(tets):
        faces = {}
        for e, tet in enumerate(tets):
            for f in TET_FACES:
                tri = (int(tet[f[0]]), int(tet[f[1]]), int(tet[f[2]]))
                key = tuple(sorted(tri))
                if key in faces:
                    faces[key] = None  # interior (shared) face
                else:
                    faces[key] = tri
        tris = [t for t in faces.values() if t is not None]
        tris.sort()
        return np.asarray(tris, dtype=np.int64).reshape(-1, 3)

    @property
    def surface_tets(self):
        """Indices of tets with at least one node on the boundary surface."""
        return self._surface_tets

    @property
    def total_volume(self):
        return float(self.volumes.sum())

    def enclosed_volume(self):
        """Volume enclosed by the boundary surface (divergence theorem)."""
        p = self.rest_positions[self.boundary_triangles]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    def save_json(self, path):
        doc = {
            "nodes": self.rest_positions.tolist(),
            "tets": self.tets.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    def save_vtk(self, path, positions=None, point_vectors=None, vector_name="displacement"):
        """Write legacy ASCII VTK unstructured grid (cell type 10).

        positions defaults to rest positions; point_vectors, if given, is an
        (n, 3) field written as POINT_DATA VECTORS.
        """
        pos = self.rest_positions if positions is None else np.asarray(positions, float)
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write("softdiff mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {self.n_nodes} double\n")
            for p in pos:
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
            m = self.tets.shape[0]
            fh.write(f"CELLS {m} {5 * m}\n")
            for t in self.tets:
                fh.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
            fh.write(f"CELL_TYPES {m}\n")
            for _ in range(m):
                fh.write("10\n")
            if point_vectors is not None:
                vec = np.asarray(point_vectors, float).reshape(self.n_nodes, 3)
                fh.write(f"POINT_DATA {self.n_nodes}\n")
                fh.write(f"VECTORS {vector_name} double\n")
                for v in vec:
                    fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")


@dataclass(frozen=True)
class DofMask:
    """Projective constraints: node indices whose 3 DOFs are fixed."""

    fixed: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "fixed", frozenset(int(i) for i in self.fixed))

    def validate(self, n_nodes):
        bad = [i for i in self.fixed if i < 0 or i >= n_nodes]
        if bad:
            raise IndexOutOfRange(f"fixed node index {bad[0]} outside [0, {n_nodes})")

    def dof_indices(self, n_nodes):
        """Flat DOF indices (3 per fixed node), sorted."""
        nodes = np.asarray(sorted(self.fixed), dtype=np.int64)
        if nodes.size == 0:
            return np.empty(0, dtype=np.int64)
        return (3 * nodes[:, None] + np.arange(3)[None, :]).ravel()


def load_mesh(path, format=None, unit_scale=1.0):
    """Load a tet mesh from native JSON or legacy ASCII VTK.

    format is inferred from the extension when omitted ('native-json' for
    .json, 'vtk-legacy-ascii' for .vtk).
    """
    path = str(path)
    if format is None:
        format = "vtk-legacy-ascii" if path.endswith(".vtk") else "native-json"
    if format == "native-json":
        nodes, tets = _read_json(path)
    elif format == "vtk-legacy-ascii":
        nodes, tets = _read_vtk(path)
    else:
        raise ParseError(f"unknown mesh format {format!r}")
    nodes = np.asarray(nodes, dtype=float) * float(unit_scale)
    return TetMesh(nodes, tets)


def _read_json(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc or "tets" not in doc:
        raise ParseError(f"{path}: expected object with 'nodes' and 'tets'")
    return doc["nodes"], doc["tets"]


def _read_vtk(path):
    try:
        with open(path) as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    tokens = []
    for ln in lines[2:]:  # skip the two header lines
        tokens.extend(ln.split())
    it = iter(range(len(tokens)))
    pos = 0

    def expect(word):
        nonlocal pos
        if pos >= len(tokens) or tokens[pos].upper() != word:
            raise ParseError(f"{path}: expected {word} at token {pos}")
        pos += 1

    def take():
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError(f"{path}: unexpected end of file")
        tok = tokens[pos]
        pos += 1
        return tok

    expect("ASCII")
    expect("DATASET")
    expect("UNSTRUCTURED_GRID")
    expect("POINTS")
    try:
        n = int(take())
        take()  # dtype word
        pts = np.array([float(take()) for _ in range(3 * n)]).reshape(n, 3)
        expect("CELLS")
        m = int(take())
        total = int(take())
        cells = [int(take()) for _ in range(total)]
        expect("CELL_TYPES")
        m2 = int(take())
        types = [int(take()) for _ in range(m2)]
    except (ValueError, ParseError) as exc:
        raise ParseError(f"{path}: malformed VTK ({exc})") from exc
    if m != m2:
        raise ParseError(f"{path}: CELLS count {m} != CELL_TYPES count {m2}")
    tets = []
    ci = 0
    for k in range(m):
        cnt = cells[ci]
        conn = cells[ci + 1 : ci + 1 + cnt]
        ci += 1 + cnt
        if types[k] == 10:
            if cnt != 4:
                raise ParseError(f"{path}: tetra cell {k} has {cnt} nodes")
            tets.append(conn)
    if not tets:
        raise ParseError(f"{path}: no tetrahedral cells (type 10) found")
    return pts, tets


def generate_beam(dimensions, resolution):
    """Axis-aligned box beam meshed with a conforming 5-tet cube split.

    Parameters
    ----------
    dimensions : (3,) extents in meters
    resolution : (3,) cell counts per axis, each >= 1

    Node ordering is deterministic: index = (ix * (ny+1) + iy) * (nz+1) + iz.
    """
    dims = np.asarray(dimensions, dtype=float)
    res = np.asarray(resolution, dtype=int)
    if (res < 1).any():
        raise ValueError("resolution must be >= 1 per axis")
    nx, ny, nz = res
    xs = np.linspace(0.0, dims[0], nx + 1)
    ys = np.linspace(0.0, dims[1], ny + 1)
    zs = np.linspace(0.0, dims[2], nz + 1)

    def nid(ix, iy, iz):
        return (ix * (ny + 1) + iy) * (nz + 1) + iz

    nodes = np.empty(((nx + 1) * (ny + 1) * (nz + 1), 3))
    for ix in range(nx + 1):
        for iy in range(ny + 1):
            for iz in range(nz + 1):
                nodes[nid(ix, iy, iz)] = (xs[ix], ys[iy], zs[iz])

    tets = []
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                c = {}
                for dx in (0, 1):
                    for dy in (0, 1):
                        for dz in (0, 1):
                            c[(dx, dy, dz)] = nid(ix + dx, iy + dy, iz + dz)
                if (ix + iy + iz) % 2 == 0:
                    ctr = [(0, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1)]
                    odd = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)]
                else:
                    ctr = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)]
                    odd = [(0, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1)]
                tets.append([c[v] for v in ctr])
                for o in odd:
                    # corner tet: the odd vertex plus its three cube neighbors
                    nbrs = [v for v in ctr if sum(a != b for a, b in zip(v, o)) == 1]
                    tets.append([c[o]] + [c[v] for v in nbrs])
    return TetMesh(nodes, np.asarray(tets, dtype=np.int64))
