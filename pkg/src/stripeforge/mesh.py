"""Triangle mesh ingestion, geometric precomputation, and periodic pairing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import MeshError, PeriodicityError

AREA_EPS = 1e-12


@dataclass(frozen=True)
class TriMesh:
    """Immutable triangle surface with edge and adjacency tables.

    vertices: (n, 3) positions in meters.
    triangles: (m, 3) vertex index triples.
    edges: (E, 2) unique undirected pairs with i < j.
    edge_tris: (E, 2) incident triangle ids, -1 where absent.
    boundary_vertex: (n,) bool.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_tris: np.ndarray
    boundary_vertex: np.ndarray
    tri_areas: np.ndarray
    face_normals: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_index(self) -> dict:
        """Map (i, j) with i < j to edge id."""
        return {(int(i), int(j)): e for e, (i, j) in enumerate(self.edges)}

    def vertex_areas(self) -> np.ndarray:
        """One-third of summed incident triangle areas per vertex."""
        va = np.zeros(self.n_vertices)
        np.add.at(va, self.triangles.ravel(), np.repeat(self.tri_areas / 3.0, 3))
        return va


def build_mesh(vertices, triangles) -> TriMesh:
    """Validate raw arrays and construct a TriMesh with derived tables."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshError("vertices must be (n, 3)")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise MeshError("triangles must be (m, 3)")
    n = len(vertices)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= n):
        raise MeshError("triangle references out-of-range vertex index")
    for t, (i, j, k) in enumerate(triangles):
        if i == j or j == k or i == k:
            raise MeshError(f"triangle {t} references duplicate vertices")

    e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    cross = np.cross(e1, e2)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    bad = np.nonzero(areas <= AREA_EPS)[0]
    if bad.size:
        raise MeshError(f"degenerate triangle(s) with area <= {AREA_EPS}: {bad.tolist()}")
    face_normals = cross / (2.0 * areas)[:, None]

    edge_map = {}
    for t, tri in enumerate(triangles):
        for a in range(3):
            i, j = int(tri[a]), int(tri[(a + 1) % 3])
            key = (i, j) if i < j else (j, i)
            edge_map.setdefault(key, []).append(t)
    edges = np.array(sorted(edge_map), dtype=np.int64).reshape(-1, 2)
    edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
    boundary_vertex = np.zeros(n, dtype=bool)
    for e, key in enumerate(map(tuple, edges)):
        tris = edge_map[key]
        if len(tris) > 2:
            raise MeshError(f"non-manifold edge {key}")
        edge_tris[e, : len(tris)] = tris
        if len(tris) == 1:
            boundary_vertex[list(key)] = True

    return TriMesh(vertices, triangles, edges, edge_tris, boundary_vertex, areas, face_normals)


def load_obj(path) -> TriMesh:
    """Load an ASCII OBJ file with `v` and `f` records; faces must be triangles."""
    vertices, faces = [], []
    with open(path, "r") as fh:
        for ln, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{ln}: malformed vertex record")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"{path}:{ln}: non-triangle face with {len(idx)} vertices")
                faces.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
    if not vertices or not faces:
        raise MeshError(f"{path}: no triangle geometry found")
    return build_mesh(np.array(vertices), np.array(faces))


def write_obj(path, mesh: TriMesh, positions=None, texture_u=None):
    """Write an OBJ; `texture_u` (per vertex) is emitted as the u texture coordinate."""
    x = mesh.vertices if positions is None else np.asarray(positions)
    with open(path, "w") as fh:
        for p in x:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        if texture_u is not None:
            for u in np.asarray(texture_u):
                fh.write(f"vt {u:.17g} 0\n")
        for tri in mesh.triangles:
            i, j, k = (int(v) + 1 for v in tri)
            if texture_u is not None:
                fh.write(f"f {i}/{i} {j}/{j} {k}/{k}\n")
            else:
                fh.write(f"f {i} {j} {k}\n")


def grid_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> TriMesh:
    """Regular (nx x ny)-cell grid on [0,lx] x [0,ly], z = 0, split into triangles."""
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    tris = []
    for j in range(ny):
        for i in range(nx):
            v00 = j * (nx + 1) + i
            v10 = v00 + 1
            v01 = v00 + (nx + 1)
            v11 = v01 + 1
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    return build_mesh(verts, np.array(tris))


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    acc = np.zeros((mesh.n_vertices, 3))
    w = mesh.tri_areas[:, None] * mesh.face_normals
    for c in range(3):
        np.add.at(acc, mesh.triangles[:, c], w)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise MeshError(f"zero accumulated normal at vertex/vertices {bad.tolist()}")
    return acc / norms[:, None]


def cotan_edge_weights(mesh: TriMesh) -> np.ndarray:
    """Per-edge w_ij = 1/2 * sum of cotangents of opposite angles, clamped at 0.

    The clamp keeps the assembled stripe matrix positive semidefinite on
    obtuse meshes.
    """
    w = np.zeros(mesh.n_edges)
    eidx = mesh.edge_index()
    V = mesh.vertices
    for tri in mesh.triangles:
        for a in range(3):
            i, j, k = int(tri[a]), int(tri[(a + 1) % 3]), int(tri[(a + 2) % 3])
            u = V[i] - V[k]
            v = V[j] - V[k]
            cot = np.dot(u, v) / np.linalg.norm(np.cross(u, v))
            key = (i, j) if i < j else (j, i)
            w[eidx[key]] += 0.5 * cot
    return np.maximum(w, 0.0)


def tangent_frames(mesh: TriMesh, normals=None):
    """Per-vertex orthonormal tangent frames (t1, t2, n).

    t1 is the direction to the lowest-index neighbor, projected to the
    tangent plane; deterministic given mesh ordering.
    """
    if normals is None:
        normals = vertex_normals(mesh)
    nbrs = [[] for _ in range(mesh.n_vertices)]
    for i, j in mesh.edges:
        nbrs[int(i)].append(int(j))
        nbrs[int(j)].append(int(i))
    t1 = np.zeros((mesh.n_vertices, 3))
    t2 = np.zeros((mesh.n_vertices, 3))
    for v in range(mesh.n_vertices):
        n = normals[v]
        for nb in sorted(nbrs[v]):
            d = mesh.vertices[nb] - mesh.vertices[v]
            d = d - np.dot(d, n) * n
            ln = np.linalg.norm(d)
            if ln > 1e-12:
                t1[v] = d / ln
                break
        else:
            raise MeshError(f"cannot build tangent frame at vertex {v}")
        t2[v] = np.cross(n, t1[v])
    return t1, t2, normals


@dataclass(frozen=True)
class PeriodicMap:
    """Boundary-vertex pairing realized as a projection onto representatives.

    pairs: (plus, minus, axis) triples; plus = larger coordinate along the axis.
    rep: full vertex -> representative vertex.
    shifts: (n, 2) integer lattice multiplicities: x_full = x_rep + shifts @ lattice.
    reduced: representative vertex -> constrained slot; -1 for constrained-away.
    lattice: (2, 3) translation vectors.
    """

    pairs: tuple
    rep: np.ndarray
    shifts: np.ndarray
    reduced: np.ndarray
    lattice: np.ndarray
    n_full: int

    @property
    def n_reduced(self) -> int:
        return int(self.reduced.max()) + 1

    def projection(self) -> sp.csr_matrix:
        """Sparse P with x_full = P @ x_reduced for translation-free scalar fields."""
        rows = np.arange(self.n_full)
        cols = self.reduced[self.rep]
        data = np.ones(self.n_full)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_full, self.n_reduced))

    def representatives(self) -> np.ndarray:
        return np.nonzero(self.reduced >= 0)[0]

    def to_json_dict(self) -> dict:
        return {
            "pairs": [[int(p), int(m)] for p, m, _ in self.pairs],
            "axes": [int(a) for _, _, a in self.pairs],
        }


def build_periodic_map(mesh: TriMesh, lattice, tol: float = 1e-6) -> PeriodicMap:
    """Pair opposite-boundary vertices congruent under the lattice translations.

    Convention: the plus side is the one at larger coordinate along each
    lattice axis, i.e. plus = minus + L_axis. A vertex already claimed as a
    plus by a lower axis is skipped by higher axes (corner rule).
    """
    lattice = np.asarray(lattice, dtype=np.float64).reshape(2, 3)
    bidx = np.nonzero(mesh.boundary_vertex)[0]
    if bidx.size == 0:
        raise PeriodicityError("mesh has no boundary vertices to pair")
    B = mesh.vertices[bidx]

    pairs = []
    claimed_plus = set()
    matched = set()
    for axis in range(2):
        L = lattice[axis]
        for m_local, vm in enumerate(bidx):
            target = B[m_local] + L
            d = np.linalg.norm(B - target, axis=1)
            hits = np.nonzero(d < tol)[0]
            if len(hits) > 1:
                raise PeriodicityError(
                    f"ambiguous periodic match for vertex {int(vm)} on axis {axis}: "
                    f"candidates {bidx[hits].tolist()}"
                )
            if len(hits) == 1:
                vp = int(bidx[hits[0]])
                if vp in claimed_plus:
                    continue
                pairs.append((vp, int(vm), axis))
                claimed_plus.add(vp)
                matched.update((vp, int(vm)))

    unmatched = [int(v) for v in bidx if int(v) not in matched]
    if unmatched:
        raise PeriodicityError(f"unmatched boundary vertices within tol: {unmatched}")

    n = mesh.n_vertices
    rep = np.arange(n)
    shifts = np.zeros((n, 2), dtype=np.int64)
    parent = {p: (m, a) for p, m, a in pairs}

    def resolve(v):
        s = np.zeros(2, dtype=np.int64)
        seen = set()
        while v in parent:
            if v in seen:
                raise PeriodicityError("cyclic periodic pairing")
            seen.add(v)
            m, a = parent[v]
            s[a] += 1
            v = m
        return v, s

    for v in range(n):
        rep[v], shifts[v] = resolve(v)

    reduced = np.full(n, -1, dtype=np.int64)
    reps = np.nonzero(rep == np.arange(n))[0]
    reduced[reps] = np.arange(len(reps))

    # sanity: rest geometry must be consistent with the chain shifts
    err = mesh.vertices - (mesh.vertices[rep] + shifts @ lattice)
    worst = np.abs(err).max()
    if worst > 10 * tol:
        raise PeriodicityError(f"inconsistent periodic chains (residual {worst:.3g})")

    return PeriodicMap(tuple(pairs), rep, shifts, reduced, lattice, n)
