"""Six-node solid-shell prism elements with ridge-enriched bi-material cuts.

A triangle mesh is extruded along vertex normals into triangular prisms.
Each prism interpolates positions bilinearly (linear barycentric in-plane,
linear through the thickness).  A per-vertex level set ``phi`` assigns
materials; prisms crossed by the zero level set are subdivided into three
sub-prisms along the linearly interpolated interface and carry ridge
enrichment coordinates that allow a strain kink across the interface.

Node convention: the bottom copy of mid-surface vertex ``i`` is node ``i``,
the top copy is node ``n + i``.  Element node order is
``[b0, b1, b2, t0, t1, t2]`` with the bottom layer at reference thickness
coordinate ``t = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ElementInversionError, MeshError
from .mesh import TriMesh

# Reference triangle corners in (u, v) coordinates, matching barycentric
# weights (1-u-v, u, v).
_TRI_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

# 3-point in-plane Gauss rule on the reference triangle (degree 2 exact),
# weights summing to the reference area 1/2.
_TRI_QP = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
_TRI_QW = np.full(3, 1 / 6)

# 6-point in-plane rule on the reference triangle (degree 4 exact), needed on
# cut sub-triangles where the ridge term makes the deformation gradient
# quadratic in-plane.  Weights sum to the reference area 1/2.
_a1, _b1, _w1 = 0.445948490915965, 0.108103018168070, 0.223381589678011
_a2, _b2, _w2 = 0.091576213509771, 0.816847572980459, 0.109951743655322
_TRI_QP6 = np.array(
    [
        [_a1, _a1],
        [_a1, _b1],
        [_b1, _a1],
        [_a2, _a2],
        [_a2, _b2],
        [_b2, _a2],
    ]
)
_TRI_QW6 = 0.5 * np.array([_w1, _w1, _w1, _w2, _w2, _w2])

# 2-point Gauss rule on the thickness interval [-1, 1].
_T_QP = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_T_QW = np.array([1.0, 1.0])

#: Nodal level-set magnitudes closer to zero than this are pushed to +ZERO_PHI
#: so the cut classification and enrichment sign pattern are well defined.
ZERO_PHI = 1e-9


@dataclass(frozen=True)
class Material:
    """Neo-Hookean material, optionally augmented with a stiffening fiber.

    ``mu`` and ``lam`` are the Lame parameters (Pa).  When ``fiber`` is given,
    the density gains the term ``beta/2 * n^T C n`` for unit direction ``n``.
    """

    mu: float
    lam: float
    beta: float = 0.0
    fiber: tuple[float, float, float] | None = None

    def fiber_vector(self) -> np.ndarray:
        if self.fiber is None:
            return np.array([1.0, 0.0, 0.0])
        n = np.asarray(self.fiber, dtype=float)
        nrm = np.linalg.norm(n)
        if not nrm > 0:
            raise ValueError("fiber direction must be nonzero")
        return n / nrm


@dataclass(frozen=True)
class ShellModel:
    """Extruded prism discretization of a triangle mesh.

    ``nodes`` holds the 2n rest positions (bottom layer first), ``elements``
    one row of six node indices per mesh triangle.
    """

    mesh: TriMesh
    h: float
    nodes: np.ndarray  # (2n, 3) rest positions
    elements: np.ndarray  # (m, 6) node indices
    soft: Material
    stiff: Material

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def element_rest(self, e: int) -> np.ndarray:
        return self.nodes[self.elements[e]]

    def element_phi(self, e: int, phi: np.ndarray) -> np.ndarray:
        """Mid-surface level-set triple for element ``e``."""
        return perturb_phi(np.asarray(phi)[self.mesh.triangles[e]])


def prism_shape(q):
    """Basis values and gradients of the six-node prism at ``q = (u, v, t)``.

    Returns ``(N, dN)`` with ``N`` of shape (6,) and ``dN`` of shape (6, 3)
    holding derivatives with respect to (u, v, t).  Satisfies the
    interpolation property at the nodes and partition of unity everywhere.
    """
    u, v, t = q
    l0 = 1.0 - u - v
    tm = 0.5 * (1.0 - t)
    tp = 0.5 * (1.0 + t)
    N = np.array([l0 * tm, u * tm, v * tm, l0 * tp, u * tp, v * tp])
    dN = np.array(
        [
            [-tm, -tm, -0.5 * l0],
            [tm, 0.0 * u, -0.5 * u],
            [0.0 * u, tm, -0.5 * v],
            [-tp, -tp, 0.5 * l0],
            [tp, 0.0 * u, 0.5 * u],
            [0.0 * u, tp, 0.5 * v],
        ]
    )
    return N, dN


def uncut_quadrature():
    """Six-point plan for single-material prisms: 3 in-plane x 2 thickness.

    Weights sum to the reference prism volume 1 (area 1/2 times span 2).
    """
    qp = np.empty((6, 3))
    qw = np.empty(6)
    k = 0
    for it in range(2):
        for ip in range(3):
            qp[k, :2] = _TRI_QP[ip]
            qp[k, 2] = _T_QP[it]
            qw[k] = _TRI_QW[ip] * _T_QW[it]
            k += 1
    return qp, qw


def extrude_shell(mesh: TriMesh, h: float, normals: np.ndarray) -> ShellModel:
    """Extrude the mid-surface into prisms of thickness ``h``.

    Top/bottom nodes sit at ``x_i +- (h/2) n_i``.  Raises on non-positive
    thickness and on prisms whose rest Jacobian is not positive at every
    quadrature point (folded normals across a crease).
    """
    if not h > 0:
        raise ValueError(f"thickness must be positive, got {h}")
    normals = np.asarray(normals, dtype=float)
    if normals.shape != mesh.vertices.shape:
        raise ValueError("normals shape must match vertices")
    off = 0.5 * h * normals
    nodes = np.vstack([mesh.vertices - off, mesh.vertices + off])
    n = mesh.n_vertices
    tris = mesh.triangles
    elements = np.hstack([tris, tris + n]).astype(np.int64)
    model = ShellModel(mesh, float(h), nodes, elements, _DUMMY, _DUMMY)

    qp, _ = uncut_quadrature()
    for e in range(model.n_elements):
        Xe = model.element_rest(e)
        for q in qp:
            _, dN = prism_shape(q)
            if np.linalg.det(Xe.T @ dN) <= 0:
                raise ElementInversionError(
                    e, f"inverted rest prism at element {e} (folded normals?)"
                )
    return model


_DUMMY = Material(1.0, 1.0)


def with_materials(model: ShellModel, soft: Material, stiff: Material) -> ShellModel:
    return ShellModel(model.mesh, model.h, model.nodes, model.elements, soft, stiff)


def material_density(C: np.ndarray, mat: Material):
    """Strain energy density and its derivative with respect to ``C``.

    ``Psi = 1/2 [mu (tr C - 3) - 2 mu ln J + lam (ln J)^2]`` with
    ``J = sqrt(det C)``, plus ``beta/2 n^T C n`` for fiber materials.
    """
    C = np.asarray(C, dtype=float)
    detC = np.linalg.det(C)
    if detC <= 0:
        raise ElementInversionError(-1, "element inversion: det C <= 0")
    logJ = 0.5 * np.log(detC)
    Cinv = np.linalg.inv(C)
    psi = 0.5 * (mat.mu * (np.trace(C) - 3.0) - 2.0 * mat.mu * logJ + mat.lam * logJ**2)
    dpsi = 0.5 * (mat.mu * np.eye(3) + (mat.lam * logJ - mat.mu) * Cinv)
    if mat.beta != 0.0:
        n = mat.fiber_vector()
        psi += 0.5 * mat.beta * (n @ C @ n)
        dpsi = dpsi + 0.5 * mat.beta * np.outer(n, n)
    return psi, dpsi


def perturb_phi(phi: np.ndarray) -> np.ndarray:
    """Replace near-zero nodal level-set values by +ZERO_PHI.

    Removes the measure-zero configuration where the interface passes exactly
    through a node, which would make the cut classification ill-defined.
    """
    phi = np.array(phi, copy=True)
    re = phi.real if np.iscomplexobj(phi) else phi
    phi[np.abs(re) < ZERO_PHI] = ZERO_PHI
    return phi


def is_cut(phi_tri) -> bool:
    """Whether a mid-surface level-set triple changes sign."""
    re = np.real(np.asarray(perturb_phi(phi_tri)))
    return bool(re.max() > 0 and re.min() < 0)


def classify_elements(mesh: TriMesh, phi: np.ndarray) -> np.ndarray:
    """Boolean cut mask over elements from per-vertex level-set values."""
    re = np.real(perturb_phi(np.asarray(phi)))
    tri_phi = re[mesh.triangles]
    return (tri_phi.max(axis=1) > 0) & (tri_phi.min(axis=1) < 0)


def check_resolution(omega: np.ndarray) -> None:
    """Reject stripe frequencies the mesh cannot resolve.

    A per-edge phase increment beyond pi implies more than one material
    interface inside a single element, which the single-cut enrichment cannot
    represent.
    """
    worst = np.abs(omega).max() if len(omega) else 0.0
    if worst > np.pi:
        raise MeshError(
            "frequency too high for mesh resolution: "
            f"max |omega| = {worst:.3f} > pi implies more than one interface "
            "per element"
        )


def cut_subdivide(phi_tri):
    """Split the reference triangle along the linear zero level set.

    ``phi_tri`` holds the three mid-surface values with mixed signs (complex
    values allowed; signs are taken from real parts).  Returns a list of three
    ``(verts_uv, stiff)`` tuples: sub-triangle corners in (u, v) coordinates
    (orientation-preserving) and whether the sub-region carries the stiff
    material (positive level set).
    """
    phi = perturb_phi(np.asarray(phi_tri))
    re = np.real(phi)
    signs = np.where(re > 0, 1.0, -1.0)
    if signs.min() == signs.max():
        raise ValueError("element is not cut: uniform level-set sign")
    # the vertex whose sign differs from the other two
    c = int(np.nonzero(signs != np.sign(np.sum(signs)))[0][0])
    a, b = (c + 1) % 3, (c + 2) % 3
    V = _TRI_CORNERS.astype(phi.dtype)
    ta = phi[c] / (phi[c] - phi[a])
    tb = phi[c] / (phi[c] - phi[b])
    p1 = V[c] + ta * (V[a] - V[c])
    p2 = V[c] + tb * (V[b] - V[c])
    lone_stiff = signs[c] > 0
    return [
        (np.stack([V[c], p1, p2]), lone_stiff),
        (np.stack([p1, V[a], V[b]]), not lone_stiff),
        (np.stack([p1, V[b], p2]), not lone_stiff),
    ]


def _signed_area(verts):
    e1 = verts[1] - verts[0]
    e2 = verts[2] - verts[0]
    return 0.5 * (e1[0] * e2[1] - e1[1] * e2[0])


def cut_quadrature(phi_tri):
    """36-point plan for a cut prism: 3 sub-prisms x 6 in-plane x 2 thickness.

    The degree-4 in-plane rule is required because the ridge term makes the
    deformation gradient quadratic in the in-plane coordinates, so the energy
    has quartic variation even at small strain.  Points live in parent generic
    coordinates; weights carry the sub-triangle areas so the plan totals the
    reference prism volume.  Returns ``(qp, qw, stiff_mask)``; all outputs
    inherit the dtype of ``phi_tri`` so the interface geometry stays
    differentiable in the level set.
    """
    subs = cut_subdivide(phi_tri)
    dtype = subs[0][0].dtype
    npt = 3 * 2 * len(_TRI_QW6)
    qp = np.empty((npt, 3), dtype=dtype)
    qw = np.empty(npt, dtype=dtype)
    stiff_mask = np.empty(npt, dtype=bool)
    k = 0
    for verts, stiff in subs:
        area = _signed_area(verts)
        origin, eu, ev = verts[0], verts[1] - verts[0], verts[2] - verts[0]
        for it in range(2):
            for ip in range(len(_TRI_QW6)):
                r, s = _TRI_QP6[ip]
                qp[k, :2] = origin + r * eu + s * ev
                qp[k, 2] = _T_QP[it]
                # in-plane weights rescaled by sub-area fraction (area / (1/2))
                qw[k] = _TRI_QW6[ip] * (area / 0.5) * _T_QW[it]
                stiff_mask[k] = stiff
                k += 1
    return qp, qw, stiff_mask


def ridge_enrichment(q, phi_nodes):
    """Ridge function ``psi = sum |N_i phi_i| - |sum N_i phi_i|`` at ``q``.

    Returns ``(psi, dpsi_dq, dpsi_dphi)``.  Signs are frozen from real parts
    so the piecewise-defined derivatives follow the sub-element the point
    lies in; complex inputs step through smoothly.
    """
    phi = np.asarray(phi_nodes)
    N, dN = prism_shape(np.asarray(q))
    N = N.astype(phi.dtype, copy=False)
    s = np.where(np.real(phi) > 0, 1.0, -1.0)
    interp = N @ phi
    sc = 1.0 if np.real(interp) > 0 else -1.0
    psi = N @ (s * phi) - sc * interp
    dpsi_dq = dN.T @ ((s - sc) * phi)
    dpsi_dphi = (s - sc) * N
    return psi, dpsi_dq, dpsi_dphi


def enrichment_pointdata(qp, phi_tri, stiff_mask):
    """Per-quadrature-point ridge values and generic-coordinate gradients.

    ``phi_tri`` is the mid-surface triple (copied through the thickness), so
    ``psi`` depends only on (u, v).  The reference-side sign at each point is
    taken from its sub-prism's material side rather than re-evaluated, keeping
    the sign pattern fixed across the sub-element.
    """
    phi = perturb_phi(np.asarray(phi_tri))
    dtype = np.result_type(phi.dtype, qp.dtype)
    nq = qp.shape[0]
    psis = np.zeros(nq, dtype=dtype)
    dpsis = np.zeros((nq, 3), dtype=dtype)
    s = np.where(np.real(phi) > 0, 1.0, -1.0)
    # barycentric gradients of (1-u-v, u, v) wrt (u, v, t)
    dlam = np.array([[-1.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    for j in range(nq):
        u, v = qp[j, 0], qp[j, 1]
        lam = np.array([1.0 - u - v, u, v], dtype=dtype)
        sc = 1.0 if stiff_mask[j] else -1.0
        coeff = (s - sc) * phi
        psis[j] = lam @ coeff
        dpsis[j] = dlam.T @ coeff
    return psis, dpsis
