"""Stripe synthesis: vector field, edge integrals, eigenplane, phases, level set.

Per-vertex phases are complex numbers stored as real pairs (a_i, b_i). The
mismatch energy along edges is a quadratic form v^T A v; minimizing it under
a unit mass-norm constraint is a generalized eigenvalue problem whose
smallest eigenvalue always has a two-dimensional eigenspace (synchronous
rotation of all phases leaves the energy unchanged). A unique, differentiable
representative is selected by pinning the imaginary part of one vertex and
rotating in-plane by an explicit angle theta.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.linalg
import scipy.sparse.linalg as spla

from .errors import SolverError, StripeforgeError
from .mesh import TriMesh, PeriodicMap

DENSE_EIG_LIMIT = 4000


@dataclass(frozen=True)
class VectorFieldParams:
    """Design angles p (radians, one per vertex, in the vertex tangent frame)
    and the global stripe frequency (radians per meter)."""

    p: np.ndarray
    frequency: float

    def __post_init__(self):
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        if not np.all(np.isfinite(self.p)):
            raise ValueError("design angles must be finite")


def field_from_params(mesh: TriMesh, params: VectorFieldParams, frames) -> np.ndarray:
    """z_i = frequency * (cos(p_i) t1_i + sin(p_i) t2_i); ||z_i|| = frequency."""
    t1, t2 = frames[0], frames[1]
    c = np.cos(params.p)[:, None]
    s = np.sin(params.p)[:, None]
    return params.frequency * (c * t1 + s * t2)


def field_param_jacobian(params: VectorFieldParams, frames) -> np.ndarray:
    """dz_i/dp_i = frequency * (-sin(p_i) t1_i + cos(p_i) t2_i), per vertex."""
    t1, t2 = frames[0], frames[1]
    c = np.cos(params.p)[:, None]
    s = np.sin(params.p)[:, None]
    return params.frequency * (-s * t1 + c * t2)


def edge_omega(mesh: TriMesh, z: np.ndarray) -> np.ndarray:
    """omega_ij = 1/2 (e_ij . z_i + e_ij . z_j), oriented i < j."""
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    e = mesh.vertices[j] - mesh.vertices[i]
    return 0.5 * (np.einsum("ij,ij->i", e, z[i]) + np.einsum("ij,ij->i", e, z[j]))


def _phase_projection(pm: PeriodicMap) -> sp.csr_matrix:
    """Expand the vertex projection to interleaved (a, b) phase DOFs."""
    n, nc = pm.n_full, pm.n_reduced
    col_vertex = pm.reduced[pm.rep]
    rows = np.empty(2 * n, dtype=np.int64)
    cols = np.empty(2 * n, dtype=np.int64)
    rows[0::2] = 2 * np.arange(n)
    rows[1::2] = 2 * np.arange(n) + 1
    cols[0::2] = 2 * col_vertex
    cols[1::2] = 2 * col_vertex + 1
    return sp.csr_matrix((np.ones(2 * n), (rows, cols)), shape=(2 * n, 2 * nc))


@dataclass(frozen=True)
class StripeMatrices:
    """Assembled stripe system.

    A, bdiag: full 2n x 2n stiffness and diagonal lumped mass.
    Ac, bc: the working (possibly periodically projected) system.
    Pp: phase-DOF projection (None when aperiodic).
    """

    A: sp.csr_matrix
    bdiag: np.ndarray
    omega: np.ndarray
    Ac: sp.csr_matrix
    bc: np.ndarray
    Pp: sp.csr_matrix | None
    periodic: PeriodicMap | None


def edge_block(w: float, om: float) -> np.ndarray:
    """4x4 stiffness block of one edge on (a_i, b_i, a_j, b_j)."""
    c, s = np.cos(om), np.sin(om)
    return w * np.array(
        [
            [1.0, 0.0, -c, -s],
            [0.0, 1.0, s, -c],
            [-c, s, 1.0, 0.0],
            [-s, -c, 0.0, 1.0],
        ]
    )


def edge_block_domega(w: float, om: float) -> np.ndarray:
    """Derivative of edge_block with respect to omega."""
    c, s = np.cos(om), np.sin(om)
    return w * np.array(
        [
            [0.0, 0.0, s, -c],
            [0.0, 0.0, c, s],
            [s, c, 0.0, 0.0],
            [-c, s, 0.0, 0.0],
        ]
    )


def assemble_stripe_matrices(
    mesh: TriMesh,
    omega: np.ndarray,
    weights: np.ndarray,
    periodic: PeriodicMap | None = None,
) -> StripeMatrices:
    """Assemble A (edge mismatch energy, v^T A v) and the lumped mass diagonal."""
    if mesh.n_edges == 0:
        raise StripeforgeError("mesh has no edges")
    if np.all(weights == 0.0):
        raise StripeforgeError("all edge weights are zero")

    n = mesh.n_vertices
    E = mesh.n_edges
    rows = np.empty(16 * E, dtype=np.int64)
    cols = np.empty(16 * E, dtype=np.int64)
    data = np.empty(16 * E)
    dof = np.empty(4, dtype=np.int64)
    for e in range(E):
        i, j = mesh.edges[e]
        dof[:] = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1)
        blk = edge_block(weights[e], omega[e])
        sl = slice(16 * e, 16 * (e + 1))
        rows[sl] = np.repeat(dof, 4)
        cols[sl] = np.tile(dof, 4)
        data[sl] = blk.ravel()
    A = sp.csr_matrix((data, (rows, cols)), shape=(2 * n, 2 * n))

    va = mesh.vertex_areas()
    bdiag = np.repeat(va, 2)

    if periodic is not None:
        Pp = _phase_projection(periodic)
        Ac = (Pp.T @ A @ Pp).tocsr()
        bc = np.asarray(Pp.T @ bdiag).ravel()
    else:
        Pp, Ac, bc = None, A, bdiag
    return StripeMatrices(A, bdiag, omega, Ac, bc, Pp, periodic)


@dataclass(frozen=True)
class EigenState:
    """Pinned, theta-parameterized eigenplane of the stripe system.

    v1, v2: B-orthonormal basis of the minimal eigenplane (constrained DOFs).
    k: pinned vertex (full mesh index; must be a representative when periodic).
    v_ref satisfies b_k = 0 with a_k > 0; v = v_ref cos(theta) + v_perp sin(theta).
    """

    lam: float
    v1: np.ndarray
    v2: np.ndarray
    bc: np.ndarray
    k: int = -1
    pin_slot: int = -1
    theta_ref: float = 0.0
    theta: float = 0.0
    v_ref: np.ndarray | None = None
    v_perp: np.ndarray | None = None

    @property
    def v(self) -> np.ndarray:
        if self.v_ref is None:
            raise SolverError("eigenplane has not been pinned")
        return self.v_ref * np.cos(self.theta) + self.v_perp * np.sin(self.theta)

    def dv_dtheta(self) -> np.ndarray:
        return -self.v_ref * np.sin(self.theta) + self.v_perp * np.cos(self.theta)


def solve_eigenplane(M: StripeMatrices, degeneracy_gap: float = 1e-10) -> EigenState:
    """Smallest generalized eigenvalue of (Ac, Bc) and a B-orthonormal basis
    of its two-dimensional eigenplane."""
    Ac, bc = M.Ac, M.bc
    ndof = Ac.shape[0]
    scale = spla.norm(Ac) if ndof > DENSE_EIG_LIMIT else None
    li = 1.0 / np.sqrt(bc)

    if ndof <= DENSE_EIG_LIMIT:
        As = (Ac.multiply(li[None, :]).multiply(li[:, None])).toarray()
        As = 0.5 * (As + As.T)
        vals, vecs = scipy.linalg.eigh(As)
        scale = max(abs(vals[-1]), 1.0)
    else:
        As = Ac.multiply(li[None, :]).multiply(li[:, None]).tocsc()
        sigma = -1e-8 * scale - 1e-12
        try:
            vals, vecs = spla.eigsh(As, k=4, sigma=sigma, which="LM")
        except Exception as exc:  # pragma: no cover
            raise SolverError(f"eigensolver failed: {exc}") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]

    lam = 0.5 * (vals[0] + vals[1])
    if len(vals) > 2 and vals[2] - vals[1] < degeneracy_gap * scale:
        warnings.warn(
            "eigenvalue degenerate beyond multiplicity two "
            f"(gap {vals[2] - vals[1]:.3e})",
            RuntimeWarning,
        )
    v1 = li * vecs[:, 0]
    v2 = li * vecs[:, 1]

    # re-orthonormalize in the B inner product
    v1 /= np.sqrt(v1 @ (bc * v1))
    v2 -= (v1 @ (bc * v2)) * v1
    v2 /= np.sqrt(v2 @ (bc * v2))
    return EigenState(lam=float(lam), v1=v1, v2=v2, bc=bc)


def perp_rotation(v: np.ndarray) -> np.ndarray:
    """Synchronous quarter turn of every per-vertex phase: (a, b) -> (-b, a)."""
    out = np.empty_like(v)
    out[0::2] = -v[1::2]
    out[1::2] = v[0::2]
    return out


def default_pin_vertex(state: EigenState, periodic: PeriodicMap | None = None) -> int:
    """Vertex with the largest per-vertex phase magnitude of v1 (full index)."""
    mags = np.hypot(state.v1[0::2], state.v1[1::2])
    slot = int(np.argmax(mags))
    if periodic is None:
        return slot
    return int(periodic.representatives()[slot])


def pin_reference(state: EigenState, k: int, periodic: PeriodicMap | None = None) -> EigenState:
    """Fix the theta origin so that b_k = 0 with a_k > 0 on the reference vector."""
    if periodic is not None:
        red = periodic.reduced[k]
        if red < 0:
            raise StripeforgeError(
                f"pin vertex {k} is not a periodic representative; choose the minus-side vertex"
            )
        slot = int(red)
    else:
        slot = int(k)
    a1, b1 = state.v1[2 * slot], state.v1[2 * slot + 1]
    a2, b2 = state.v2[2 * slot], state.v2[2 * slot + 1]
    if np.hypot(a1, b1) < 1e-10 and np.hypot(a2, b2) < 1e-10:
        raise SolverError(f"pin vertex {k} has vanishing phase, choose another k")
    theta_ref = float(np.arctan2(-b1, b2))
    if a1 * np.cos(theta_ref) + a2 * np.sin(theta_ref) <= 0.0:
        theta_ref += np.pi
    c, s = np.cos(theta_ref), np.sin(theta_ref)
    v_ref = state.v1 * c + state.v2 * s
    # the in-plane complement is realized as the synchronous per-vertex
    # quarter turn (a, b) -> (-b, a), so rotating by theta rotates every
    # per-vertex phase by exactly theta
    v_perp = perp_rotation(v_ref)
    return replace(
        state,
        k=int(k),
        pin_slot=2 * slot + 1,
        theta_ref=theta_ref,
        v_ref=v_ref,
        v_perp=v_perp,
    )


def eigenvector_at(state: EigenState, theta: float) -> EigenState:
    """Rotate the pinned reference by theta within the eigenplane."""
    if state.v_ref is None:
        raise SolverError("pin_reference must be called before eigenvector_at")
    return replace(state, theta=float(theta))


def phases(v: np.ndarray) -> np.ndarray:
    """Per-vertex angle alpha_i = atan2(b_i, a_i) from an interleaved phase vector."""
    a, b = v[0::2], v[1::2]
    mag = np.hypot(a, b)
    bad = np.nonzero(mag < 1e-14)[0]
    if bad.size:
        raise SolverError(f"vanishing phase at vertex {bad[0]}")
    return np.arctan2(b, a)


def phase_arg_jacobian(v: np.ndarray) -> np.ndarray:
    """d alpha_i / d(a_i, b_i) = (-b_i, a_i) / |v_i|^2, interleaved like v."""
    a, b = v[0::2], v[1::2]
    m2 = a * a + b * b
    out = np.empty_like(v)
    out[0::2] = -b / m2
    out[1::2] = a / m2
    return out


@dataclass(frozen=True)
class LevelSet:
    """Per-node interface level set from phases via a smoothed triangle wave."""

    phi: np.ndarray
    a1: float
    a2: float
    jac: np.ndarray  # d phi_i / d alpha_i


def level_set_transfer(alpha: np.ndarray, a1: float, a2: float) -> LevelSet:
    """phi_i = 1 - (2/pi) arccos[(1 - a1) sin(alpha_i - pi/2)] - a2.

    a1 in (0, 1] keeps the derivative bounded at the wave extrema; a2 shifts
    the zero crossing and thereby the stiff/soft material ratio.
    """
    if not (0.0 < a1 <= 1.0):
        raise ValueError("a1 must lie in (0, 1]; a1 = 0 has unbounded derivative")
    if not (-1.0 <= a2 <= 1.0):
        raise ValueError("a2 must lie in [-1, 1]")
    k = 1.0 - a1
    s = np.sin(alpha - 0.5 * np.pi)
    u = k * s
    phi = 1.0 - (2.0 / np.pi) * np.arccos(u) - a2
    jac = (2.0 / np.pi) * k * np.cos(alpha - 0.5 * np.pi) / np.sqrt(1.0 - u * u)
    return LevelSet(phi, a1, a2, jac)
