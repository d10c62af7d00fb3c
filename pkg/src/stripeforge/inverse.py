"""Design sensitivities: objectives, regularizers, and adjoint solves.

The forward pipeline maps per-vertex design angles ``p`` (plus a global
frequency and the in-plane rotation ``theta``) to a pinned eigenvector, to
per-vertex phases, to a material level set, and finally to an equilibrium
deformation and homogenized stiffness.  This module provides the reverse
sweep:

* a bordered linear system whose solve yields exact sensitivities of the
  pinned eigenvector (the eigenvalue is degenerate, so the plain eigenproblem
  Jacobian is singular; bordering with the normalization and pin constraints
  restores a unique, symmetric, invertible system);
* an equilibrium adjoint that turns an objective gradient with respect to the
  deformed state into a gradient with respect to the level set, at the cost
  of one linear solve independent of the number of design parameters;
* chain-rule helpers between the stages, and the objective / regularizer
  terms themselves.

Each adjoint linear solve increments a module-level counter so callers can
assert the cost of a full gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .equilibrium import (
    EquilibriumProblem,
    _element_arrays,
    _element_dof_ids,
    assemble_system,
)
from .kernels import enriched_phi_jacobian
from .mesh import PeriodicMap, TriMesh
from .stripes import (
    EigenState,
    LevelSet,
    StripeMatrices,
    VectorFieldParams,
    edge_block_domega,
    field_param_jacobian,
    perp_rotation,
    phase_arg_jacobian,
)

_n_linear_solves = 0


def reset_solve_counter() -> None:
    global _n_linear_solves
    _n_linear_solves = 0


def solve_count() -> int:
    return _n_linear_solves


def _count_solve(n: int = 1) -> None:
    global _n_linear_solves
    _n_linear_solves += n


# ---------------------------------------------------------------------------
# objectives and regularizers
# ---------------------------------------------------------------------------


def match_objective(x: np.ndarray, target: np.ndarray, weights=None):
    """Least-squares position match ``sum_i w_i |x_i - target_i|^2``.

    Returns ``(T, dT_dx)`` with ``dT_dx = 2 w (x - target)`` shaped like ``x``.
    """
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(target, dtype=float)
    if weights is None:
        w = np.ones(len(d))
    else:
        w = np.asarray(weights, dtype=float)
    T = float(np.sum(w * np.einsum("ij,ij->i", d, d)))
    return T, 2.0 * w[:, None] * d


def stiffness_match_objective(k: np.ndarray, target: np.ndarray):
    """Directional stiffness match ``sum_j (k_j - target_j)^2``.

    Returns ``(T, dT_dk)`` with ``dT_dk = 2 (k - target)``.
    """
    k = np.asarray(k, dtype=float)
    d = k - np.asarray(target, dtype=float)
    return float(d @ d), 2.0 * d


def singularity_barrier(v: np.ndarray, d_hat: float):
    """Barrier keeping per-vertex phase magnitudes away from zero.

    Per vertex with ``d_i = |(a_i, b_i)|``:

        r_i = -(d_i - d_hat)^2 ln(d_i / d_hat)   for 0 < d_i <= d_hat,
        r_i = 0                                  for d_i >= d_hat,

    which is C^1 at ``d_i = d_hat`` and diverges as ``d_i -> 0``.  Returns
    ``(value, grad)`` with ``grad`` interleaved like ``v``; the value is
    ``inf`` (with a zero gradient) if any magnitude vanishes exactly.
    """
    if d_hat <= 0:
        raise ValueError("d_hat must be positive")
    a, b = v[0::2], v[1::2]
    d = np.hypot(a, b)
    grad = np.zeros_like(v)
    if np.any(d == 0.0):
        return np.inf, grad
    inside = d < d_hat
    if not np.any(inside):
        return 0.0, grad
    di = d[inside]
    t = di - d_hat
    logr = np.log(di / d_hat)
    value = float(np.sum(-t * t * logr))
    dval_dd = -2.0 * t * logr - t * t / di
    ga = np.zeros(len(d))
    gb = np.zeros(len(d))
    ga[inside] = dval_dd * a[inside] / di
    gb[inside] = dval_dd * b[inside] / di
    grad[0::2] = ga
    grad[1::2] = gb
    return value, grad


def transport_angles(mesh: TriMesh, frames) -> np.ndarray:
    """Per-edge frame-transport angle ``rho_e`` for edge (i, j), i < j.

    ``rho_e`` is the angle of vertex j's first frame axis seen in vertex i's
    tangent frame (after projection onto i's tangent plane), so an angle
    ``p_j`` in frame j compares against ``p_i`` as ``p_j + rho_e``.  Zero on
    flat meshes with a uniform frame.
    """
    t1, t2 = np.asarray(frames[0], dtype=float), np.asarray(frames[1], dtype=float)
    n = np.cross(t1, t2)
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    w = t1[j] - np.einsum("ij,ij->i", t1[j], n[i])[:, None] * n[i]
    return np.arctan2(
        np.einsum("ij,ij->i", w, t2[i]), np.einsum("ij,ij->i", w, t1[i])
    )


def smoothness(p: np.ndarray, mesh: TriMesh, weights: np.ndarray, transport=None):
    """Direction-field smoothness over edges with parallel transport.

    ``sum_e w_e [ (cos p_i - cos(p_j + rho_e))^2 + (sin p_i - sin(p_j + rho_e))^2 ]``
    which equals ``sum_e 2 w_e (1 - cos(p_i - p_j - rho_e))``.  Returns
    ``(value, grad)`` with ``grad`` per vertex.
    """
    p = np.asarray(p, dtype=float)
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    rho = np.zeros(mesh.n_edges) if transport is None else np.asarray(transport)
    delta = p[i] - p[j] - rho
    w = np.asarray(weights, dtype=float)
    value = float(np.sum(2.0 * w * (1.0 - np.cos(delta))))
    g_edge = 2.0 * w * np.sin(delta)
    grad = np.zeros(len(p))
    np.add.at(grad, i, g_edge)
    np.add.at(grad, j, -g_edge)
    return value, grad


# ---------------------------------------------------------------------------
# eigenvector sensitivities
# ---------------------------------------------------------------------------


@dataclass
class SensitivitySystem:
    """Factorized bordered system for pinned-eigenvector sensitivities.

    The matrix

        [ A - lam B   -B v_ref   e_pin ]
        [ -(B v_ref)^T    0        0   ]
        [   e_pin^T       0        0   ]

    is symmetric and nonsingular whenever the pin is valid, because the rows
    and borders restrict the two-dimensional eigenplane kernel of
    ``A - lam B``.  Solving against ``[-(dA/dp) v_ref; 0; 0]`` yields the
    tangent ``(dv_ref/dp, dlam/dp, 0)``; the transpose solve (same matrix)
    yields the adjoint.
    """

    matrices: StripeMatrices
    state: EigenState
    lu: object
    n: int

    def solve(self, rhs_v: np.ndarray, rhs_lam: float = 0.0) -> np.ndarray:
        """Solve the bordered system; returns the full (n + 2) solution."""
        rhs = np.zeros(self.n + 2)
        rhs[: self.n] = rhs_v
        rhs[self.n] = rhs_lam
        _count_solve()
        out = self.lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise SolverError("sensitivity solve produced non-finite values")
        return out


def build_sensitivity(M: StripeMatrices, state: EigenState) -> SensitivitySystem:
    """Assemble and factorize the bordered sensitivity system at ``v_ref``."""
    if state.v_ref is None:
        raise SolverError("eigenplane must be pinned before building sensitivities")
    n = M.Ac.shape[0]
    v = state.v_ref
    Bv = M.bc * v
    K = (M.Ac - sp.diags(state.lam * M.bc)).tocsc()
    e = np.zeros(n)
    e[state.pin_slot] = 1.0
    sys = sp.bmat(
        [
            [K, -Bv[:, None], e[:, None]],
            [-Bv[None, :], None, None],
            [e[None, :], None, None],
        ],
        format="csc",
    )
    try:
        lu = spla.splu(sys)
    except RuntimeError as exc:
        raise SolverError(f"sensitivity system is singular: {exc}") from exc
    return SensitivitySystem(matrices=M, state=state, lu=lu, n=n)


def reference_cotangent(state: EigenState, dT_dv: np.ndarray) -> np.ndarray:
    """Pull a gradient with respect to ``v(theta)`` back to ``v_ref``.

    ``v(theta) = cos(theta) v_ref + sin(theta) J v_ref`` with J the per-vertex
    quarter turn, so ``dT/dv_ref = cos(theta) dT/dv - sin(theta) J dT/dv``.
    """
    c, s = np.cos(state.theta), np.sin(state.theta)
    return c * dT_dv - s * perp_rotation(dT_dv)


def eigen_adjoint(
    sens: SensitivitySystem, dT_dvref: np.ndarray, dT_dlam: float = 0.0
) -> np.ndarray:
    """Adjoint vector ``y_v`` such that ``dT/dp_j = -y_v^T (dA/dp_j) v_ref``.

    One linear solve, independent of the number of design parameters.
    """
    return sens.solve(dT_dvref, dT_dlam)[: sens.n]


def _edge_omega_param_jacobian(
    mesh: TriMesh, params: VectorFieldParams, frames
) -> tuple[np.ndarray, np.ndarray]:
    """``(d omega_e / d p_i, d omega_e / d p_j)`` for every edge (i, j)."""
    dz = field_param_jacobian(params, frames)
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    e = mesh.vertices[j] - mesh.vertices[i]
    return (
        0.5 * np.einsum("ij,ij->i", e, dz[i]),
        0.5 * np.einsum("ij,ij->i", e, dz[j]),
    )


def _expand_phase(M: StripeMatrices, v: np.ndarray) -> np.ndarray:
    return v if M.Pp is None else np.asarray(M.Pp @ v).ravel()


def eigen_param_gradient(
    mesh: TriMesh,
    M: StripeMatrices,
    state: EigenState,
    y_v: np.ndarray,
    params: VectorFieldParams,
    weights: np.ndarray,
    frames,
) -> np.ndarray:
    """Contract an eigen adjoint against the per-edge system derivatives.

    Returns ``dT/dp`` per full-mesh vertex: ``-y_v^T (dA/dp) v_ref`` with
    ``dA/dp`` assembled edge by edge through ``d omega / dp``.  Periodic
    reduction (summing orbits onto representatives) is the caller's job.
    """
    y_full = _expand_phase(M, y_v)
    v_full = _expand_phase(M, state.v_ref)
    dom_i, dom_j = _edge_omega_param_jacobian(mesh, params, frames)
    grad = np.zeros(mesh.n_vertices)
    for e in range(mesh.n_edges):
        i, j = mesh.edges[e]
        dof = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1)
        blk = edge_block_domega(weights[e], M.omega[e])
        s_e = y_full[list(dof)] @ blk @ v_full[list(dof)]
        grad[i] -= s_e * dom_i[e]
        grad[j] -= s_e * dom_j[e]
    return grad


def eigenvalue_param_gradient(
    mesh: TriMesh,
    M: StripeMatrices,
    state: EigenState,
    params: VectorFieldParams,
    weights: np.ndarray,
    frames,
) -> np.ndarray:
    """``d lam / d p`` per full-mesh vertex (stationarity of the Rayleigh
    quotient: ``v^T (dA/dp) v`` with ``v^T B v = 1``)."""
    v_full = _expand_phase(M, state.v_ref)
    dom_i, dom_j = _edge_omega_param_jacobian(mesh, params, frames)
    grad = np.zeros(mesh.n_vertices)
    for e in range(mesh.n_edges):
        i, j = mesh.edges[e]
        dof = [2 * i, 2 * i + 1, 2 * j, 2 * j + 1]
        blk = edge_block_domega(weights[e], M.omega[e])
        s_e = v_full[dof] @ blk @ v_full[dof]
        grad[i] += s_e * dom_i[e]
        grad[j] += s_e * dom_j[e]
    return grad


def reduce_vertex_gradient(pm: PeriodicMap | None, g_full: np.ndarray) -> np.ndarray:
    """Sum a per-full-vertex gradient over periodic orbits (identity when
    aperiodic)."""
    if pm is None:
        return g_full
    out = np.zeros(pm.n_reduced)
    np.add.at(out, pm.reduced[pm.rep], g_full)
    return out


def phase_chain_cotangent(
    ls: LevelSet, v: np.ndarray, dT_dphi: np.ndarray
) -> np.ndarray:
    """Pull a per-vertex level-set gradient back to the phase vector ``v``.

    Chains ``phi_i(alpha_i)`` (level-set transfer) and
    ``alpha_i = atan2(b_i, a_i)``; returns a gradient interleaved like ``v``.
    ``dT_dphi`` must live on the same (reduced) vertex set as ``v``.
    """
    dT_dalpha = np.asarray(dT_dphi) * ls.jac
    pj = phase_arg_jacobian(v)
    out = np.empty_like(v)
    out[0::2] = dT_dalpha * pj[0::2]
    out[1::2] = dT_dalpha * pj[1::2]
    return out


# ---------------------------------------------------------------------------
# equilibrium adjoint
# ---------------------------------------------------------------------------


def _cut_phi_contractions(
    prob: EquilibriumProblem, q: np.ndarray, y_full: np.ndarray | None
):
    """Per-mesh-vertex ``dU/dphi`` and (optionally) ``y^T dg/dphi``.

    Runs once over the cut elements; uncut elements carry no continuous
    level-set dependence (their material is fixed by the sign of phi).
    """
    model = prob.model
    mesh = model.mesh
    x, xhat = prob.expand(q)
    dU = np.zeros(mesh.n_vertices)
    ydg = np.zeros(mesh.n_vertices) if y_full is not None else None
    for e in np.nonzero(prob.cut_mask)[0]:
        Xe, xe, xhe, _ = _element_arrays(prob, e, x, xhat)
        phi3 = model.element_phi(e, prob.phi)
        dU3, dg3 = enriched_phi_jacobian(
            Xe, xe, xhe, phi3, model.soft, model.stiff
        )
        tri = mesh.triangles[e]
        np.add.at(dU, tri, dU3)
        if y_full is not None:
            ids = _element_dof_ids(prob, e)
            np.add.at(ydg, tri, y_full[ids] @ dg3)
    return dU, ydg


def equilibrium_phi_gradient(
    prob: EquilibriumProblem,
    q: np.ndarray,
    dT_dU: float = 0.0,
    dT_dy: np.ndarray | None = None,
    system=None,
):
    """Total level-set gradient of ``T(U(q*, phi), y(q*))`` at equilibrium.

    ``y = E q + b`` is the full gather vector (positions then enrichments);
    ``dT_dy`` is the explicit objective gradient on it, ``dT_dU`` the
    coefficient on the stored energy.  One adjoint solve against the
    equilibrium Hessian handles both, so the cost is independent of the
    number of level-set values:

        dT/dphi = dT_dU * dU/dphi|_q - (E y_adj)^T dg_full/dphi,
        H y_adj = dT_dU * g + E^T dT_dy.

    ``system`` may pass a precomputed ``(U, grad, H)`` triple from
    :func:`stripeforge.equilibrium.assemble_system`.  Returns the gradient per
    mid-surface mesh vertex (nonzero only around the material interface).
    """
    if system is None:
        system = assemble_system(prob, q)
    _, g, H = system
    rhs = np.zeros(prob.n_dofs)
    if dT_dU != 0.0:
        rhs += dT_dU * g
    if dT_dy is not None:
        rhs += prob.E.T @ dT_dy
    _count_solve()
    try:
        y_adj = spla.splu(H).solve(rhs)
    except RuntimeError:
        # flat direction at equilibrium: regularize and warn rather than fail
        warnings.warn(
            "equilibrium Hessian singular at the adjoint solve; "
            "falling back to a regularized solve",
            RuntimeWarning,
        )
        n = H.shape[0]
        shift = 1e-10 * max(abs(H.diagonal()).max(), 1.0)
        y_adj = spla.splu(H + shift * sp.identity(n, format="csc")).solve(rhs)
    y_full = np.asarray(prob.E @ y_adj).ravel()
    dU, ydg = _cut_phi_contractions(prob, q, y_full)
    return dT_dU * dU - ydg
