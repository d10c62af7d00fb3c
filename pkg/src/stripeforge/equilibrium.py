"""Global statics: assembly, periodic macro-strain constraints, projected
Newton, and homogenized directional stiffness.

All constraints (periodic pairing of positions and enrichments, prescribed
macro translations, fixed rigid-mode DOFs, the free transverse-stretch
scalar) are encoded in a single affine map

    y = E q + b

from the unknown vector ``q`` to the full gather vector ``y`` holding all
nodal positions followed by all enrichment coordinates.  Energy, gradient,
and Hessian are assembled element-by-element on ``y`` and projected through
``E``, so the Newton loop never sees the constraints explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ElementInversionError, SolverError
from .kernels import element_integrals, enriched_element_integrals, enriched_phi_jacobian
from .mesh import PeriodicMap, TriMesh
from .shell import ShellModel, classify_elements, perturb_phi


@dataclass(frozen=True)
class MacroState:
    """Uniaxial macro stretch of magnitude ``d = 1 + strain`` along ``theta``."""

    theta: float
    d: float
    area: float
    h: float

    @property
    def strain(self) -> float:
        return self.d - 1.0

    @property
    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta), 0.0])

    @property
    def transverse(self) -> np.ndarray:
        return np.array([-np.sin(self.theta), np.cos(self.theta), 0.0])


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 100
    tol: float = 1e-8
    max_halvings: int = 40
    shift_scale: float = 1e-8
    max_shift_growth: int = 20
    seed: int = 0
    buckling_amplitude: float = 1e-6


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    energy: float
    residuals: list = field(default_factory=list)
    n_linear_solves: int = 0


@dataclass(frozen=True)
class EquilibriumProblem:
    """A shell model plus its constraint layout.

    ``phi`` is the per-mid-surface-vertex level set (``None`` for a
    homogeneous cell built from the stiff material).  ``E``/``b`` realize the
    affine constraint map; ``q0`` is the affine-deformation initial guess.
    """

    model: ShellModel
    phi: np.ndarray | None
    periodic: PeriodicMap | None
    macro: MacroState | None
    E: sp.csr_matrix
    b: np.ndarray
    q0: np.ndarray
    cut_mask: np.ndarray
    enr_nodes: np.ndarray  # nodes carrying enrichment DOFs
    enr_pos: dict  # node -> position in enr_nodes
    fixed_node: int
    xi_index: int  # column of the free transverse scalar, -1 if absent
    rep_nodes: np.ndarray = None  # nodes owning x DOF triples, in column order
    rep_enr: np.ndarray = None  # nodes owning enrichment DOF triples, in order

    @property
    def n_dofs(self) -> int:
        return self.E.shape[1]

    def expand(self, q: np.ndarray):
        """Full positions (2n, 3) and enrichment table (n_enr, 3) from ``q``."""
        y = self.E @ q + self.b
        nx = 3 * self.model.n_nodes
        x = y[:nx].reshape(-1, 3)
        xhat = y[nx:].reshape(-1, 3)
        return x, xhat


def _shell_node_maps(model: ShellModel, pm: PeriodicMap | None):
    """Representative and lattice-shift tables lifted from vertices to nodes."""
    n = model.mesh.n_vertices
    nn = model.n_nodes
    if pm is None:
        return np.arange(nn), np.zeros((nn, 2), dtype=int)
    node_rep = np.concatenate([pm.rep, pm.rep + n])
    node_shifts = np.concatenate([pm.shifts, pm.shifts])
    return node_rep, node_shifts


def build_problem(
    model: ShellModel,
    phi: np.ndarray | None = None,
    periodic: PeriodicMap | None = None,
    macro: MacroState | None = None,
    relax_transverse: bool = True,
) -> EquilibriumProblem:
    """Assemble the constraint map for a (possibly periodic, macro-strained)
    equilibrium problem.

    With a periodic map, plus-side nodes follow their representatives up to
    the prescribed lattice translations ``F_macro L_a``; the transverse
    in-plane stretch enters as one extra unknown scalar so the cell is under
    uniaxial macro stress.  One representative node is pinned to its rest
    position to remove rigid translation.
    """
    mesh = model.mesh
    nn = model.n_nodes
    phi_arr = None if phi is None else perturb_phi(np.asarray(phi, dtype=float))
    if phi_arr is None:
        cut_mask = np.zeros(model.n_elements, dtype=bool)
    else:
        cut_mask = classify_elements(mesh, phi_arr)

    node_rep, node_shifts = _shell_node_maps(model, periodic)

    # fixed node: representative of mesh vertex 0's bottom node (removes the
    # rigid translation left by pure periodic constraints)
    fixed_node = int(node_rep[0]) if periodic is not None else -1

    # enrichment nodes: all nodes of cut elements, closed under representatives
    enr = set()
    for e in np.nonzero(cut_mask)[0]:
        for nd in model.elements[e]:
            enr.add(int(nd))
            enr.add(int(node_rep[nd]))
    enr_nodes = np.array(sorted(enr), dtype=int)
    enr_pos = {int(nd): i for i, nd in enumerate(enr_nodes)}

    # the fixed node carries no unknowns, so it gets no DOF columns
    rep_nodes = np.array(
        [nd for nd in np.unique(node_rep) if nd != fixed_node], dtype=int
    )
    rep_pos = {int(nd): i for i, nd in enumerate(rep_nodes)}
    rep_enr = np.array([nd for nd in enr_nodes if node_rep[nd] == nd], dtype=int)
    rep_enr_pos = {int(nd): i for i, nd in enumerate(rep_enr)}

    n_x = 3 * len(rep_nodes)
    n_xh = 3 * len(rep_enr)
    xi_index = n_x + n_xh if (macro is not None and relax_transverse) else -1
    n_dofs = n_x + n_xh + (1 if xi_index >= 0 else 0)
    ny = 3 * nn + 3 * len(enr_nodes)

    if periodic is not None:
        lattice = periodic.lattice
        if macro is not None:
            eps = macro.strain
            nvec = macro.direction
            mvec = macro.transverse
            u_axis = [
                lattice[a] + eps * nvec * (nvec @ lattice[a]) for a in range(2)
            ]
            w_axis = [mvec * (mvec @ lattice[a]) for a in range(2)]
        else:
            u_axis = [lattice[a] for a in range(2)]
            w_axis = [np.zeros(3), np.zeros(3)]

    rows, cols, data = [], [], []
    b = np.zeros(ny)
    for nd in range(nn):
        r = int(node_rep[nd])
        s = node_shifts[nd]
        for a in range(3):
            yi = 3 * nd + a
            if r == fixed_node:
                b[yi] += model.nodes[fixed_node, a]
            else:
                rows.append(yi)
                cols.append(3 * rep_pos[r] + a)
                data.append(1.0)
            if periodic is not None and (s[0] or s[1]):
                b[yi] += s[0] * u_axis[0][a] + s[1] * u_axis[1][a]
                if xi_index >= 0:
                    wv = s[0] * w_axis[0][a] + s[1] * w_axis[1][a]
                    if wv != 0.0:
                        rows.append(yi)
                        cols.append(xi_index)
                        data.append(wv)
    for i, nd in enumerate(enr_nodes):
        r = int(node_rep[nd])
        for a in range(3):
            rows.append(3 * nn + 3 * i + a)
            cols.append(n_x + 3 * rep_enr_pos[r] + a)
            data.append(1.0)
    E = sp.csr_matrix((data, (rows, cols)), shape=(ny, n_dofs))

    # initial guess: affine macro deformation of the representatives
    q0 = np.zeros(n_dofs)
    X_rep = model.nodes[rep_nodes]
    if macro is not None:
        eps = macro.strain
        nvec = macro.direction
        x_rep = X_rep + eps * np.outer(X_rep @ nvec, nvec)
    else:
        x_rep = X_rep
    q0[:n_x] = x_rep.ravel()

    return EquilibriumProblem(
        model=model,
        phi=phi_arr,
        periodic=periodic,
        macro=macro,
        E=E,
        b=b,
        q0=q0,
        cut_mask=cut_mask,
        enr_nodes=enr_nodes,
        enr_pos=enr_pos,
        fixed_node=fixed_node,
        xi_index=xi_index,
        rep_nodes=rep_nodes,
        rep_enr=rep_enr,
    )


def _element_arrays(prob: EquilibriumProblem, e: int, x, xhat):
    model = prob.model
    nodes = model.elements[e]
    Xe = model.nodes[nodes]
    xe = x[nodes]
    if prob.cut_mask[e]:
        slots = [prob.enr_pos[int(nd)] for nd in nodes]
        xhe = xhat[slots]
        return Xe, xe, xhe, slots
    return Xe, xe, None, None


def _element_dof_ids(prob: EquilibriumProblem, e: int):
    """Indices into the gather vector ``y`` for element ``e``'s DOFs."""
    nn = prob.model.n_nodes
    nodes = prob.model.elements[e]
    ids = [3 * nd + a for nd in nodes for a in range(3)]
    if prob.cut_mask[e]:
        ids += [
            3 * nn + 3 * prob.enr_pos[int(nd)] + a for nd in nodes for a in range(3)
        ]
    return np.array(ids, dtype=int)


def assemble_system(prob: EquilibriumProblem, q: np.ndarray, derivs: bool = True):
    """Total energy with constraint-projected gradient and Hessian.

    Raises :class:`ElementInversionError` naming the element when any
    quadrature point inverts.
    """
    model = prob.model
    x, xhat = prob.expand(q)
    ny = prob.E.shape[0]
    U = 0.0
    g_full = np.zeros(ny) if derivs else None
    trip_i, trip_j, trip_v = [], [], []
    for e in range(model.n_elements):
        Xe, xe, xhe, _ = _element_arrays(prob, e, x, xhat)
        try:
            if prob.cut_mask[e]:
                phi3 = model.element_phi(e, prob.phi)
                Ue, ge, He = enriched_element_integrals(
                    Xe, xe, xhe, phi3, model.soft, model.stiff, derivs=derivs
                )
            else:
                mat = model.stiff
                if prob.phi is not None:
                    # uncut: uniform level-set sign selects the material
                    if prob.phi[model.mesh.triangles[e]].sum() < 0:
                        mat = model.soft
                Ue, ge, He = element_integrals(Xe, xe, mat, derivs=derivs)
        except ElementInversionError as err:
            raise ElementInversionError(e) from err
        U += Ue
        if derivs:
            ids = _element_dof_ids(prob, e)
            np.add.at(g_full, ids, ge)
            ii, jj = np.meshgrid(ids, ids, indexing="ij")
            trip_i.append(ii.ravel())
            trip_j.append(jj.ravel())
            trip_v.append(He.ravel())
    if not derivs:
        return U, None, None
    grad = prob.E.T @ g_full
    H_full = sp.coo_matrix(
        (np.concatenate(trip_v), (np.concatenate(trip_i), np.concatenate(trip_j))),
        shape=(ny, ny),
    ).tocsr()
    H = (prob.E.T @ H_full @ prob.E).tocsc()
    return U, grad, H


def _force_scale(prob: EquilibriumProblem) -> float:
    model = prob.model
    mu = max(model.stiff.mu, model.soft.mu)
    L = float(np.ptp(model.nodes, axis=0).max())
    return max(mu * model.h * max(L, 1.0), 1e-30)


def _is_flat(model: ShellModel) -> bool:
    z = model.mesh.vertices[:, 2]
    return bool(np.ptp(z) < 1e-12)


def static_solve(
    prob: EquilibriumProblem,
    q_start: np.ndarray | None = None,
    opts: SolverOptions = SolverOptions(),
    perturb_flat: bool = True,
):
    """Projected Newton minimization of the shell energy.

    Indefinite Hessians get an adaptive diagonal shift; steps are accepted
    under Armijo backtracking so the energy never increases.  Flat in-plane
    problems receive a tiny seeded normal perturbation so buckled branches
    are reachable.  Returns ``(q, report)``.
    """
    q = np.array(prob.q0 if q_start is None else q_start, dtype=float)
    if (
        perturb_flat
        and q_start is None
        and prob.macro is not None
        and _is_flat(prob.model)
    ):
        rng = np.random.default_rng(opts.seed)
        n_x = q.size - (1 if prob.xi_index >= 0 else 0) - 3 * _n_rep_enr(prob)
        bump = opts.buckling_amplitude * prob.model.h
        q[2:n_x:3] += bump * rng.standard_normal(n_x // 3)

    tol = opts.tol * _force_scale(prob)
    report = SolveReport(False, 0, 0.0)
    U, g, H = assemble_system(prob, q)
    report.residuals.append(float(np.linalg.norm(g, np.inf)))
    for it in range(opts.max_iterations):
        res = np.linalg.norm(g, np.inf)
        if res <= tol:
            report.converged = True
            break
        n = H.shape[0]
        tr = float(H.diagonal().sum())
        base = opts.shift_scale * max(abs(tr) / n, 1.0)
        shift = 0.0
        d = None
        for _ in range(opts.max_shift_growth):
            try:
                Hs = H + shift * sp.identity(n, format="csc") if shift else H
                lu = spla.splu(Hs)
                report.n_linear_solves += 1
                cand = lu.solve(-g)
                if np.isfinite(cand).all() and cand @ g < 0:
                    d = cand
                    break
            except RuntimeError:
                pass
            shift = base if shift == 0.0 else shift * 10.0
        if d is None:
            raise SolverError("Hessian regularization exhausted")
        # Armijo backtracking on the energy; the relative slack keeps the
        # comparison meaningful when |step energy| is below assembly rounding
        slope = float(g @ d)
        slack = 1e-13 * (abs(U) + 1e-300)
        t = 1.0
        accepted = False
        for _ in range(opts.max_halvings):
            try:
                U_new, g_new, H_new = assemble_system(prob, q + t * d)
            except ElementInversionError:
                t *= 0.5
                continue
            if U_new <= U + 1e-4 * t * slope + slack:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise SolverError(f"line search failed after {opts.max_halvings} halvings")
        q = q + t * d
        U, g, H = U_new, g_new, H_new
        report.iterations += 1
        report.residuals.append(float(np.linalg.norm(g, np.inf)))
    else:
        raise SolverError(
            f"Newton did not converge in {opts.max_iterations} iterations "
            f"(residual {np.linalg.norm(g, np.inf):.3e}, tol {tol:.3e})"
        )
    report.energy = float(U)
    return q, report


def macro_boundary_conditions(state: MacroState, pm: PeriodicMap):
    """Prescribed translation per lattice axis and the free transverse basis.

    Returns ``(u_axis, w_axis)``: ``u_axis[a]`` is the full translation
    applied to axis ``a`` (lattice vector plus directional stretch), and
    ``w_axis[a]`` the direction scaled by the solved-for transverse scalar.
    """
    eps = state.strain
    nvec = state.direction
    mvec = state.transverse
    u_axis = [pm.lattice[a] + eps * nvec * (nvec @ pm.lattice[a]) for a in range(2)]
    w_axis = [mvec * (mvec @ pm.lattice[a]) for a in range(2)]
    return u_axis, w_axis


def young_modulus(prob: EquilibriumProblem, q: np.ndarray, report: SolveReport) -> float:
    """Homogenized directional Young's modulus ``2 U / (A h eps^2)``."""
    if not report.converged:
        raise SolverError("young_modulus requires a converged solution")
    state = prob.macro
    if state is None or state.strain == 0.0:
        raise ValueError("macro state with nonzero strain required")
    U, _, _ = assemble_system(prob, q, derivs=False)
    return 2.0 * U / (state.area * state.h * state.strain**2)


def macro_state(lattice, theta: float, strain: float, h: float) -> MacroState:
    lattice = np.asarray(lattice, dtype=float).reshape(2, 3)
    area = float(np.linalg.norm(np.cross(lattice[0], lattice[1])))
    return MacroState(theta=theta, d=1.0 + strain, area=area, h=h)


def homogenize(
    model: ShellModel,
    phi,
    pm: PeriodicMap,
    theta: float,
    strain: float,
    opts: SolverOptions = SolverOptions(),
):
    """One uniaxial homogenization solve; returns ``(E_macro, prob, q, report)``."""
    state = macro_state(pm.lattice, theta, strain, model.h)
    prob = build_problem(model, phi, pm, state)
    q, report = static_solve(prob, opts=opts)
    return young_modulus(prob, q, report), prob, q, report


def stiffness_profile(
    model: ShellModel,
    phi,
    pm: PeriodicMap,
    thetas,
    strain: float,
    opts: SolverOptions = SolverOptions(),
):
    """Directional stiffness ``k(theta)`` via one homogenization per angle."""
    ks = np.empty(len(thetas))
    for i, th in enumerate(thetas):
        try:
            ks[i], _, _, _ = homogenize(model, phi, pm, th, strain, opts)
        except SolverError as err:
            raise SolverError(f"homogenization failed at theta={th}: {err}") from err
    return ks


def cylinder_map(X: np.ndarray, radius: float) -> np.ndarray:
    """Kirchhoff cylindrical bending map of rest points ``(X, Y, Z)``.

    The mid-surface plane ``Z = 0`` wraps onto a cylinder of the given radius
    with axis along y through ``(0, ., -radius)``; fibers stay normal and keep
    their length.
    """
    X = np.atleast_2d(X)
    ang = X[:, 0] / radius
    rho = radius + X[:, 2]
    out = np.stack(
        [rho * np.sin(ang), X[:, 1], rho * np.cos(ang) - radius], axis=1
    )
    return out


def build_bending_problem(model: ShellModel, pm: PeriodicMap, radius: float):
    """Periodic cell of an infinite plate bent to a cylinder.

    The first lattice axis becomes rotationally periodic: plus nodes follow
    their representatives under the rotation by ``arc / radius`` about the
    cylinder axis, which imposes the curvature without any clamped boundary.
    The second axis keeps its flat translation (no mean transverse strain).
    One node is pinned to the analytic cylinder position to remove the
    remaining rigid screw motion.  The initial guess is the analytic map.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    L0, L1 = pm.lattice
    if abs(L0[1]) > 1e-12 or abs(L0[2]) > 1e-12 or abs(L1[0]) > 1e-12:
        raise ValueError("bending expects lattice axis 0 along x, axis 1 along y")
    alpha = L0[0] / radius
    ca, sa = np.cos(alpha), np.sin(alpha)
    R = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    center = np.array([0.0, 0.0, -radius])
    t = center - R @ center

    nn = model.n_nodes
    node_rep, node_shifts = _shell_node_maps(model, pm)
    fixed_node = int(node_rep[0])
    rep_nodes = np.array(
        [nd for nd in np.unique(node_rep) if nd != fixed_node], dtype=int
    )
    rep_pos = {int(nd): i for i, nd in enumerate(rep_nodes)}
    n_dofs = 3 * len(rep_nodes)
    ny = 3 * nn
    fixed_pos = cylinder_map(model.nodes[fixed_node][None, :], radius)[0]

    rows, cols, data = [], [], []
    b = np.zeros(ny)
    for nd in range(nn):
        r = int(node_rep[nd])
        s0, s1 = node_shifts[nd]
        if s0 not in (0, 1):
            raise ValueError("bending supports a single period along axis 0")
        for a in range(3):
            yi = 3 * nd + a
            off = s1 * L1[a] + (t[a] if s0 else 0.0)
            if s0:
                if r == fixed_node:
                    b[yi] += R[a] @ fixed_pos + off
                else:
                    for bcomp in range(3):
                        if R[a, bcomp] != 0.0:
                            rows.append(yi)
                            cols.append(3 * rep_pos[r] + bcomp)
                            data.append(R[a, bcomp])
                    b[yi] += off
            else:
                if r == fixed_node:
                    b[yi] += fixed_pos[a] + off
                else:
                    rows.append(yi)
                    cols.append(3 * rep_pos[r] + a)
                    data.append(1.0)
                    b[yi] += off
    E = sp.csr_matrix((data, (rows, cols)), shape=(ny, n_dofs))
    q0 = cylinder_map(model.nodes[rep_nodes], radius).ravel()

    return EquilibriumProblem(
        model=model,
        phi=None,
        periodic=pm,
        macro=None,
        E=E,
        b=b,
        q0=q0,
        cut_mask=np.zeros(model.n_elements, dtype=bool),
        enr_nodes=np.array([], dtype=int),
        enr_pos={},
        fixed_node=fixed_node,
        xi_index=-1,
        rep_nodes=rep_nodes,
        rep_enr=np.array([], dtype=int),
    )


def kirchhoff_bending_energy(mat, area: float, h: float, radius: float) -> float:
    """Analytic thin-plate energy of cylindrical bending at curvature 1/r."""
    E = isotropic_young(mat)
    nu = isotropic_poisson(mat)
    return area * E * h**3 / (24.0 * (1.0 - nu**2) * radius**2)


def _n_rep_enr(prob: EquilibriumProblem) -> int:
    return len(prob.rep_enr)


def reuss_voigt_bounds(soft_E: float, stiff_E: float, stiff_fraction: float):
    """Series (Reuss) and parallel (Voigt) mixture bounds on the modulus."""
    f = stiff_fraction
    voigt = f * stiff_E + (1 - f) * soft_E
    reuss = 1.0 / (f / stiff_E + (1 - f) / soft_E)
    return reuss, voigt


def isotropic_young(mat) -> float:
    """Small-strain Young's modulus of a Neo-Hookean material."""
    mu, lam = mat.mu, mat.lam
    return mu * (3 * lam + 2 * mu) / (lam + mu)


def isotropic_poisson(mat) -> float:
    mu, lam = mat.mu, mat.lam
    return lam / (2 * (lam + mu))
