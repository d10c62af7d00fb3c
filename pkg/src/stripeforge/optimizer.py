"""Inverse design loop: candidate evaluation, L-BFGS, and gradient checking.

A design is the pair ``(p, theta)``: per-vertex field angles (one per
periodic representative when the cell is periodic) plus the global in-plane
eigenplane rotation.  ``DesignProblem`` owns everything fixed during a run
(mesh, frames, materials, targets, the pin vertex) and exposes a forward
evaluation producing a full pipeline context and an adjoint gradient reusing
that context, so line-search probes never pay for derivatives.

The minimizer is a limited-memory BFGS (two-loop recursion, default memory
10) with backtracking Armijo line search on the merit
``T + w_sing R_sing + w_sm R_sm``; rejected candidates (solver failures,
infinite barrier) simply shorten the step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError, StripeforgeError
from .equilibrium import (
    EquilibriumProblem,
    SolverOptions,
    build_problem,
    macro_state,
    static_solve,
    young_modulus,
)
from .inverse import (
    build_sensitivity,
    eigen_adjoint,
    eigen_param_gradient,
    equilibrium_phi_gradient,
    match_objective,
    phase_chain_cotangent,
    reduce_vertex_gradient,
    reference_cotangent,
    singularity_barrier,
    smoothness,
    stiffness_match_objective,
    transport_angles,
)
from .mesh import PeriodicMap, TriMesh, cotan_edge_weights, vertex_normals
from .shell import Material, ShellModel, extrude_shell
from .stripes import (
    VectorFieldParams,
    assemble_stripe_matrices,
    default_pin_vertex,
    edge_omega,
    eigenvector_at,
    field_from_params,
    level_set_transfer,
    phases,
    pin_reference,
    solve_eigenplane,
)

PIN_MIN_MAGNITUDE = 1e-6


@dataclass(frozen=True)
class StiffnessTarget:
    """Directional stiffness profile target: ``T = sum_j (k(theta_j) - k_j)^2``."""

    angles: np.ndarray
    values: np.ndarray
    strain: float = 0.01

    def __post_init__(self):
        if len(self.angles) != len(self.values):
            raise ValueError("angles and values must have equal length")
        if self.strain == 0.0:
            raise ValueError("strain must be nonzero")


@dataclass(frozen=True)
class DeformationTarget:
    """Deformed-shape target under one macro load: ``T = |x - x_target|^2``."""

    theta: float
    strain: float
    positions: np.ndarray  # (n_nodes, 3) target for the full node set


@dataclass
class DesignProblem:
    """Everything held fixed over one inverse-design run."""

    mesh: TriMesh
    thickness: float
    soft: Material
    stiff: Material
    frequency: float
    target: StiffnessTarget | DeformationTarget | None
    periodic: PeriodicMap | None = None
    frames: tuple | None = None
    a1: float = 0.05
    a2: float = 0.0
    d_hat: float = 0.1
    w_sing: float = 1.0
    w_smooth: float = 0.0
    pin: int | None = None  # fixed for the whole run; chosen on first evaluation
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(tol=1e-10))

    def __post_init__(self):
        if self.frames is None:
            normals = vertex_normals(self.mesh)
            from .mesh import tangent_frames

            self.frames = tangent_frames(self.mesh, normals)
        self.edge_weights = cotan_edge_weights(self.mesh)
        self.transport = transport_angles(self.mesh, self.frames)
        model = extrude_shell(self.mesh, self.thickness, vertex_normals(self.mesh))
        self.model = ShellModel(
            model.mesh, model.h, model.nodes, model.elements, self.soft, self.stiff
        )
        # warm starts: load-case key -> (EquilibriumProblem, q)
        self._warm: dict = {}

    # -- design vector layout ------------------------------------------------

    @property
    def n_design(self) -> int:
        n = self.periodic.n_reduced if self.periodic else self.mesh.n_vertices
        return n + 1  # + theta

    def split(self, x: np.ndarray):
        return np.asarray(x[:-1], dtype=float), float(x[-1])

    def expand_angles(self, p_red: np.ndarray) -> np.ndarray:
        if self.periodic is None:
            return p_red
        return p_red[self.periodic.reduced[self.periodic.rep]]

    # -- forward evaluation --------------------------------------------------

    def evaluate(self, x: np.ndarray) -> "Candidate":
        """Run the forward pipeline at the design ``x = (p, theta)``.

        Returns a :class:`Candidate` holding the merit, its parts, and every
        intermediate needed by :meth:`gradient`.  Raises
        :class:`stripeforge.errors.SolverError` on unrecoverable failures
        (line searches treat those as rejected steps).
        """
        p_red, theta = self.split(x)
        p_full = self.expand_angles(p_red)
        params = VectorFieldParams(p_full, self.frequency)
        z = field_from_params(self.mesh, params, self.frames)
        om = edge_omega(self.mesh, z)
        M = assemble_stripe_matrices(
            self.mesh, om, self.edge_weights, periodic=self.periodic
        )
        raw = solve_eigenplane(M)
        if self.pin is None:
            self.pin = default_pin_vertex(raw, self.periodic)
        state = pin_reference(raw, self.pin, self.periodic)
        pin_mag = abs(state.v_ref[state.pin_slot - 1])
        if pin_mag < PIN_MIN_MAGNITUDE:
            raise SolverError(
                f"pin vertex {self.pin} phase magnitude {pin_mag:.3e} fell below "
                f"{PIN_MIN_MAGNITUDE}; restart the run with a different pin vertex"
            )
        state = eigenvector_at(state, theta)
        v = state.v

        r_sing, dsing_dv = singularity_barrier(v, self.d_hat)
        r_sm, dsm_dp = smoothness(
            p_full, self.mesh, self.edge_weights, transport=self.transport
        )
        cand = Candidate(
            problem=self,
            x=np.array(x, dtype=float),
            params=params,
            matrices=M,
            state=state,
            r_sing=r_sing,
            dsing_dv=dsing_dv,
            r_smooth=r_sm,
            dsm_dp=dsm_dp,
        )
        if not np.isfinite(r_sing):
            cand.T = 0.0
            cand.merit = np.inf
            return cand

        ls = level_set_transfer(phases(v), self.a1, self.a2)
        cand.levelset = ls
        phi_full = ls.phi if self.periodic is None else self.expand_phi(ls.phi)
        cand.phi_full = phi_full

        if isinstance(self.target, StiffnessTarget):
            ks = np.empty(len(self.target.angles))
            for j, ang in enumerate(self.target.angles):
                prob, q, report = self._solve_case(
                    ("profile", j), phi_full, float(ang), self.target.strain
                )
                ks[j] = young_modulus(prob, q, report)
                cand.solutions.append((prob, q))
            cand.ks = ks
            cand.T, cand.dT_dk = stiffness_match_objective(ks, self.target.values)
        elif isinstance(self.target, DeformationTarget):
            prob, q, report = self._solve_case(
                ("deform",), phi_full, self.target.theta, self.target.strain
            )
            cand.solutions.append((prob, q))
            xfull, _ = prob.expand(q)
            cand.T, cand.dT_dx = match_objective(xfull, self.target.positions)
        else:
            cand.T = 0.0

        cand.merit = cand.T + self.w_sing * cand.r_sing + self.w_smooth * cand.r_smooth
        return cand

    def expand_phi(self, phi_red: np.ndarray) -> np.ndarray:
        return phi_red[self.periodic.reduced[self.periodic.rep]]

    def _solve_case(self, key, phi_full, theta_load, strain):
        if self.periodic is None:
            raise StripeforgeError("mechanical objectives require a periodic cell")
        state = macro_state(self.periodic.lattice, theta_load, strain, self.thickness)
        prob = build_problem(self.model, phi_full, self.periodic, state)
        q_start = None
        prev = self._warm.get(key)
        if prev is not None:
            q_start = transfer_state(prev[0], prev[1], prob)
        try:
            q, report = static_solve(prob, q_start=q_start, opts=self.solver)
        except SolverError:
            if q_start is None:
                raise
            q, report = static_solve(prob, opts=self.solver)  # cold-start retry
        self._warm[key] = (prob, q)
        return prob, q, report

    # -- adjoint gradient ----------------------------------------------------

    def gradient(self, cand: "Candidate") -> np.ndarray:
        """Total merit gradient with respect to ``(p, theta)``.

        Uses one equilibrium adjoint solve per load case and a single eigen
        adjoint solve; never forms dense sensitivities.
        """
        if not np.isfinite(cand.merit):
            raise SolverError("cannot differentiate a rejected candidate")
        n_red = (
            self.periodic.n_reduced if self.periodic else self.mesh.n_vertices
        )

        # mechanical path: dT/dphi from the equilibrium adjoints
        dT_dphi_full = np.zeros(self.mesh.n_vertices)
        if isinstance(self.target, StiffnessTarget):
            for j, (prob, q) in enumerate(cand.solutions):
                ms = prob.macro
                # k = 2U/(A h eps^2): chain through the stored energy
                coeff = cand.dT_dk[j] * 2.0 / (ms.area * ms.h * ms.strain**2)
                if coeff != 0.0:
                    dT_dphi_full += equilibrium_phi_gradient(prob, q, dT_dU=coeff)
        elif isinstance(self.target, DeformationTarget):
            prob, q = cand.solutions[0]
            dT_dy = np.zeros(prob.E.shape[0])
            dT_dy[: cand.dT_dx.size] = cand.dT_dx.ravel()
            dT_dphi_full += equilibrium_phi_gradient(prob, q, dT_dy=dT_dy)

        dT_dphi_red = reduce_vertex_gradient(self.periodic, dT_dphi_full)
        v = cand.state.v
        dT_dv = phase_chain_cotangent(cand.levelset, v, dT_dphi_red)
        dT_dv += self.w_sing * cand.dsing_dv

        dtheta = float(dT_dv @ cand.state.dv_dtheta())
        sens = build_sensitivity(cand.matrices, cand.state)
        y_v = eigen_adjoint(sens, reference_cotangent(cand.state, dT_dv))
        gp_full = eigen_param_gradient(
            self.mesh,
            cand.matrices,
            cand.state,
            y_v,
            cand.params,
            self.edge_weights,
            self.frames,
        )
        gp = reduce_vertex_gradient(self.periodic, gp_full)
        gp = gp + self.w_smooth * reduce_vertex_gradient(self.periodic, cand.dsm_dp)
        out = np.empty(n_red + 1)
        out[:-1] = gp
        out[-1] = dtheta
        return out


@dataclass
class Candidate:
    """One forward evaluation: merit parts plus reusable pipeline state."""

    problem: DesignProblem
    x: np.ndarray
    params: VectorFieldParams
    matrices: object
    state: object
    r_sing: float
    dsing_dv: np.ndarray
    r_smooth: float
    dsm_dp: np.ndarray
    levelset: object = None
    phi_full: np.ndarray = None
    ks: np.ndarray = None
    dT_dk: np.ndarray = None
    dT_dx: np.ndarray = None
    T: float = np.nan
    merit: float = np.nan
    solutions: list = field(default_factory=list)


def transfer_state(
    old: EquilibriumProblem, q_old: np.ndarray, new: EquilibriumProblem
) -> np.ndarray:
    """Map a converged state onto a problem with a different enrichment layout.

    Representative positions carry over node-by-node; enrichment coordinates
    persist where the node keeps its enrichment and start at zero where the
    cut front moved.  Prevents warm-start energy spikes between design
    iterations.
    """
    x_old, xh_old = old.expand(q_old)
    q = new.q0.copy()
    n_x = 3 * len(new.rep_nodes)
    q[:n_x] = x_old[new.rep_nodes].ravel()
    for i, nd in enumerate(new.rep_enr):
        j = old.enr_pos.get(int(nd))
        if j is not None:
            q[n_x + 3 * i : n_x + 3 * i + 3] = xh_old[j]
    if new.xi_index >= 0 and old.xi_index >= 0:
        q[new.xi_index] = q_old[old.xi_index]
    return q


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptOptions:
    memory: int = 10
    max_iterations: int = 100
    grad_tol: float = 1e-8  # relative to the initial gradient norm
    armijo_c: float = 1e-4
    max_halvings: int = 30
    stagnation_rel: float = 1e-10
    stagnation_iters: int = 5


@dataclass
class OptRun:
    """Accepted-iterate history and termination status of one run."""

    history: list = field(default_factory=list)
    status: str = "running"
    converged: bool = False

    def log(self, **entry):
        self.history.append(entry)


def lbfgs_minimize(fun, x0: np.ndarray, opts: OptOptions = OptOptions()):
    """Limited-memory BFGS with backtracking Armijo line search.

    ``fun(x)`` returns ``(value, grad, info)``; ``info`` (any mapping) is
    copied into the run log.  Evaluations may signal a rejected point by an
    infinite value or by raising :class:`SolverError`; the line search then
    backtracks.  Returns ``(x_best, run)``.
    """
    x = np.array(x0, dtype=float)
    f, g, info = fun(x)
    if not np.isfinite(f):
        raise SolverError("start point evaluation failed (non-finite merit)")
    run = OptRun()
    run.log(iter=0, merit=f, grad_norm=float(np.linalg.norm(g)), step=0.0, **info)
    g0_norm = max(float(np.linalg.norm(g)), 1e-300)

    s_hist, y_hist, rho_hist = [], [], []
    recent = [f]
    for it in range(1, opts.max_iterations + 1):
        if np.linalg.norm(g) <= opts.grad_tol * g0_norm:
            run.status = "gradient-tolerance"
            run.converged = True
            break

        d = -_two_loop(g, s_hist, y_hist, rho_hist)
        slope = float(g @ d)
        if slope >= 0:  # safeguard: fall back to steepest descent
            d = -g
            slope = float(g @ d)

        t = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        accepted = False
        for _ in range(opts.max_halvings):
            try:
                f_new, g_new, info_new = fun(x + t * d)
            except SolverError:
                t *= 0.5
                continue
            if np.isfinite(f_new) and f_new <= f + opts.armijo_c * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            run.status = "line-search-failed"
            break

        s = t * d
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        x = x + t * d
        f, g, info = f_new, g_new, info_new
        run.log(
            iter=it, merit=f, grad_norm=float(np.linalg.norm(g)), step=t, **info
        )
        recent.append(f)
        if len(recent) > opts.stagnation_iters + 1:
            recent.pop(0)
        if (
            len(recent) == opts.stagnation_iters + 1
            and recent[0] - recent[-1]
            <= opts.stagnation_rel * max(abs(recent[-1]), 1e-300)
        ):
            run.status = "stagnated"
            run.converged = True
            break
    else:
        run.status = "max-iterations"
    return x, run


def _two_loop(g, s_hist, y_hist, rho_hist):
    """Two-loop recursion for the L-BFGS inverse-Hessian application."""
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        q *= gamma
    for (s, y, rho), a in zip(
        zip(s_hist, y_hist, rho_hist), reversed(alphas)
    ):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def optimize_design(
    problem: DesignProblem,
    p0: np.ndarray,
    theta0: float = 0.0,
    opts: OptOptions = OptOptions(),
):
    """Run L-BFGS on the full design merit; returns ``(p, theta, run)``.

    The run log records, per accepted iterate: merit, objective ``T``, both
    regularizer values, eigenvalue ``lambda``, gradient norm, and step size.
    """
    x0 = np.concatenate([np.asarray(p0, dtype=float), [float(theta0)]])

    def fun(x):
        cand = problem.evaluate(x)
        if not np.isfinite(cand.merit):
            return np.inf, None, {}
        g = problem.gradient(cand)
        info = {
            "T": cand.T,
            "r_sing": cand.r_sing,
            "r_smooth": cand.r_smooth,
            "lam": cand.state.lam,
        }
        return cand.merit, g, info

    x, run = lbfgs_minimize(fun, x0, opts)
    return x[:-1], float(x[-1]), run


def gradient_check(
    problem: DesignProblem,
    p: np.ndarray,
    theta: float,
    n_probes: int = 10,
    step: float = 1e-6,
    tol: float = 1e-4,
    seed: int = 0,
):
    """Compare the adjoint design gradient against central finite differences.

    Probes ``n_probes`` random coordinates of ``(p, theta)`` (theta is always
    included).  Returns ``(rows, passed)`` where each row is a dict with keys
    ``coordinate``, ``adjoint``, ``fd``, ``rel_err``.
    """
    x = np.concatenate([np.asarray(p, dtype=float), [float(theta)]])
    cand = problem.evaluate(x)
    g = problem.gradient(cand)
    rng = np.random.default_rng(seed)
    n = len(x)
    coords = list(rng.choice(n - 1, size=min(n_probes - 1, n - 1), replace=False))
    coords.append(n - 1)  # theta
    scale = max(np.abs(g).max(), 1e-300)
    rows = []
    passed = True
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp[c] += step
        xm[c] -= step
        fd = (problem.evaluate(xp).merit - problem.evaluate(xm).merit) / (2 * step)
        denom = max(abs(fd), 1e-3 * scale)
        rel = abs(g[c] - fd) / denom
        ok = rel <= tol
        passed &= ok
        rows.append(
            {
                "coordinate": int(c),
                "adjoint": float(g[c]),
                "fd": float(fd),
                "rel_err": float(rel),
            }
        )
    return rows, passed
