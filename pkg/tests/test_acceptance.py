"""Acceptance gate: the eleven end-to-end criteria, one test each.

Each test prints a ``criterion NN [...]: PASS/FAIL`` line directly to the
terminal (bypassing capture) so the gate status is visible in any log.
Oracles here are deliberately independent of the code under test where
feasible: dense generalized eigensolves, finite differences of whole
pipelines, an interface-conforming re-meshed reference, and the analytic
Kirchhoff plate energy.
"""

import dataclasses
import json
import time

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse

from stripeforge.cli import main as cli_main
from stripeforge.equilibrium import (
    SolverOptions,
    build_bending_problem,
    build_problem,
    homogenize,
    isotropic_young,
    kirchhoff_bending_energy,
    macro_state,
    reuss_voigt_bounds,
    static_solve,
    stiffness_profile,
)
from stripeforge.inverse import (
    build_sensitivity,
    reset_solve_counter,
    singularity_barrier,
    solve_count,
)
from stripeforge.kernels import (
    element_integrals,
    enriched_element_integrals,
    enriched_phi_jacobian,
)
from stripeforge.mesh import (
    build_mesh,
    build_periodic_map,
    cotan_edge_weights,
    grid_mesh,
    tangent_frames,
    vertex_normals,
)
from stripeforge.optimizer import (
    DesignProblem,
    OptOptions,
    StiffnessTarget,
    gradient_check,
    optimize_design,
)
from stripeforge.shell import Material, ShellModel, extrude_shell
from stripeforge.stripes import (
    VectorFieldParams,
    assemble_stripe_matrices,
    default_pin_vertex,
    edge_omega,
    field_from_params,
    phases,
    pin_reference,
    solve_eigenplane,
)

SOFT = Material(mu=1.0, lam=2.0)
STIFF = Material(mu=10.0, lam=20.0)
LATTICE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _criterion(capfd, num, desc, fn):
    try:
        fn()
    except BaseException:
        with capfd.disabled():
            print(f"criterion {num:2d} [{desc}]: FAIL")
        raise
    with capfd.disabled():
        print(f"criterion {num:2d} [{desc}]: PASS")


# ---------------------------------------------------------------------------
# mesh helpers
# ---------------------------------------------------------------------------


def cylinder_mesh(na=16, nz=8, radius=0.5, height=1.0):
    """Open cylinder (periodic around, open top/bottom)."""
    verts = []
    for j in range(nz + 1):
        z = height * j / nz
        for i in range(na):
            a = 2 * np.pi * i / na
            verts.append([radius * np.cos(a), radius * np.sin(a), z])
    tris = []
    for j in range(nz):
        for i in range(na):
            v00 = j * na + i
            v10 = j * na + (i + 1) % na
            v01 = v00 + na
            v11 = v10 + na
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    return build_mesh(np.array(verts), np.array(tris))


def tensor_mesh(xs, ys):
    """Grid mesh with explicit (sorted) coordinate lines, z = 0."""
    nx, ny = len(xs) - 1, len(ys) - 1
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


def stripe_system(mesh, p, frequency, periodic=None):
    frames = tangent_frames(mesh, vertex_normals(mesh))
    params = VectorFieldParams(np.asarray(p, dtype=float), frequency)
    z = field_from_params(mesh, params, frames)
    om = edge_omega(mesh, z)
    M = assemble_stripe_matrices(mesh, om, cotan_edge_weights(mesh), periodic=periodic)
    return frames, z, M


def make_cell(nx, ny, h=0.05, soft=SOFT, stiff=STIFF):
    mesh = grid_mesh(nx, ny)
    pm = build_periodic_map(mesh, LATTICE, tol=1e-6)
    model = extrude_shell(mesh, h, vertex_normals(mesh))
    model = ShellModel(model.mesh, model.h, model.nodes, model.elements, soft, stiff)
    return mesh, model, pm


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_01_eigenplane_multiplicity(capfd):
    def check():
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        cases = [
            (grid_mesh(10, 10), np.full(121, 0.4), 2 * np.pi),
            (cylinder_mesh(), np.full(16 * 9, 0.7), 2 * np.pi),
            (grid_mesh(10, 10), rng.uniform(-np.pi, np.pi, 121), 2 * np.pi),
        ]
        for mesh, p, freq in cases:
            _, _, M = stripe_system(mesh, p, freq)
            state = solve_eigenplane(M)
            # independent oracle: dense B-whitened symmetric eigensolve
            li = 1.0 / np.sqrt(M.bc)
            As = M.Ac.toarray() * li[None, :] * li[:, None]
            As = 0.5 * (As + As.T)
            vals = scipy.linalg.eigvalsh(As)
            scale = max(abs(vals[-1]), 1.0)
            assert vals[1] - vals[0] <= 1e-8 * scale  # multiplicity two
            assert abs(state.lam - vals[0]) <= 1e-8 * scale
            # both returned basis vectors achieve the eigenvalue
            for v in (state.v1, state.v2):
                rayleigh = (v @ (M.Ac @ v)) / (v @ (M.bc * v))
                assert abs(rayleigh - state.lam) <= 1e-10 * scale
        assert time.perf_counter() - t0 < 10.0

    _criterion(capfd, 1, "eigenplane multiplicity on three meshes", check)


def test_criterion_02_integrable_field_exact(capfd):
    def check():
        mesh = grid_mesh(10, 10)
        direction = 2 * np.pi * np.array([np.cos(0.3), np.sin(0.3), 0.0])
        z = np.tile(direction, (mesh.n_vertices, 1))
        om = edge_omega(mesh, z)
        M = assemble_stripe_matrices(mesh, om, cotan_edge_weights(mesh))
        state = solve_eigenplane(M)
        assert state.lam <= 1e-10
        # phases recover the integrated field z . x up to one global constant
        alpha = phases(state.v1)
        target = mesh.vertices @ direction
        d = np.exp(1j * (alpha - target))
        mean = np.angle(d.sum())
        dev = np.angle(d * np.exp(-1j * mean))
        assert np.abs(dev).max() <= 1e-6

    _criterion(capfd, 2, "integrable field reproduced exactly", check)


def test_criterion_03_pinned_sensitivity(capfd):
    def check():
        mesh = grid_mesh(5, 5)
        p = np.random.default_rng(1).uniform(-0.5, 0.5, mesh.n_vertices)

        def pinned_state(p_vec, k=None):
            _, _, M = stripe_system(mesh, p_vec, 2 * np.pi)
            raw = solve_eigenplane(M)
            if k is None:
                k = default_pin_vertex(raw, None)
            return M, pin_reference(raw, k, None)

        M, state = pinned_state(p)
        sens = build_sensitivity(M, state)

        # unpinned system is singular: K = A - lam B has a 2-dim null space
        K = (M.Ac - state.lam * scipy.sparse.diags(M.bc)).toarray()
        K = 0.5 * (K + K.T)
        w = np.sort(np.abs(scipy.linalg.eigvalsh(K)))
        scale = max(np.abs(w).max(), 1.0)
        assert w[0] <= 1e-10 * scale and w[1] <= 1e-10 * scale
        assert w[2] > 1e-6 * scale

        # the bordered (pinned) system, rebuilt independently, is well posed
        n = len(M.bc)
        Bv = M.bc * state.v_ref
        e_pin = np.zeros(n)
        e_pin[state.pin_slot] = 1.0
        border = np.zeros((n + 2, n + 2))
        border[:n, :n] = K
        border[:n, n] = border[n, :n] = -Bv
        border[:n, n + 1] = border[n + 1, :n] = e_pin
        assert np.linalg.svd(border, compute_uv=False)[-1] > 1e-8 * scale

        # tangent solves match finite differences of the re-pinned pipeline
        h = 1e-6
        probes = np.random.default_rng(2).choice(mesh.n_vertices, 10, replace=False)
        for j in probes:
            pp, pmn = p.copy(), p.copy()
            pp[j] += h
            pmn[j] -= h
            Mp, sp_ = pinned_state(pp, state.k)
            Mm, sm_ = pinned_state(pmn, state.k)
            dA = (Mp.Ac - Mm.Ac) / (2 * h)  # independent FD of the matrix
            dv = sens.solve(-(dA @ state.v_ref), 0.0)[: sens.n]
            fd = (sp_.v_ref - sm_.v_ref) / (2 * h)
            assert np.linalg.norm(dv - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12)

    _criterion(capfd, 3, "pinned eigenvector sensitivity", check)


def test_criterion_04_kernel_derivative_sweep(capfd):
    def check():
        for seed in range(50):
            rng = np.random.default_rng(seed)
            base = np.array(
                [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.3, 0.9, 0.0]]
            ) + 0.15 * rng.standard_normal((3, 3))
            h = 0.2 + 0.1 * rng.random()
            nrm = np.cross(base[1] - base[0], base[2] - base[0])
            nrm /= np.linalg.norm(nrm)
            Xe = np.vstack([base - 0.5 * h * nrm, base + 0.5 * h * nrm])
            xe = Xe + 0.05 * rng.standard_normal((6, 3))
            xhe = 0.05 * rng.standard_normal((6, 3))
            phi = rng.uniform(0.25, 1.0, 3)
            phi[rng.integers(3)] *= -1.0  # guaranteed cut, away from vertices
            soft = Material(mu=1.0 + rng.random(), lam=2.0 * rng.random())
            stiff = Material(mu=8.0 + rng.random(), lam=15.0 * rng.random())

            def U_plain(x):
                return element_integrals(Xe, x, stiff, derivs=False)[0]

            def U_enr(x, xh, ph):
                return enriched_element_integrals(
                    Xe, x, xh, ph, soft, stiff, derivs=False
                )[0]

            step = 1e-6
            # plain element gradient (18 position DOFs)
            _, g, H = element_integrals(Xe, xe, stiff)
            fd = np.zeros(18)
            for i in range(18):
                d = np.zeros((6, 3))
                d.flat[i] = step
                fd[i] = (U_plain(xe + d) - U_plain(xe - d)) / (2 * step)
            assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)

            # enriched element gradient (positions and enrichment x-hat)
            _, ge, He = enriched_element_integrals(Xe, xe, xhe, phi, soft, stiff)
            fde = np.zeros(36)
            for i in range(36):
                dx = np.zeros((6, 3))
                dxh = np.zeros((6, 3))
                (dx if i < 18 else dxh).flat[i % 18] = step
                fde[i] = (
                    U_enr(xe + dx, xhe + dxh, phi) - U_enr(xe - dx, xhe - dxh, phi)
                ) / (2 * step)
            assert np.linalg.norm(ge - fde) <= 1e-5 * np.linalg.norm(fde)

            # Hessians along random directions, via FD of the gradient
            for H_mat, n_dof, full in ((H, 18, False), (He, 36, True)):
                d = rng.standard_normal(n_dof)
                d /= np.linalg.norm(d)
                if full:
                    dx, dxh = d[:18].reshape(6, 3), d[18:].reshape(6, 3)
                    gp = enriched_element_integrals(
                        Xe, xe + step * dx, xhe + step * dxh, phi, soft, stiff
                    )[1]
                    gm = enriched_element_integrals(
                        Xe, xe - step * dx, xhe - step * dxh, phi, soft, stiff
                    )[1]
                else:
                    dx = d.reshape(6, 3)
                    gp = element_integrals(Xe, xe + step * dx, stiff)[1]
                    gm = element_integrals(Xe, xe - step * dx, stiff)[1]
                fd_Hd = (gp - gm) / (2 * step)
                assert np.linalg.norm(H_mat @ d - fd_Hd) <= 1e-4 * max(
                    np.linalg.norm(fd_Hd), 1e-12
                )

            # level-set derivatives of energy and gradient
            dU, dg = enriched_phi_jacobian(Xe, xe, xhe, phi, soft, stiff)
            for c in range(3):
                dp = np.zeros(3)
                dp[c] = step
                fU = (U_enr(xe, xhe, phi + dp) - U_enr(xe, xhe, phi - dp)) / (2 * step)
                assert abs(dU[c] - fU) <= 1e-4 * max(abs(fU), 1e-10)
                gp = enriched_element_integrals(Xe, xe, xhe, phi + dp, soft, stiff)[1]
                gm = enriched_element_integrals(Xe, xe, xhe, phi - dp, soft, stiff)[1]
                fg = (gp - gm) / (2 * step)
                assert np.linalg.norm(dg[:, c] - fg) <= 1e-4 * max(
                    np.linalg.norm(fg), 1e-10
                )

    _criterion(capfd, 4, "element kernel derivatives, 50 random elements", check)


def test_criterion_05_xfem_matches_conforming(capfd):
    x0, x1 = 0.31, 0.69  # stiff square inclusion, off every grid line used

    def inclusion_phi(v):
        return np.minimum.reduce(
            [v[:, 0] - x0, x1 - v[:, 0], v[:, 1] - x0, x1 - v[:, 1]]
        )

    def solve_energy(prob):
        q, report = static_solve(
            prob, opts=SolverOptions(tol=1e-10), perturb_flat=False
        )
        assert report.converged
        return report.energy

    def check():
        ms_args = (LATTICE, 0.0, 0.03, 0.05)

        # conforming reference: coordinate lines on the interface, material
        # chosen per element purely by which side its centroid lies on
        lines = np.union1d(np.linspace(0.0, 1.0, 97), [x0, x1])
        cmesh = tensor_mesh(lines, lines)
        cpm = build_periodic_map(cmesh, LATTICE, tol=1e-9)
        cmodel = extrude_shell(cmesh, 0.05, vertex_normals(cmesh))
        cmodel = ShellModel(
            cmodel.mesh, cmodel.h, cmodel.nodes, cmodel.elements, SOFT, STIFF
        )
        cprob = build_problem(cmodel, None, cpm, macro_state(*ms_args))
        cent = cmesh.vertices[cmesh.triangles].mean(axis=1)
        inside = inclusion_phi(cent) > 0
        # per-element material via the uncut sign rule: every element keeps a
        # uniform-sign level set, so nothing is enriched
        cprob = dataclasses.replace(cprob, phi=_vertex_sign_field(cmesh, inside))
        E_ref = solve_energy(cprob)

        gaps = []
        for nx in (20, 40, 80):
            mesh, model, pm = make_cell(nx, nx)
            phi = inclusion_phi(mesh.vertices)
            prob = build_problem(model, phi, pm, macro_state(*ms_args))
            assert prob.cut_mask.any()
            E = solve_energy(prob)
            gaps.append(abs(E - E_ref) / E_ref)
        assert gaps[-1] <= 0.02
        assert gaps[2] < gaps[1] < gaps[0]

    _criterion(capfd, 5, "cut elements match a conforming remesh", check)


def _vertex_sign_field(mesh, inside_elements):
    """Vertex level set whose per-element sums reproduce a given conforming
    material assignment without cutting any element."""
    phi = np.zeros(mesh.n_vertices)
    # vertices incident only to inside elements: +1; only outside: -1;
    # interface vertices: 0 (sums then carry the majority side's sign)
    tri = mesh.triangles
    touch_in = np.zeros(mesh.n_vertices, dtype=bool)
    touch_out = np.zeros(mesh.n_vertices, dtype=bool)
    touch_in[tri[inside_elements].ravel()] = True
    touch_out[tri[~inside_elements].ravel()] = True
    phi[touch_in & ~touch_out] = 1.0
    phi[touch_out & ~touch_in] = -1.0
    return phi


def test_criterion_06_kirchhoff_bending(capfd):
    def check():
        t0 = time.perf_counter()
        mat = Material(mu=0.5e6, lam=0.0)
        r, h = 0.1, 0.0006
        lx, ly = 0.05, 0.01
        lattice = np.array([[lx, 0, 0], [0, ly, 0]])
        target = kirchhoff_bending_energy(mat, lx * ly, h, r)
        mesh = grid_mesh(384, 1, lx, ly)
        model = extrude_shell(mesh, h, vertex_normals(mesh))
        model = ShellModel(model.mesh, model.h, model.nodes, model.elements, mat, mat)
        pm = build_periodic_map(mesh, lattice, tol=1e-9)
        prob = build_bending_problem(model, pm, r)
        assert prob.n_dofs <= 20000
        q, report = static_solve(prob, opts=SolverOptions(tol=1e-10))
        assert report.converged
        assert report.energy == pytest.approx(target, rel=0.05)
        assert time.perf_counter() - t0 < 60.0

    _criterion(capfd, 6, "cylindrical bending reaches Kirchhoff", check)


def test_criterion_07_homogenized_stiffness(capfd):
    def check():
        # uniform cell reproduces the isotropic modulus
        mesh, model, pm = make_cell(4, 4)
        E_macro, _, _, _ = homogenize(model, None, pm, 0.0, 0.01)
        assert E_macro == pytest.approx(isotropic_young(STIFF), rel=0.02)

        # striped cell: k(theta) stays between the Reuss and Voigt laminate
        # bounds, soft across the stripes, stiff along them
        mesh, model, pm = make_cell(8, 8, h=0.02)
        phi = 0.25 - np.abs(((mesh.vertices[:, 0] * 2.0) % 1.0) - 0.5)
        thetas = np.linspace(0.0, np.pi / 2, 4)
        ks = stiffness_profile(model, phi, pm, thetas, 0.01)
        reuss, voigt = reuss_voigt_bounds(
            isotropic_young(SOFT), isotropic_young(STIFF), 0.5
        )
        assert np.all(ks >= reuss * 0.98) and np.all(ks <= voigt * 1.02)
        assert ks[-1] > ks[0]  # along the stripes is stiffer

    _criterion(capfd, 7, "homogenization bounds and isotropy", check)


def test_criterion_08_design_gradient(capfd):
    def check():
        t0 = time.perf_counter()
        mesh = grid_mesh(10, 10)  # ~100-vertex periodic cell
        pm = build_periodic_map(mesh, LATTICE, tol=1e-6)
        problem = DesignProblem(
            mesh=mesh,
            thickness=0.05,
            soft=SOFT,
            stiff=STIFF,
            frequency=2 * np.pi,
            target=StiffnessTarget(np.array([0.0]), np.array([4.0]), strain=0.02),
            periodic=pm,
            w_sing=1e-3,
            solver=SolverOptions(tol=1e-12),
        )
        rng = np.random.default_rng(3)
        p = rng.uniform(-0.3, 0.3, problem.n_design - 1)
        rows, passed = gradient_check(
            problem, p, 0.15, n_probes=10, step=3e-5, tol=1e-4
        )
        assert passed, rows

        # exactly two linear adjoint solves per gradient evaluation
        cand = problem.evaluate(np.concatenate([p, [0.15]]))
        reset_solve_counter()
        problem.gradient(cand)
        assert solve_count() == 2
        assert time.perf_counter() - t0 < 120.0

    _criterion(capfd, 8, "adjoint design gradient vs finite differences", check)


def test_criterion_09_inverse_design_run(capfd):
    def check():
        mesh = grid_mesh(6, 6)
        pm = build_periodic_map(mesh, LATTICE, tol=1e-6)
        problem = DesignProblem(
            mesh=mesh,
            thickness=0.05,
            soft=SOFT,
            stiff=STIFF,
            frequency=2 * np.pi,
            target=StiffnessTarget(
                np.array([0.0, np.pi / 4, np.pi / 2]),
                np.array([9.0, 9.0, 9.0]),
                strain=0.02,
            ),
            periodic=pm,
            w_sing=1e-3,
            solver=SolverOptions(tol=1e-11),
        )
        # concentric starting pattern around the cell center
        c = mesh.vertices[:, :2] - 0.5
        p_full = np.arctan2(c[:, 1], c[:, 0]) + np.pi / 2
        reps = pm.representatives()
        p0 = np.empty(pm.n_reduced)
        p0[pm.reduced[reps]] = p_full[reps]
        p, theta, run = optimize_design(
            problem, p0, opts=OptOptions(max_iterations=100)
        )
        T0 = run.history[0]["T"]
        T1 = run.history[-1]["T"]
        assert T1 <= 0.5 * T0

        # the final design keeps every stripe amplitude off the singularity
        cand = problem.evaluate(np.concatenate([p, [theta]]))
        v = cand.state.v
        d = np.hypot(v[0::2], v[1::2])
        assert d.min() >= 1e-3 * problem.d_hat

    _criterion(capfd, 9, "inverse design halves the objective", check)


def test_criterion_10_regularizers(capfd):
    def check():
        # singularity barrier is C1 at the cutoff
        d_hat = 0.1
        lo = np.array([1.0, d_hat * (1 - 1e-8)])
        hi = np.array([1.0, d_hat * (1 + 1e-8)])
        r_lo, g_lo = singularity_barrier(_as_interleaved(lo), d_hat)
        r_hi, g_hi = singularity_barrier(_as_interleaved(hi), d_hat)
        assert abs(r_lo - r_hi) <= 1e-10
        assert np.abs(g_lo - g_hi).max() <= 1e-10

        # a smoothing-only descent run strictly decreases the regularizer
        mesh = grid_mesh(4, 4)
        pm = build_periodic_map(mesh, LATTICE, tol=1e-6)
        problem = DesignProblem(
            mesh=mesh,
            thickness=0.05,
            soft=SOFT,
            stiff=STIFF,
            frequency=2 * np.pi,
            target=None,
            periodic=pm,
            w_sing=1e-3,
            w_smooth=1.0,
        )
        rng = np.random.default_rng(4)
        p0 = rng.uniform(-1.2, 1.2, problem.n_design - 1)
        _, _, run = optimize_design(problem, p0, opts=OptOptions(max_iterations=25))
        r_sm = [e["r_smooth"] for e in run.history]
        assert all(b < a for a, b in zip(r_sm, r_sm[1:]))

    _criterion(capfd, 10, "barrier smoothness and direction smoothing", check)


def _as_interleaved(d):
    v = np.zeros(2 * len(d))
    v[0::2] = d
    return v


def test_criterion_11_determinism(capfd, tmp_path):
    def check():
        cfg = {
            "mesh": {"grid": {"nx": 4, "ny": 4}},
            "lattice": [[1, 0, 0], [0, 1, 0]],
            "material": {
                "soft": {"mu": 1.0, "lam": 2.0},
                "stiff": {"mu": 10.0, "lam": 20.0},
                "h": 0.05,
            },
            "stripes": {"angle": 0.25},
            "objective": {
                "angles": [0.0, 1.5707963267948966],
                "targets": [3.0, 5.0],
                "strain": 0.02,
                "w_sing": 0.001,
            },
            "solver": {"tol": 1e-11},
            "optimizer": {"max_iterations": 3},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        for cmd, files in (
            ("stripes", ["stripes.csv", "stripes.obj"]),
            ("optimize", ["optimization.jsonl", "design.csv"]),
        ):
            outs = []
            for tag in ("a", "b"):
                out = tmp_path / f"{cmd}-{tag}"
                assert (
                    cli_main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0
                )
                outs.append(out)
            for name in files + ["manifest.json"]:
                assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    _criterion(capfd, 11, "byte-identical artifacts across reruns", check)
