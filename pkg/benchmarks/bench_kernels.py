"""Compare the numba and plain-numpy element-kernel backends.

The backend is fixed at import time by STRIPEFORGE_BACKEND, so this script
re-executes itself in a subprocess per backend and reports wall times for
the two assembly-dominated workloads: plain system assembly (energy +
gradient + Hessian) and the complex-step level-set Jacobian of the cut
elements.

Usage: python benchmarks/bench_kernels.py [--nx N] [--repeats R]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def run_case(nx: int, repeats: int) -> dict:
    import numpy as np

    from stripeforge import BACKEND
    from stripeforge.equilibrium import assemble_system, build_problem, macro_state
    from stripeforge.kernels import enriched_phi_jacobian
    from stripeforge.mesh import build_periodic_map, grid_mesh, vertex_normals
    from stripeforge.shell import Material, ShellModel, extrude_shell

    mesh = grid_mesh(nx, nx)
    lattice = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    pm = build_periodic_map(mesh, lattice, tol=1e-6)
    model = extrude_shell(mesh, 0.05, vertex_normals(mesh))
    model = ShellModel(
        model.mesh, model.h, model.nodes, model.elements,
        Material(mu=1.0, lam=2.0), Material(mu=10.0, lam=20.0),
    )
    phi = 0.22 - np.abs(((mesh.vertices[:, 0] * 3) % 1.0) - 0.5)
    ms = macro_state(lattice, 0.0, 0.02, model.h)
    prob = build_problem(model, phi, pm, ms)
    q = prob.q0.copy()

    # warm-up triggers JIT compilation on the numba path
    assemble_system(prob, q)
    t0 = time.perf_counter()
    for _ in range(repeats):
        assemble_system(prob, q)
    t_assemble = (time.perf_counter() - t0) / repeats

    cut = np.flatnonzero(prob.cut_mask)
    x, xhat = prob.expand(q)

    def phi_jac_pass():
        for e in cut:
            tri = model.mesh.triangles[e]
            nodes = model.elements[e]
            xe = x[nodes]
            xhe = np.zeros((6, 3))
            for k, nd in enumerate(nodes):
                j = prob.enr_pos.get(int(nd))
                if j is not None:
                    xhe[k] = xhat[j]
            enriched_phi_jacobian(
                model.nodes[nodes], xe, xhe, phi[tri], model.soft, model.stiff
            )

    phi_jac_pass()
    t0 = time.perf_counter()
    for _ in range(repeats):
        phi_jac_pass()
    t_phi = (time.perf_counter() - t0) / repeats

    return {
        "backend": BACKEND,
        "nx": nx,
        "elements": model.mesh.n_triangles,
        "cut_elements": int(prob.cut_mask.sum()),
        "assemble_s": t_assemble,
        "phi_jacobian_s": t_phi,
    }


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--nx", type=int, default=24)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--single", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.single:
        print(json.dumps(run_case(args.nx, args.repeats)))
        return 0

    results = []
    for backend in ("numpy", "numba"):
        env = dict(os.environ, STRIPEFORGE_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, __file__, "--single",
             "--nx", str(args.nx), "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True, check=True,
        )
        results.append(json.loads(out.stdout.splitlines()[-1]))

    ref = results[0]
    print(f"grid {ref['nx']}x{ref['nx']}: {ref['elements']} elements, "
          f"{ref['cut_elements']} cut")
    print(f"{'backend':<8} {'assemble':>12} {'phi-jacobian':>14}")
    for r in results:
        print(f"{r['backend']:<8} {r['assemble_s']:>11.4f}s {r['phi_jacobian_s']:>13.4f}s")
    sp_a = results[0]["assemble_s"] / results[1]["assemble_s"]
    sp_p = results[0]["phi_jacobian_s"] / results[1]["phi_jacobian_s"]
    print(f"speedup  {sp_a:>11.1f}x {sp_p:>13.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
