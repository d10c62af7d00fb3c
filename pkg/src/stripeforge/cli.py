"""Configuration-driven command-line front end.

All experiment inputs live in a JSON config (flags only pick the command,
the config path, and the output directory), so any run is reproducible from
its archived config.  Every command writes its artifacts plus a manifest
(config echo, config hash, package versions) into the output directory;
failures additionally leave a machine-readable ``error.json``.

Exit codes: 0 success, 1 gradient check exceeded its tolerance, 2 solver
failure, 3 validation/configuration failure.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import (
    SolverOptions,
    build_bending_problem,
    kirchhoff_bending_energy,
    static_solve,
    stiffness_profile,
)
from .errors import ConfigError, StripeforgeError
from .mesh import (
    build_periodic_map,
    cotan_edge_weights,
    grid_mesh,
    load_obj,
    tangent_frames,
    vertex_normals,
    write_obj,
)
from .optimizer import (
    DesignProblem,
    OptOptions,
    StiffnessTarget,
    gradient_check,
    optimize_design,
)
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

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

# nested schema: key -> (type check, default) ; dict values recurse
_SCHEMA = {
    "mesh": {
        "path": (str, None),
        "grid": {
            "nx": (int, 8),
            "ny": (int, 8),
            "lx": ((int, float), 1.0),
            "ly": ((int, float), 1.0),
        },
    },
    "lattice": (list, None),
    "material": {
        "soft": {
            "mu": ((int, float), None),
            "lam": ((int, float), None),
            "beta": ((int, float), 0.0),
            "fiber": (list, None),
        },
        "stiff": {
            "mu": ((int, float), None),
            "lam": ((int, float), None),
            "beta": ((int, float), 0.0),
            "fiber": (list, None),
        },
        "h": ((int, float), None),
    },
    "stripes": {
        "frequency": ((int, float), 6.283185307179586),
        "angle": ((int, float), 0.0),
        "a1": ((int, float), 0.05),
        "a2": ((int, float), 0.0),
        "d_hat": ((int, float), 0.1),
        "theta": ((int, float), 0.0),
    },
    "objective": {
        "kind": (str, "macromechanical-profile"),
        "angles": (list, None),
        "targets": (list, None),
        "strain": ((int, float), 0.01),
        "w_sing": ((int, float), 1.0),
        "w_smooth": ((int, float), 0.0),
    },
    "solver": {
        "tol": ((int, float), 1e-8),
        "max_iterations": (int, 100),
        "seed": (int, 0),
    },
    "optimizer": {
        "max_iterations": (int, 100),
        "memory": (int, 10),
        "grad_tol": ((int, float), 1e-8),
    },
    "simulate": {
        "theta": ((int, float), 0.0),
        "strain": ((int, float), 0.01),
    },
    "homogenize": {
        "angles": (list, None),
        "n_angles": (int, 8),
        "strain": ((int, float), 0.01),
    },
    "grad_check": {
        "n_probes": (int, 10),
        "step": ((int, float), 1e-6),
        "tol": ((int, float), 1e-4),
    },
    "bench": {
        "radius": ((int, float), 0.1),
        "h": ((int, float), 6e-4),
        "lx": ((int, float), 0.05),
        "ly": ((int, float), 0.01),
        "resolutions": (list, [48, 96, 192, 384]),
        "mu": ((int, float), 0.5e6),
        "lam": ((int, float), 0.0),
    },
    "seed": (int, 0),
    "output": (str, "out"),
}


def _validate(node, schema, path=""):
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    out = {}
    for key, val in node.items():
        if key not in schema:
            hint = difflib.get_close_matches(key, schema.keys(), n=1)
            extra = f"; did you mean '{hint[0]}'?" if hint else ""
            raise ConfigError(f"unknown key '{path}{key}'{extra}")
        spec = schema[key]
        if isinstance(spec, dict):
            out[key] = _validate(val, spec, f"{path}{key}.")
        else:
            typ, _ = spec
            if val is not None and not isinstance(val, typ):
                raise ConfigError(
                    f"'{path}{key}' has wrong type {type(val).__name__}"
                )
            if isinstance(val, bool) and typ is int:
                raise ConfigError(f"'{path}{key}' has wrong type bool")
            out[key] = val
    for key, spec in schema.items():
        if key in out:
            continue
        if isinstance(spec, dict):
            out[key] = _validate({}, spec, f"{path}{key}.")
        else:
            out[key] = spec[1]
    return out


def parse_config(path) -> dict:
    """Load, schema-validate, and default-fill a JSON run configuration."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = _validate(raw, _SCHEMA)

    h = cfg["material"]["h"]
    if h is not None and h <= 0:
        raise ConfigError("'material.h' must be positive")
    for phase in ("soft", "stiff"):
        mu = cfg["material"][phase]["mu"]
        if mu is not None and mu <= 0:
            raise ConfigError(f"'material.{phase}.mu' must be positive")
    if cfg["stripes"]["frequency"] <= 0:
        raise ConfigError("'stripes.frequency' must be positive")
    if not (0.0 < cfg["stripes"]["a1"] <= 1.0):
        raise ConfigError("'stripes.a1' must lie in (0, 1]")
    if cfg["stripes"]["d_hat"] <= 0:
        raise ConfigError("'stripes.d_hat' must be positive")
    if cfg["solver"]["tol"] <= 0:
        raise ConfigError("'solver.tol' must be positive")
    mesh_path = cfg["mesh"]["path"]
    if mesh_path is not None and not Path(mesh_path).exists():
        raise ConfigError(f"mesh file not found: {mesh_path}")

    env_seed = os.environ.get("STRIPEFORGE_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError("STRIPEFORGE_SEED must be an integer") from exc
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_csv(path, header, rows):
    """CSV with 17-significant-digit floats (see docs/formats.md)."""
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(
                ",".join(
                    _fmt(v) if isinstance(v, (float, np.floating)) else str(v)
                    for v in row
                )
                + "\n"
            )


def write_manifest(outdir: Path, command: str, cfg: dict, outputs: list):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "outputs": sorted(outputs),
        "versions": {
            "stripeforge": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------


def _load_mesh(cfg):
    if cfg["mesh"]["path"] is not None:
        return load_obj(cfg["mesh"]["path"])
    g = cfg["mesh"]["grid"]
    return grid_mesh(g["nx"], g["ny"], g["lx"], g["ly"])


def _periodic(cfg, mesh):
    if cfg["lattice"] is None:
        return None
    lattice = np.asarray(cfg["lattice"], dtype=float)
    if lattice.shape != (2, 3):
        raise ConfigError("'lattice' must be two 3-vectors")
    return build_periodic_map(mesh, lattice)


def _material(cfg, phase) -> Material:
    m = cfg["material"][phase]
    if m["mu"] is None or m["lam"] is None:
        raise ConfigError(f"'material.{phase}' requires mu and lam")
    fiber = None if m["fiber"] is None else np.asarray(m["fiber"], dtype=float)
    return Material(mu=m["mu"], lam=m["lam"], beta=m["beta"], fiber=fiber)


def _thickness(cfg) -> float:
    h = cfg["material"]["h"]
    if h is None:
        raise ConfigError("'material.h' is required for this command")
    return float(h)


def _stripe_state(cfg, mesh, pm):
    """Field -> eigenplane -> pinned, rotated eigenvector -> level set."""
    s = cfg["stripes"]
    frames = tangent_frames(mesh, vertex_normals(mesh))
    p = np.full(mesh.n_vertices, float(s["angle"]))
    params = VectorFieldParams(p, float(s["frequency"]))
    z = field_from_params(mesh, params, frames)
    w = cotan_edge_weights(mesh)
    om = edge_omega(mesh, z)
    M = assemble_stripe_matrices(mesh, om, w, periodic=pm)
    raw = solve_eigenplane(M)
    state = pin_reference(raw, default_pin_vertex(raw, pm), pm)
    state = eigenvector_at(state, float(s["theta"]))
    alpha = phases(state.v)
    ls = level_set_transfer(alpha, s["a1"], s["a2"])
    if pm is not None:
        expand = pm.reduced[pm.rep]
        alpha_full, phi_full = alpha[expand], ls.phi[expand]
    else:
        alpha_full, phi_full = alpha, ls.phi
    return state, alpha_full, phi_full


def _shell_model(cfg, mesh) -> ShellModel:
    h = _thickness(cfg)
    model = extrude_shell(mesh, h, vertex_normals(mesh))
    return ShellModel(
        model.mesh,
        model.h,
        model.nodes,
        model.elements,
        _material(cfg, "soft"),
        _material(cfg, "stiff"),
    )


def _solver_options(cfg) -> SolverOptions:
    s = cfg["solver"]
    return SolverOptions(
        tol=s["tol"], max_iterations=s["max_iterations"], seed=cfg["seed"]
    )


def _design_problem(cfg, mesh, pm) -> DesignProblem:
    obj = cfg["objective"]
    if obj["kind"] != "macromechanical-profile":
        raise ConfigError(
            f"unsupported objective kind '{obj['kind']}' "
            "(supported: macromechanical-profile)"
        )
    if obj["angles"] is None or obj["targets"] is None:
        raise ConfigError("'objective' requires angles and targets")
    target = StiffnessTarget(
        angles=np.asarray(obj["angles"], dtype=float),
        values=np.asarray(obj["targets"], dtype=float),
        strain=obj["strain"],
    )
    s = cfg["stripes"]
    return DesignProblem(
        mesh=mesh,
        thickness=_thickness(cfg),
        soft=_material(cfg, "soft"),
        stiff=_material(cfg, "stiff"),
        frequency=s["frequency"],
        target=target,
        periodic=pm,
        a1=s["a1"],
        a2=s["a2"],
        d_hat=s["d_hat"],
        w_sing=obj["w_sing"],
        w_smooth=obj["w_smooth"],
        solver=_solver_options(cfg),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_stripes(cfg, outdir: Path) -> int:
    mesh = _load_mesh(cfg)
    pm = _periodic(cfg, mesh)
    state, alpha, phi = _stripe_state(cfg, mesh, pm)
    write_csv(
        outdir / "stripes.csv",
        ["vertex", "alpha", "phi"],
        [(i, alpha[i], phi[i]) for i in range(mesh.n_vertices)],
    )
    u = (alpha / (2 * np.pi)) % 1.0
    write_obj(outdir / "stripes.obj", mesh, texture_u=u)
    (outdir / "summary.json").write_text(
        json.dumps({"lambda": state.lam, "pin_vertex": state.k}, indent=2) + "\n"
    )
    write_manifest(outdir, "stripes", cfg, ["stripes.csv", "stripes.obj", "summary.json"])
    return 0


def cmd_simulate(cfg, outdir: Path) -> int:
    from .equilibrium import build_problem, macro_state

    mesh = _load_mesh(cfg)
    pm = _periodic(cfg, mesh)
    if pm is None:
        raise ConfigError("'simulate' requires a 'lattice' (periodic cell)")
    _, _, phi = _stripe_state(cfg, mesh, pm)
    model = _shell_model(cfg, mesh)
    sim = cfg["simulate"]
    ms = macro_state(pm.lattice, sim["theta"], sim["strain"], model.h)
    prob = build_problem(model, phi, pm, ms)
    q, report = static_solve(prob, opts=_solver_options(cfg))
    x, _ = prob.expand(q)
    n = mesh.n_vertices
    mid = 0.5 * (x[:n] + x[n:])
    write_obj(outdir / "deformed.obj", mesh, positions=mid)
    write_csv(
        outdir / "displacements.csv",
        ["vertex", "ux", "uy", "uz"],
        [(i, *(mid[i] - mesh.vertices[i])) for i in range(n)],
    )
    (outdir / "summary.json").write_text(
        json.dumps(
            {
                "energy": report.energy,
                "iterations": report.iterations,
                "converged": report.converged,
            },
            indent=2,
        )
        + "\n"
    )
    write_manifest(
        outdir, "simulate", cfg, ["deformed.obj", "displacements.csv", "summary.json"]
    )
    return 0


def cmd_homogenize(cfg, outdir: Path) -> int:
    mesh = _load_mesh(cfg)
    pm = _periodic(cfg, mesh)
    if pm is None:
        raise ConfigError("'homogenize' requires a 'lattice' (periodic cell)")
    _, _, phi = _stripe_state(cfg, mesh, pm)
    model = _shell_model(cfg, mesh)
    hom = cfg["homogenize"]
    if hom["angles"] is not None:
        thetas = np.asarray(hom["angles"], dtype=float)
    else:
        thetas = np.linspace(0.0, np.pi, hom["n_angles"], endpoint=False)
    if np.any(np.diff(thetas) <= 0):
        raise ConfigError("'homogenize.angles' must be strictly increasing")
    ks = stiffness_profile(model, phi, pm, thetas, hom["strain"], _solver_options(cfg))
    write_csv(
        outdir / "stiffness.csv",
        ["theta", "k"],
        list(zip(thetas, ks)),
    )
    write_manifest(outdir, "homogenize", cfg, ["stiffness.csv"])
    return 0


def cmd_optimize(cfg, outdir: Path) -> int:
    mesh = _load_mesh(cfg)
    pm = _periodic(cfg, mesh)
    if pm is None:
        raise ConfigError("'optimize' requires a 'lattice' (periodic cell)")
    problem = _design_problem(cfg, mesh, pm)
    n = problem.n_design - 1
    p0 = np.full(n, float(cfg["stripes"]["angle"]))
    o = cfg["optimizer"]
    opts = OptOptions(
        memory=o["memory"],
        max_iterations=o["max_iterations"],
        grad_tol=o["grad_tol"],
    )
    p, theta, run = optimize_design(problem, p0, cfg["stripes"]["theta"], opts)
    with open(outdir / "optimization.jsonl", "w") as f:
        for entry in run.history:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    p_full = problem.expand_angles(p)
    write_csv(
        outdir / "design.csv",
        ["vertex", "p"],
        [(i, p_full[i]) for i in range(mesh.n_vertices)],
    )
    (outdir / "summary.json").write_text(
        json.dumps(
            {
                "theta": theta,
                "status": run.status,
                "converged": run.converged,
                "initial_merit": run.history[0]["merit"],
                "final_merit": run.history[-1]["merit"],
            },
            indent=2,
        )
        + "\n"
    )
    write_manifest(
        outdir, "optimize", cfg, ["optimization.jsonl", "design.csv", "summary.json"]
    )
    return 0


def cmd_grad_check(cfg, outdir: Path) -> int:
    mesh = _load_mesh(cfg)
    pm = _periodic(cfg, mesh)
    if pm is None:
        raise ConfigError("'grad-check' requires a 'lattice' (periodic cell)")
    problem = _design_problem(cfg, mesh, pm)
    n = problem.n_design - 1
    p = np.full(n, float(cfg["stripes"]["angle"]))
    g = cfg["grad_check"]
    rows, passed = gradient_check(
        problem,
        p,
        cfg["stripes"]["theta"],
        n_probes=g["n_probes"],
        step=g["step"],
        tol=g["tol"],
        seed=cfg["seed"],
    )
    print("coordinate,adjoint,fd,rel_err")
    for r in rows:
        print(f"{r['coordinate']},{_fmt(r['adjoint'])},{_fmt(r['fd'])},{_fmt(r['rel_err'])}")
    write_csv(
        outdir / "grad_check.csv",
        ["coordinate", "adjoint", "fd", "rel_err"],
        [(r["coordinate"], r["adjoint"], r["fd"], r["rel_err"]) for r in rows],
    )
    write_manifest(outdir, "grad-check", cfg, ["grad_check.csv"])
    return 0 if passed else 1


def cmd_bench_shell(cfg, outdir: Path) -> int:
    b = cfg["bench"]
    mat = Material(mu=b["mu"], lam=b["lam"])
    r, h, lx, ly = b["radius"], b["h"], b["lx"], b["ly"]
    lattice = np.array([[lx, 0.0, 0.0], [0.0, ly, 0.0]])
    target = kirchhoff_bending_energy(mat, lx * ly, h, r)
    rows = []
    for nx in b["resolutions"]:
        mesh = grid_mesh(int(nx), 1, lx, ly)
        model = extrude_shell(mesh, h, vertex_normals(mesh))
        model = ShellModel(model.mesh, model.h, model.nodes, model.elements, mat, mat)
        pm = build_periodic_map(mesh, lattice, tol=1e-9)
        prob = build_bending_problem(model, pm, r)
        q, report = static_solve(prob, opts=SolverOptions(tol=1e-10))
        rows.append(
            (
                int(nx),
                prob.n_dofs,
                report.energy,
                target,
                abs(report.energy - target) / target,
            )
        )
    write_csv(
        outdir / "bending.csv",
        ["resolution", "dofs", "energy", "target", "rel_err"],
        rows,
    )
    write_manifest(outdir, "bench-shell", cfg, ["bending.csv"])
    return 0


_COMMANDS = {
    "stripes": cmd_stripes,
    "simulate": cmd_simulate,
    "homogenize": cmd_homogenize,
    "optimize": cmd_optimize,
    "grad-check": cmd_grad_check,
    "bench-shell": cmd_bench_shell,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stripeforge",
        description="Stripe-pattern synthesis, solid-shell simulation, "
        "homogenization, and inverse design.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)

    if args.threads is not None:
        os.environ["NUMBA_NUM_THREADS"] = str(args.threads)

    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    outdir = Path(args.out if args.out is not None else cfg["output"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    except OSError as exc:
        print(f"error: cannot write output directory: {exc}", file=sys.stderr)
        return 3

    try:
        return _COMMANDS[args.command](cfg, outdir)
    except ConfigError as exc:
        _write_error(outdir, "validation", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except StripeforgeError as exc:
        _write_error(outdir, "solver", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _write_error(outdir: Path, kind: str, exc: Exception):
    try:
        (outdir / "error.json").write_text(
            json.dumps(
                {"kind": kind, "type": type(exc).__name__, "message": str(exc)},
                indent=2,
            )
            + "\n"
        )
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
