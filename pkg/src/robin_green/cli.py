"""Command-line entry point: single operations and config-driven pipelines."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import green as G
from . import oracle, verify
from .assembly import assemble_mass, assemble_robin, assemble_unit_stiffness
from .catalog import build_domain, smooth_random
from .coeff import CatalogError, coefficient, robin, validate_ellipticity, validate_theta
from .coercivity import check_h1
from .mesh import Mesh, refine
from .parabolic import SCHEMES, RobinProblem, TimeGrid, decay_rate, solve_forward, tri_norm

OUT_ENV = "ROBIN_GREEN_OUT"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------- config

SCHEMA = {
    "seed": int,
    "output": str,
    "jobs": int,
    "domain": {"kind": str, "params": list, "refine": int, "file": str},
    "problem": {"coefficient": str, "theta": str, "m": int, "lambda": float,
                "lambda_tilde": float, "lumped": bool},
    "time": {"t0": float, "t1": float, "steps": int, "scheme": str},
}

STAGES = {
    "mesh": set(),
    "validate": {"t_samples", "dir_samples"},
    "coercivity": {"t_samples", "tol"},
    "solve": {"initial", "forcing"},
    "green": {"source_vertex", "columns", "epsilon", "s", "sample_times"},
    "elliptic_green": {"source_vertex", "tol"},
    "verify": {"checks", "slack", "radii", "kappa_window", "r2_min"},
}


def _check_table(doc: dict, schema: dict, where: str) -> None:
    for key, val in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown key '{where}{key}'")
        want = schema[key]
        if isinstance(want, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}{key}' must be a table")
            _check_table(val, want, f"{where}{key}.")
        elif want is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"'{where}{key}' must be a number")
        elif not isinstance(val, want):
            raise ConfigError(f"'{where}{key}' must be of type {want.__name__}")


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return validate_config(doc)


def validate_config(doc: dict) -> dict:
    doc = dict(doc)
    stages = doc.pop("stage", [])
    _check_table(doc, SCHEMA, "")
    if not isinstance(stages, list) or not stages:
        raise ConfigError("config needs at least one [[stage]] table")
    for i, st in enumerate(stages):
        name = st.get("name")
        if name not in STAGES:
            raise ConfigError(f"unknown stage '{name}' in stage {i}")
        extra = set(st) - STAGES[name] - {"name"}
        if extra:
            raise ConfigError(f"unknown key '{sorted(extra)[0]}' in stage '{name}'")
    prob = doc.get("problem", {})
    if "coefficient" not in prob or "theta" not in prob:
        raise ConfigError("[problem] needs coefficient and theta")
    kind = doc.get("domain", {}).get("kind")
    if "file" not in doc.get("domain", {}) and kind is None:
        raise ConfigError("[domain] needs kind or file")
    scheme = doc.get("time", {}).get("scheme", "implicit_euler")
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme '{scheme}'")
    # catalog names are checked up front so a typo fails before any work
    m = prob.get("m", 1)
    try:
        robin(prob["theta"], m)
        n = 1 if kind == "interval" else 2
        coefficient(prob["coefficient"], n, m)
    except CatalogError as exc:
        raise ConfigError(str(exc)) from exc
    doc["stage"] = stages
    return doc


# ---------------------------------------------------------------- helpers

def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def report_json(rep, echo: dict) -> dict:
    """Common report schema: kind, constants, exponents, pass, n_samples, config_echo."""
    if isinstance(rep, verify.GaussianFit):
        return {"kind": "gaussian",
                "constants": {"C": rep.C, "kappa": rep.kappa, "r_squared": rep.r_squared,
                              "slack": rep.slack, "violations": rep.violations,
                              "C_regression": rep.C_regression},
                "exponents": {}, "pass": rep.passed, "n_samples": rep.n_samples, "config_echo": echo}
    return {"kind": rep.kind, "constants": rep.constants,
            "exponents": {"target": rep.exponent_target, "fitted": rep.exponent_fitted},
            "pass": rep.passed, "n_samples": rep.n_samples, "excluded": rep.excluded,
            "details": rep.details, "config_echo": echo}


def resolve_output(path: str, root: Optional[str] = None) -> Path:
    p = Path(path)
    root = root or os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _mesh_from_doc(dom: dict) -> Mesh:
    if "file" in dom:
        mesh = Mesh.load(dom["file"])
    else:
        mesh = build_domain(dom["kind"], dom.get("params", ()))
    for _ in range(dom.get("refine", 0)):
        mesh = refine(mesh)
    return mesh


def _problem_from_doc(mesh: Mesh, prob: dict) -> RobinProblem:
    m = prob.get("m", 1)
    field = coefficient(prob["coefficient"], mesh.dim, m)
    if "lambda" in prob:
        if prob["lambda"] > field.lam + 1e-12:
            raise ConfigError(f"lambda={prob['lambda']} exceeds the catalog bound {field.lam}")
        field = replace(field, lam=float(prob["lambda"]))
    lt = prob.get("lambda_tilde")
    if lt is not None and not 0 < lt < field.lam:
        raise ConfigError(f"lambda_tilde={lt} outside (0, {field.lam})")
    return RobinProblem(mesh, field, robin(prob["theta"], m), lt, prob.get("lumped", False))


def _grid_from_doc(tdoc: dict) -> TimeGrid:
    return TimeGrid(float(tdoc.get("t0", 0.0)), float(tdoc.get("t1", 0.1)), int(tdoc.get("steps", 64)),
                    tdoc.get("scheme", "implicit_euler"))


# ---------------------------------------------------------------- pipeline

class Pipeline:
    def __init__(self, cfg: dict, out: Path, jobs: int = 1):
        self.cfg = cfg
        self.out = out
        self.jobs = max(1, jobs)
        self.files: list[Path] = []
        self.state: dict = {}
        self.seed = int(cfg.get("seed", 0))

    def echo(self, stage: Optional[dict] = None) -> dict:
        e = {k: self.cfg[k] for k in ("seed", "domain", "problem", "time") if k in self.cfg}
        if stage is not None:
            e["stage"] = stage
        return e

    def emit(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    @property
    def problem(self) -> RobinProblem:
        if "problem" not in self.state:
            self.state["problem"] = _problem_from_doc(self.mesh, self.cfg["problem"])
        return self.state["problem"]

    @property
    def mesh(self) -> Mesh:
        if "mesh" not in self.state:
            self.state["mesh"] = _mesh_from_doc(self.cfg["domain"])
        return self.state["mesh"]

    @property
    def grid(self) -> TimeGrid:
        return _grid_from_doc(self.cfg.get("time", {}))

    def run(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        for st in self.cfg["stage"]:
            name = st["name"]
            try:
                getattr(self, "stage_" + name)(st)
            except Exception as exc:
                self.write_manifest(failed=name)
                raise StageError(name, exc) from exc
        return self.write_manifest()

    def write_manifest(self, failed: Optional[str] = None) -> Path:
        entries = {str(p.relative_to(self.out)): sha256(p) for p in self.files if p.exists()}
        doc = {"files": entries, "config": self.cfg, "failed_stage": failed}
        path = self.out / "manifest.json"
        _dump(doc, path)
        return path

    def stage_mesh(self, st):
        self.mesh.save(self.emit("mesh.json"))

    def stage_validate(self, st):
        ts = st.get("t_samples", [self.grid.t0, self.grid.t1])
        P = self.problem
        ell = validate_ellipticity(P.field, P.mesh, ts, st.get("dir_samples", 64), seed=self.seed)
        th = validate_theta(P.theta, P.mesh, ts)
        _dump({"kind": "validate", "lambda_lower": ell.lambda_lower, "lambda_claimed": P.field.lam,
               "ellipticity_ok": ell.lambda_lower >= P.field.lam - 1e-12 and ell.lambda_upper_ok,
               "theta_delta": th.delta, "theta_nonneg_ok": th.nonneg_ok,
               "config_echo": self.echo(st)}, self.emit("validate.json"))

    def stage_coercivity(self, st):
        P = self.problem
        ts = st.get("t_samples", [self.grid.t0, self.grid.t1])
        rep = check_h1(P.mesh, P.field, P.theta, P.lambda_tilde, ts, st.get("tol", 1e-10))
        self.state["coercivity"] = rep
        _dump(dict(rep.to_dict(), kind="coercivity", config_echo=self.echo(st)), self.emit("coercivity.json"))

    def stage_solve(self, st):
        P, grid = self.problem, self.grid
        rng = np.random.default_rng(self.seed)
        init = st.get("initial", "seeded")
        if init == "seeded":
            psi = smooth_random(rng, P.mesh.dim, P.m)
            u0 = np.asarray(psi(P.mesh.vertices)).T.ravel().copy()
        elif init == "constant":
            u0 = np.ones(P.size)
        else:
            raise ConfigError(f"unknown initial data '{init}'")
        f = smooth_random(rng, P.mesh.dim, P.m, time_dependent=True) if st.get("forcing", False) else None
        traj = solve_forward(P, u0, grid, f)
        self.state["trajectory"] = traj
        self.state["forced"] = f is not None
        traj.to_csv(self.emit("trajectory.csv"))
        self.files.append(self.out / "trajectory.energy.json")
        _dump({"kind": "solve", "tri_norm": tri_norm(traj), "decay_rate": _safe(decay_rate, traj),
               "config_echo": self.echo(st)}, self.emit("solve.json"))

    def stage_green(self, st):
        P, grid = self.problem, self.grid
        y = int(st.get("source_vertex", P.mesh.nearest_vertex(P.mesh.vertices.mean(axis=0))))
        cols = st.get("columns", list(range(P.m)))
        eps = float(st.get("epsilon", 0.0))
        if eps > 0:
            s = float(st.get("s", 0.5 * (grid.t0 + grid.t1)))
            job = lambda k: G.averaged_green(P, P.mesh.vertices[y], s, eps, k, grid)
        else:
            job = lambda k: G.heat_kernel_column(P, y, k, grid)
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            results = list(pool.map(job, cols))
        for k, col in zip(cols, results):
            col.trajectory.to_csv(self.emit(f"green_col{k}.csv"))
            self.files.append(self.out / f"green_col{k}.energy.json")
        # point samples for the bound checks (sharp kernel only)
        if eps == 0 and len(cols) == P.m:
            times = st.get("sample_times") or list(grid.times[1:][:: max(1, grid.steps // 8)])
            yv = P.mesh.vertices[y]
            samples = []
            for t in times:
                for p in range(P.mesh.n_vertices):
                    val = np.column_stack([c.value(P.mesh.vertices[p], t) for c in results])
                    samples.append(G.KernelMatrixSample(P.mesh.vertices[p], t, yv, grid.t0, val))
            self.state["samples"] = samples
            G.write_samples(self.emit("samples.csv"), samples)

    def stage_elliptic_green(self, st):
        P = self.problem
        y = int(st.get("source_vertex", P.mesh.nearest_vertex(P.mesh.vertices.mean(axis=0))))
        th0 = self.state["coercivity"].theta0 if "coercivity" in self.state else None
        eg = G.elliptic_green(P, y, float(st.get("tol", 1e-4)), th0)
        self.state["elliptic"] = eg
        path = self.emit("elliptic_green.csv")
        with path.open("w") as fh:
            fh.write("vertex," + ",".join(f"g{i}{j}" for i in range(P.m) for j in range(P.m)) + "\n")
            for p in range(P.mesh.n_vertices):
                fh.write(f"{p}," + ",".join(f"{v:.17g}" for v in eg.block(p).ravel()) + "\n")
        _dump({"kind": "elliptic_green", "T": eg.T, "steps": eg.steps, "tail_bound": eg.tail_bound,
               "theta0": eg.theta0, "config_echo": self.echo(st)}, self.emit("elliptic_green.json"))

    def stage_verify(self, st):
        P = self.problem
        checks = st.get("checks", [])
        slack = float(st.get("slack", 2.0))
        reports = {}
        for name in checks:
            if name == "gaussian":
                smp = [s for s in self.state["samples"] if s.t > s.s]
                reports[name] = verify.fit_gaussian_bound(
                    smp, P.mesh.diam, slack, tuple(st.get("kappa_window", (0.15, 0.25))),
                    float(st.get("r2_min", 0.98)))
            elif name == "decay":
                if self.state.get("forced"):
                    raise ConfigError("decay check needs an unforced solve")
                reports[name] = verify.check_decay_vs_theta0(self.state["trajectory"],
                                                             self.state["coercivity"])
            elif name == "local_bound":
                traj = self.state["trajectory"]
                radii = st.get("radii") or [0.5 * np.sqrt(self.grid.t1 - self.grid.t0),
                                            np.sqrt(self.grid.t1 - self.grid.t0)]
                x0 = P.mesh.vertices.mean(axis=0)
                reports[name] = verify.check_local_boundedness([traj], x0, radii, slack)
            elif name == "elliptic":
                eg = self.state["elliptic"]
                vals = eg.columns[0] if P.m == 1 else np.stack([eg.block(p) for p in range(P.mesh.n_vertices)])
                reports[name] = verify.check_elliptic_bounds(vals, P.mesh, P.mesh.vertices[eg.y],
                                                             P.mesh.dim, P.mesh.diam, slack)
            else:
                raise ConfigError(f"unknown check '{name}'")
        for name, rep in reports.items():
            _dump(report_json(rep, self.echo(st)), self.emit(f"verify_{name}.json"))


def _safe(fn, *args):
    try:
        return fn(*args)
    except (FloatingPointError, ValueError):
        return None


def run(config_path, out_root: Optional[str] = None, jobs: Optional[int] = None) -> Path:
    cfg = load_config(config_path)
    out = resolve_output(cfg.get("output", "robin_green_out"), out_root)
    return Pipeline(cfg, out, jobs or cfg.get("jobs", 1)).run()


# ---------------------------------------------------------------- subcommands

def _add_problem_args(p, theta_flag="--theta"):
    p.add_argument("--mesh", help="mesh JSON file")
    p.add_argument("--domain", default="interval", choices=["interval", "rectangle", "lshape"])
    p.add_argument("--params", type=float, nargs="*", default=None, help="domain parameters")
    p.add_argument("--refine", type=int, default=0)
    p.add_argument("--coefficient", default="laplace")
    p.add_argument(theta_flag, dest="robin_spec", default="theta_const(1)", help="Robin catalog entry")
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--lambda-tilde", type=float, default=None)
    p.add_argument("--lumped", action="store_true")


def _add_grid_args(p, t1=0.1, steps=64):
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--t1", type=float, default=t1)
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--scheme", default="implicit_euler", choices=list(SCHEMES))


def _problem_from_args(a) -> RobinProblem:
    dom = {"file": a.mesh} if a.mesh else {"kind": a.domain, "params": a.params or ()}
    dom["refine"] = a.refine
    prob = {"coefficient": a.coefficient, "theta": a.robin_spec, "m": a.m, "lumped": a.lumped}
    if a.lambda_tilde is not None:
        prob["lambda_tilde"] = a.lambda_tilde
    return _problem_from_doc(_mesh_from_doc(dom), prob)


def _write_json(doc, out):
    text = json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_mesh(a):
    dom = {"kind": a.domain, "params": a.params or (), "refine": a.refine}
    mesh = _mesh_from_doc(dom)
    if a.out:
        mesh.save(a.out)
    else:
        sys.stdout.write(json.dumps(mesh.to_dict()) + "\n")


def cmd_coercivity(a):
    P = _problem_from_args(a)
    rep = check_h1(P.mesh, P.field, P.theta, P.lambda_tilde, a.t_samples, a.tol)
    _write_json(dict(rep.to_dict(), kind="coercivity"), a.out)


def cmd_solve(a):
    P = _problem_from_args(a)
    grid = TimeGrid(a.t0, a.t1, a.steps, a.scheme)
    if a.delta_vertex is not None:
        u0 = P.delta_vertex(a.delta_vertex)
    else:
        psi = smooth_random(np.random.default_rng(a.seed), P.mesh.dim, P.m)
        u0 = np.asarray(psi(P.mesh.vertices)).T.ravel().copy()
    traj = solve_forward(P, u0, grid)
    traj.to_csv(a.out)


def cmd_green(a):
    P = _problem_from_args(a)
    grid = TimeGrid(a.t0, a.t1, a.steps)
    if a.epsilon > 0:
        s = a.s if a.s is not None else 0.5 * (a.t0 + a.t1)
        col = G.averaged_green(P, P.mesh.vertices[a.source_vertex], s, a.epsilon, a.column, grid)
    else:
        col = G.heat_kernel_column(P, a.source_vertex, a.column, grid)
    col.trajectory.to_csv(a.out)


def cmd_elliptic_green(a):
    P = _problem_from_args(a)
    eg = G.elliptic_green(P, a.source_vertex, a.tol)
    with open(a.out, "w") as fh:
        fh.write("vertex," + ",".join(f"g{i}{j}" for i in range(P.m) for j in range(P.m)) + "\n")
        for p in range(P.mesh.n_vertices):
            fh.write(f"{p}," + ",".join(f"{v:.17g}" for v in eg.block(p).ravel()) + "\n")


def cmd_verify(a):
    samples = G.read_samples(a.samples)
    echo = {"samples": str(a.samples), "slack": a.slack}
    if a.check == "gaussian":
        rep = verify.fit_gaussian_bound([s for s in samples if s.t > s.s], a.diam, a.slack)
    else:
        rep = verify.check_offdiagonal_decay(samples, a.n or samples[0].x.size, a.h, slack=a.slack)
    _write_json(report_json(rep, echo), a.out)


def cmd_oracle(a):
    if a.kind == "series":
        tl, tr = a.theta
        xs = np.linspace(0.0, 1.0, a.points)
        samples = [G.KernelMatrixSample([x], t, [a.y], 0.0,
                                        [[oracle.series_heat_kernel_1d(tl, tr, x, a.y, t)]], "oracle")
                   for t in a.t for x in xs]
        G.write_samples(a.out, samples)
    else:
        P = _problem_from_args(a)
        M = assemble_mass(P.mesh, P.m)
        K = assemble_unit_stiffness(P.mesh, P.m)
        ev = oracle.dense_generalized_eig(M, K, assemble_robin(P.mesh, P.theta, 0.0), P.lambda_tilde)
        _write_json({"kind": "dense_eig", "theta0": ev[0], "lowest": ev[:10]}, a.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robin-green",
                                 description="Green's functions for Robin problems by Galerkin time stepping")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build a mesh and write it as JSON")
    p.add_argument("--domain", default="interval", choices=["interval", "rectangle", "lshape"])
    p.add_argument("--params", type=float, nargs="*", default=None)
    p.add_argument("--refine", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("coercivity", help="certify theta0")
    _add_problem_args(p)
    p.add_argument("--t-samples", type=float, nargs="*", default=[0.0])
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_coercivity)

    p = sub.add_parser("solve", help="forward solve to a trajectory CSV")
    _add_problem_args(p)
    _add_grid_args(p)
    p.add_argument("--delta-vertex", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("green", help="one Green's-function column")
    _add_problem_args(p)
    _add_grid_args(p)
    p.add_argument("--source-vertex", type=int, required=True)
    p.add_argument("--column", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--s", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_green)

    p = sub.add_parser("elliptic-green", help="time-integrated heat kernel")
    _add_problem_args(p)
    p.add_argument("--source-vertex", type=int, required=True)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_elliptic_green)

    p = sub.add_parser("verify", help="fit a bound to a sample CSV")
    p.add_argument("check", choices=["gaussian", "offdiag"])
    p.add_argument("--samples", required=True)
    p.add_argument("--diam", type=float, default=1.0)
    p.add_argument("--slack", type=float, default=2.0)
    p.add_argument("--h", type=float, default=0.0)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("oracle", help="reference solutions")
    p.add_argument("kind", choices=["series", "eig"])
    p.add_argument("--theta", type=float, nargs=2, default=[1.0, 1.0])
    p.add_argument("--t", type=float, nargs="+", default=[1e-3])
    p.add_argument("--y", type=float, default=0.5)
    p.add_argument("--points", type=int, default=41)
    _add_problem_args(p, theta_flag="--robin")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("run", help="run a TOML experiment config")
    p.add_argument("config")
    p.add_argument("--out-root", default=None, help=f"overrides ${OUT_ENV}")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=lambda a: print(run(a.config, a.out_root, a.jobs)))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, CatalogError, StageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
