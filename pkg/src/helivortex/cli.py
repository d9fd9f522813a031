"""Batch driver: ``helivortex solve|report|export``.

A run is described by a flat JSON document::

    {
      "domain": {"shape": "disk", "center": [2, 0], "radius": 1},
      "k": 1, "p": 2, "h": 0.01,
      "eps_list": [0.1, 0.05, 0.025, 0.0125],
      "q_mode": {"type": "constant", "m": 1},
      "output_dir": "runs/canonical"
    }

Optional fields: ``tolerances`` (solver options), ``seed_center``,
``export`` ({"vtk": bool, "fields": bool, "vtk_core_only": bool}) and
``verdict_tolerances``. ``q_mode`` may also be
{"type": "harmonic_trace", "profile": "2+cos" | "constant"} or
{"type": "trace_file", "path": ...} with one value per boundary vertex.

Relative output directories are resolved against $HELIVORTEX_OUTPUT_ROOT
when set, otherwise against the working directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asymptotics import (
    PredictedLimits,
    convergence_report,
    core_report,
    predicted_limits,
    read_convergence_csv,
    table_row,
    trend_verdict,
    vortex_core,
    write_convergence_csv,
)
from .domain import DomainSpec, Mesh, build_domain, read_mesh, write_mesh
from .errors import ConfigParse, HelivortexError, SolveFailure
from .groundstate import ProblemState, SolverOptions, continue_in_epsilon, evaluate_solution
from .helical_operator import boundary_angle, read_field, solve_harmonic_q, write_field
from .reconstruct3d import derived_normal_velocity, helical_lift, verify_steady, write_vtk

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERDICT = 0, 2, 3, 4
ENV_ROOT = "HELIVORTEX_OUTPUT_ROOT"

DEFAULT_VERDICT_TOLERANCES = {
    "energy_ratio": 0.25,  # relative
    "circulation": 0.15,  # relative
    "centroid": 0.2,  # absolute distance to x*
    "log_diameter": [0.7, 1.3],
    "tight": 0.01,  # relative (absolute for centroid and log-diameter)
}

_KNOWN = {
    "domain", "k", "p", "eps_list", "q_mode", "h", "tolerances", "output_dir",
    "seed_center", "export", "verdict_tolerances",
}


@dataclass
class RunConfig:
    domain: DomainSpec
    k: float
    p: float
    eps_list: list
    q_mode: dict
    h: float
    output_dir: str
    tolerances: SolverOptions = field(default_factory=SolverOptions)
    seed_center: tuple | None = None
    export: dict = field(default_factory=lambda: {"vtk": False, "fields": True, "vtk_core_only": True})
    verdict_tolerances: dict = field(default_factory=lambda: dict(DEFAULT_VERDICT_TOLERANCES))
    sha256: str = ""
    source: dict = field(default_factory=dict)

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        if not out.is_absolute():
            out = Path(os.environ.get(ENV_ROOT, ".")) / out
        return out


# -- config ------------------------------------------------------------------
def _line_of(text, key):
    """Line of a dotted key, searching each part after the previous one."""
    lines = text.splitlines()
    found, start = None, 0
    for part in key.split("."):
        needle = f'"{part}"'
        hit = next((i for i in range(start, len(lines)) if needle in lines[i]), None)
        if hit is None:
            break
        found, start = hit + 1, hit
    return found


def _fail(text, key, msg):
    line = _line_of(text, key) if text else None
    where = f" (line {line})" if line else ""
    raise ConfigParse(f"field '{key}'{where}: {msg}")


def _number(text, d, key, positive=False, prefix=""):
    name = prefix + key
    if key not in d:
        _fail(text, name, "missing required field")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        _fail(text, name, f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        _fail(text, name, f"must be positive, got {v}")
    return float(v)


def _point(text, key, v):
    if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(c, (int, float)) for c in v)):
        _fail(text, key, f"expected [x, y], got {v!r}")
    return tuple(float(c) for c in v)


def _parse_domain(text, d, h):
    if "domain" not in d:
        _fail(text, "domain", "missing required field")
    dom = d["domain"]
    if not isinstance(dom, dict) or "shape" not in dom:
        _fail(text, "domain", "expected an object with a 'shape'")
    shape = dom["shape"]
    if shape == "disk":
        return DomainSpec.disk(
            _point(text, "domain.center", dom.get("center", [0, 0])),
            _number(text, dom, "radius", positive=True, prefix="domain."),
            h,
        )
    if shape == "ellipse":
        ax = dom.get("semi_axes")
        if not (isinstance(ax, list) and len(ax) == 2 and all(isinstance(a, (int, float)) and a > 0 for a in ax)):
            _fail(text, "domain.semi_axes", f"expected two positive numbers, got {ax!r}")
        return DomainSpec.ellipse(_point(text, "domain.center", dom.get("center", [0, 0])), ax, h)
    if shape == "polygon":
        verts = dom.get("vertices")
        if not isinstance(verts, list) or len(verts) < 3:
            _fail(text, "domain.vertices", "expected at least three [x, y] points")
        return DomainSpec.polygon([_point(text, "domain.vertices", v) for v in verts], h)
    _fail(text, "domain.shape", f"unknown shape {shape!r}")


def _parse_q_mode(text, d, base):
    if "q_mode" not in d:
        _fail(text, "q_mode", "missing required field")
    q = d["q_mode"]
    if not isinstance(q, dict) or "type" not in q:
        _fail(text, "q_mode", "expected an object with a 'type'")
    kind = q["type"]
    if kind == "constant":
        return {"type": "constant", "m": _number(text, q, "m", positive=True, prefix="q_mode.") if "m" in q else 1.0}
    if kind == "harmonic_trace":
        prof = q.get("profile")
        if prof not in ("2+cos", "constant"):
            _fail(text, "q_mode.profile", f"expected '2+cos' or 'constant', got {prof!r}")
        m = _number(text, q, "m", positive=True, prefix="q_mode.") if "m" in q else 1.0
        return {"type": "harmonic_trace", "profile": prof, "m": m}
    if kind == "trace_file":
        path = q.get("path")
        if not isinstance(path, str):
            _fail(text, "q_mode.path", "expected a file path")
        p = Path(path)
        if not p.is_absolute() and base is not None:
            p = Path(base) / p
        return {"type": "trace_file", "path": str(p)}
    _fail(text, "q_mode.type", f"unknown q mode {kind!r}")


def parse_config(data, text: str = "", base=None) -> RunConfig:
    """Validate a config mapping; ``text`` is used for line numbers in errors."""
    if not isinstance(data, dict):
        raise ConfigParse("config must be a JSON object")
    unknown = sorted(set(data) - _KNOWN)
    if unknown:
        _fail(text, unknown[0], "unknown field")
    h = _number(text, data, "h", positive=True)
    k = _number(text, data, "k", positive=True)
    p = _number(text, data, "p")
    if not p > 1:
        _fail(text, "p", f"exponent must exceed 1, got {p}")
    if "eps_list" not in data:
        _fail(text, "eps_list", "missing required field")
    eps = data["eps_list"]
    if not isinstance(eps, list) or not eps or not all(isinstance(e, (int, float)) and not isinstance(e, bool) for e in eps):
        _fail(text, "eps_list", "expected a non-empty list of numbers")
    eps = [float(e) for e in eps]
    if any(not 0 < e < 1 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        _fail(text, "eps_list", "must be strictly decreasing within (0, 1)")
    domain = _parse_domain(text, data, h)
    q_mode = _parse_q_mode(text, data, base)
    out = data.get("output_dir")
    if not isinstance(out, str) or not out:
        _fail(text, "output_dir", "missing or empty")
    cfg = RunConfig(domain, k, p, eps, q_mode, h, out, source=data)
    if "tolerances" in data:
        tol = data["tolerances"]
        if not isinstance(tol, dict):
            _fail(text, "tolerances", "expected an object")
        names = {"gradient": "gradient_tol", "residual": "residual_tol",
                 "max_gradient_iters": "max_gradient_iters", "max_newton_iters": "max_newton_iters"}
        kw = {}
        for key, val in tol.items():
            if key not in names:
                _fail(text, f"tolerances.{key}", "unknown solver option")
            if key.startswith("max"):
                if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                    _fail(text, f"tolerances.{key}", f"expected a positive integer, got {val!r}")
                kw[names[key]] = val
            else:
                kw[names[key]] = _number(text, tol, key, positive=True, prefix="tolerances.")
        cfg.tolerances = SolverOptions(**kw)
    if data.get("seed_center") is not None:
        cfg.seed_center = _point(text, "seed_center", data["seed_center"])
    if "export" in data:
        ex = data["export"]
        if not isinstance(ex, dict) or any(not isinstance(v, bool) for v in ex.values()):
            _fail(text, "export", "expected an object of booleans")
        cfg.export.update(ex)
    if "verdict_tolerances" in data:
        vt = data["verdict_tolerances"]
        if not isinstance(vt, dict) or set(vt) - set(DEFAULT_VERDICT_TOLERANCES):
            _fail(text, "verdict_tolerances", f"keys must be among {sorted(DEFAULT_VERDICT_TOLERANCES)}")
        cfg.verdict_tolerances.update(vt)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigParse(f"cannot read config {path}: {exc}") from exc
    text = raw.decode("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParse(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    cfg = parse_config(data, text, base=path.parent)
    cfg.sha256 = hashlib.sha256(raw).hexdigest()
    return cfg


# -- problem setup -----------------------------------------------------------
def build_q(cfg: RunConfig, mesh: Mesh) -> np.ndarray:
    mode = cfg.q_mode
    if mode["type"] == "constant":
        return np.full(mesh.n_vertices, mode["m"])
    if mode["type"] == "harmonic_trace":
        m = mode["m"]
        if mode["profile"] == "constant":
            trace = np.full(mesh.n_vertices, m)
        else:
            trace = m * (2.0 + np.cos(boundary_angle(mesh)))
        return solve_harmonic_q(mesh, trace, cfg.k)
    vals = np.loadtxt(mode["path"], comments="#", ndmin=1)
    b = mesh.boundary_vertices
    if len(vals) != len(b):
        raise ConfigParse(f"field 'q_mode.path': expected {len(b)} boundary values, found {len(vals)}")
    trace = np.zeros(mesh.n_vertices)
    trace[b] = vals
    return solve_harmonic_q(mesh, trace, cfg.k)


def eps_tag(eps: float) -> str:
    return f"{eps:g}"


# -- verdicts ----------------------------------------------------------------
def _status(final, target, tight, accept_ok, trend):
    if abs(final - target) <= tight:
        return "pass"
    if accept_ok and trend.status == "pass":
        return "trend-pass"
    return "fail"


def verdict(cfg: RunConfig | None, rows, limits: PredictedLimits | None) -> dict:
    """Per-claim status with measured values and tolerances."""
    tol = dict(DEFAULT_VERDICT_TOLERANCES)
    if cfg is not None:
        tol.update(cfg.verdict_tolerances)
    claims = ("energy_ratio", "circulation", "centroid", "log_diameter", "diam_over_eps", "connected")
    if not rows or limits is None:
        return {c: {"status": "not-applicable"} for c in claims}
    col = lambda name: [float(r[name]) for r in rows]  # noqa: E731
    out = {}
    tight = tol["tight"]

    e = col("c_over_log")
    tr = trend_verdict(e, limits.energy_limit)
    rel = abs(e[-1] - limits.energy_limit) / limits.energy_limit
    out["energy_ratio"] = {
        "status": _status(e[-1] / limits.energy_limit, 1.0, tight, rel <= tol["energy_ratio"], tr),
        "final": e[-1], "target": limits.energy_limit, "relative_error": rel,
        "tolerance": tol["energy_ratio"], "trend": tr.status,
    }
    kap = col("kappa")
    tr = trend_verdict(kap, limits.circulation_limit)
    rel = abs(kap[-1] - limits.circulation_limit) / limits.circulation_limit
    out["circulation"] = {
        "status": _status(kap[-1] / limits.circulation_limit, 1.0, tight, rel <= tol["circulation"], tr),
        "final": kap[-1], "target": limits.circulation_limit, "relative_error": rel,
        "tolerance": tol["circulation"], "trend": tr.status,
    }
    dist = col("dist_to_xstar")
    tr = trend_verdict(dist, None)
    out["centroid"] = {
        "status": _status(dist[-1], 0.0, tight, dist[-1] <= tol["centroid"], tr),
        "final": dist[-1], "target": [float(v) for v in limits.x_star],
        "tolerance": tol["centroid"], "trend": tr.status,
    }
    ld = col("logdiam_over_logeps")
    tr = trend_verdict(ld, 1.0)
    lo, hi = tol["log_diameter"]
    out["log_diameter"] = {
        "status": _status(ld[-1], 1.0, tight, lo <= ld[-1] <= hi, tr),
        "final": ld[-1], "target": 1.0, "window": [lo, hi], "trend": tr.status,
    }
    de = col("diam_over_eps")
    if limits.interior:
        spread = max(de) / min(de) if min(de) > 0 else float("inf")
        out["diam_over_eps"] = {"status": "pass" if spread <= 4.0 else "fail", "values": de, "spread": spread}
    else:
        out["diam_over_eps"] = {"status": "not-applicable", "values": de,
                                "reason": "concentration point lies on the boundary"}
    comp = [int(r["components"]) for r in rows]
    out["connected"] = {"status": "pass" if all(c == 1 for c in comp) else "fail", "components": comp}
    return out


def verdict_ok(v: dict) -> bool:
    return all(c["status"] in ("pass", "trend-pass", "not-applicable") for c in v.values())


# -- artifacts ---------------------------------------------------------------
def _header(cfg):
    return f"config_sha256={cfg.sha256}"


def _write_json(path, cfg, payload):
    doc = {"config_sha256": cfg.sha256}
    doc.update(payload)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


@dataclass
class RunResult:
    status: int
    directory: Path
    solutions: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    limits: PredictedLimits | None = None
    verdict: dict = field(default_factory=dict)
    mesh: Mesh | None = None
    q: np.ndarray | None = None


def execute(cfg: RunConfig) -> RunResult:
    """Build the domain, solve along eps_list, and write all artifacts."""
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    head = _header(cfg)
    _write_json(out / "config.json", cfg, {"config": cfg.source})

    mesh = build_domain(cfg.domain)
    write_mesh(out / "mesh.txt", mesh, comment=head)
    q = build_q(cfg, mesh)
    write_field(out / "q.txt", q, comment=head)
    if cfg.q_mode["type"] != "constant":
        _write_vn(out / "v_n.csv", mesh, q, head)
    limits = predicted_limits(mesh, q, cfg.k)
    _write_json(out / "limits.json", cfg, {"limits": limits.to_dict()})

    state = ProblemState(mesh, cfg.k, cfg.p, cfg.eps_list[0], q)
    result = RunResult(EXIT_OK, out, limits=limits, mesh=mesh, q=q)
    log_path = out / "solutions.jsonl"
    with open(log_path, "w") as fh:
        fh.write(json.dumps({"config_sha256": cfg.sha256}) + "\n")
    try:
        sols = continue_in_epsilon(state, cfg.eps_list, options=cfg.tolerances, center=cfg.seed_center)
    except SolveFailure as exc:
        with open(log_path, "a") as fh:
            fh.write(json.dumps({"eps": exc.eps, "error": str(exc)}) + "\n")
        log.error("%s", exc)
        result.status = EXIT_SOLVER
        return result

    reports = []
    with open(log_path, "a") as fh:
        for sol in sols:
            rep = core_report(sol)
            reports.append(rep)
            meta = sol.metadata()
            meta["steady"] = verify_steady(sol).to_dict()
            fh.write(json.dumps(meta) + "\n")
            if cfg.export.get("fields", True):
                write_field(out / f"u_eps{eps_tag(sol.eps)}.txt", sol.u, comment=head)
            if cfg.export.get("vtk", False):
                _export_lift(out, sol, cfg, head)
    result.solutions = sols
    result.rows = _rows(reports, limits)
    write_convergence_csv(out / "convergence.csv", result.rows, comment=head)
    # verdicts read the CSV back so that ``report`` reproduces them exactly
    result.verdict = verdict(cfg, read_convergence_csv(out / "convergence.csv"), limits)
    _write_json(out / "verdict.json", cfg, {"verdict": result.verdict})
    result.status = EXIT_OK if verdict_ok(result.verdict) else EXIT_VERDICT
    return result


def _rows(reports, limits):
    if len(reports) >= 2:
        return convergence_report(reports, limits).rows
    return [table_row(r, limits) for r in reports]


def _write_vn(path, mesh, q, head):
    vn = derived_normal_velocity(mesh, q)
    e = mesh.boundary_edges
    mid = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
    with open(path, "w") as fh:
        fh.write(f"# {head}\n")
        fh.write("edge,x,y,v_n\n")
        for i, (m, v) in enumerate(zip(mid, vn)):
            fh.write(f"{i},{m[0]:.12g},{m[1]:.12g},{v:.12g}\n")


def _export_lift(out, sol, cfg, head):
    core_only = cfg.export.get("vtk_core_only", True)
    tri = vortex_core(sol) if core_only else None
    lift = helical_lift(sol, triangles=tri)
    write_vtk(out / f"lift_eps{eps_tag(sol.eps)}.vtk", lift, comment=head)


# -- run directory readers ---------------------------------------------------
def _load_run(run_dir):
    run_dir = Path(run_dir)
    cfg_doc = json.loads((run_dir / "config.json").read_text())
    cfg = parse_config(cfg_doc["config"], base=run_dir)
    cfg.sha256 = cfg_doc["config_sha256"]
    lim = json.loads((run_dir / "limits.json").read_text())["limits"]
    limits = PredictedLimits(np.array(lim["x_star"]), lim["energy_limit"], lim["circulation_limit"],
                             lim["interior"], lim.get("multiplicity", 1))
    return run_dir, cfg, limits


def report(run_dir) -> tuple[int, dict]:
    run_dir, cfg, limits = _load_run(run_dir)
    csv_path = run_dir / "convergence.csv"
    rows = read_convergence_csv(csv_path) if csv_path.exists() else []
    v = verdict(cfg, rows, limits)
    return (EXIT_OK if verdict_ok(v) else EXIT_VERDICT), v


def export(run_dir, vtk=True) -> list:
    run_dir, cfg, _ = _load_run(run_dir)
    mesh = read_mesh(run_dir / "mesh.txt")
    q = read_field(run_dir / "q.txt")
    state = ProblemState(mesh, cfg.k, cfg.p, cfg.eps_list[0], q)
    written = []
    for eps in cfg.eps_list:
        f = run_dir / f"u_eps{eps_tag(eps)}.txt"
        if not f.exists():
            continue
        sol = evaluate_solution(state.with_eps(eps), read_field(f))
        if vtk:
            _export_lift(run_dir, sol, cfg, _header(cfg))
            written.append(run_dir / f"lift_eps{eps_tag(eps)}.vtk")
    return written


def run(config_path) -> int:
    """Execute a config file; returns the process exit status."""
    try:
        cfg = load_config(config_path)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = execute(cfg)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HelivortexError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    for name, claim in res.verdict.items():
        print(f"{name:14s} {claim['status']}")
    print(f"artifacts: {res.directory}")
    return res.status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="helivortex", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    p_solve = sub.add_parser("solve", help="run the eps-continuation described by a config file")
    p_solve.add_argument("config")
    p_rep = sub.add_parser("report", help="recompute verdicts from a run directory")
    p_rep.add_argument("run_dir")
    p_exp = sub.add_parser("export", help="write VTK lifts for a run directory")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("--vtk", action="store_true", help="write legacy VTK helical lifts")
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "solve":
        return run(args.config)
    try:
        if args.command == "report":
            status, v = report(args.run_dir)
            print(json.dumps(v, indent=2))
            return status
        if not args.vtk:
            parser.error("export: nothing to do without --vtk")
        for path in export(args.run_dir, vtk=True):
            print(path)
        return EXIT_OK
    except (OSError, KeyError, json.JSONDecodeError, ConfigParse) as exc:
        print(f"cannot read run directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
