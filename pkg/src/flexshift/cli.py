"""Command-line entry point: ``flexshift {solve,diagnose,invert,oracle,gen}``.

Every command reads one JSON configuration file, applies ``--set key.path=value``
overrides, validates everything before touching the output directory, and
writes CSV/JSON artifacts plus a ``manifest.json`` that can be fed back in as
``--config`` to repeat the run.

Exit codes: 0 success, 1 numerical failure (partial artifacts written),
2 configuration error (nothing written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigError, FlexShiftError
from .inexact_precond import residual_gap_report
from .linalg_core import read_matrix, read_vector, write_matrix, write_vector
from .oht_inversion import CovarianceOperator, GeostatModel, GNConfig, forward_measurements, invert, l2_errors
from .oht_model import KernelSpec, NotConverged, discretize, forward_solve, measure, time_domain_oracle
from .scenarios import (
    FRANKE_DEFAULTS,
    TABLE1_DEFAULTS,
    franke_scenario,
    frequency_grid,
    inversion_frequencies,
    sensor_box,
    table1_scenario,
)
from .shifted_krylov import (
    KrylovBasis,
    OperatorCounts,
    ShiftedFamily,
    SolverConfig,
    direct_solve_shifts,
    flexible_arnoldi_extend,
    make_preconditioner,
    run_shifted_solver,
    schedule_from_config,
    single_tau_gmres,
    solve_subproblem_fom,
)
from .spectral_diagnostics import diagnose

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2

MODES = ("flexible", "inexact", "single-tau", "direct", "all")

# Reference reconstruction errors, reported next to ours.
REFERENCE_ERRORS = {1: (0.3794, 0.0511), 5: (0.3379, 0.0352), 10: (0.3264, 0.0337), 20: (0.3180, 0.0328)}

SECTION_KEYS = {
    "solve": {"tau_index"},
    "diagnose": {"n_shifts", "m", "eps", "gap_shifts"},
    "invert": {"n_f", "gn", "line_search"},
    "oracle": {"periods", "steps_per_period", "frequency_indices"},
    "gen": {"write_matrices"},
}
TOP_KEYS = {"scenario", "matrices", "solver", "seed", "out", *SECTION_KEYS}


# ---------------------------------------------------------------- config

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        path, value = item.split("=", 1)
        keys = path.split(".")
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {path!r}: {k!r} is not a section")
        node[keys[-1]] = _parse_value(value)
    return cfg


def load_config(path, assignments=()) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if "resolved_config" in cfg:  # a manifest from an earlier run
        cfg = cfg["resolved_config"]
    cfg = apply_overrides(cfg, assignments)
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in SECTION_KEYS.items():
        extra = set(cfg.get(section, {})) - allowed
        if extra:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
    return cfg


def _scenario_defaults(name: str) -> dict:
    if name == "table1":
        return TABLE1_DEFAULTS
    if name == "franke":
        return FRANKE_DEFAULTS
    raise ConfigError(f"unknown scenario {name!r}")


def _scenario_overrides(cfg: dict, default: str) -> tuple[str, dict]:
    sc = dict(cfg.get("scenario", {"name": default}))
    name = sc.pop("name", default)
    defaults = _scenario_defaults(name)
    bad = set(sc) - set(defaults)
    if bad:
        raise ConfigError(f"unknown scenario keys: {sorted(bad)}")
    return name, sc


def _solver_config(cfg: dict, threads: int | None) -> SolverConfig:
    d = dict(cfg.get("solver", {}))
    if threads is not None:
        d["threads"] = threads
    return SolverConfig.from_dict(d)


def _resolve(cfg: dict, command: str, threads: int | None) -> tuple[dict, SolverConfig]:
    """Fill defaults so the manifest records exactly what ran."""
    cfg = copy.deepcopy(cfg)
    solver = _solver_config(cfg, threads)
    cfg["solver"] = solver.as_dict()
    if "matrices" not in cfg:
        name, sc = _scenario_overrides(cfg, "franke" if command == "invert" else "table1")
        if command == "invert" and name != "franke":
            raise ConfigError("invert needs the franke scenario")
        full = dict(_scenario_defaults(name))
        full.update(sc)
        if "seed" in cfg and "seed" in full:
            full["seed"] = int(cfg["seed"])
        cfg["scenario"] = full
    cfg.setdefault("seed", cfg.get("scenario", {}).get("seed", 0))
    return cfg, solver


# ---------------------------------------------------------------- output

class Run:
    """Output directory, counters and manifest for one command."""

    def __init__(self, command: str, out: Path, config_path: str, cfg: dict, argv):
        self.command = command
        self.out = out
        self.config_path = config_path
        self.cfg = cfg
        self.argv = list(argv)
        self.t0 = time.perf_counter()
        self.counters: dict = {}
        self.files: list[str] = []
        self.status = "running"
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def write_json(self, name: str, obj) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, default=_json_default)
            fh.write("\n")

    def add_counts(self, key: str, counts) -> None:
        self.counters[key] = counts.as_dict() if hasattr(counts, "as_dict") else counts

    def finish(self, status: str) -> None:
        self.status = status
        manifest = dict(
            command=self.command,
            argv=self.argv,
            config_path=str(self.config_path),
            resolved_config=self.cfg,
            seed=self.cfg.get("seed"),
            output_dir=str(self.out),
            status=status,
            wall_time=time.perf_counter() - self.t0,
            counters=self.counters,
            files=sorted(set(self.files)),
            version=__version__,
            python=platform.python_version(),
            numpy=np.__version__,
        )
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, default=_json_default)
            fh.write("\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------- problems

def _family_from_config(cfg: dict):
    """Shifted family and frequencies from either a scenario or Matrix Market files."""
    if "matrices" in cfg:
        mats = cfg["matrices"]
        try:
            K = read_matrix(mats["K"])
            M = read_matrix(mats["M"])
            b = read_vector(mats["b"])
        except KeyError as exc:
            raise ConfigError(f"matrices section needs {exc}") from None
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read matrices: {exc}") from None
        if "omega" in mats:
            freqs = np.asarray(mats["omega"], dtype=float)
        else:
            freqs = frequency_grid(mats["omega_min"], mats["omega_max"], int(mats["n_frequencies"]))
        return ShiftedFamily(K, M, b, 1j * freqs), freqs, None
    sc = cfg["scenario"]
    model, freqs, _ = (table1_scenario if sc["name"] == "table1" else franke_scenario)(
        {k: v for k, v in sc.items() if k != "name"})
    system = discretize(model, freqs)
    return system.family(), freqs, system


def _tau_from_index(index, freqs) -> float:
    lo, hi = float(freqs.min()), float(freqs.max())
    if index == "center":
        return 0.5 * (lo + hi)
    if index == "min":
        return lo
    if index == "max":
        return hi
    try:
        return float(freqs[int(index)])
    except (ValueError, IndexError):
        raise ConfigError(f"invalid tau index {index!r}") from None


def _solution_rows(mode, sols, freqs, bnorm):
    for s in sols:
        rel = np.nan if s.true_residual is None else s.true_residual / bnorm
        yield mode, s.index, freqs[s.index], s.iterations, int(s.converged), rel


# ---------------------------------------------------------------- commands

def cmd_solve(run: Run, solver: SolverConfig, args) -> int:
    family, freqs, _ = _family_from_config(run.cfg)
    bnorm = float(np.linalg.norm(family.b))
    rng = (float(freqs.min()), float(freqs.max()))
    mode = args.mode
    modes = ["direct", "single-tau", "flexible", "inexact"] if mode == "all" else [mode]
    tau_index = args.tau_index or run.cfg.get("solve", {}).get("tau_index", "center")
    conv_rows, res_rows, timing_rows = [], [], []
    ok = True
    for md in modes:
        counts = OperatorCounts()
        t = time.perf_counter()
        if md == "direct":
            X = direct_solve_shifts(family, counts)
            wall = time.perf_counter() - t
            for j, sigma in enumerate(family.shifts):
                rel = np.linalg.norm(family.residual(sigma, X[j])) / bnorm
                res_rows.append((md, j, freqs[j], 0, 1, rel))
        else:
            if md == "single-tau":
                tau = _tau_from_index(tau_index, freqs)
                sols, rep = single_tau_gmres(family, 1j * tau, solver.baseline_restart, solver.tol,
                                             threads=solver.threads)
            else:
                cfg = solver
                if md == "inexact":
                    cfg = SolverConfig.from_dict({**solver.as_dict(), "backend": "inexact"})
                elif md == "flexible":
                    cfg = SolverConfig.from_dict({**solver.as_dict(), "backend": "direct"})
                schedule = schedule_from_config(cfg, rng)
                sols, rep = run_shifted_solver(
                    family, schedule, cfg.method, cfg.tol, cfg.max_m, cfg.max_restarts,
                    restart=cfg.restart, check_every=cfg.check_every,
                    reorthogonalize=cfg.reorthogonalize, threads=cfg.threads)
            wall = time.perf_counter() - t
            counts = rep.counts
            ok = ok and rep.converged
            conv_rows += [(md, it, j, freqs[j], est / bnorm, int(c)) for it, j, _, est, c in rep.log]
            res_rows += list(_solution_rows(md, sols, freqs, bnorm))
        timing_rows.append((md, wall, *counts.as_dict().values()))
        run.add_counts(md, counts)
    run.write_csv("convergence.csv", ["mode", "iteration", "shift_index", "omega", "relative_estimate",
                                      "converged"], conv_rows)
    run.write_csv("residuals.csv", ["mode", "shift_index", "omega", "iterations", "converged",
                                    "relative_true_residual"], res_rows)
    run.write_csv("timing.csv", ["mode", "wall_time", *OperatorCounts().as_dict().keys()], timing_rows)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_diagnose(run: Run, solver: SolverConfig, args) -> int:
    family, freqs, _ = _family_from_config(run.cfg)
    dcfg = run.cfg.get("diagnose", {})
    n_shifts = int(dcfg.get("n_shifts", 5))
    m = int(dcfg.get("m", solver.max_m))
    rng = (float(freqs.min()), float(freqs.max()))
    pick = np.unique(np.linspace(0, len(freqs) - 1, min(n_shifts, len(freqs))).round().astype(int))
    sub = family.with_shifts(family.shifts[pick])
    direct_cfg = SolverConfig.from_dict({**solver.as_dict(), "backend": "direct", "max_m": m})
    schedule = schedule_from_config(direct_cfg, rng)
    precond = make_preconditioner(sub, schedule)
    basis = KrylovBasis(sub.b, m)
    flexible_arnoldi_extend(sub, schedule, basis, m, precond)
    run.add_counts("basis", precond.counts)
    entries = diagnose(sub, basis)
    all_pass = True
    for j, e in zip(pick, entries):
        e["shift_index"] = int(j)
        e["omega"] = float(freqs[j])
        e["prop2_pass"] = bool(e.get("fom_bound_holds", False))
        e["prop3_pass"] = bool(e.get("gap", {}).get("holds", False))
        all_pass = all_pass and e["prop2_pass"] and e["prop3_pass"]
    run.write_json("diagnostics.json", dict(m=basis.k, breakdown=basis.breakdown, shifts=entries,
                                            all_pass=all_pass))

    gap_rows = []
    eps_list = dcfg.get("eps", [1e-9, 1e-11, 1e-12])
    n_gap = int(dcfg.get("gap_shifts", 5))
    gpick = np.unique(np.linspace(0, len(freqs) - 1, min(n_gap, len(freqs))).round().astype(int))
    gfam = family.with_shifts(family.shifts[gpick])
    for eps in [0.0] + [float(e) for e in eps_list]:
        backend = "direct" if eps == 0.0 else "inexact"
        cfg = SolverConfig.from_dict({**solver.as_dict(), "backend": backend,
                                      "inner_tol": eps or solver.inner_tol})
        schedule = schedule_from_config(cfg, rng)

        def record(basis, active, sols, eps=eps, backend=backend):
            for j in active:
                y = solve_subproblem_fom(basis, gfam.shifts[j]).y
                if y.size == 0:
                    continue
                r = residual_gap_report(gfam, basis, gfam.shifts[j], y, eps)
                gap_rows.append((backend, eps, basis.k, int(gpick[j]), freqs[gpick[j]], r.measured_gap,
                                 r.measured_gap_direct, r.gap_bound,
                                 int(r.measured_gap <= r.gap_bound if eps else r.measured_gap <= 1e-11)))

        _, rep = run_shifted_solver(gfam, schedule, "fom", cfg.tol, cfg.max_m, 0, store_residuals=True,
                                    on_basis=record, threads=cfg.threads)
        run.add_counts(f"gap_{backend}_{eps:g}", rep.counts)
    run.write_csv("gap_table.csv", ["backend", "eps", "iteration", "shift_index", "omega", "measured_gap",
                                    "measured_gap_direct", "gap_bound", "pass"], gap_rows)
    all_pass = all_pass and all(r[-1] for r in gap_rows)
    return EXIT_OK if all_pass else EXIT_NUMERICAL


def cmd_invert(run: Run, solver: SolverConfig, args) -> int:
    sc = run.cfg["scenario"]
    icfg = run.cfg.get("invert", {})
    gn_dict = dict(icfg.get("gn", {}))
    gn_dict.setdefault("line_search", bool(icfg.get("line_search", True)))
    gn = GNConfig.from_dict(gn_dict)
    true, _, scfg = franke_scenario({k: v for k, v in sc.items() if k != "name"})
    n_f = int(icfg.get("n_f", scfg["n_frequencies"]))
    freqs = inversion_frequencies(scfg, n_f)
    grid = true.grid

    t = time.perf_counter()
    y, _, _ = forward_measurements(true, freqs, solver)
    t_data = time.perf_counter() - t
    Q = CovarianceOperator(grid.coords(), KernelSpec(**scfg["prior_kernel"]))
    geo = GeostatModel.with_noise(Q, y, scfg["eta"])
    lo, hi = scfg["log_conductivity_range"]
    s0 = np.full(grid.n_nodes, 0.5 * (lo + hi))

    rows = []

    def progress(state, entry):
        rows.append(entry)

    res = None
    try:
        res = invert(true, freqs, geo, s0, solver, gn, callback=progress)
    finally:
        hist = rows if res is None else res.history
        run.write_csv("objective.csv", ["step", "objective", "step_size", "rel_step", "saddle_residual"],
                      [(e["step"], e["objective"], e["step_size"], e["rel_step"], e.get("saddle_residual"))
                       for e in hist])
    run.write_csv("reconstruction.csv", ["x", "y", "value"], zip(grid.x, grid.y, res.s))
    run.write_csv("true_field.csv", ["x", "y", "value"], zip(grid.x, grid.y, true.log_conductivity))
    errors = l2_errors(grid, res.s, true.log_conductivity, sensor_box(scfg))
    ref = REFERENCE_ERRORS.get(n_f)
    run.write_json("errors.json", dict(
        n_f=n_f, **errors, iterations=len(res.history) - 1, converged=res.converged, diverged=res.diverged,
        box=sensor_box(scfg), reference=None if ref is None else dict(total_l2=ref[0], box_l2=ref[1])))
    tm = res.timings
    run.write_csv("timing.csv", ["category", "seconds"], [
        ("Forward", tm["forward"]), ("Adjoint", tm["adjoint"]), ("Inner Product", tm["inner_product"]),
        ("Saddle", tm["saddle"]), ("Covariance", tm["covariance"]), ("Data", t_data)])
    run.add_counts("inversion", res.counts)
    return EXIT_NUMERICAL if res.diverged else EXIT_OK


def cmd_oracle(run: Run, solver: SolverConfig, args) -> int:
    sc = run.cfg["scenario"]
    ocfg = run.cfg.get("oracle", {})
    model, freqs, _ = (table1_scenario if sc["name"] == "table1" else franke_scenario)(
        {k: v for k, v in sc.items() if k != "name"})
    idx = ocfg.get("frequency_indices", [0])
    try:
        sel = freqs[np.asarray(idx, dtype=int)]
    except IndexError:
        raise ConfigError(f"frequency_indices {idx} out of range") from None
    system = discretize(model, sel)
    fwd = forward_solve(system, solver)
    phasor = measure(fwd.fields, model.sensors, sel)
    rows, trace_rows, worst = [], [], 0.0
    for f, w in enumerate(sel):
        orc = time_domain_oracle(model, float(w), int(ocfg.get("periods", 8)),
                                 int(ocfg.get("steps_per_period", 80)))
        for i, node in enumerate(model.sensors):
            pc, ps = phasor.cos[f, i], phasor.sin[f, i]
            rel = float(np.hypot(orc.cos[i] - pc, orc.sin[i] - ps) / np.hypot(pc, ps))
            worst = max(worst, rel)
            rows.append((node, w, pc, ps, orc.cos[i], orc.sin[i], rel))
        for t, vals in zip(orc.times, orc.trace):
            trace_rows.append((w, t, *vals))
    run.write_csv("oracle.csv", ["sensor", "omega", "phasor_cos", "phasor_sin", "oracle_cos", "oracle_sin",
                                 "relative_difference"], rows)
    run.write_csv("trace.csv", ["omega", "time", *[f"sensor_{s}" for s in model.sensors]], trace_rows)
    run.add_counts("forward", fwd.report.counts)
    return EXIT_OK if worst <= 0.01 else EXIT_NUMERICAL


def cmd_gen(run: Run, solver: SolverConfig, args) -> int:
    sc = run.cfg["scenario"]
    model, freqs, _ = (table1_scenario if sc["name"] == "table1" else franke_scenario)(
        {k: v for k, v in sc.items() if k != "name"})
    grid = model.grid
    run.write_csv("field.csv", ["x", "y", "value"], zip(grid.x, grid.y, model.log_conductivity))
    system = discretize(model, freqs)
    if run.cfg.get("gen", {}).get("write_matrices", True):
        write_matrix(run.path("K.mtx"), system.K)
        write_matrix(run.path("M.mtx"), system.M)
        write_vector(run.path("b.mtx"), system.q)
        run.write_json("frequencies.json", dict(omega=freqs))
    fwd = forward_solve(system, solver, raise_on_failure=False)
    meas = measure(fwd.fields, model.sensors, freqs)
    run.write_csv("measurements.csv", ["sensor", "omega", "cos_coeff", "sin_coeff"], meas.rows())
    run.add_counts("forward", fwd.report.counts)
    return EXIT_OK if fwd.report.converged else EXIT_NUMERICAL


def _config_frequencies(cfg: dict) -> np.ndarray:
    if "matrices" in cfg:
        return _family_from_config(cfg)[1]
    sc = cfg["scenario"]
    return frequency_grid(sc["omega_min"], sc["omega_max"], int(sc["n_frequencies"]))


def _validate(cfg: dict, args) -> None:
    """Checks that need the resolved config; run before any file is written."""
    if "matrices" in cfg and args.command not in ("solve", "diagnose"):
        raise ConfigError(f"{args.command} needs a scenario, not matrices")
    freqs = _config_frequencies(cfg)
    if args.command == "solve":
        _tau_from_index(args.tau_index or cfg.get("solve", {}).get("tau_index", "center"), freqs)
    if args.command == "oracle":
        idx = np.asarray(cfg.get("oracle", {}).get("frequency_indices", [0]), dtype=int)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= len(freqs):
            raise ConfigError(f"oracle frequency_indices out of range 0..{len(freqs) - 1}")
        if int(cfg.get("oracle", {}).get("steps_per_period", 80)) < 40:
            raise ConfigError("oracle steps_per_period must be at least 40")
    if args.command == "invert":
        GNConfig.from_dict(dict(cfg.get("invert", {}).get("gn", {})))


COMMANDS = dict(solve=cmd_solve, diagnose=cmd_diagnose, invert=cmd_invert, oracle=cmd_oracle, gen=cmd_gen)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexshift", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", required=True, help="JSON config file (or a manifest.json)")
        c.add_argument("--out", help="output directory (overrides the config's 'out')")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. solver.tol=1e-8")
        c.add_argument("--threads", type=int, help="cap on worker threads")
        if name == "solve":
            c.add_argument("--mode", choices=MODES, default="flexible")
            c.add_argument("--tau-index", help="single-tau preconditioner: center, min, max or a shift index")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg, solver = _resolve(cfg, args.command, args.threads)
        out = Path(args.out or cfg.get("out") or f"runs/{args.command}")
        cfg["out"] = str(out)
        _validate(cfg, args)
    except ConfigError as exc:
        print(f"flexshift: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run = Run(args.command, out, args.config, cfg, argv)
    try:
        status = COMMANDS[args.command](run, solver, args)
    except (NotConverged, FlexShiftError, np.linalg.LinAlgError) as exc:
        run.finish("numerical-failure")
        print(f"flexshift: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    run.finish("ok" if status == EXIT_OK else "numerical-failure")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
