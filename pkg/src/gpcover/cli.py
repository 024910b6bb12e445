"""Command-line entry point: ``gpcover {fit,plan,verify,benchmark}``.

Exit codes: 0 ok, 1 guarantee violated, 2 config or parse error, 3 fit
failure, 4 invalid target, 5 geometry failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gpcover import demo
from gpcover.coverage import (
    CoverageMatrix, TargetSpec, build_matrix, digest, load_matrix, resolve_target, save_matrix,
)
from gpcover.environment import Environment, load_environment
from gpcover.errors import (
    DigestMismatch, EmptyDiscretization, FactorizationFailure, FitDiverged, InsufficientData,
    InvalidEnvironment, InvalidTarget, NoFeasiblePath,
)
from gpcover.gp import KINDS, VARIABLE, GpModel, KernelSpec, dump_kernel, fit, load_kernel
from gpcover.harness import (
    DEFAULT_RATIOS, Field, SweepConfig, load_field, pgm_text, run_sweep, synthetic_field,
    variance_raster, write_sweep,
)
from gpcover.planners import (
    METHODS, RoutingConfig, dump_plan, plan_from_dict, plan_gcb, plan_greedy, plan_hex,
    verify_guarantee,
)

logger = logging.getLogger("gpcover")

EXIT_OK, EXIT_VIOLATED, EXIT_CONFIG, EXIT_FIT, EXIT_TARGET, EXIT_GEOMETRY = range(6)
GUARANTEE_SLACK = 1e-9


class ConfigError(Exception):
    pass


# -- config -----------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything a plan or benchmark run needs; relative paths resolve against the file."""

    env_path: Path
    field_path: Path | None = None
    synthetic: dict | None = None
    kernel_path: Path | None = None
    kernel_kind: str = VARIABLE
    pilot_data: Path | None = None
    target: dict = field(default_factory=lambda: {"mode": "ratio", "value": 0.5})
    method: str = "greedy"
    budget: float | None = None
    seed: int = 0
    output_dir: Path | None = None
    sweep: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, base: Path, source: str = "<config>") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object")

        def path(key, required=False):
            val = data.get(key)
            if val is None:
                if required:
                    raise ConfigError(f"{source}: missing field '{key}'")
                return None
            p = Path(val)
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise ConfigError(f"{source}: field '{key}' points to missing file {p}")
            return p

        fld = data.get("field")
        field_path, synthetic = None, None
        if fld is not None:
            if not isinstance(fld, dict) or ("path" in fld) == ("synthetic" in fld):
                raise ConfigError(f"{source}: field 'field' needs exactly one of 'path' or 'synthetic'")
            if "path" in fld:
                p = Path(fld["path"])
                field_path = p if p.is_absolute() else base / p
                if not field_path.exists():
                    raise ConfigError(f"{source}: field file {field_path} missing")
            else:
                synthetic = dict(fld)
        kind = data.get("kernel_kind", VARIABLE)
        if kind not in KINDS:
            raise ConfigError(f"{source}: kernel_kind must be one of {KINDS}")
        method = data.get("method", "greedy")
        if method not in METHODS:
            raise ConfigError(f"{source}: method must be one of {METHODS}")
        target = data.get("target", {"mode": "ratio", "value": 0.5})
        if not isinstance(target, dict) or set(target) != {"mode", "value"}:
            raise ConfigError(f"{source}: target must be {{'mode': ..., 'value': ...}}")
        out = data.get("output_dir")
        return cls(
            env_path=path("env", required=True), field_path=field_path, synthetic=synthetic,
            kernel_path=path("kernel"), kernel_kind=kind, pilot_data=path("pilot_data"),
            target=target, method=method, budget=data.get("budget"), seed=int(data.get("seed", 0)),
            output_dir=Path(out) if out is not None else None, sweep=dict(data.get("sweep", {})),
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(data, path.parent, str(path))


def _resolve_config(args) -> RunConfig | None:
    if getattr(args, "demo", False):
        return load_config(demo.CONFIG)
    if getattr(args, "config", None):
        return load_config(args.config)
    return None


# -- file helpers -----------------------------------------------------------

def read_xy_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """``x,y,value`` rows; an optional header line is skipped."""
    xs, ys = [], []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not _numeric(row[0]):
                continue
            if len(row) < 3:
                raise ConfigError(f"{path}:{lineno}: expected x,y,value")
            try:
                xs.append((float(row[0]), float(row[1])))
                ys.append(float(row[2]))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric value") from None
    if not xs:
        return np.zeros((0, 2)), np.zeros(0)
    return np.asarray(xs), np.asarray(ys)


def write_xy_csv(path, X, y) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for (a, b), v in zip(X, y):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])


def _numeric(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _load_env(path) -> Environment:
    if path is None:
        raise ConfigError("an environment file is required (--env, --config or --demo)")
    try:
        return load_environment(path)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None


def _load_kernel(path) -> tuple[KernelSpec, float]:
    if path is None:
        raise ConfigError("a kernel file is required (--kernel, --config or --demo)")
    try:
        return load_kernel(path)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid kernel file ({exc})") from None


def _prior_model(spec, noise, pilot_path) -> GpModel:
    if pilot_path is None:
        return GpModel(spec, noise)
    X, y = read_xy_csv(pilot_path)
    return GpModel(spec, noise, X, y, mean=float(y.mean()) if len(y) else 0.0)


def _field_from(cfg: RunConfig, env: Environment) -> Field:
    if cfg.field_path is not None:
        return load_field(cfg.field_path, env.eval_spacing)
    if cfg.synthetic is not None:
        syn = cfg.synthetic
        return synthetic_field(syn["synthetic"], env, syn.get("params"), int(syn.get("seed", cfg.seed)))
    raise ConfigError("benchmark needs a ground-truth field ('field' in the config)")


def _out_dir(args, cfg: RunConfig | None, default: str) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    if cfg is not None and cfg.output_dir is not None:
        return cfg.output_dir
    return Path(default)


# -- commands ---------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = _resolve_config(args)
    env = _load_env(args.env or (cfg.env_path if cfg else None))
    data_path = args.data or (cfg.pilot_data if cfg else None)
    if data_path is None:
        raise ConfigError("training data is required (--data)")
    X, y = read_xy_csv(data_path)
    kind = args.kind or (cfg.kernel_kind if cfg else VARIABLE)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    model, report = fit(X, y, kind, env, seed=seed, return_report=True)
    out = _out_dir(args, cfg, "gpcover-out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "kernel.json").write_text(dump_kernel(model.kernel, model.noise_variance))
    rep = {"lml": report.lml, "n": report.n, "kind": kind, "seed": seed,
           "signal_variance": model.kernel.signal_variance, "noise_variance": model.noise_variance,
           "start_lml": report.starts, "evaluations": report.evaluations}
    if model.kernel.kind == VARIABLE:
        rep["lengthscale_grid"] = model.kernel.lengthscale_grid.values.tolist()
    else:
        rep["lengthscale"] = model.kernel.lengthscale
    (out / "fit_report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(f"fit {kind} n={report.n} lml={report.lml:.6g} -> {out / 'kernel.json'}")
    return EXIT_OK


def _target_from(args, cfg) -> TargetSpec:
    if args.target is not None:
        return TargetSpec("absolute", args.target)
    if args.target_ratio is not None:
        return TargetSpec("ratio", args.target_ratio)
    if cfg is not None:
        return TargetSpec(cfg.target["mode"], float(cfg.target["value"]))
    return TargetSpec("ratio", 0.5)


def _matrix(args, env, spec, noise, target, model) -> CoverageMatrix:
    cache = getattr(args, "matrix_cache", None)
    if cache and Path(cache).exists():
        m = load_matrix(cache, digest(env, spec, noise))
        if m.target_variance == resolve_target(target, env, spec, model):
            return m
    m = build_matrix(env, spec, noise, target, prior_model=model, jobs=args.jobs)
    if cache:
        save_matrix(m, cache)
    return m


def cmd_plan(args) -> int:
    cfg = _resolve_config(args)
    env = _load_env(args.env or (cfg.env_path if cfg else None))
    spec, noise = _load_kernel(args.kernel or (cfg.kernel_path if cfg else None))
    pilot = args.pilot_data or (cfg.pilot_data if cfg else None)
    model = _prior_model(spec, noise, pilot)
    target = _target_from(args, cfg)
    method = args.method or (cfg.method if cfg else "greedy")
    budget = args.budget if args.budget is not None else (cfg.budget if cfg else None)
    if budget is not None and method in ("gcb", "greedy"):
        method = "gcb-budgeted"
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    routing = RoutingConfig(seed=seed)

    matrix = _matrix(args, env, spec, noise, target, model)
    if method == "greedy":
        plan = plan_greedy(matrix, env, routing)
    elif method == "gcb":
        plan = plan_gcb(matrix, env, None, routing)
    elif method == "gcb-budgeted":
        if budget is None:
            raise ConfigError("gcb-budgeted needs --budget")
        plan = plan_gcb(matrix, env, float(budget), routing)
    else:
        plan = plan_hex(env, spec, noise, matrix.target_variance, routing, matrix=matrix)
    plan.achieved_max_variance = verify_guarantee(plan, model, env)

    out = _out_dir(args, cfg, "gpcover-out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(dump_plan(plan))
    (out / "route.csv").write_text(plan.route.to_csv())
    pts = env.candidates[list(plan.order)] if plan.order else None
    img, meta = variance_raster(model, env, pts)
    text, side = pgm_text(img, meta)
    (out / "variance.pgm").write_text(text)
    (out / "variance.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    print(f"method={plan.method} waypoints={len(plan.order)} length_m={plan.length:.3f} "
          f"achieved_max_variance={plan.achieved_max_variance:.6g} target={plan.target_variance:.6g}"
          + (f" uncovered={plan.uncovered_count}" if plan.uncovered_count else ""))
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _resolve_config(args)
    env = _load_env(args.env or (cfg.env_path if cfg else None))
    spec, noise = _load_kernel(args.kernel or (cfg.kernel_path if cfg else None))
    plan_path = args.plan
    if plan_path is None:
        raise ConfigError("--plan is required")
    try:
        data = json.loads(Path(plan_path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{plan_path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{plan_path}:{exc.lineno}: {exc.msg}") from None
    try:
        plan = plan_from_dict(data, env.n_eval)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{plan_path}: invalid plan file ({exc})") from None
    if any(j < 0 or j >= env.n_candidates for j in plan.order + plan.warm_start):
        raise ConfigError(f"{plan_path}: candidate index out of range")
    model = _prior_model(spec, noise, args.pilot_data or (cfg.pilot_data if cfg else None))
    achieved = verify_guarantee(plan, model, env)
    ok = achieved <= plan.target_variance + GUARANTEE_SLACK
    print(f"achieved_max_variance={achieved:.9g} target={plan.target_variance:.9g} "
          f"{'ok' if ok else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_VIOLATED


def cmd_benchmark(args) -> int:
    cfg = _resolve_config(args)
    if cfg is None:
        raise ConfigError("benchmark needs --config or --demo")
    env = _load_env(cfg.env_path)
    fld = _field_from(cfg, env)
    sw = dict(cfg.sweep)
    if args.ratios:
        sw["ratios"] = args.ratios
    if args.methods:
        sw["methods"] = args.methods
    seed = args.seed if args.seed is not None else cfg.seed
    try:
        sc = SweepConfig(
            ratios=tuple(float(r) for r in sw.get("ratios", DEFAULT_RATIOS)),
            methods=tuple(sw.get("methods", METHODS)),
            budget_margin_m=float(sw.get("budget_margin_m", 20.0)),
            seed=seed, kernel_kind=cfg.kernel_kind,
            pilot_waypoints=int(sw.get("pilot_waypoints", 10)),
            pilot_samples=int(sw.get("pilot_samples", 350)),
            pilot_noise_sd=float(sw.get("pilot_noise_sd", 0.05)),
            jobs=args.jobs, record_runtime=args.record_runtime,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sweep settings: {exc}") from None
    kernel = None if args.refit or cfg.kernel_path is None else _load_kernel(cfg.kernel_path)
    result = run_sweep(env, fld, sc, kernel=kernel)
    out = write_sweep(result, env, _out_dir(args, cfg, "gpcover-out"), args.record_runtime)
    failed = sum(r.status != "ok" for r in result.reports)
    print(f"{len(result.reports)} cells ({failed} not ok) -> {out / 'results.csv'}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config or 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker cap for coverage construction")
    common.add_argument("--output-dir", default=None, help="directory for output files")
    common.add_argument("--config", default=None, help="run configuration JSON")
    common.add_argument("--demo", action="store_true", help="use the bundled demo configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gpcover", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a kernel to x,y,value data")
    p.add_argument("--data", help="training CSV with x,y,value columns")
    p.add_argument("--env", help="environment JSON")
    p.add_argument("--kind", choices=KINDS, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("plan", parents=[common], help="plan a variance-guaranteed route")
    p.add_argument("--env")
    p.add_argument("--kernel")
    p.add_argument("--pilot-data", help="x,y,value data the GP already holds")
    p.add_argument("--method", choices=METHODS, default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--target", type=float, default=None, help="absolute target variance")
    g.add_argument("--target-ratio", type=float, default=None, help="fraction of current max variance")
    p.add_argument("--budget", type=float, default=None, help="travel budget in metres")
    p.add_argument("--matrix-cache", default=None, help="coverage matrix cache file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", parents=[common], help="recompute a plan's achieved max variance")
    p.add_argument("--plan")
    p.add_argument("--env")
    p.add_argument("--kernel")
    p.add_argument("--pilot-data")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("benchmark", parents=[common], help="run a target-ratio sweep")
    p.add_argument("--ratios", type=float, nargs="+", default=None)
    p.add_argument("--methods", choices=METHODS, nargs="+", default=None)
    p.add_argument("--refit", action="store_true", help="fit the kernel from the pilot survey")
    p.add_argument("--record-runtime", action="store_true",
                   help="write planner runtimes into results.csv (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_benchmark)
    return parser


_EXIT_FOR = (
    (ConfigError, EXIT_CONFIG), (InvalidEnvironment, EXIT_CONFIG), (DigestMismatch, EXIT_CONFIG),
    (InsufficientData, EXIT_FIT), (FitDiverged, EXIT_FIT), (FactorizationFailure, EXIT_FIT),
    (InvalidTarget, EXIT_TARGET),
    (NoFeasiblePath, EXIT_GEOMETRY), (EmptyDiscretization, EXIT_GEOMETRY),
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except tuple(e for e, _ in _EXIT_FOR) as exc:
        code = next(c for e, c in _EXIT_FOR if isinstance(exc, e))
        print(f"gpcover {args.command}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"gpcover {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
