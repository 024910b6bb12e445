"""Benchmark protocol: ground-truth fields, pilot surveys, metrics and ratio sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.ndimage import distance_transform_edt
from scipy.spatial.distance import cdist

from gpcover.coverage import TargetSpec, build_matrix
from gpcover.environment import Environment, as_points, contains_many
from gpcover.errors import EmptyDiscretization, GpCoverError
from gpcover.gp import VARIABLE, GpModel, KernelSpec, fit, jittered_cholesky, kernel_matrix
from gpcover.planners import (
    METHODS, Plan, RoutingConfig, dump_plan, plan_gcb, plan_greedy, plan_hex, verify_guarantee,
)
from gpcover.routing import Route, finalize, solve_tsp

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "ratio", "target_variance", "max_posterior_variance", "mse", "smse",
               "runtime_s", "waypoints", "path_length_m", "uncovered_count", "status")
LONG_METRICS = CSV_COLUMNS[2:-1]
DEFAULT_RATIOS = (0.9, 0.8, 0.7, 0.6, 0.5)


# -- fields -----------------------------------------------------------------

def _bilinear(values: np.ndarray, origin, cell, pts: np.ndarray) -> np.ndarray:
    """Bilinear lookup on node values ``values[row=y, col=x]``; clamps outside."""
    ny, nx = values.shape
    fx = np.clip((pts[:, 0] - origin[0]) / cell, 0.0, nx - 1)
    fy = np.clip((pts[:, 1] - origin[1]) / cell, 0.0, ny - 1)
    i0 = np.minimum(np.floor(fx).astype(np.int64), max(nx - 2, 0))
    j0 = np.minimum(np.floor(fy).astype(np.int64), max(ny - 2, 0))
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    tx = fx - i0
    ty = fy - j0
    return ((1 - tx) * (1 - ty) * values[j0, i0] + tx * (1 - ty) * values[j0, i1]
            + (1 - tx) * ty * values[j1, i0] + tx * ty * values[j1, i1])


@dataclass(frozen=True, eq=False)
class Field:
    """Ground-truth scalar field over a bounding box.

    Grid-backed fields store node values with row 0 at the lowest ``y``.
    """

    source: str
    extent: tuple[float, float, float, float]
    sampler: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)
    values: np.ndarray | None = field(repr=False, default=None)
    origin: tuple[float, float] | None = None
    cellsize: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synthetic", "grid-file"):
            raise ValueError(f"unknown field source {self.source!r}")
        if self.values is not None and not np.all(np.isfinite(self.values)):
            raise ValueError("field grid values must be finite")
        if self.sampler is None and self.values is None:
            raise ValueError("field needs a sampler or grid values")

    def __call__(self, pts) -> np.ndarray:
        P = as_points(pts)
        if self.sampler is not None:
            return np.asarray(self.sampler(P), dtype=float)
        return _bilinear(self.values, self.origin, self.cellsize, P)

    @classmethod
    def from_grid(cls, values, origin, cellsize, source="grid-file", params=None) -> "Field":
        values = np.asarray(values, dtype=float)
        ny, nx = values.shape
        x0, y0 = float(origin[0]), float(origin[1])
        extent = (x0, y0, x0 + (nx - 1) * cellsize, y0 + (ny - 1) * cellsize)
        return cls(source, extent, None, values, (x0, y0), float(cellsize), params or {})


def _fill_nodata(values: np.ndarray, bad: np.ndarray) -> np.ndarray:
    if not bad.any():
        return values
    if bad.all():
        raise ValueError("grid holds no valid values")
    _, (ri, ci) = distance_transform_edt(bad, return_indices=True)
    return values[ri, ci]


def load_ascii_grid(path) -> Field:
    """ESRI ASCII raster; node values are cell centres, nodata filled from the nearest valid cell."""
    header = {}
    with open(path) as fh:
        lines = fh.read().split("\n")
    k = 0
    while k < len(lines):
        parts = lines[k].split()
        if len(parts) == 2 and parts[0][0].isalpha():
            header[parts[0].lower()] = parts[1]
            k += 1
        elif not parts:
            k += 1
        else:
            break
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise ValueError(f"{path}: missing header field {key!r}")
    nx, ny = int(header["ncols"]), int(header["nrows"])
    cs = float(header["cellsize"])
    if "xllcenter" in header:
        x0, y0 = float(header["xllcenter"]), float(header["yllcenter"])
    else:
        x0 = float(header.get("xllcorner", 0.0)) + cs / 2
        y0 = float(header.get("yllcorner", 0.0)) + cs / 2
    try:
        body = np.array(" ".join(lines[k:]).split(), dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric grid value ({exc})") from None
    if body.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {body.size}")
    grid = body.reshape(ny, nx)[::-1]
    bad = ~np.isfinite(grid)
    if "nodata_value" in header:
        bad |= grid == float(header["nodata_value"])
    return Field.from_grid(_fill_nodata(grid, bad), (x0, y0), cs, params={"path": str(path)})


def load_scatter_csv(path, cellsize: float) -> Field:
    """``x,y,value`` scatter triangulated onto a regular grid."""
    pts, vals = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].strip().lower() == "x":
                continue
            try:
                x, y, v = (float(c) for c in row[:3])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected numeric x,y,value") from None
            pts.append((x, y))
            vals.append(v)
    if len(pts) < 3:
        raise ValueError(f"{path}: need at least 3 scatter points")
    P, v = np.asarray(pts), np.asarray(vals)
    (x0, y0), (x1, y1) = P.min(axis=0), P.max(axis=0)
    gx = np.arange(x0, x1 + cellsize / 2, cellsize)
    gy = np.arange(y0, y1 + cellsize / 2, cellsize)
    G = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
    lin = LinearNDInterpolator(P, v)(G)
    hole = ~np.isfinite(lin)
    if hole.any():
        lin[hole] = NearestNDInterpolator(P, v)(G[hole])
    return Field.from_grid(lin.reshape(len(gy), len(gx)), (x0, y0), cellsize,
                           params={"path": str(path)})


def load_field(path, cellsize: float = 1.0) -> Field:
    if str(path).lower().endswith(".csv"):
        return load_scatter_csv(path, cellsize)
    return load_ascii_grid(path)


def _waves(rng, n, wavelength, amplitude):
    theta = rng.uniform(0, 2 * np.pi, n)
    lam = wavelength * rng.uniform(0.8, 1.25, n)
    k = (2 * np.pi / lam)[:, None] * np.column_stack([np.cos(theta), np.sin(theta)])
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = amplitude * rng.uniform(0.5, 1.0, n) / math.sqrt(n)
    return k, phase, amp


def _eval_waves(w, P):
    k, phase, amp = w
    return np.cos(P @ k.T + phase) @ amp


def synthetic_field(kind: str, env: Environment, params: dict | None = None, seed: int = 0) -> Field:
    """Seeded ground truth over ``env``'s bounding box.

    ``two-zone-lengthscale``: low-frequency waves everywhere plus
    high-frequency waves faded in over ``blend`` metres past ``split_x``.
    ``gp-draw``: an exact GP sample on a lattice at ``spacing``,
    interpolated bilinearly.
    """
    p = dict(params or {})
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = env.bbox()
    if kind == "two-zone-lengthscale":
        p.setdefault("split_x", 0.5 * (xmin + xmax))
        p.setdefault("smooth_wavelength", 0.8 * max(xmax - xmin, ymax - ymin))
        p.setdefault("rough_wavelength", 12.0)
        p.setdefault("smooth_amplitude", 1.0)
        p.setdefault("rough_amplitude", 1.0)
        p.setdefault("blend", 4.0)
        p.setdefault("n_waves", 12)
        smooth = _waves(rng, p["n_waves"], p["smooth_wavelength"], p["smooth_amplitude"])
        rough = _waves(rng, p["n_waves"], p["rough_wavelength"], p["rough_amplitude"])

        def sampler(P):
            t = np.clip((P[:, 0] - p["split_x"]) / p["blend"] + 0.5, 0.0, 1.0)
            w = t * t * (3 - 2 * t)
            return _eval_waves(smooth, P) + w * _eval_waves(rough, P)

        return Field("synthetic", (xmin, ymin, xmax, ymax), sampler, params={"kind": kind, **p})

    if kind == "gp-draw":
        spec = p.get("kernel")
        if isinstance(spec, dict):
            spec = KernelSpec.from_dict(spec)
        if spec is None:
            spec = KernelSpec("RBF", 1.0, lengthscale=10.0)
        h = float(p.get("spacing", env.eval_spacing))
        gx = np.arange(xmin, xmax + h / 2, h)
        gy = np.arange(ymin, ymax + h / 2, h)
        G = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
        L, _ = jittered_cholesky(kernel_matrix(spec, G, G), spec.signal_variance)
        draw = L @ rng.standard_normal(len(G))
        meta = {"kind": kind, "spacing": h, "kernel": spec.to_dict()}
        return Field.from_grid(draw.reshape(len(gy), len(gx)), (xmin, ymin), h, "synthetic", meta)

    raise ValueError(f"unknown synthetic field kind {kind!r}")


# -- pilot survey -----------------------------------------------------------

def sample_feasible(env: Environment, n: int, rng: np.random.Generator, max_rounds: int = 200) -> np.ndarray:
    xmin, ymin, xmax, ymax = env.bbox()
    lo, hi = np.array([xmin, ymin]), np.array([xmax, ymax])
    out = []
    got = 0
    for _ in range(max_rounds):
        batch = rng.uniform(lo, hi, size=(max(2 * (n - got), 64), 2))
        batch = batch[contains_many(env, batch)]
        out.append(batch)
        got += len(batch)
        if got >= n:
            return np.vstack(out)[:n]
    raise EmptyDiscretization("could not draw feasible samples from the region")


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, iters: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm from a k-means++ initialisation."""
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        j = int(rng.choice(len(X), p=d2 / total)) if total > 0 else int(rng.integers(len(X)))
        centers.append(X[j])
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(axis=1))
    C = np.asarray(centers, dtype=float)
    for _ in range(iters):
        label = np.argmin(cdist(X, C, "sqeuclidean"), axis=1)
        new = C.copy()
        for j in range(k):
            members = X[label == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.abs(new - C).max())
        C = new
        if shift < tol:
            break
    return C


def pilot_path(env: Environment, n_waypoints: int = 10, seed: int = 0) -> Route:
    """Survey route through k-means centroids of uniform feasible samples."""
    if n_waypoints < 1:
        raise ValueError("pilot path needs at least one waypoint")
    rng = np.random.default_rng(seed)
    X = sample_feasible(env, 50 * n_waypoints, rng)
    C = kmeans(X, n_waypoints, rng)
    inside = contains_many(env, C)
    if not inside.all():
        nearest = np.argmin(cdist(C[~inside], X), axis=1)
        C[~inside] = X[nearest]
    tour = solve_tsp(C, seed=seed)
    return finalize(tour.waypoints, env)


def sample_along(route: Route, fld: Field, n_samples: int = 350, noise_sd: float = 0.0,
                 seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Measurements equally spaced in arc length along the route geometry."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    G = as_points(route.geometry)
    if len(G) == 0:
        raise ValueError("cannot sample along an empty route")
    seg = np.linalg.norm(np.diff(G, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        X = np.repeat(G[:1], n_samples, axis=0)
    else:
        s = np.linspace(0.0, total, n_samples)
        X = np.column_stack([np.interp(s, cum, G[:, 0]), np.interp(s, cum, G[:, 1])])
    y = fld(X)
    if noise_sd > 0:
        y = y + np.random.default_rng(seed).normal(0.0, noise_sd, n_samples)
    return X, y


# -- metrics ----------------------------------------------------------------

@dataclass
class MetricsReport:
    method: str
    ratio: float
    target_variance: float = math.nan
    max_posterior_variance: float = math.nan
    mse: float = math.nan
    smse: float = math.nan
    runtime_s: float = math.nan
    waypoints: int = 0
    path_length_m: float = math.nan
    uncovered_count: int = 0
    status: str = "ok"
    budget_m: float | None = None

    def row(self, record_runtime: bool = False) -> dict:
        out = {}
        for key in CSV_COLUMNS:
            val = getattr(self, key)
            if key == "runtime_s" and not record_runtime:
                val = ""
            elif isinstance(val, float):
                val = "" if math.isnan(val) else repr(val)
            out[key] = val
        return out


def compute_metrics(model: GpModel, plan: Plan, fld: Field, env: Environment,
                    pilot_data=None, noise_sd: float | None = None, seed: int = 0,
                    ratio: float = math.nan) -> MetricsReport:
    """Score a plan against ground truth after measuring at its waypoints.

    ``model`` supplies hyperparameters and prior mean; its training data is
    replaced by ``pilot_data`` (if given) plus noisy field samples at the
    plan's locations.
    """
    V = env.eval_points
    idx = list(plan.warm_start) + list(plan.order)
    W = env.candidates[idx] if idx else np.zeros((0, 2))
    sd = math.sqrt(model.noise_variance) if noise_sd is None else noise_sd
    yw = fld(W) if len(W) else np.zeros(0)
    if len(W) and sd > 0:
        yw = yw + np.random.default_rng(seed).normal(0.0, sd, len(W))
    if pilot_data is not None:
        px, py = pilot_data
        X = np.vstack([as_points(px), W])
        y = np.concatenate([np.asarray(py, float), yw])
    else:
        X, y = W, yw
    mu, var = model.with_data(X, y).predict(V)
    truth = fld(V)
    mse = float(np.mean((mu - truth) ** 2))
    spread = float(np.var(truth))
    return MetricsReport(
        method=plan.method, ratio=float(ratio), target_variance=float(plan.target_variance),
        max_posterior_variance=float(var.max()), mse=mse,
        smse=mse / spread if spread > 0 else math.nan, runtime_s=float(plan.runtime_s),
        waypoints=len(plan.order), path_length_m=float(plan.route.length),
        uncovered_count=int(plan.uncovered_count), budget_m=plan.budget,
    )


# -- sweep ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    methods: tuple[str, ...] = METHODS
    budget_margin_m: float = 20.0
    seed: int = 0
    kernel_kind: str = VARIABLE
    pilot_waypoints: int = 10
    pilot_samples: int = 350
    pilot_noise_sd: float = 0.05
    jobs: int = 1
    record_runtime: bool = False

    def __post_init__(self):
        if not self.ratios or not all(0 < r < 1 for r in self.ratios):
            raise ValueError("ratios must lie in (0, 1)")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods: {bad}")
        if self.budget_margin_m < 0:
            raise ValueError("budget margin must be >= 0")


def cell_seed(seed: int, method: str, ratio: float) -> int:
    """Per-cell seed independent of schedule."""
    ss = np.random.SeedSequence([seed, METHODS.index(method), int(round(ratio * 1000))])
    return int(ss.generate_state(1)[0])


@dataclass
class SweepResult:
    reports: list[MetricsReport]
    plans: dict = field(default_factory=dict)
    model: GpModel | None = None
    pilot: Route | None = None
    pilot_data: tuple | None = None
    variances: dict = field(default_factory=dict)


def pilot_survey(env: Environment, fld: Field, config: SweepConfig,
                 kernel: tuple[KernelSpec, float] | None = None):
    """Pilot route, its noisy samples, and a GP holding them (fitted unless ``kernel`` is given)."""
    pilot = pilot_path(env, config.pilot_waypoints, config.seed)
    X, y = sample_along(pilot, fld, config.pilot_samples, config.pilot_noise_sd, config.seed)
    if kernel is None:
        model = fit(X, y, config.kernel_kind, env, seed=config.seed)
    else:
        spec, noise = kernel
        model = GpModel(spec, noise, X, y, mean=float(np.mean(y)))
    return pilot, (X, y), model


def run_sweep(env: Environment, fld: Field, config: SweepConfig = SweepConfig(),
              kernel: tuple[KernelSpec, float] | None = None) -> SweepResult:
    """Pilot survey, kernel fit, then every method at every target ratio.

    A failing cell is recorded with its error in ``status`` and the sweep
    moves on. Budgeted GCB always gets the unbudgeted GCB length minus the
    margin, floored at 1 m.
    """
    pilot, data, model = pilot_survey(env, fld, config, kernel)
    spec, noise = model.kernel, model.noise_variance
    result = SweepResult([], model=model, pilot=pilot, pilot_data=data)

    for ratio in config.ratios:
        try:
            matrix = build_matrix(env, spec, noise, TargetSpec("ratio", ratio), prior_model=model,
                                  jobs=config.jobs)
        except GpCoverError as exc:
            for m in config.methods:
                result.reports.append(MetricsReport(m, ratio, status=f"error: {exc}"))
            continue
        gcb_plan = None
        for method in _run_order(config.methods):
            seed = cell_seed(config.seed, method, ratio)
            routing = RoutingConfig(seed=seed)
            try:
                t0 = time.perf_counter()
                if method == "greedy":
                    plan = plan_greedy(matrix, env, routing)
                elif method == "gcb":
                    plan = gcb_plan or plan_gcb(matrix, env, None, routing)
                    gcb_plan = plan
                elif method == "gcb-budgeted":
                    if gcb_plan is None:
                        gcb_plan = plan_gcb(matrix, env, None, RoutingConfig(seed=cell_seed(config.seed, "gcb", ratio)))
                    budget = max(gcb_plan.route.length - config.budget_margin_m, 1.0)
                    plan = plan_gcb(matrix, env, budget, routing)
                else:
                    plan = plan_hex(env, spec, noise, matrix.target_variance, routing, matrix=matrix)
                plan.runtime_s = time.perf_counter() - t0
                plan.achieved_max_variance = verify_guarantee(plan, model, env)
                report = compute_metrics(model, plan, fld, env, data, seed=seed, ratio=ratio)
                if plan.uncovered_count == 0 and method != "gcb-budgeted" \
                        and plan.achieved_max_variance > plan.target_variance + 1e-9:
                    report.status = "violated"
            except (GpCoverError, ValueError, AssertionError) as exc:
                logger.error("cell %s @ %.2f failed: %s", method, ratio, exc)
                result.reports.append(MetricsReport(method, ratio, matrix.target_variance,
                                                    status=f"error: {exc}"))
                continue
            result.reports.append(report)
            result.plans[(method, ratio)] = plan
    return result


def _run_order(methods) -> list[str]:
    """Requested methods with unbudgeted GCB ahead of its budgeted variant."""
    rank = {m: k for k, m in enumerate(METHODS)}
    return sorted(methods, key=lambda m: rank[m])


# -- exports ----------------------------------------------------------------

def results_csv(reports, record_runtime: bool = False) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row(record_runtime))
    return buf.getvalue()


def results_long_csv(reports, record_runtime: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "ratio", "metric", "value"])
    for r in reports:
        row = r.row(record_runtime)
        for key in LONG_METRICS:
            if row[key] != "":
                w.writerow([r.method, repr(float(r.ratio)), key, row[key]])
    return buf.getvalue()


def variance_raster(model: GpModel, env: Environment, extra_points=None) -> tuple[np.ndarray, dict]:
    """Posterior variance on the eval lattice as a bbox-aligned raster; NaN outside."""
    if extra_points is not None and len(extra_points):
        model = model.condition(extra_points)
    h = env.eval_spacing
    ox, oy = env.origin
    xmin, ymin, xmax, ymax = env.bbox()
    nx = int(math.floor((xmax - ox) / h + 1e-9)) + 1
    ny = int(math.floor((ymax - oy) / h + 1e-9)) + 1
    img = np.full((ny, nx), np.nan)
    ij = np.rint((env.eval_points - np.array([ox, oy])) / h).astype(np.int64)
    img[ij[:, 1], ij[:, 0]] = model.posterior_variance_batch(env.eval_points)
    return img, {"origin": [float(ox), float(oy)], "spacing": float(h)}


def pgm_text(img: np.ndarray, meta: dict | None = None, maxval: int = 255) -> tuple[str, dict]:
    """Plain PGM, top row = largest ``y``; data scaled to 1..maxval, 0 = no data."""
    ok = np.isfinite(img)
    lo = float(img[ok].min()) if ok.any() else 0.0
    hi = float(img[ok].max()) if ok.any() else 0.0
    span = hi - lo
    scaled = np.zeros(img.shape, dtype=np.int64)
    if ok.any():
        frac = (img[ok] - lo) / span if span > 0 else np.zeros(int(ok.sum()))
        scaled[ok] = 1 + np.rint(frac * (maxval - 1)).astype(np.int64)
    scaled = scaled[::-1]
    ny, nx = scaled.shape
    lines = ["P2", f"{nx} {ny}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    side = {"min": lo, "max": hi, "maxval": maxval, "nodata": 0, "data_range": [1, maxval],
            "row_order": "top row is largest y", **(meta or {})}
    return "\n".join(lines) + "\n", side


def write_sweep(result: SweepResult, env: Environment, out_dir, record_runtime: bool = False) -> Path:
    out = Path(out_dir)
    (out / "plans").mkdir(parents=True, exist_ok=True)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(result.reports, record_runtime))
    (out / "results_long.csv").write_text(results_long_csv(result.reports, record_runtime))
    timings = {}
    for (method, ratio), plan in sorted(result.plans.items()):
        tag = f"{method}_r{ratio:.2f}"
        timings[tag] = plan.runtime_s
        (out / "plans" / f"{tag}.json").write_text(dump_plan(plan))
        pts = env.candidates[list(plan.warm_start) + list(plan.order)] if plan.order else None
        img, meta = variance_raster(result.model, env, pts)
        text, side = pgm_text(img, meta)
        (out / "heatmaps" / f"{tag}.pgm").write_text(text)
        (out / "heatmaps" / f"{tag}.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return out


def sweep_summary(reports) -> dict:
    return {f"{r.method}@{r.ratio:.2f}": asdict(r) for r in reports}

