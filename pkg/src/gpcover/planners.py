"""Coverage-guaranteed planners: greedy cover, cost-benefit cover, hex baseline."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from gpcover.coverage import CoverageMatrix, covariance_threshold, pack, popcount
from gpcover.environment import Environment, as_points
from gpcover.errors import InvalidTarget
from gpcover.gp import GpModel, KernelSpec, min_lengthscale
from gpcover.routing import EMPTY_ROUTE, EXACT_MAX, DistanceOracle, Route, finalize, route_increments, solve_tsp

logger = logging.getLogger(__name__)

METHODS = ("greedy", "gcb", "gcb-budgeted", "hex")


@dataclass(frozen=True)
class RoutingConfig:
    mode: str = "euclidean"
    seed: int = 0
    exact_max: int = EXACT_MAX
    repair: bool = True


@dataclass(frozen=True)
class BudgetSpec:
    distance_budget: float | None = None

    def __post_init__(self):
        if self.distance_budget is not None and not self.distance_budget > 0:
            raise ValueError("distance budget must be positive")


@dataclass(eq=False)
class Plan:
    method: str
    selected: tuple[int, ...]
    order: tuple[int, ...]
    route: Route
    covered: np.ndarray
    uncovered_count: int
    target_variance: float
    trace: list[dict] = field(default_factory=list)
    warm_start: tuple[int, ...] = ()
    runtime_s: float = 0.0
    budget: float | None = None
    achieved_max_variance: float | None = None

    @property
    def covered_count(self) -> int:
        return int(popcount(self.covered))

    @property
    def length(self) -> float:
        return self.route.length

    def waypoints(self, env: Environment) -> np.ndarray:
        return env.candidates[list(self.order)] if self.order else np.zeros((0, 2))

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "target_variance": float(self.target_variance),
            "selected": [int(j) for j in self.selected],
            "route": self.route.to_dict(labels=self.order) if self.order else
            {"order": [], "length_m": 0.0, "geometry": []},
            "covered_count": self.covered_count,
            "covered_bits": np.asarray(self.covered, np.uint8).tobytes().hex(),
            "uncovered_count": int(self.uncovered_count),
            "achieved_max_variance": self.achieved_max_variance,
            "trace": self.trace,
        }
        if self.warm_start:
            out["warm_start"] = [int(j) for j in self.warm_start]
        if self.budget is not None:
            out["budget_m"] = float(self.budget)
        return out


def dump_plan(plan: Plan) -> str:
    return json.dumps(plan.to_dict(), indent=2) + "\n"


def _finish(method, matrix, env, selected, covered, config, trace, warm_start, t0,
            budget=None, order=None) -> Plan:
    selected = [int(j) for j in selected]
    if selected:
        if order is None:
            tour = solve_tsp(env.candidates[selected], DistanceOracle(config.mode, env),
                             seed=config.seed, exact_max=config.exact_max)
            order = [selected[k] for k in tour.order]
        order = tuple(int(j) for j in order)
        route = finalize(env.candidates[list(order)], env if config.repair else None)
    else:
        order, route = (), EMPTY_ROUTE
    uncovered = matrix.n_eval - int(popcount(covered))
    if uncovered:
        logger.warning("%s plan leaves %d of %d eval points uncovered", method, uncovered, matrix.n_eval)
    return Plan(method, tuple(selected), order, route, covered, uncovered, matrix.target_variance,
                trace, tuple(int(j) for j in warm_start), time.perf_counter() - t0, budget)


def _exact_cover(model: GpModel, env: Environment, points: np.ndarray, target: float, n_bytes: int):
    var = model.condition(points).posterior_variance_batch(env.eval_points)
    return pack(var <= target)[:n_bytes]


def _greedy(matrix: CoverageMatrix, warm_start=(), exact_mode=False, model=None, env=None):
    warm = [int(j) for j in warm_start]
    covered = matrix.union(warm)
    if exact_mode:
        if model is None or env is None:
            raise ValueError("exact mode needs a GP model and environment")
        covered = covered | _exact_cover(model, env, env.candidates[warm], matrix.target_variance,
                                         len(covered))
    selected, trace = [], []
    full = matrix.n_eval
    while int(popcount(covered)) < full:
        gains = matrix.gains(covered)
        j = int(np.argmax(gains))
        if gains[j] == 0:
            break
        selected.append(j)
        covered = covered | matrix.rows[j]
        if exact_mode:
            pts = env.candidates[warm + selected]
            covered = covered | _exact_cover(model, env, pts, matrix.target_variance, len(covered))
        trace.append({"index": j, "gain": int(gains[j]), "covered": int(popcount(covered))})
    return selected, covered, trace


def greedy_cover(matrix: CoverageMatrix, warm_start=(), exact_mode: bool = False,
                 model: GpModel | None = None, env: Environment | None = None) -> list[int]:
    """Greedy maximum coverage; returns newly selected indices in pick order.

    Ties go to the lowest candidate index. With ``exact_mode`` the covered
    set is refreshed after each pick from the GP posterior given every
    selected location, which can only enlarge it.
    """
    return _greedy(matrix, warm_start, exact_mode, model, env)[0]


def plan_greedy(matrix: CoverageMatrix, env: Environment, config: RoutingConfig = RoutingConfig(),
                warm_start=(), exact_mode: bool = False, model: GpModel | None = None) -> Plan:
    t0 = time.perf_counter()
    selected, covered, trace = _greedy(matrix, warm_start, exact_mode, model, env)
    return _finish("greedy", matrix, env, selected, covered, config, trace, warm_start, t0)


def _truncate(labels: list[int], budget: float, legs: np.ndarray) -> list[tuple[list[int], float]]:
    """Longest route prefix within budget, walked from either end."""
    best = []
    for seq, lg in ((labels, legs), (labels[::-1], legs[::-1])):
        total, keep = 0.0, [seq[0]] if seq else []
        for k in range(1, len(seq)):
            if total + lg[k - 1] > budget:
                break
            total += lg[k - 1]
            keep.append(seq[k])
        best.append((keep, total))
    return best


def plan_gcb(matrix: CoverageMatrix, env: Environment, budget: BudgetSpec | float | None = None,
             config: RoutingConfig = RoutingConfig(), warm_start=()) -> Plan:
    """Generalized cost-benefit cover under an optional travel budget.

    Candidates are ranked by new coverage per nearest-insertion length
    increment; the top one is accepted only if a full re-solve of the route
    stays within budget, and is dropped from consideration otherwise. The
    result is compared against the budget-truncated greedy cover and the
    better-covering of the two is returned.
    """
    t0 = time.perf_counter()
    if isinstance(budget, BudgetSpec):
        budget = budget.distance_budget
    elif budget is not None:
        budget = BudgetSpec(float(budget)).distance_budget
    limit = math.inf if budget is None else float(budget)
    method = "gcb" if budget is None else "gcb-budgeted"
    # with a budget, lengths must match the repaired geometry that finalize produces
    mode = "repaired" if budget is not None and config.repair else config.mode
    oracle = DistanceOracle(mode, env)
    ranker = DistanceOracle("euclidean")
    C = env.candidates
    warm = [int(j) for j in warm_start]
    base_cover = matrix.union(warm)

    def cover_of(sel):
        return base_cover | matrix.union(sel) if sel else base_cover

    def length_of(sel):
        return solve_tsp(C[sel], oracle, seed=config.seed, exact_max=config.exact_max) if sel else EMPTY_ROUTE

    # (a) greedy cover truncated to the budget
    g_sel, _, _ = _greedy(matrix, warm)
    g_route = length_of(g_sel)
    g_order = [g_sel[k] for k in g_route.order]
    g_len = g_route.length
    if g_len > limit:
        legs = np.array([oracle.cross(C[a:a + 1], C[b:b + 1])[0, 0]
                         for a, b in zip(g_order[:-1], g_order[1:])])
        options = _truncate(g_order, limit, legs)
        g_order, g_len = max(options, key=lambda o: (int(popcount(cover_of(o[0]))), -o[1]))
        resolved = length_of(g_order)
        if resolved.length < g_len:
            g_order = [g_order[k] for k in resolved.order]
            g_len = resolved.length
        g_sel = sorted(g_order)
    greedy_cover_count = int(popcount(cover_of(g_sel)))

    # (b) ratio greedy
    M = matrix.n_candidates
    in_play = np.ones(M, dtype=bool)
    in_play[warm] = False
    sel: list[int] = []
    covered = base_cover
    route = EMPTY_ROUTE
    trace = []
    while int(popcount(covered)) < matrix.n_eval:
        gains = matrix.gains(covered)
        avail = np.flatnonzero(in_play & (gains > 0))
        if len(avail) == 0:
            break
        g = gains[avail].astype(float)
        if sel:
            inc = route_increments(route.waypoints, C[avail], ranker)
        else:
            inc = np.zeros(len(avail))
        with np.errstate(divide="ignore"):
            ratio = np.where(inc > 0, g / np.where(inc > 0, inc, 1.0), np.inf)
        pick = np.lexsort((avail, -g, -ratio))[0]
        j = int(avail[pick])
        in_play[j] = False
        trial = length_of(sel + [j])
        ok = trial.length <= limit
        trace.append({"index": j, "gain": int(gains[j]), "increment": float(inc[pick]),
                      "ratio": None if math.isinf(ratio[pick]) else float(ratio[pick]),
                      "accepted": bool(ok)})
        if ok:
            sel.append(j)
            covered = covered | matrix.rows[j]
            route = trial

    # (c) keep the better-covering branch, shorter on ties
    ratio_count = int(popcount(covered))
    use_greedy = (greedy_cover_count, -g_len) > (ratio_count, -route.length)
    if use_greedy:
        chosen, order = g_sel, g_order
    else:
        chosen, order = sel, [sel[k] for k in route.order]
    plan = _finish(method, matrix, env, chosen, cover_of(chosen), config, trace, warm, t0,
                   budget=budget, order=order)
    if plan.route.length > limit + 1e-6:
        raise AssertionError(f"budget violated: {plan.route.length} > {limit}")
    return plan


def hex_lattice(center, radius: float, bbox) -> np.ndarray:
    """Hexagonal lattice whose disks of ``radius`` cover ``bbox``."""
    cx, cy = center
    xmin, ymin, xmax, ymax = bbox
    dx = math.sqrt(3.0) * radius
    dy = 1.5 * radius
    k_lo = math.floor((ymin - radius - cy) / dy)
    k_hi = math.ceil((ymax + radius - cy) / dy)
    i_lo = math.floor((xmin - dx - cx) / dx)
    i_hi = math.ceil((xmax + dx - cx) / dx)
    pts = []
    for k in range(k_lo, k_hi + 1):
        shift = 0.5 * dx if k % 2 else 0.0
        for i in range(i_lo, i_hi + 1):
            pts.append((cx + i * dx + shift, cy + k * dy))
    return np.asarray(pts)


def hex_radius(spec: KernelSpec, env: Environment, noise_variance: float, target: float) -> float:
    s2 = spec.signal_variance
    thr = covariance_threshold(s2, s2, noise_variance, target)
    if thr >= s2:
        raise InvalidTarget("target is unreachable with a single measurement; hex radius undefined")
    return min_lengthscale(spec, env) * math.sqrt(2.0 * math.log(s2 / thr))


def plan_hex(env: Environment, spec: KernelSpec, noise_variance: float, target: float,
             config: RoutingConfig = RoutingConfig(), matrix: CoverageMatrix | None = None) -> Plan:
    """Stationary hexagonal baseline sized by the smallest lengthscale.

    Lattice points nearest to some eval point are snapped to their nearest
    candidate; eval points left farther than the radius from every chosen
    candidate get their own nearest candidate added.
    """
    t0 = time.perf_counter()
    r = hex_radius(spec, env, noise_variance, target)
    xmin, ymin, xmax, ymax = env.bbox()
    lattice = hex_lattice(((xmin + xmax) / 2, (ymin + ymax) / 2), r, env.bbox())
    V = env.eval_points
    _, owner = cKDTree(lattice).query(V)
    cand_tree = cKDTree(env.candidates)
    _, snapped = cand_tree.query(lattice[np.unique(owner)])
    selected = list(dict.fromkeys(int(j) for j in snapped))

    trace = [{"radius": r, "lattice_points": int(len(np.unique(owner))), "snapped": len(selected)}]
    unreachable = np.zeros(len(V), dtype=bool)
    while True:
        dist, _ = cKDTree(env.candidates[selected]).query(V)
        gap = np.flatnonzero((dist > r * (1 + 1e-12)) & ~unreachable)
        if len(gap) == 0:
            break
        i = int(gap[0])
        d, j = cand_tree.query(V[i])
        if d > r or int(j) in selected:
            unreachable[i] = True
            continue
        selected.append(int(j))
        trace.append({"index": int(j), "repair_for": i})

    if matrix is not None:
        covered = matrix.union(selected)
    else:
        dist, _ = cKDTree(env.candidates[selected]).query(V)
        covered = pack(dist <= r * (1 + 1e-12))
        matrix = CoverageMatrix(np.zeros((len(env.candidates), len(covered)), np.uint8), len(V), target, "")
    return _finish("hex", matrix, env, selected, covered, config, trace, (), t0)


def verify_guarantee(plan: Plan, model: GpModel, env: Environment) -> float:
    """Largest posterior variance over the eval points after visiting the plan."""
    idx = list(plan.warm_start) + list(plan.order)
    pts = env.candidates[idx] if idx else np.zeros((0, 2))
    var = model.condition(pts).posterior_variance_batch(env.eval_points)
    return float(var.max())


def plan_from_dict(data: dict, n_eval: int) -> Plan:
    r = data["route"]
    geom = as_points(r["geometry"])
    order = tuple(int(j) for j in r["order"])
    route = Route(tuple(range(len(order))), float(r["length_m"]), geom, float(r["length_m"]), None)
    width = (n_eval + 7) // 8
    bits = data.get("covered_bits")
    covered = np.frombuffer(bytes.fromhex(bits), np.uint8).copy() if bits else np.zeros(width, np.uint8)
    if len(covered) != width:
        raise ValueError(f"plan coverage has {len(covered)} bytes, environment needs {width}")
    return Plan(data["method"], tuple(int(j) for j in data["selected"]), order, route, covered,
                int(data["uncovered_count"]), float(data["target_variance"]), data.get("trace", []),
                tuple(int(j) for j in data.get("warm_start", [])), 0.0, data.get("budget_m"),
                data.get("achieved_max_variance"))
