"""Open-path routing over sensing locations.

Small instances (up to ``EXACT_MAX`` points) are solved exactly with a
Held-Karp dynamic program; larger ones use nearest-neighbour construction
from every start followed by first-improvement 2-opt.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from gpcover.environment import Environment, as_points, polyline_length, repair_segment, segments_feasible

EXACT_MAX = 9
_IMPROVE_EPS = 1e-10


@dataclass(frozen=True, eq=False)
class Route:
    """Ordered visit of a point set.

    ``order`` indexes the points handed to the solver. ``length`` is measured
    under the distance oracle (or along ``geometry`` once finalized);
    ``euclidean_length`` always ignores obstacles.
    """

    order: tuple[int, ...]
    length: float
    geometry: np.ndarray
    euclidean_length: float = 0.0
    waypoints: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.order)

    def to_dict(self, labels=None) -> dict:
        order = [int(labels[i]) if labels is not None else int(i) for i in self.order]
        return {"order": order, "length_m": float(self.length), "geometry": self.geometry.tolist()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in self.geometry:
            w.writerow([repr(float(x)), repr(float(y))])
        return buf.getvalue()


EMPTY_ROUTE = Route((), 0.0, np.zeros((0, 2)), 0.0, np.zeros((0, 2)))


class DistanceOracle:
    """Symmetric point-to-point distances, optionally routed around obstacles.

    Repaired distances are cached per point pair and only computed for pairs
    whose straight segment is infeasible.
    """

    def __init__(self, mode: str = "euclidean", env: Environment | None = None):
        if mode not in ("euclidean", "repaired"):
            raise ValueError(f"unknown distance mode {mode!r}")
        if mode == "repaired" and env is None:
            raise ValueError("repaired distances need an environment")
        self.mode = mode
        self.env = env
        self._ids: dict[bytes, int] = {}
        self._pts = np.zeros((0, 2))
        self._known = np.zeros((0, 0))

    def _register(self, P: np.ndarray) -> np.ndarray:
        ids = np.empty(len(P), dtype=np.int64)
        fresh = []
        for k, p in enumerate(P):
            key = p.tobytes()
            i = self._ids.get(key)
            if i is None:
                i = len(self._ids)
                self._ids[key] = i
                fresh.append(p)
            ids[k] = i
        if fresh:
            n_old, n_new = len(self._pts), len(self._ids)
            self._pts = np.vstack([self._pts, fresh])
            grown = np.full((n_new, n_new), np.nan)
            grown[:n_old, :n_old] = self._known
            np.fill_diagonal(grown, 0.0)
            self._known = grown
        return ids

    def _fill(self, ii: np.ndarray, jj: np.ndarray) -> None:
        P = self._pts
        for start in range(0, len(ii), 512):
            a, b = ii[start:start + 512], jj[start:start + 512]
            d = np.linalg.norm(P[a] - P[b], axis=1)
            ok = segments_feasible(self.env, P[a], P[b])
            for k in np.flatnonzero(~ok):
                d[k] = polyline_length(repair_segment(self.env, P[a[k]], P[b[k]]))
            self._known[a, b] = d
            self._known[b, a] = d

    def cross(self, P, Q) -> np.ndarray:
        P = as_points(P)
        Q = as_points(Q)
        if self.mode == "euclidean" or len(P) == 0 or len(Q) == 0:
            return cdist(P, Q)
        ip, iq = self._register(P), self._register(Q)
        sub = self._known[np.ix_(ip, iq)]
        a, b = np.nonzero(np.isnan(sub))
        if len(a):
            pairs = np.unique(np.sort(np.column_stack([ip[a], iq[b]]), axis=1), axis=0)
            self._fill(pairs[:, 0], pairs[:, 1])
            sub = self._known[np.ix_(ip, iq)]
        return sub

    def pairwise(self, P) -> np.ndarray:
        return self.cross(P, P)


def path_length(D: np.ndarray, order) -> float:
    order = np.asarray(order, dtype=np.int64)
    if len(order) < 2:
        return 0.0
    return float(D[order[:-1], order[1:]].sum())


def held_karp(D: np.ndarray, start: int | None = None) -> list[int]:
    """Exact shortest open Hamiltonian path; optionally pinned to ``start``."""
    n = len(D)
    if n <= 1:
        return list(range(n))
    full = (1 << n) - 1
    dp = np.full((1 << n, n), np.inf)
    firsts = [start] if start is not None else range(n)
    for j in firsts:
        dp[1 << j, j] = 0.0
    popc = np.array([bin(m).count("1") for m in range(1 << n)])
    bits = 1 << np.arange(n)
    for size in range(1, n):
        masks = np.flatnonzero(popc == size)
        best = (dp[masks][:, :, None] + D[None, :, :]).min(axis=1)
        for k in range(n):
            free = (masks & bits[k]) == 0
            if free.any():
                tgt = masks[free] | bits[k]
                np.minimum.at(dp[:, k], tgt, best[free, k])
    end = int(np.argmin(dp[full]))
    order = [end]
    mask = full
    while popc[mask] > 1:
        j = order[-1]
        prev_mask = mask ^ (1 << j)
        cand = dp[prev_mask] + D[:, j]
        cand[(prev_mask & bits) == 0] = np.inf
        order.append(int(np.argmin(cand)))
        mask = prev_mask
    order.reverse()
    return order


def nearest_neighbor(D: np.ndarray, firsts) -> np.ndarray:
    """Greedy nearest-neighbour paths, one row per starting node."""
    firsts = np.asarray(firsts, dtype=np.int64)
    n, k = len(D), len(firsts)
    rows = np.arange(k)
    visited = np.zeros((k, n), dtype=bool)
    orders = np.empty((k, n), dtype=np.int64)
    orders[:, 0] = firsts
    visited[rows, firsts] = True
    for step in range(1, n):
        cand = np.where(visited, np.inf, D[orders[:, step - 1]])
        nxt = np.argmin(cand, axis=1)
        orders[:, step] = nxt
        visited[rows, nxt] = True
    return orders


def two_opt(D: np.ndarray, order, fixed_start: bool = False) -> list[int]:
    """First-improvement 2-opt on an open path.

    Reversing ``p[i..j]`` only swaps the edges entering and leaving the
    reversed block; path ends have no outgoing edge to pay for.
    """
    p = np.asarray(order, dtype=np.int64)
    n = len(p)
    if n < 3:
        return p.tolist()
    i_first = 1 if fixed_start else 0
    improved = True
    while improved:
        improved = False
        for i in range(i_first, n - 1):
            js = np.arange(i + 1, n)
            b = p[i]
            c = p[js]
            delta = np.zeros(len(js))
            if i > 0:
                a = p[i - 1]
                delta += D[a, c] - D[a, b]
            inner = js < n - 1
            d = p[js[inner] + 1]
            delta[inner] += D[b, d] - D[c[inner], d]
            hit = np.flatnonzero(delta < -_IMPROVE_EPS)
            if len(hit):
                j = int(js[hit[0]])
                p[i:j + 1] = p[i:j + 1][::-1].copy()
                improved = True
                break
    return p.tolist()


def solve_order(D: np.ndarray, start: int | None = None, seed: int = 0,
                exact_max: int = EXACT_MAX) -> list[int]:
    n = len(D)
    if n <= 1:
        return list(range(n))
    free = n - 1 if start is not None else n
    if free <= exact_max:
        return held_karp(D, start)
    if start is not None:
        firsts = [start]
    elif n <= 200:
        firsts = range(n)
    else:
        firsts = sorted(np.random.default_rng(seed).choice(n, 50, replace=False).tolist())
    orders = nearest_neighbor(D, list(firsts))
    lengths = D[orders[:, :-1], orders[:, 1:]].sum(axis=1)
    best = orders[int(np.argmin(lengths))]
    return two_opt(D, best, fixed_start=start is not None)


def solve_tsp(points, oracle: DistanceOracle | None = None, start=None, seed: int = 0,
              exact_max: int = EXACT_MAX) -> Route:
    """Short open path through every point.

    With ``start`` the path is pinned to begin there; the start point is
    not part of ``order`` but its leg counts toward ``length``.
    """
    P = as_points(points)
    if len(P) == 0:
        return EMPTY_ROUTE
    oracle = oracle or DistanceOracle()
    nodes = P if start is None else np.vstack([np.asarray(start, float)[None], P])
    D = oracle.pairwise(nodes)
    order = solve_order(D, start=0 if start is not None else None, seed=seed, exact_max=exact_max)
    if start is not None:
        order = [k - 1 for k in order[1:]]
        geom_order = [0] + [k + 1 for k in order]
    else:
        geom_order = order
    length = path_length(D, geom_order)
    geometry = nodes[geom_order]
    return Route(tuple(order), length, geometry, polyline_length(geometry), P[order])


def route_increments(route_pts, points, oracle: DistanceOracle | None = None) -> np.ndarray:
    """Cheapest insertion cost of each point into an open route."""
    R = as_points(route_pts)
    Q = as_points(points)
    if len(R) == 0:
        raise ValueError("route must be non-empty")
    oracle = oracle or DistanceOracle()
    d = oracle.cross(Q, R)
    inc = np.minimum(d[:, 0], d[:, -1])
    if len(R) > 1:
        edges = np.diag(oracle.cross(R[:-1], R[1:])) if oracle.mode == "repaired" else \
            np.linalg.norm(np.diff(R, axis=0), axis=1)
        inc = np.minimum(inc, (d[:, :-1] + d[:, 1:] - edges[None, :]).min(axis=1))
    return np.maximum(inc, 0.0)


def route_increment(route, p, oracle: DistanceOracle | None = None) -> float:
    pts = route.waypoints if isinstance(route, Route) else route
    return float(route_increments(pts, [p], oracle)[0])


def finalize(waypoints, env: Environment | None = None) -> Route:
    """Straight-line route through ``waypoints`` with infeasible legs repaired."""
    W = as_points(waypoints)
    if len(W) == 0:
        return EMPTY_ROUTE
    euclid = polyline_length(W)
    if env is None or len(W) == 1:
        return Route(tuple(range(len(W))), euclid, W.copy(), euclid, W.copy())
    parts = [W[:1]]
    for a, b in zip(W[:-1], W[1:]):
        parts.append(repair_segment(env, a, b)[1:])
    geometry = np.vstack(parts)
    return Route(tuple(range(len(W))), polyline_length(geometry), geometry, euclid, W.copy())


def route_json(route: Route, labels=None) -> str:
    return json.dumps(route.to_dict(labels), indent=2) + "\n"
