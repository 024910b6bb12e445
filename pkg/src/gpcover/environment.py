"""Planar monitoring regions: polygons with holes, lattices, and path repair.

Points are plain ``(x, y)`` pairs in meters; batches are ``(k, 2)`` float
arrays. The feasible region is closed: points within ``TOL`` of the outer
boundary or of an obstacle edge count as feasible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from gpcover.errors import EmptyDiscretization, InvalidEnvironment, NoFeasiblePath

TOL = 1e-9

_NEIGHBOR_STEPS = ((1, 0), (0, 1), (1, 1), (1, -1))


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 2))
    return arr.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple polygon, vertices stored counter-clockwise without repetition."""

    vertices: np.ndarray

    def __post_init__(self):
        verts = as_points(self.vertices)
        if len(verts) > 1 and np.allclose(verts[0], verts[-1]):
            verts = verts[:-1]
        if len(verts) < 3:
            raise InvalidEnvironment("polygon needs at least 3 vertices")
        if not np.all(np.isfinite(verts)):
            raise InvalidEnvironment("polygon vertices must be finite")
        area = _signed_area(verts)
        if abs(area) <= TOL:
            raise InvalidEnvironment("polygon has zero area")
        if not shapely.LinearRing(verts).is_simple:
            raise InvalidEnvironment("polygon is self-intersecting")
        if area < 0:
            verts = verts[::-1]
        verts = np.ascontiguousarray(verts)
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    def bbox(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def to_list(self) -> list[list[float]]:
        return self.vertices.tolist()


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _on_edges(pts: np.ndarray, poly: Polygon) -> np.ndarray:
    p, q = poly.edges
    e = q - p
    d = pts[:, None, :] - p[None, :, :]
    t = np.clip(np.einsum("kej,ej->ke", d, e) / np.einsum("ej,ej->e", e, e), 0.0, 1.0)
    proj = p[None] + t[..., None] * e[None]
    dist = np.linalg.norm(pts[:, None, :] - proj, axis=2)
    return (dist <= TOL).any(axis=1)


def _crossing_parity(pts: np.ndarray, poly: Polygon) -> np.ndarray:
    p, q = poly.edges
    x = pts[:, 0:1]
    y = pts[:, 1:2]
    py, qy = p[None, :, 1], q[None, :, 1]
    straddle = (py > y) != (qy > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = p[None, :, 0] + (y - py) * (q[None, :, 0] - p[None, :, 0]) / (qy - py)
    hits = straddle & (x < x_cross)
    return (hits.sum(axis=1) % 2) == 1


def in_polygon(pts, poly: Polygon, *, closed: bool = True) -> np.ndarray:
    """Even-odd membership; ``closed`` decides how edge points count."""
    pts = as_points(pts)
    out = np.empty(len(pts), dtype=bool)
    for start in range(0, len(pts), 4096):
        chunk = pts[start:start + 4096]
        inside = _crossing_parity(chunk, poly)
        # the edge test can only flip points whose parity disagrees with the closure rule
        flip = np.flatnonzero(~inside if closed else inside)
        if len(flip):
            on = _on_edges(chunk[flip], poly)
            inside[flip] = on if closed else ~on
        out[start:start + 4096] = inside
    return out


@dataclass(frozen=True, eq=False)
class Environment:
    boundary: Polygon
    obstacles: tuple[Polygon, ...]
    eval_points: np.ndarray
    candidates: np.ndarray
    eval_spacing: float
    candidate_spacing: float
    # lattice origin shared by both grids, needed to recover eval lattice indices
    origin: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def n_eval(self) -> int:
        return len(self.eval_points)

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def bbox(self) -> tuple[float, float, float, float]:
        return self.boundary.bbox()

    @property
    def area(self) -> float:
        return self.boundary.area - sum(o.area for o in self.obstacles)

    def contains(self, p) -> bool:
        return bool(contains_many(self, [p])[0])

    def to_dict(self) -> dict:
        return {
            "boundary": self.boundary.to_list(),
            "obstacles": [o.to_list() for o in self.obstacles],
            "eval_spacing": self.eval_spacing,
            "candidate_spacing": self.candidate_spacing,
        }

    @cached_property
    def _edges(self) -> tuple[np.ndarray, np.ndarray]:
        ps, qs = [], []
        for poly in (self.boundary, *self.obstacles):
            p, q = poly.edges
            ps.append(p)
            qs.append(q)
        return np.vstack(ps), np.vstack(qs)

    @cached_property
    def _sample_step(self) -> float:
        return 0.1 * min(self.eval_spacing, self.candidate_spacing)

    @cached_property
    def _grid(self) -> "_RepairGrid":
        return _RepairGrid(self)


def contains_many(env: Environment, pts) -> np.ndarray:
    pts = as_points(pts)
    ok = in_polygon(pts, env.boundary, closed=True)
    for obs in env.obstacles:
        ok &= ~in_polygon(pts, obs, closed=False)
    return ok


def contains(env: Environment, p) -> bool:
    """True when ``p`` is in the closed feasible region of ``env``."""
    return env.contains(p)


def _lattice(bbox, origin, spacing) -> np.ndarray:
    x0, y0 = origin
    xmin, ymin, xmax, ymax = bbox
    i_lo = math.ceil((xmin - x0) / spacing - 1e-9)
    i_hi = math.floor((xmax - x0) / spacing + 1e-9)
    j_lo = math.ceil((ymin - y0) / spacing - 1e-9)
    j_hi = math.floor((ymax - y0) / spacing + 1e-9)
    xs = x0 + spacing * np.arange(i_lo, i_hi + 1)
    ys = y0 + spacing * np.arange(j_lo, j_hi + 1)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def discretize(
    boundary,
    obstacles=(),
    eval_spacing: float = 1.0,
    candidate_spacing: float = 1.0,
) -> Environment:
    """Build an environment with axis-aligned eval and candidate lattices.

    Both lattices are anchored at the lower-left corner of the boundary's
    bounding box, rows ordered by ``y`` then ``x``.
    """
    if not (eval_spacing > 0 and candidate_spacing > 0):
        raise InvalidEnvironment("spacings must be positive")
    if not isinstance(boundary, Polygon):
        boundary = Polygon(boundary)
    obstacles = tuple(o if isinstance(o, Polygon) else Polygon(o) for o in obstacles)
    bbox = boundary.bbox()
    origin = (bbox[0], bbox[1])
    shell = Environment(boundary, obstacles, np.zeros((0, 2)), np.zeros((0, 2)),
                        float(eval_spacing), float(candidate_spacing), origin)

    grids = []
    for spacing in (eval_spacing, candidate_spacing):
        lat = _lattice(bbox, origin, spacing)
        lat = lat[contains_many(shell, lat)] if len(lat) else lat
        if len(lat) == 0:
            raise EmptyDiscretization(f"no lattice point at spacing {spacing} falls in the region")
        lat = np.ascontiguousarray(lat)
        lat.setflags(write=False)
        grids.append(lat)

    return Environment(boundary, obstacles, grids[0], grids[1],
                       float(eval_spacing), float(candidate_spacing), origin)


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def segments_feasible(env: Environment, a, b) -> np.ndarray:
    """Vectorized feasibility of open segments ``a[k] -> b[k]``."""
    a = as_points(a)
    b = as_points(b)
    if len(a) == 0:
        return np.zeros(0, dtype=bool)
    p, q = env._edges
    A, B = a[:, None, :], b[:, None, :]
    P, Q = p[None], q[None]
    seg_len = np.linalg.norm(b - a, axis=1)
    edge_len = np.linalg.norm(q - p, axis=1)
    eps1 = TOL * (seg_len[:, None] + 1.0)
    eps2 = TOL * (edge_len[None, :] + 1.0)
    d1 = _orient(A, B, P)
    d2 = _orient(A, B, Q)
    d3 = _orient(P, Q, A)
    d4 = _orient(P, Q, B)
    proper = (
        (((d1 > eps1) & (d2 < -eps1)) | ((d1 < -eps1) & (d2 > eps1)))
        & (((d3 > eps2) & (d4 < -eps2)) | ((d3 < -eps2) & (d4 > eps2)))
    )
    ok = ~proper.any(axis=1)
    live = np.flatnonzero(ok)
    if len(live) == 0:
        return ok

    n = max(2, int(math.ceil(seg_len[live].max() / env._sample_step)) + 1)
    t = np.linspace(0.0, 1.0, n + 1)[1:-1]
    t = np.union1d(t, [0.5])
    al, bl = a[live], b[live]
    samples = al[:, None, :] + t[None, :, None] * (bl - al)[:, None, :]
    inside = contains_many(env, samples.reshape(-1, 2)).reshape(len(live), len(t))
    ok[live] = inside.all(axis=1)
    return ok


def segment_feasible(env: Environment, a, b) -> bool:
    """True when the open segment between ``a`` and ``b`` stays in free space."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.linalg.norm(a - b) <= TOL:
        return True
    return bool(segments_feasible(env, a, b)[0])


class _RepairGrid:
    """8-connected graph over the eval lattice with feasible edges only."""

    def __init__(self, env: Environment):
        self.env = env
        self.nodes = env.eval_points
        h = env.eval_spacing
        idx = np.rint((self.nodes - np.asarray(env.origin)) / h).astype(np.int64)
        lookup = {(int(i), int(j)): k for k, (i, j) in enumerate(idx)}
        src, dst = [], []
        for k, (i, j) in enumerate(idx):
            for di, dj in _NEIGHBOR_STEPS:
                m = lookup.get((int(i) + di, int(j) + dj))
                if m is not None:
                    src.append(k)
                    dst.append(m)
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        ok = np.zeros(len(src), dtype=bool)
        for start in range(0, len(src), 2048):
            sl = slice(start, start + 2048)
            ok[sl] = segments_feasible(env, self.nodes[src[sl]], self.nodes[dst[sl]])
        self.src = src[ok]
        self.dst = dst[ok]
        self.w = np.linalg.norm(self.nodes[self.src] - self.nodes[self.dst], axis=1)
        self._trees: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
        self._attached: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
        self.repaired: dict[tuple[bytes, bytes], np.ndarray] = {}

    def attach(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        key = p.tobytes()
        hit = self._attached.get(key)
        if hit is None:
            hit = self._attach(p)
            if len(self._attached) >= 4096:
                self._attached.pop(next(iter(self._attached)))
            self._attached[key] = hit
        return hit

    def _attach(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = np.linalg.norm(self.nodes - p, axis=1)
        radius = 2.0 * self.env.eval_spacing
        while True:
            near = np.flatnonzero(d <= radius)
            if len(near):
                ok = segments_feasible(self.env, np.repeat(p[None], len(near), axis=0), self.nodes[near])
                if ok.any():
                    return near[ok], d[near[ok]]
            if len(near) == len(self.nodes):
                return np.zeros(0, dtype=np.int64), np.zeros(0)
            radius *= 2.0

    def tree(self, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Shortest-path distances and predecessors from ``a`` over the lattice."""
        key = a.tobytes()
        hit = self._trees.get(key)
        if hit is not None:
            return hit
        n = len(self.nodes)
        na, wa = self.attach(a)
        if len(na) == 0:
            raise NoFeasiblePath("endpoint cannot reach the lattice")
        rows = np.concatenate([self.src, np.full(len(na), n)])
        cols = np.concatenate([self.dst, na])
        w = np.concatenate([self.w, wa])
        graph = coo_matrix((w, (rows, cols)), shape=(n + 1, n + 1)).tocsr()
        dist, pred = dijkstra(graph, directed=False, indices=n, return_predecessors=True)
        if len(self._trees) >= 1024:
            self._trees.pop(next(iter(self._trees)))
        self._trees[key] = (dist, pred)
        return dist, pred

    def shortest(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        n = len(self.nodes)
        dist, pred = self.tree(a)
        nb, wb = self.attach(b)
        if len(nb) == 0:
            raise NoFeasiblePath("endpoint cannot reach the lattice")
        total = dist[nb] + wb
        k = int(np.argmin(total))
        if not np.isfinite(total[k]):
            raise NoFeasiblePath("endpoints lie in disconnected free-space components")
        chain = [int(nb[k])]
        while chain[-1] != n:
            chain.append(int(pred[chain[-1]]))
        chain.reverse()
        pts = [a] + [self.nodes[k] for k in chain[1:]] + [b]
        return np.asarray(pts)


def _shortcut(env: Environment, path: np.ndarray) -> np.ndarray:
    out = [path[0]]
    i = 0
    last = len(path) - 1
    while i < last:
        js = np.arange(last, i, -1)
        ok = segments_feasible(env, np.repeat(path[i][None], len(js), axis=0), path[js])
        nxt = int(js[np.argmax(ok)]) if ok.any() else i + 1
        out.append(path[nxt])
        i = nxt
    return np.asarray(out)


def repair_segment(env: Environment, a, b) -> np.ndarray:
    """Collision-free polyline from ``a`` to ``b``.

    Straight segments that are already feasible come back unchanged.
    Otherwise a shortest path on the eval lattice is found and then
    greedily shortcut.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if segment_feasible(env, a, b):
        return np.vstack([a, b])
    grid = env._grid
    ka, kb = a.tobytes(), b.tobytes()
    hit = grid.repaired.get((ka, kb))
    if hit is None:
        rev = grid.repaired.get((kb, ka))
        if rev is not None:
            return rev[::-1].copy()
        hit = _shortcut(env, grid.shortest(a, b))
        grid.repaired[(ka, kb)] = hit
    return hit.copy()


def polyline_length(pts) -> float:
    pts = as_points(pts)
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def _parse_ring(obj, where: str) -> Polygon:
    if not isinstance(obj, (list, tuple)) or not all(isinstance(v, (list, tuple)) and len(v) == 2 for v in obj):
        raise InvalidEnvironment(f"{where}: expected a list of [x, y] pairs")
    try:
        return Polygon(np.asarray(obj, dtype=float))
    except (TypeError, ValueError) as exc:
        raise InvalidEnvironment(f"{where}: non-numeric coordinate ({exc})") from None
    except InvalidEnvironment as exc:
        raise InvalidEnvironment(f"{where}: {exc}") from None


def environment_from_dict(data: dict, source: str = "<env>") -> Environment:
    if not isinstance(data, dict):
        raise InvalidEnvironment(f"{source}: top level must be an object")
    for key in ("boundary", "eval_spacing", "candidate_spacing"):
        if key not in data:
            raise InvalidEnvironment(f"{source}: missing field '{key}'")
    boundary = _parse_ring(data["boundary"], f"{source}: field 'boundary'")
    obstacles = data.get("obstacles", [])
    if not isinstance(obstacles, list):
        raise InvalidEnvironment(f"{source}: field 'obstacles' must be a list")
    obs = [_parse_ring(o, f"{source}: field 'obstacles[{i}]'") for i, o in enumerate(obstacles)]
    spacings = []
    for key in ("eval_spacing", "candidate_spacing"):
        val = data[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not val > 0 or not math.isfinite(val):
            raise InvalidEnvironment(f"{source}: field '{key}' must be a positive number")
        spacings.append(float(val))
    try:
        return discretize(boundary, obs, *spacings)
    except EmptyDiscretization as exc:
        raise EmptyDiscretization(f"{source}: {exc}") from None


def load_environment(path) -> Environment:
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidEnvironment(f"{path}:{exc.lineno}: {exc.msg}") from None
    return environment_from_dict(data, str(path))


def save_environment(env: Environment, path) -> None:
    with open(path, "w") as fh:
        json.dump(env.to_dict(), fh, indent=2)
        fh.write("\n")
