"""Exact GP regression with stationary and spatially varying lengthscales.

Two kernel families are supported:

* ``RBF``: ``s2 * exp(-|a-b|^2 / (2 l^2))``
* ``VariableLengthscale``: the Gibbs kernel
  ``s2 * sqrt(2 l(a) l(b) / (l(a)^2 + l(b)^2)) * exp(-|a-b|^2 / (l(a)^2 + l(b)^2))``
  where ``l(x)`` is bilinearly interpolated from a coarse lattice of node
  values. It is positive semi-definite for any positive lengthscale field.

Both have ``k(x, x) = s2``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from gpcover.environment import Environment, as_points
from gpcover.errors import FactorizationFailure, FitDiverged, InsufficientData

logger = logging.getLogger(__name__)

RBF = "RBF"
VARIABLE = "VariableLengthscale"
KINDS = (RBF, VARIABLE)

JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True, eq=False)
class LengthscaleGrid:
    """Node lengthscales on an ``nx`` by ``ny`` lattice spanning ``bbox``.

    ``values[j, i]`` sits at ``x = xmin + i * dx``, ``y = ymin + j * dy``.
    Queries outside the box are clamped to it.
    """

    nx: int
    ny: int
    bbox: tuple[float, float, float, float]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(self.ny, self.nx)
        if self.nx < 2 or self.ny < 2:
            raise ValueError("lengthscale grid needs at least 2 nodes per axis")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ValueError("lengthscales must be positive")
        xmin, ymin, xmax, ymax = (float(v) for v in self.bbox)
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("degenerate lengthscale bbox")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "bbox", (xmin, ymin, xmax, ymax))

    def node_points(self) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.bbox
        gx, gy = np.meshgrid(np.linspace(xmin, xmax, self.nx), np.linspace(ymin, ymax, self.ny))
        return np.column_stack([gx.ravel(), gy.ravel()])

    def weights(self, pts) -> np.ndarray:
        """Bilinear interpolation matrix, shape ``(len(pts), nx * ny)``."""
        pts = as_points(pts)
        xmin, ymin, xmax, ymax = self.bbox
        fx = np.clip((pts[:, 0] - xmin) / (xmax - xmin), 0.0, 1.0) * (self.nx - 1)
        fy = np.clip((pts[:, 1] - ymin) / (ymax - ymin), 0.0, 1.0) * (self.ny - 1)
        i0 = np.minimum(np.floor(fx).astype(int), self.nx - 2)
        j0 = np.minimum(np.floor(fy).astype(int), self.ny - 2)
        tx = fx - i0
        ty = fy - j0
        W = np.zeros((len(pts), self.nx * self.ny))
        rows = np.arange(len(pts))
        for dj, di, w in ((0, 0, (1 - tx) * (1 - ty)), (0, 1, tx * (1 - ty)),
                          (1, 0, (1 - tx) * ty), (1, 1, tx * ty)):
            np.add.at(W, (rows, (j0 + dj) * self.nx + i0 + di), w)
        return W

    def __call__(self, pts) -> np.ndarray:
        return self.weights(pts) @ self.values.ravel()


@dataclass(frozen=True, eq=False)
class KernelSpec:
    kind: str
    signal_variance: float
    lengthscale: float | None = None
    lengthscale_grid: LengthscaleGrid | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (self.signal_variance > 0 and math.isfinite(self.signal_variance)):
            raise ValueError("signal_variance must be positive")
        if self.kind == RBF:
            if self.lengthscale is None or not self.lengthscale > 0:
                raise ValueError("RBF kernel needs a positive lengthscale")
        elif self.lengthscale_grid is None:
            raise ValueError("VariableLengthscale kernel needs a lengthscale_grid")

    def lengthscales(self, pts) -> np.ndarray:
        pts = as_points(pts)
        if self.kind == RBF:
            return np.full(len(pts), float(self.lengthscale))
        return self.lengthscale_grid(pts)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "signal_variance": float(self.signal_variance)}
        if self.kind == RBF:
            out["lengthscale"] = float(self.lengthscale)
        else:
            g = self.lengthscale_grid
            out["lengthscale_grid"] = {
                "nx": g.nx, "ny": g.ny, "bbox": list(g.bbox), "values": g.values.tolist(),
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        kind = data["kind"]
        if kind == RBF:
            return cls(RBF, float(data["signal_variance"]), lengthscale=float(data["lengthscale"]))
        g = data["lengthscale_grid"]
        grid = LengthscaleGrid(int(g["nx"]), int(g["ny"]), tuple(g["bbox"]), np.asarray(g["values"], float))
        return cls(kind, float(data["signal_variance"]), lengthscale_grid=grid)


def _gibbs(s2, la, lb, sq):
    # prefactor exponent is d/2 = 1 in the plane; the square root is only PSD in 1-D
    s = la[:, None] ** 2 + lb[None, :] ** 2
    return s2 * (2.0 * la[:, None] * lb[None, :] / s) * np.exp(-sq / s)


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    A = as_points(A)
    B = as_points(B)
    sq = cdist(A, B, "sqeuclidean")
    if spec.kind == RBF:
        return spec.signal_variance * np.exp(-sq / (2.0 * spec.lengthscale ** 2))
    return _gibbs(spec.signal_variance, spec.lengthscales(A), spec.lengthscales(B), sq)


def kernel_diag(spec: KernelSpec, A) -> np.ndarray:
    return np.full(len(as_points(A)), float(spec.signal_variance))


def kernel_eval(spec: KernelSpec, a, b) -> float:
    return float(kernel_matrix(spec, [a], [b])[0, 0])


def jittered_cholesky(K: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K``, adding diagonal jitter on failure.

    The ladder starts at ``1e-10 * scale`` and grows tenfold up to
    ``1e-4 * scale``.
    """
    jitter = 0.0
    eye = np.eye(len(K))
    while True:
        try:
            L = cholesky(K + jitter * eye, lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                if jitter > 0:
                    logger.debug("cholesky needed jitter %.3g", jitter)
                return L, jitter
        except LinAlgError:
            pass
        jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX * scale * (1 + 1e-9):
            raise FactorizationFailure(f"Cholesky failed with jitter up to {JITTER_MAX * scale:.3g}")


class Prediction(NamedTuple):
    mean: float
    variance: float


@dataclass(frozen=True, eq=False)
class GpModel:
    """GP posterior given training data. Immutable; ``condition`` returns a copy.

    ``mean`` is the constant prior mean (the training-target average at fit
    time); it shifts predictions and never touches variances.
    """

    kernel: KernelSpec
    noise_variance: float
    train_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    train_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean: float = 0.0
    chol: np.ndarray = field(default=None, repr=False)
    jitter: float = 0.0
    alpha: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.noise_variance >= 0:
            raise ValueError("noise_variance must be >= 0")
        x = as_points(self.train_x)
        y = np.asarray(self.train_y, dtype=float).ravel()
        if len(x) != len(y):
            raise ValueError("train_x and train_y lengths differ")
        object.__setattr__(self, "train_x", x)
        object.__setattr__(self, "train_y", y)
        if self.chol is None:
            n = len(x)
            if n:
                K = kernel_matrix(self.kernel, x, x) + self.noise_variance * np.eye(n)
                L, jitter = jittered_cholesky(K, self.kernel.signal_variance)
            else:
                L, jitter = np.zeros((0, 0)), 0.0
            alpha = _chol_solve(L, y - self.mean)
            object.__setattr__(self, "chol", L)
            object.__setattr__(self, "jitter", jitter)
            object.__setattr__(self, "alpha", alpha)

    @property
    def n(self) -> int:
        return len(self.train_y)

    def posterior(self, query) -> Prediction:
        mu, var = self.predict([query])
        return Prediction(float(mu[0]), float(var[0]))

    def predict(self, queries) -> tuple[np.ndarray, np.ndarray]:
        Q = as_points(queries)
        prior = kernel_diag(self.kernel, Q)
        if self.n == 0:
            return np.full(len(Q), self.mean), prior
        means = np.empty(len(Q))
        var = np.empty(len(Q))
        for start in range(0, len(Q), 2048):
            sl = slice(start, start + 2048)
            Kqn = kernel_matrix(self.kernel, Q[sl], self.train_x)
            means[sl] = self.mean + Kqn @ self.alpha
            v = solve_triangular(self.chol, Kqn.T, lower=True, check_finite=False)
            var[sl] = prior[sl] - np.einsum("ij,ij->j", v, v)
        return means, _clamp_variance(var)

    def posterior_variance_batch(self, queries) -> np.ndarray:
        return self.predict(queries)[1]

    def condition(self, new_x, new_y=None) -> "GpModel":
        new_x = as_points(new_x)
        new_y = np.zeros(len(new_x)) if new_y is None else np.asarray(new_y, dtype=float).ravel()
        if len(new_x) != len(new_y):
            raise ValueError("new_x and new_y lengths differ")
        if len(new_x) == 0:
            return self
        return replace(
            self,
            train_x=np.vstack([self.train_x, new_x]),
            train_y=np.concatenate([self.train_y, new_y]),
            chol=None, alpha=None, jitter=0.0,
        )

    def with_data(self, x, y) -> "GpModel":
        """Same hyperparameters and prior mean, different training set."""
        return replace(self, train_x=as_points(x), train_y=np.asarray(y, float),
                       chol=None, alpha=None, jitter=0.0)

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            raise InsufficientData("log marginal likelihood needs at least one observation")
        r = self.train_y - self.mean
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.chol)).sum()
                     - 0.5 * self.n * math.log(2 * math.pi))


def _chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(b) == 0:
        return np.zeros(0)
    z = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L.T, z, lower=False, check_finite=False)


def _clamp_variance(var: np.ndarray) -> np.ndarray:
    neg = var < 0
    if neg.any():
        worst = float(var.min())
        if worst < -1e-9:
            logger.warning("clamped posterior variance %.3g to 0", worst)
        var = np.where(neg, 0.0, var)
    return var


def posterior(model: GpModel, query) -> Prediction:
    return model.posterior(query)


def posterior_variance_batch(model: GpModel, queries) -> np.ndarray:
    return model.posterior_variance_batch(queries)


def condition(model: GpModel, new_x, new_y) -> GpModel:
    return model.condition(new_x, new_y)


def log_marginal_likelihood(model: GpModel) -> float:
    return model.log_marginal_likelihood()


def min_lengthscale(spec: KernelSpec, env: Environment) -> float:
    """Smallest lengthscale the kernel uses anywhere on the eval lattice."""
    if spec.kind == RBF:
        return float(spec.lengthscale)
    return float(spec.lengthscales(env.eval_points).min())


# -- hyperparameter fitting -------------------------------------------------

N_STARTS = 8


@dataclass
class FitReport:
    lml: float
    n: int
    starts: list[float]
    evaluations: int


class _Objective:
    """Negative-free LML over log-parameters, with cached geometry."""

    def __init__(self, x, r, kind, grid_W=None):
        self.x = x
        self.r = r
        self.kind = kind
        self.sq = cdist(x, x, "sqeuclidean")
        self.W = grid_W
        self.evals = 0
        self.eye = np.eye(len(x))

    def __call__(self, theta: np.ndarray) -> float:
        self.evals += 1
        s2, n2 = math.exp(theta[0]), math.exp(theta[1])
        if self.kind == RBF:
            K = s2 * np.exp(-self.sq / (2.0 * math.exp(2 * theta[2])))
        else:
            ls = self.W @ np.exp(theta[2:])
            K = _gibbs(s2, ls, ls, self.sq)
        K += n2 * self.eye
        try:
            L, _ = jittered_cholesky(K, s2)
        except FactorizationFailure:
            return -math.inf
        alpha = _chol_solve(L, self.r)
        val = -0.5 * self.r @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(self.r) * math.log(2 * math.pi)
        return float(val) if math.isfinite(val) else -math.inf


def _coordinate_search(f, theta, lo, hi, step, min_step=0.02, max_evals=4000):
    theta = np.clip(np.asarray(theta, float), lo, hi)
    best = f(theta)
    evals = 1
    while step > min_step and evals < max_evals:
        improved = False
        for i in range(len(theta)):
            for sign in (1.0, -1.0):
                trial = theta.copy()
                trial[i] = min(max(trial[i] + sign * step, lo[i]), hi[i])
                if trial[i] == theta[i]:
                    continue
                val = f(trial)
                evals += 1
                if val > best:
                    theta, best, improved = trial, val, True
                    break
        if not improved:
            step *= 0.5
    return theta, best


def _lhs_starts(rng: np.random.Generator, lo, hi, n: int) -> np.ndarray:
    d = len(lo)
    u = np.empty((n, d))
    for k in range(d):
        u[:, k] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return lo + u * (hi - lo)


def fit(train_x, train_y, kind: str, env: Environment, seed: int = 0,
        grid_shape: tuple[int, int] = (5, 5), return_report: bool = False):
    """Maximum-marginal-likelihood GP from scattered observations.

    Hyperparameters are searched in log space by coordinate search from 8
    Latin-hypercube starts over ``(signal, noise, lengthscale)``. For the
    variable-lengthscale kernel the best stationary start then seeds a
    refinement over every lattice node value.
    """
    x = as_points(train_x)
    y = np.asarray(train_y, dtype=float).ravel()
    if len(x) != len(y):
        raise ValueError("train_x and train_y lengths differ")
    if len(y) < 2:
        raise InsufficientData(f"fit needs at least 2 observations, got {len(y)}")
    if kind not in KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}")
    mean = float(y.mean())
    r = y - mean
    scale = float(r.var()) if r.var() > 0 else 1.0

    xmin, ymin, xmax, ymax = env.bbox()
    diag = math.hypot(xmax - xmin, ymax - ymin)
    l_lo = 0.5 * min(env.eval_spacing, env.candidate_spacing)
    lo = np.log([1e-3 * scale, 1e-6 * scale, l_lo])
    hi = np.log([10.0 * scale, 1.0 * scale, diag])

    rng = np.random.default_rng(seed)
    starts = _lhs_starts(rng, lo, hi, N_STARTS)
    obj = _Objective(x, r, RBF)
    results = []
    for theta0 in starts:
        theta, val = _coordinate_search(obj, theta0, lo, hi, step=1.0)
        results.append((val, theta))
    if not any(math.isfinite(v) for v, _ in results):
        raise FitDiverged("every start failed to factorize")
    # first maximum wins on exact ties, keeping the choice seed-deterministic
    best_val, best_theta = max(results, key=lambda t: t[0])
    evals = obj.evals

    if kind == RBF:
        spec = KernelSpec(RBF, math.exp(best_theta[0]), lengthscale=math.exp(best_theta[2]))
    else:
        nx, ny = grid_shape
        template = LengthscaleGrid(nx, ny, (xmin, ymin, xmax, ymax), np.ones((ny, nx)))
        gobj = _Objective(x, r, VARIABLE, template.weights(x))
        k = nx * ny
        theta0 = np.concatenate([best_theta[:2], np.full(k, best_theta[2])])
        glo = np.concatenate([lo[:2], np.full(k, lo[2])])
        ghi = np.concatenate([hi[:2], np.full(k, hi[2])])
        theta, val = _coordinate_search(gobj, theta0, glo, ghi, step=0.5, min_step=0.03)
        evals += gobj.evals
        if not math.isfinite(val):
            raise FitDiverged("variable-lengthscale refinement failed to factorize")
        best_val, best_theta = val, theta
        grid = LengthscaleGrid(nx, ny, template.bbox, np.exp(theta[2:]).reshape(ny, nx))
        spec = KernelSpec(VARIABLE, math.exp(theta[0]), lengthscale_grid=grid)

    model = GpModel(spec, math.exp(best_theta[1]), x, y, mean=mean)
    if return_report:
        return model, FitReport(best_val, len(y), [float(v) for v, _ in results], evals)
    return model


# -- kernel file ------------------------------------------------------------

def kernel_to_dict(spec: KernelSpec, noise_variance: float) -> dict:
    d = spec.to_dict()
    d["noise_variance"] = float(noise_variance)
    return d


def dump_kernel(spec: KernelSpec, noise_variance: float) -> str:
    return json.dumps(kernel_to_dict(spec, noise_variance), indent=2, sort_keys=True) + "\n"


def save_kernel(spec: KernelSpec, noise_variance: float, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_kernel(spec, noise_variance))


def load_kernel(path) -> tuple[KernelSpec, float]:
    with open(path) as fh:
        data = json.load(fh)
    return KernelSpec.from_dict(data), float(data["noise_variance"])
