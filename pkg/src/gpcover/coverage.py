"""Binary coverage maps from a GP kernel.

A single noisy measurement at ``c`` brings the posterior variance at ``v``
to ``k(v,v) - k(c,v)^2 / (k(c,c) + noise)``. That is at most the target
exactly when ``|k(c,v)|`` reaches the covariance threshold below, so each
candidate's coverage set can be computed from prior covariances alone.
Extra measurements never raise posterior variance, which makes the union of
per-candidate sets a safe under-estimate of what a route achieves.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from gpcover.environment import Environment
from gpcover.errors import DigestMismatch, InvalidTarget
from gpcover.gp import GpModel, KernelSpec, kernel_diag, kernel_matrix, kernel_to_dict

POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)

_MAGIC = b"GPCOVMX1"
_HEADER = struct.Struct("<8sIId32s")


def popcount(packed: np.ndarray) -> np.ndarray:
    """Bit counts along the last axis of a packed ``uint8`` array."""
    return POPCOUNT[packed].sum(axis=-1)


def pack(bits: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(bits, dtype=bool), axis=-1, bitorder="little")


@dataclass(frozen=True)
class TargetSpec:
    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("absolute", "ratio"):
            raise InvalidTarget(f"unknown target mode {self.mode!r}")
        if not (self.value > 0 and math.isfinite(self.value)):
            raise InvalidTarget(f"target value must be positive, got {self.value}")
        if self.mode == "ratio" and self.value >= 1:
            raise InvalidTarget(f"target ratio must lie in (0, 1), got {self.value}")


def covariance_threshold(k_vv, k_cc, noise_variance, target):
    """Smallest ``|k(c, v)|`` for which one measurement at ``c`` reaches ``target`` at ``v``."""
    k_vv = np.asarray(k_vv, dtype=float)
    t = np.asarray(target, dtype=float)
    if not (np.all(t > 0) and np.all(t < k_vv)):
        raise InvalidTarget(f"target {target} outside (0, k(v,v))")
    out = np.sqrt((k_vv - target) * (np.asarray(k_cc, float) + noise_variance))
    return float(out) if out.ndim == 0 else out


def covers(spec: KernelSpec, noise_variance: float, c, v, target: float) -> bool:
    k_vv = float(kernel_diag(spec, [v])[0])
    k_cc = float(kernel_diag(spec, [c])[0])
    thr = covariance_threshold(k_vv, k_cc, noise_variance, target)
    return abs(float(kernel_matrix(spec, [c], [v])[0, 0])) >= thr


def resolve_target(target, env: Environment, spec: KernelSpec,
                   prior_model: GpModel | None = None) -> float:
    """Absolute target variance; ratio targets scale the largest current variance."""
    if not isinstance(target, TargetSpec):
        target = TargetSpec("absolute", float(target))
    if target.mode == "absolute":
        value = target.value
    elif prior_model is not None and prior_model.n > 0:
        value = target.value * float(prior_model.posterior_variance_batch(env.eval_points).max())
    else:
        value = target.value * float(kernel_diag(spec, env.eval_points).max())
    ceiling = float(kernel_diag(spec, env.eval_points).min())
    if not (0 < value < ceiling):
        raise InvalidTarget(f"resolved target {value:.6g} outside (0, {ceiling:.6g})")
    return value


def digest(env: Environment, spec: KernelSpec, noise_variance: float) -> str:
    payload = json.dumps({"env": env.to_dict(), "kernel": kernel_to_dict(spec, noise_variance)},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class CoverageMatrix:
    """Row ``j`` holds the eval points covered by candidate ``j``, bit-packed."""

    rows: np.ndarray
    n_eval: int
    target_variance: float
    env_digest: str

    @property
    def n_candidates(self) -> int:
        return self.rows.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_candidates, self.n_eval

    def dense(self) -> np.ndarray:
        return np.unpackbits(self.rows, axis=1, count=self.n_eval, bitorder="little").astype(bool)

    def empty_cover(self) -> np.ndarray:
        return np.zeros(self.rows.shape[1], dtype=np.uint8)

    def union(self, selected) -> np.ndarray:
        idx = np.fromiter(selected, dtype=np.int64)
        if len(idx) == 0:
            return self.empty_cover()
        return np.bitwise_or.reduce(self.rows[idx], axis=0)

    def gains(self, covered: np.ndarray) -> np.ndarray:
        """Newly covered counts for every candidate against a packed cover."""
        return popcount(self.rows & ~covered)

    def check(self, env: Environment, spec: KernelSpec, noise_variance: float) -> None:
        if self.env_digest != digest(env, spec, noise_variance):
            raise DigestMismatch("coverage matrix was built for a different environment or kernel")

    @classmethod
    def from_dense(cls, bits, target_variance: float = 1.0, env_digest: str = "0" * 64):
        bits = np.atleast_2d(np.asarray(bits, dtype=bool))
        return cls(pack(bits), bits.shape[1], float(target_variance), env_digest)


def build_matrix(env: Environment, spec: KernelSpec, noise_variance: float, target,
                 prior_model: GpModel | None = None, jobs: int = 1,
                 chunk: int = 256) -> CoverageMatrix:
    tvar = resolve_target(target, env, spec, prior_model)
    V = env.eval_points
    C = env.candidates
    k_vv = kernel_diag(spec, V)
    k_cc = kernel_diag(spec, C)

    def block(start: int) -> np.ndarray:
        sl = slice(start, start + chunk)
        K = kernel_matrix(spec, C[sl], V)
        thr = np.sqrt((k_vv[None, :] - tvar) * (k_cc[sl, None] + noise_variance))
        return pack(np.abs(K) >= thr)

    starts = range(0, len(C), chunk)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(s) for s in starts]
    rows = np.vstack(parts)
    rows.setflags(write=False)
    return CoverageMatrix(rows, len(V), tvar, digest(env, spec, noise_variance))


def coverage_count(matrix: CoverageMatrix, selected) -> int:
    return int(popcount(matrix.union(selected)))


def marginal_gain(matrix: CoverageMatrix, selected, j: int, covered: np.ndarray | None = None) -> int:
    if covered is None:
        covered = matrix.union(selected)
    return int(popcount(matrix.rows[j] & ~covered))


def save_matrix(matrix: CoverageMatrix, path) -> None:
    header = _HEADER.pack(_MAGIC, matrix.n_candidates, matrix.n_eval,
                          matrix.target_variance, bytes.fromhex(matrix.env_digest))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(matrix.rows).tobytes())


def load_matrix(path, expected_digest: str | None = None) -> CoverageMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated coverage cache")
    magic, m, n, target, dig = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a coverage cache file")
    width = (n + 7) // 8
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
    if body.size != m * width:
        raise ValueError(f"{path}: expected {m * width} payload bytes, found {body.size}")
    if expected_digest is not None and dig.hex() != expected_digest:
        raise DigestMismatch(f"{path}: cache digest does not match environment/kernel")
    rows = body.reshape(m, width).copy()
    rows.setflags(write=False)
    return CoverageMatrix(rows, n, target, dig.hex())
