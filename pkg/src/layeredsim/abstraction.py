"""Uniform grid partition and the finite abstract MDP of an LTI model."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .model import Box, LtiModel

log = logging.getLogger(__name__)

_SNAP = 1e-9


class ConfigurationError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GridPartition:
    """Uniform axis-aligned grid over a box.

    Cells are half-open ``[lo, hi)`` except on the upper box boundary; flat
    cell indices are row-major over the per-dimension counts.  Index ``size``
    is reserved for the out-of-box sink.
    """

    box: Box
    widths: np.ndarray
    counts: np.ndarray

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def sink(self) -> int:
        return self.size

    @property
    def origin(self) -> np.ndarray:
        return self.box.lo

    @property
    def strides(self) -> np.ndarray:
        strides = np.ones(self.dim, dtype=np.int64)
        for d in range(self.dim - 2, -1, -1):
            strides[d] = strides[d + 1] * self.counts[d + 1]
        return strides

    @property
    def deviation_box(self) -> Box:
        return Box(-self.widths / 2, self.widths / 2)

    def deviation_vertices(self) -> np.ndarray:
        """The ``2**n`` vertices of the snap-error box, one per row."""
        half = self.widths / 2
        return np.array([np.array(signs) * half
                         for signs in itertools.product((-1.0, 1.0), repeat=self.dim)])

    def multi_index(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), tuple(self.counts)), axis=-1)

    def centers(self) -> np.ndarray:
        """Representative points of all cells, shape ``(size, n)``."""
        idx = self.multi_index(np.arange(self.size))
        return self.origin + (idx + 0.5) * self.widths

    def center(self, flat: int) -> np.ndarray:
        return self.origin + (self.multi_index(flat) + 0.5) * self.widths

    def edges(self, d: int) -> np.ndarray:
        return self.origin[d] + np.arange(self.counts[d] + 1) * self.widths[d]

    def cell_indices(self, X) -> np.ndarray:
        """Flat cell index for each row of ``X``; out-of-box rows map to the sink."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        v = (X - self.origin) / self.widths
        r = np.floor(v + 0.5)
        v = np.where(np.abs(v - r) < _SNAP, r, v)
        inside = np.all((v >= 0) & (v <= self.counts), axis=1) & np.all(np.isfinite(X), axis=1)
        k = np.minimum(np.floor(np.where(np.isfinite(v), v, 0)).astype(np.int64), self.counts - 1)
        flat = (k * self.strides).sum(axis=1)
        return np.where(inside, flat, self.sink)

    def cell_index(self, x) -> int:
        return int(self.cell_indices(np.atleast_1d(np.asarray(x, dtype=float))[None, :])[0])

    def project(self, x) -> np.ndarray | None:
        """Representative point of the cell containing ``x``, or ``None`` (sink)."""
        k = self.cell_index(x)
        return None if k == self.sink else self.center(k)

    def mask_of_box(self, box: Box) -> np.ndarray:
        """Cells whose representative point lies in the closed ``box``."""
        c = self.centers()
        return np.all((c >= box.lo) & (c <= box.hi), axis=1)

    def fingerprint(self) -> dict:
        return {"lo": self.box.lo.tolist(), "hi": self.box.hi.tolist(),
                "widths": self.widths.tolist(), "counts": self.counts.tolist()}


def build_partition(state_box: Box, widths, tol: float = 1e-9) -> GridPartition:
    widths = np.broadcast_to(np.asarray(widths, dtype=float), (state_box.dim,)).copy()
    if np.any(~np.isfinite(widths)) or np.any(widths <= 0):
        raise ConfigurationError("cell widths must be positive")
    counts = np.rint(state_box.extent / widths).astype(np.int64)
    if np.any(counts < 1) or np.any(np.abs(counts * widths - state_box.extent) > tol):
        raise ConfigurationError(
            f"cell widths {widths.tolist()} do not divide the box extent {state_box.extent.tolist()}")
    return GridPartition(state_box, widths, counts)


def map_to_representative(grid: GridPartition, x) -> np.ndarray | None:
    return grid.project(x)


@dataclass(frozen=True)
class AbstractModel:
    """Grid MDP: ``P[k, s, t]`` is the probability of ``s -> t`` under input ``k``.

    States ``0..size-1`` are cells, ``size`` is the absorbing sink.
    """

    grid: GridPartition
    inputs: np.ndarray
    P: np.ndarray
    outputs: np.ndarray
    method: str = "cdf"

    @property
    def num_states(self) -> int:
        return self.grid.size

    @property
    def num_inputs(self) -> int:
        return self.inputs.shape[0]

    @property
    def sink(self) -> int:
        return self.grid.sink

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.P).tobytes()).hexdigest()


def _interval_mass(lo, hi):
    """``Phi(hi) - Phi(lo)`` computed on the tail that avoids cancellation."""
    upper = lo > 0
    return np.where(upper, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def _is_axis_aligned(cov: np.ndarray) -> bool:
    off = cov - np.diag(np.diag(cov))
    scale = max(float(np.max(np.abs(cov))), 1.0)
    return bool(np.all(np.abs(off) <= 1e-12 * scale))


def _rows_cdf(means: np.ndarray, std: np.ndarray, grid: GridPartition) -> np.ndarray:
    rows = None
    for d in range(grid.dim):
        e = grid.edges(d)
        if std[d] < 1e-12:
            v = (means[:, d] - grid.origin[d]) / grid.widths[d]
            r = np.floor(v + 0.5)
            v = np.where(np.abs(v - r) < _SNAP, r, v)
            inside = (v >= 0) & (v <= grid.counts[d])
            kd = np.minimum(np.floor(v).astype(np.int64), grid.counts[d] - 1)
            pd = np.zeros((means.shape[0], grid.counts[d]))
            pd[np.nonzero(inside)[0], kd[inside]] = 1.0
        else:
            z = (e[None, :] - means[:, d:d + 1]) / std[d]
            pd = _interval_mass(z[:, :-1], z[:, 1:])
        rows = pd if rows is None else (rows[:, :, None] * pd[:, None, :]).reshape(means.shape[0], -1)
    return rows


def compute_transitions(model: LtiModel, grid: GridPartition, inputs, mc_samples: int = 100_000,
                        seed: int = 0) -> AbstractModel:
    """Transition tensor of ``x+ = Pi(A x + B u + Bw w)`` from every representative point.

    Axis-aligned noise (``Bw Bw^T`` diagonal) uses exact Gaussian CDF
    differences per dimension; otherwise each row is estimated from
    ``mc_samples`` draws with a fixed seed.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != model.m:
        inputs = inputs.reshape(-1, model.m)
    centers = grid.centers()
    N, K = grid.size, inputs.shape[0]
    cov = model.noise_cov
    axis_aligned = _is_axis_aligned(cov)
    P = np.zeros((K, N + 1, N + 1))
    rng = np.random.default_rng(seed)
    if not axis_aligned:
        warnings.warn("correlated disturbance: using Monte-Carlo transition estimates", RuntimeWarning)
    for k, u in enumerate(inputs):
        means = centers @ model.A.T + model.B @ u
        if not np.all(np.isfinite(means)):
            raise NumericError("non-finite transition mean")
        if axis_aligned:
            rows = _rows_cdf(means, np.sqrt(np.clip(np.diag(cov), 0, None)), grid)
            rows = np.clip(rows, 0.0, 1.0)
            P[k, :N, :N] = rows
            P[k, :N, N] = np.clip(1.0 - rows.sum(axis=1), 0.0, 1.0)
        else:
            for s in range(N):
                w = rng.standard_normal((mc_samples, model.noise_dim))
                idx = grid.cell_indices(means[s] + w @ model.Bw.T)
                P[k, s] = np.bincount(idx, minlength=N + 1) / mc_samples
        P[k, N, N] = 1.0
    outputs = centers @ model.C.T
    return AbstractModel(grid, inputs, P, outputs, "cdf" if axis_aligned else "monte-carlo")


# ---------------------------------------------------------------------------
# Tensor cache


def abstraction_hash(model: LtiModel, grid: GridPartition, inputs) -> str:
    payload = {
        "grid": grid.fingerprint(),
        "A": model.A.tolist(), "B": model.B.tolist(), "Bw": model.Bw.tolist(),
        "inputs": np.asarray(inputs, dtype=float).tolist(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_abstraction(path, abstract: AbstractModel, key: str) -> None:
    """Write the tensor as ``.npz``: ``P`` (row-major ``K x (N+1) x (N+1)``), inputs, hash."""
    np.savez_compressed(path, P=abstract.P, inputs=abstract.inputs, outputs=abstract.outputs,
                        hash=np.array(key), method=np.array(abstract.method))


def load_or_compute(model: LtiModel, grid: GridPartition, inputs, cache_path=None,
                    **kwargs) -> tuple[AbstractModel, bool]:
    """Return ``(abstract, cache_hit)``; a cache with a different hash is rebuilt."""
    key = abstraction_hash(model, grid, inputs)
    if cache_path is not None and Path(cache_path).exists():
        with np.load(cache_path) as data:
            if str(data["hash"]) == key:
                log.info("transition cache hit: %s", cache_path)
                return AbstractModel(grid, data["inputs"], data["P"], data["outputs"],
                                     str(data["method"])), True
        log.info("transition cache stale, recomputing")
    abstract = compute_transitions(model, grid, inputs, **kwargs)
    if cache_path is not None:
        save_abstraction(cache_path, abstract, key)
    return abstract, False
