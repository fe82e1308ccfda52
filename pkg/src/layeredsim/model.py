"""Concrete LTI model, boxes, and the output labeling function."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Letter = frozenset


class ModelError(ValueError):
    """Inconsistent model or labeling data."""


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ModelError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ModelError("box bounds must be vectors of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ModelError("box must be bounded")
        if np.any(hi < lo):
            raise ModelError("box is empty")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_intervals(cls, intervals: Sequence[Sequence[float]]) -> "Box":
        arr = np.asarray(intervals, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))


@dataclass(frozen=True)
class LtiModel:
    """``x+ = A x + B u + Bw w``, ``y = C x`` with ``w ~ N(0, I_p)``.

    Any disturbance scaling lives in ``Bw``; see :meth:`scale_noise`.
    """

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    state_box: Box
    input_box: Box

    def __post_init__(self):
        for name in ("A", "B", "Bw", "C"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ModelError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ModelError(f"B must have {n} rows, got {self.B.shape}")
        if self.Bw.shape[0] != n:
            raise ModelError(f"Bw must have {n} rows, got {self.Bw.shape}")
        if self.C.shape[1] != n:
            raise ModelError(f"C must have {n} columns, got {self.C.shape}")
        if self.state_box.dim != n:
            raise ModelError("state box dimension does not match A")
        if self.input_box.dim != self.B.shape[1]:
            raise ModelError("input box dimension does not match B")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.Bw.shape[1]

    @property
    def noise_cov(self) -> np.ndarray:
        return self.Bw @ self.Bw.T

    @staticmethod
    def scale_noise(Bw, noise_level: float, convention: str = "variance") -> np.ndarray:
        """Fold a scalar disturbance level into ``Bw``.

        ``convention="variance"`` reads ``noise_level`` as a variance, ``"std"``
        as a standard deviation.
        """
        if noise_level < 0:
            raise ModelError("noise level must be nonnegative")
        if convention == "variance":
            factor = math.sqrt(noise_level)
        elif convention == "std":
            factor = noise_level
        else:
            raise ModelError(f"unknown noise convention {convention!r}")
        return _as_matrix(Bw, "Bw") * factor

    def step(self, x, u, w) -> np.ndarray:
        return self.A @ np.asarray(x, float) + self.B @ np.atleast_1d(u) + self.Bw @ np.atleast_1d(w)

    def output(self, x) -> np.ndarray:
        return self.C @ np.atleast_1d(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Interval boxes with per-face closedness, used for labeling regions and the
# exact ball/region overlap test.


@dataclass(frozen=True)
class _Span:
    lo: float
    hi: float
    lo_closed: bool
    hi_closed: bool

    def empty(self) -> bool:
        if self.lo < self.hi:
            return False
        return not (self.lo == self.hi and self.lo_closed and self.hi_closed)

    def contains(self, v: float) -> bool:
        above = v > self.lo or (self.lo_closed and v == self.lo)
        below = v < self.hi or (self.hi_closed and v == self.hi)
        return above and below


def _intersect(s: _Span, t: _Span) -> _Span:
    if s.lo > t.lo:
        lo, lo_c = s.lo, s.lo_closed
    elif t.lo > s.lo:
        lo, lo_c = t.lo, t.lo_closed
    else:
        lo, lo_c = s.lo, s.lo_closed and t.lo_closed
    if s.hi < t.hi:
        hi, hi_c = s.hi, s.hi_closed
    elif t.hi < s.hi:
        hi, hi_c = t.hi, t.hi_closed
    else:
        hi, hi_c = s.hi, s.hi_closed and t.hi_closed
    return _Span(lo, hi, lo_c, hi_c)


def _subtract(a: tuple[_Span, ...], b: tuple[_Span, ...]) -> list[tuple[_Span, ...]]:
    """Split ``a \\ b`` into disjoint boxes."""
    if any(_intersect(sa, sb).empty() for sa, sb in zip(a, b)):
        return [a]
    pieces = []
    rest = list(a)
    for d, sb in enumerate(b):
        below = _intersect(rest[d], _Span(-math.inf, sb.lo, False, not sb.lo_closed))
        above = _intersect(rest[d], _Span(sb.hi, math.inf, not sb.hi_closed, False))
        for part in (below, above):
            if not part.empty():
                piece = list(rest)
                piece[d] = part
                pieces.append(tuple(piece))
        rest[d] = _intersect(rest[d], sb)
    return pieces


def _ball_meets(box: tuple[_Span, ...], center: np.ndarray, radius: float) -> bool:
    nearest = np.array([min(max(c, s.lo), s.hi) for c, s in zip(center, box)])
    dist = float(np.linalg.norm(nearest - center))
    if dist < radius:
        return True
    if dist > radius:
        return False
    # Touching exactly: only the unique nearest point of the closure is shared.
    return all(s.contains(v) for s, v in zip(box, nearest))


@dataclass(frozen=True)
class Region:
    """Axis-aligned output region, half-open ``[lo, hi)`` unless flagged."""

    lo: tuple
    hi: tuple
    letter: Letter
    lo_closed: tuple = None
    hi_closed: tuple = None

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi):
            raise ModelError("region bounds differ in length")
        k = len(lo)
        lc = self.lo_closed if self.lo_closed is not None else (True,) * k
        hc = self.hi_closed if self.hi_closed is not None else (False,) * k
        lc = tuple(bool(v) for v in np.broadcast_to(lc, (k,)))
        hc = tuple(bool(v) for v in np.broadcast_to(hc, (k,)))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "lo_closed", lc)
        object.__setattr__(self, "hi_closed", hc)
        object.__setattr__(self, "letter", frozenset(self.letter))

    @property
    def spans(self) -> tuple[_Span, ...]:
        return tuple(_Span(*t) for t in zip(self.lo, self.hi, self.lo_closed, self.hi_closed))

    def contains(self, y) -> bool:
        return all(s.contains(float(v)) for s, v in zip(self.spans, y))


@dataclass(frozen=True)
class Labeling:
    """First matching region wins; ``default_letter`` elsewhere."""

    atomic_props: tuple
    regions: tuple
    default_letter: Letter = frozenset()
    _cells: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        props = tuple(self.atomic_props)
        if len(set(props)) != len(props):
            raise ModelError("duplicate atomic propositions")
        object.__setattr__(self, "atomic_props", props)
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "default_letter", frozenset(self.default_letter))
        dims = {len(r.lo) for r in self.regions}
        if len(dims) > 1:
            raise ModelError("labeling regions have mixed dimensions")
        for letter in [r.letter for r in self.regions] + [self.default_letter]:
            unknown = set(letter) - set(props)
            if unknown:
                raise ModelError(f"letter uses undeclared propositions {sorted(unknown)}")
        object.__setattr__(self, "_cells", None)

    @property
    def output_dim(self) -> int | None:
        return len(self.regions[0].lo) if self.regions else None

    def label(self, y) -> Letter:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if not np.all(np.isfinite(y)):
            raise ModelError("output must be finite")
        for region in self.regions:
            if region.contains(y):
                return region.letter
        return self.default_letter

    def _pieces(self, dim: int) -> list[tuple[tuple[_Span, ...], Letter]]:
        # Disjoint boxes on which each letter is the first match.
        if self._cells is not None and dim in self._cells:
            return self._cells[dim]
        universe = tuple(_Span(-math.inf, math.inf, False, False) for _ in range(dim))
        earlier: list[tuple[_Span, ...]] = []
        out = []
        for region in self.regions:
            parts = [region.spans]
            for prev in earlier:
                parts = [p for part in parts for p in _subtract(part, prev)]
            out.extend((p, region.letter) for p in parts)
            earlier.append(region.spans)
        rest = [universe]
        for prev in earlier:
            rest = [p for part in rest for p in _subtract(part, prev)]
        out.extend((p, self.default_letter) for p in rest)
        cache = dict(self._cells or {})
        cache[dim] = out
        object.__setattr__(self, "_cells", cache)
        return out

    def letters_within_ball(self, y_hat, eps: float) -> frozenset:
        """All letters ``L(y)`` with ``||y - y_hat|| <= eps`` (Euclidean)."""
        if eps < 0 or not math.isfinite(eps):
            raise ModelError("ball radius must be finite and nonnegative")
        y_hat = np.atleast_1d(np.asarray(y_hat, dtype=float))
        if not np.all(np.isfinite(y_hat)):
            raise ModelError("output must be finite")
        if eps == 0:
            return frozenset([self.label(y_hat)])
        return frozenset(letter for box, letter in self._pieces(y_hat.size)
                         if _ball_meets(box, y_hat, eps))


def label_output(labeling: Labeling, y) -> Letter:
    return labeling.label(y)


def letters_within_ball(labeling: Labeling, y_hat, eps: float) -> frozenset:
    return labeling.letters_within_ball(y_hat, eps)


def all_letters(props: Iterable[str]) -> list[Letter]:
    """Every subset of ``props`` in bitmask order (bit b <-> props[b])."""
    props = list(props)
    return [frozenset(p for b, p in enumerate(props) if k >> b & 1) for k in range(1 << len(props))]
