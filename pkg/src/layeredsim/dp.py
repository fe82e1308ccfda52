"""Bi-layered robust dynamic programming over the abstract MDP x DFA product.

Values live in a table ``V[s, q, i]`` (abstract state, DFA state, layer).
A backup for layer ``i`` that switches to layer ``j`` takes, for every
successor cell, the worst DFA successor reachable through any output within
``eps_j`` of the cell output, subtracts ``delta[i, j]`` and truncates to
``[0, 1]``.  Switches into the partially covered second layer read the
piecewise maximum over layers at the successor.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .abstraction import AbstractModel
from .model import Labeling
from .scltl import Dfa
from .simrel import weighted_norm

log = logging.getLogger(__name__)


class ContainmentError(ValueError):
    """The initial state is not related to its abstract state in any layer."""


class StrategyError(ValueError):
    pass


@dataclass
class SwitchingStrategy:
    """``fixed``: ``targets[i, s, q]`` is the layer switched to (-1 = undefined).

    ``optimize``: any switch with ``allowed[i, j]`` may be chosen per state.
    """

    mode: str
    targets: np.ndarray | None = None
    allowed: np.ndarray | None = None

    @classmethod
    def fixed(cls, targets) -> "SwitchingStrategy":
        return cls("fixed", targets=np.asarray(targets, dtype=np.int64))

    @classmethod
    def optimize(cls, num_layers: int, pruned: bool = True) -> "SwitchingStrategy":
        allowed = np.ones((num_layers, num_layers), dtype=bool)
        if pruned:
            allowed = np.triu(allowed)
        return cls("optimize", allowed=allowed)

    @classmethod
    def constant(cls, num_layers: int, num_states: int, num_dfa: int) -> "SwitchingStrategy":
        """Every layer keeps to itself (``s_ii`` everywhere)."""
        t = np.broadcast_to(np.arange(num_layers)[:, None, None], (num_layers, num_states, num_dfa))
        return cls.fixed(t.copy())


@dataclass
class LayeredProblem:
    abstract: AbstractModel
    dfa: Dfa
    labeling: Labeling
    epsilons: list
    delta: np.ndarray
    coverage: np.ndarray          # (L, N) bool
    mode_presence: np.ndarray     # (L, nq) bool
    piecewise_max: bool = True
    strict_adjusted: bool = False
    letter_masks: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        L = len(self.epsilons)
        if L > 2:
            raise NotImplementedError("the robust DP engine handles at most two layers")
        self.delta = np.atleast_2d(np.asarray(self.delta, dtype=float))
        self.coverage = np.asarray(self.coverage, dtype=bool).reshape(L, -1)
        self.mode_presence = np.asarray(self.mode_presence, dtype=bool).reshape(L, -1)
        if not self.coverage[0].all() or not self.mode_presence[0].all():
            raise ValueError("the first layer must cover every abstract and DFA state")
        N = self.abstract.num_states
        nl = 1 << len(self.dfa.props)
        masks = np.zeros((L, N, nl), dtype=bool)
        for j, eps in enumerate(self.epsilons):
            for s in range(N):
                for letter in self.labeling.letters_within_ball(self.abstract.outputs[s], eps):
                    masks[j, s, self.dfa.letter_index(letter)] = True
        self.letter_masks = masks
        self._acc = self.dfa.accepting_mask().astype(float)

    @classmethod
    def build(cls, abstract, dfa, labeling, epsilons, delta, coverage=None,
              layer_presence: str = "all", **kwargs) -> "LayeredProblem":
        L = len(epsilons)
        N, nq = abstract.num_states, dfa.num_states
        cov = np.ones((L, N), dtype=bool) if coverage is None else np.asarray(coverage, dtype=bool)
        modes = np.ones((L, nq), dtype=bool)
        if layer_presence == "self_loop":
            modes[1:] = dfa.self_loop_states()[None, :]
        elif layer_presence != "all":
            raise ValueError(f"unknown layer presence mode {layer_presence!r}")
        return cls(abstract, dfa, labeling, list(epsilons), delta, cov, modes, **kwargs)

    @property
    def num_layers(self) -> int:
        return len(self.epsilons)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.abstract.num_states, self.dfa.num_states, self.num_layers

    def presence(self) -> np.ndarray:
        """``(N, nq, L)`` mask of (cell, mode, layer) triples that exist."""
        return (self.coverage[:, :, None] & self.mode_presence[:, None, :]).transpose(1, 2, 0)

    def adjusted(self, j: int) -> bool:
        return self.piecewise_max and self.num_layers == 2 and j == 1

    # -- single-state operators (reference path) ---------------------------

    def successor_dfa_set(self, q: int, s_next: int, j: int) -> frozenset:
        if s_next == self.abstract.sink:
            return frozenset()
        letters = np.flatnonzero(self.letter_masks[j, s_next])
        return frozenset(int(self.dfa.delta[q, k]) for k in letters)

    def _target(self, V, s_next, q_next, j, adjusted):
        v = V[s_next, q_next].max() if adjusted else V[s_next, q_next, j]
        acc = self._acc[q_next]
        if adjusted and self.strict_adjusted:
            return min(acc, v)
        return max(acc, v)

    def robust_bellman(self, V, u: int, i: int, j: int, s: int, q: int, adjusted: bool = False) -> float:
        P = self.abstract.P[u, s]
        total = 0.0
        for t in np.flatnonzero(P[: self.abstract.num_states]):
            succ = self.successor_dfa_set(q, t, j)
            total += P[t] * min(self._target(V, t, qq, j, adjusted) for qq in succ)
        return float(min(1.0, max(0.0, total - self.delta[i, j])))

    def partial_cover_bellman(self, V, u: int, i: int, s: int, q: int) -> float:
        return self.robust_bellman(V, u, i, 1, s, q, adjusted=True)

    # -- vectorized sweep --------------------------------------------------

    def _inner(self, V, j: int) -> np.ndarray:
        """Worst-case successor value per (successor cell, current mode)."""
        adjusted = self.adjusted(j)
        base = V.max(axis=2) if adjusted else V[:, :, j]
        if adjusted and self.strict_adjusted:
            T = np.minimum(self._acc[None, :], base)
        else:
            T = np.maximum(self._acc[None, :], base)
        out = np.full(T.shape, np.inf)
        for k in range(self.letter_masks.shape[2]):
            vals = T[:, self.dfa.delta[:, k]]  # (N, nq): value of tau(q, letter k) at each cell
            out = np.where(self.letter_masks[j, :, k][:, None], np.minimum(out, vals), out)
        return out

    def expectations(self, V) -> np.ndarray:
        """``E[j, u, s, q]`` before subtracting deviations."""
        N = self.abstract.num_states
        Pc = self.abstract.P[:, :N, :N]
        return np.stack([Pc @ self._inner(V, j) for j in range(self.num_layers)])

    def sweep(self, V, strategy: SwitchingStrategy):
        E = self.expectations(V)
        L = self.num_layers
        N, nq, _ = self.shape
        K = self.abstract.num_inputs
        pres = self.presence()
        V_new = np.zeros_like(V)
        pu = np.full((N, nq, L), -1, dtype=np.int64)
        ps = np.full((N, nq, L), -1, dtype=np.int64)
        for i in range(L):
            if strategy.mode == "fixed":
                tgt = strategy.targets[i]
                cand = np.zeros((K, N, nq))
                for j in range(L):
                    cj = np.clip(E[j] - self.delta[i, j], 0.0, 1.0)
                    cand = np.where((tgt == j)[None], cj, cand)
                k = np.argmax(cand, axis=0)
                best = np.take_along_axis(cand, k[None], axis=0)[0]
                pu[:, :, i] = k
                ps[:, :, i] = tgt
            else:
                js = np.flatnonzero(strategy.allowed[i])
                cand = np.stack([np.clip(E[j] - self.delta[i, j], 0.0, 1.0) for j in js], axis=1)
                flat = cand.reshape(K * len(js), N, nq)  # input-major, then layer
                arg = np.argmax(flat, axis=0)
                best = np.take_along_axis(flat, arg[None], axis=0)[0]
                pu[:, :, i] = arg // len(js)
                ps[:, :, i] = js[arg % len(js)]
            V_new[:, :, i] = np.where(pres[:, :, i], best, 0.0)
        pu[~pres] = -1
        ps[~pres] = -1
        return V_new, pu, ps

    def check_strategy(self, strategy: SwitchingStrategy) -> None:
        if strategy.mode == "optimize":
            if strategy.allowed is None or strategy.allowed.shape != (self.num_layers,) * 2:
                raise StrategyError("optimize mode needs an LxL allowed-switch mask")
            if not strategy.allowed.any(axis=1).all():
                raise StrategyError("every layer needs at least one allowed switch")
            return
        if strategy.mode != "fixed":
            raise StrategyError(f"unknown strategy mode {strategy.mode!r}")
        t = strategy.targets
        N, nq, L = self.shape
        if t is None or t.shape != (L, N, nq):
            raise StrategyError(f"fixed strategy table must have shape {(L, N, nq)}")
        pres = self.presence().transpose(2, 0, 1)
        bad = pres & ((t < 0) | (t >= L))
        if bad.any():
            i, s, q = np.argwhere(bad)[0]
            raise StrategyError(f"strategy undefined at layer {i + 1}, cell {s}, DFA state {q}")


@dataclass
class ValueIterationResult:
    V: np.ndarray
    policy_u: np.ndarray
    policy_s: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residuals: list


def value_iteration(problem: LayeredProblem, strategy: SwitchingStrategy, tol: float = 1e-6,
                    max_iter: int = 500, V0=None, callback=None) -> ValueIterationResult:
    """Iterate the robust operator from ``V0 = 0`` until the sup-norm change is below ``tol``."""
    problem.check_strategy(strategy)
    V = np.zeros(problem.shape) if V0 is None else np.array(V0, dtype=float)
    residuals = []
    pu = ps = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        V_new, pu, ps = problem.sweep(V, strategy)
        res = float(np.max(np.abs(V_new - V)))
        residuals.append(res)
        if callback is not None:
            callback(it, V_new)
        V = V_new
        if res < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"value iteration stopped after {max_iter} sweeps (residual {residuals[-1]:.3g})",
                      RuntimeWarning)
    log.info("value iteration: %d sweeps, residual %.3g", it, residuals[-1])
    return ValueIterationResult(V, pu, ps, it, residuals[-1], converged, residuals)


def initial_layer(problem: LayeredProblem, V, x0, D, s0: int, q0: int) -> int:
    """Layer in which ``(Pi(x0), x0)`` starts: best value among admissible layers.

    Ties go to the deepest layer.
    """
    grid = problem.abstract.grid
    err = weighted_norm(np.asarray(x0, float) - grid.center(s0), D)
    pres = problem.presence()[s0, q0]
    admissible = [i for i in range(problem.num_layers) if pres[i] and err <= problem.epsilons[i]]
    if not admissible:
        raise ContainmentError(f"x0 = {np.ravel(x0).tolist()} lies in no layer at its cell")
    return max(admissible, key=lambda i: (V[s0, q0, i], i))


def robust_satisfaction(problem: LayeredProblem, V, x0, C, D) -> float:
    """Certified lower bound on the satisfaction probability from ``x0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dfa = problem.dfa
    q0 = dfa.step(dfa.initial, problem.labeling.label(np.atleast_2d(C) @ x0))
    if q0 in dfa.accepting:
        return 1.0
    s0 = problem.abstract.grid.cell_index(x0)
    if s0 == problem.abstract.sink:
        raise ContainmentError("x0 lies outside the abstracted state box")
    i0 = initial_layer(problem, V, x0, D, s0, q0)
    return float(V[s0, q0, i0])


def satisfaction_curve(problem: LayeredProblem, V, C, D) -> np.ndarray:
    """Robust probability with ``x0`` at every cell center."""
    centers = problem.abstract.grid.centers()
    return np.array([robust_satisfaction(problem, V, c, C, D) for c in centers])
