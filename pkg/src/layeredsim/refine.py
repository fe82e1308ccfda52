"""Controller refinement and Monte-Carlo validation of the robust bound.

The refined controller replays the abstract policy on the concrete model
with ``u = u_hat`` and drives the abstract state with coupled noise: the
concrete disturbance ``w`` and the shifted abstract draw ``w_hat`` come from a
maximal coupling of ``N(0, I)`` and ``N(gamma, I)``, ``gamma = F_ij (x - x_hat)``.

Two interchangeable kernels run the closed loop: a compiled one
(``_ckernel``) and a scalar Python one (``_pykernel``).  The compiled kernel
is used when importable unless ``LAYEREDSIM_BACKEND=python``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import _pykernel
from .dp import LayeredProblem, ValueIterationResult
from .model import LtiModel
from .simrel import weighted_norm

VERDICTS = {0: "horizon-exhausted", 1: "accepted", 2: "rejected"}


def _load_backends():
    found = {"python": _pykernel}
    try:
        from . import _ckernel
    except ImportError:
        pass
    else:
        found["compiled"] = _ckernel
    return found


BACKENDS = _load_backends()


def default_backend() -> str:
    forced = os.environ.get("LAYEREDSIM_BACKEND", "").strip().lower()
    if forced:
        if forced not in BACKENDS:
            raise RuntimeError(f"backend {forced!r} unavailable (have {sorted(BACKENDS)})")
        return forced
    return "compiled" if "compiled" in BACKENDS else "python"


def kernel(name: str | None = None):
    return BACKENDS[name or default_backend()]


# ---------------------------------------------------------------------------


def sample_coupled_noise(gamma, rng: np.random.Generator):
    """Maximal coupling draw: ``(w, w_hat, coupled)`` with ``w ~ N(0,I)``, ``w_hat ~ N(gamma,I)``."""
    gamma = [float(g) for g in np.atleast_1d(gamma)]
    if not all(math.isfinite(g) for g in gamma):
        raise ValueError("shift must be finite")
    w, wh, coupled = _pykernel.coupled_draw(gamma, rng)
    return np.array(w), np.array(wh), coupled


def coupling_failure_rate(gamma, draws: int, seed: int = 0, backend: str | None = None):
    """Empirical ``P(w != w_hat)`` and its standard error over ``draws`` couplings."""
    fails, *_ = kernel(backend).coupling_failures(np.atleast_1d(np.asarray(gamma, float)), draws, seed)
    p = fails / draws
    return p, math.sqrt(max(p * (1 - p), 1e-300) / draws)


def tv_gaussian_shift(norm_gamma: float) -> float:
    """Total variation between ``N(0, I)`` and ``N(gamma, I)``."""
    return math.erf(norm_gamma / (2 * math.sqrt(2)))


def check_relation_containment(x, x_hat, D, eps: float) -> bool:
    return weighted_norm(np.asarray(x, float) - np.asarray(x_hat, float), D) <= eps


# ---------------------------------------------------------------------------


@dataclass
class KernelData:
    """Flat arrays consumed by both closed-loop kernels."""

    n: int
    m: int
    p: int
    ny: int
    L: int
    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    D: np.ndarray
    F: np.ndarray          # (L, L, p, n)
    inputs: np.ndarray
    origin: np.ndarray
    widths: np.ndarray
    counts: np.ndarray
    strides: np.ndarray
    sink: int
    box_lo: np.ndarray
    box_hi: np.ndarray
    rlo: np.ndarray
    rhi: np.ndarray
    rloc: np.ndarray
    rhic: np.ndarray
    rletter: np.ndarray
    default_letter: int
    dfa_delta: np.ndarray
    q_init: int
    accepting: np.ndarray
    dead: np.ndarray
    presence: np.ndarray
    V: np.ndarray
    eps: np.ndarray
    policy_u: np.ndarray
    policy_s: np.ndarray


class RefinedController:
    """Concrete controller obtained from an abstract policy and shift matrices ``F_ij``.

    ``shifts`` maps 0-based layer pairs to ``F`` (``p x n``); pairs the policy
    never uses may be omitted.
    """

    def __init__(self, model: LtiModel, problem: LayeredProblem, result: ValueIterationResult,
                 shifts: dict, D):
        self.model = model
        self.problem = problem
        self.result = result
        self.D = np.atleast_2d(np.asarray(D, dtype=float))
        L = problem.num_layers
        F = np.zeros((L, L, model.noise_dim, model.n))
        for (i, j), Fij in shifts.items():
            F[i, j] = np.asarray(Fij, dtype=float).reshape(model.noise_dim, model.n)
        used = {(i, int(j)) for i in range(L) for j in np.unique(result.policy_s[:, :, i]) if j >= 0}
        # a zero budget forces F = 0, so only switches with delta > 0 need a matrix
        missing = sorted(pq for pq in used if pq not in shifts and problem.delta[pq] > 0)
        if missing:
            raise ValueError("no shift matrix for switches " + ", ".join(f"{i + 1}->{j + 1}" for i, j in missing))
        self.F = F
        self.data = self._pack()
        self._state = None
        self._t = 0

    def _pack(self) -> KernelData:
        pr, m = self.problem, self.model
        grid = pr.abstract.grid
        lab = pr.labeling
        dfa = pr.dfa
        ny = m.C.shape[0]
        R = len(lab.regions)
        rlo = np.zeros((R, ny))
        rhi = np.zeros((R, ny))
        rloc = np.zeros((R, ny), dtype=np.uint8)
        rhic = np.zeros((R, ny), dtype=np.uint8)
        rletter = np.zeros(R, dtype=np.int64)
        for r, reg in enumerate(lab.regions):
            rlo[r], rhi[r] = reg.lo, reg.hi
            rloc[r], rhic[r] = reg.lo_closed, reg.hi_closed
            rletter[r] = dfa.letter_index(reg.letter)
        return KernelData(
            n=m.n, m=m.m, p=m.noise_dim, ny=ny, L=pr.num_layers,
            A=m.A, B=m.B, Bw=m.Bw, C=m.C, D=self.D, F=self.F,
            inputs=np.atleast_2d(pr.abstract.inputs).astype(float),
            origin=grid.origin.astype(float), widths=grid.widths.astype(float),
            counts=grid.counts.astype(np.int64), strides=grid.strides.astype(np.int64),
            sink=int(grid.sink), box_lo=grid.box.lo, box_hi=grid.box.hi,
            rlo=rlo, rhi=rhi, rloc=rloc, rhic=rhic, rletter=rletter,
            default_letter=dfa.letter_index(lab.default_letter),
            dfa_delta=np.asarray(dfa.delta, dtype=np.int64), q_init=int(dfa.initial),
            accepting=dfa.accepting_mask().astype(np.uint8),
            dead=np.asarray(dfa.dead_states(), dtype=bool).astype(np.uint8),
            presence=pr.presence().astype(np.uint8),
            V=np.ascontiguousarray(self.result.V, dtype=float),
            eps=np.asarray(pr.epsilons, dtype=float),
            policy_u=self.result.policy_u.astype(np.int64),
            policy_s=self.result.policy_s.astype(np.int64),
        )

    # stateful single-trace interface

    def reset(self, x0) -> "TraceRecord":
        self._state = _pykernel.start(self.data, np.atleast_1d(np.asarray(x0, float)))
        self._t = 0
        return self._record(0)

    def _record(self, t: int) -> "TraceRecord":
        st = self._state
        u = None if st.u < 0 else tuple(float(v) for v in self.data.inputs[st.u])
        return TraceRecord(t, tuple(st.x), tuple(st.xh), st.q, st.i, u, st.coupled,
                           st.err <= self.data.eps[st.i], st.violated)

    @property
    def state(self):
        return self._state

    def step(self, rng: np.random.Generator) -> "TraceRecord":
        if self._state is None:
            raise RuntimeError("call reset(x0) first")
        _pykernel.advance(self.data, self._state, rng)
        self._t += 1
        return self._record(self._t)

    def trace(self, x0, rng: np.random.Generator, horizon: int) -> "SimulationTrace":
        rows = [self.reset(x0)]
        d = self.data
        verdict = "horizon-exhausted"
        for _ in range(horizon):
            q = self._state.q
            if d.accepting[q] or d.dead[q]:
                break
            rows.append(self.step(rng))
        q = self._state.q
        if d.accepting[q]:
            verdict = "accepted"
        elif self._state.violated:
            verdict = "relation-violated"
        elif d.dead[q]:
            verdict = "rejected"
        return SimulationTrace(rows, verdict)


def step_closed_loop(controller: RefinedController, rng: np.random.Generator):
    """Advance the controller's closed loop once; returns ``(x_plus, record)``."""
    rec = controller.step(rng)
    return np.array(rec.x), rec


@dataclass(frozen=True)
class TraceRecord:
    t: int
    x: tuple
    x_hat: tuple
    q: int
    layer: int
    u: tuple | None
    coupled: bool
    in_relation: bool
    violated: bool


@dataclass
class SimulationTrace:
    records: list
    verdict: str

    @property
    def accepted(self) -> bool:
        return self.verdict == "accepted"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "x_hat", "q", "layer", "u", "coupled", "in_relation"])
            for r in self.records:
                w.writerow([r.t, " ".join(repr(v) for v in r.x), " ".join(repr(v) for v in r.x_hat),
                            r.q, r.layer + 1, "" if r.u is None else " ".join(repr(v) for v in r.u),
                            int(r.coupled), int(r.in_relation)])
            w.writerow(["# verdict", self.verdict])


@dataclass(frozen=True)
class MonteCarloResult:
    p_hat: float
    ci_halfwidth: float
    runs: int
    horizon: int
    seed: int
    violated: int
    uncoupled_steps: int
    mean_steps: float

    @property
    def std_error(self) -> float:
        return math.sqrt(self.p_hat * (1 - self.p_hat) / self.runs)


def monte_carlo_satisfaction(controller: RefinedController, x0, runs: int = 10_000,
                             horizon: int = 200, seed: int = 0,
                             backend: str | None = None) -> MonteCarloResult:
    """Fraction of independent traces that reach an accepting DFA state within ``horizon``.

    Trace ``r`` draws from ``PCG64(SeedSequence(seed, spawn_key=(r,)))``, so
    the estimate is reproducible and identical across backends.
    """
    if runs < 1 or horizon < 1:
        raise ValueError("runs and horizon must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    verdict, steps, violated, unc = kernel(backend).simulate_batch(controller.data, x0, runs, horizon, seed)
    p = float(np.mean(verdict == _pykernel.ACCEPTED))
    half = 1.959963984540054 * math.sqrt(p * (1 - p) / runs)
    return MonteCarloResult(p, half, runs, horizon, seed, int(violated.sum()), int(unc.sum()),
                            float(steps.mean()))


SUMMARY_COLUMNS = ["x0", "robust_lower_bound", "p_hat", "ci_halfwidth", "runs", "horizon", "seed"]


def write_summary(path, rows) -> None:
    """``rows`` are ``(x0, bound, MonteCarloResult)`` triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for x0, bound, res in rows:
            w.writerow([" ".join(repr(float(v)) for v in np.atleast_1d(x0)), repr(float(bound)),
                        repr(res.p_hat), repr(res.ci_halfwidth), res.runs, res.horizon, res.seed])
