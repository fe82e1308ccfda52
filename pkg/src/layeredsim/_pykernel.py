"""Pure-Python closed-loop Monte-Carlo kernel.

Scalar reference for ``_ckernel.pyx``: both walk the same floating-point
operations in the same order and draw from the per-trace generator in the
same sequence, so a given seed yields identical traces on either backend.
"""

from __future__ import annotations

import math

import numpy as np

HORIZON, ACCEPTED, REJECTED = 0, 1, 2
_SNAP = 1e-9


def trace_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def coupled_draw(gamma, rng):
    """Maximal coupling of ``N(0, I)`` and ``N(gamma, I)``.

    Returns ``(w, w_hat, coupled)``; ``w_hat`` is the draw from ``N(gamma, I)``.
    """
    p = len(gamma)
    g2 = 0.0
    for e in range(p):
        g2 += gamma[e] * gamma[e]
    w = [rng.standard_normal() for _ in range(p)]
    dot = 0.0
    for e in range(p):
        dot += gamma[e] * w[e]
    u = rng.random()
    a = dot - 0.5 * g2
    if u <= math.exp(a if a < 0.0 else 0.0):
        return w, list(w), True
    while True:
        y = [gamma[e] + rng.standard_normal() for e in range(p)]
        dot = 0.0
        for e in range(p):
            dot += gamma[e] * y[e]
        u = rng.random()
        a = 0.5 * g2 - dot
        if u > math.exp(a if a < 0.0 else 0.0):
            return w, y, False


def cell_of(k, x, center) -> int:
    """Flat cell index of ``x`` (``k.sink`` outside); writes the center in place."""
    flat = 0
    for d in range(k.n):
        v = (x[d] - k.origin[d]) / k.widths[d]
        r = math.floor(v + 0.5) if math.isfinite(v) else v
        if abs(v - r) < _SNAP:
            v = r
        if not (v >= 0.0 and v <= k.counts[d]):
            return k.sink
        kd = min(int(math.floor(v)), int(k.counts[d]) - 1)
        flat += kd * int(k.strides[d])
        center[d] = k.origin[d] + (kd + 0.5) * k.widths[d]
    return flat


def letter_of(k, x) -> int:
    y = [0.0] * k.ny
    for a in range(k.ny):
        acc = 0.0
        for b in range(k.n):
            acc += k.C[a, b] * x[b]
        y[a] = acc
    for r in range(k.rlo.shape[0]):
        hit = True
        for d in range(k.ny):
            v, lo, hi = y[d], k.rlo[r, d], k.rhi[r, d]
            above = v > lo or (k.rloc[r, d] and v == lo)
            below = v < hi or (k.rhic[r, d] and v == hi)
            if not (above and below):
                hit = False
                break
        if hit:
            return int(k.rletter[r])
    return int(k.default_letter)


def dnorm(k, x, xh) -> float:
    acc = 0.0
    for a in range(k.n):
        for b in range(k.n):
            acc += (x[a] - xh[a]) * k.D[a, b] * (x[b] - xh[b])
    return math.sqrt(acc if acc > 0.0 else 0.0)


def select_layer(k, s, q, err) -> int:
    """Admissible layer with the highest value at ``(s, q)``; ties go deeper."""
    best, bestv = -1, -1.0
    for layer in range(k.L):
        if k.presence[s, q, layer] and err <= k.eps[layer]:
            v = k.V[s, q, layer]
            if v >= bestv:
                best, bestv = layer, v
    return best


def resync(k, x, xh):
    xc = [min(max(x[d], k.box_lo[d]), k.box_hi[d]) for d in range(k.n)]
    return cell_of(k, xc, xh)


class LoopState:
    """Mutable closed-loop state: concrete ``x``, abstract center ``xh`` (cell ``s``), ``q``, layer ``i``."""

    __slots__ = ("x", "xh", "s", "q", "i", "err", "violated", "uncoupled", "coupled", "u")

    def __init__(self, n):
        self.x = [0.0] * n
        self.xh = [0.0] * n
        self.s = self.q = self.i = 0
        self.err = 0.0
        self.violated = False
        self.uncoupled = 0
        self.coupled = True
        self.u = -1


def start(k, x0) -> LoopState:
    st = LoopState(k.n)
    st.x = [float(v) for v in x0]
    st.s = cell_of(k, st.x, st.xh)
    st.q = int(k.dfa_delta[k.q_init, letter_of(k, st.x)])
    if st.s == k.sink:
        st.violated = True
        st.s = resync(k, st.x, st.xh)
    st.err = dnorm(k, st.x, st.xh)
    st.i = select_layer(k, st.s, st.q, st.err)
    if st.i < 0:
        st.violated = True
        st.i = 0
    return st


def advance(k, st: LoopState, rng) -> None:
    """One closed-loop transition under the refined controller."""
    n = k.n
    x, xh, s, q, i = st.x, st.xh, st.s, st.q, st.i
    ku = int(k.policy_u[s, q, i])
    j = int(k.policy_s[s, q, i])
    if ku < 0:
        ku, j = 0, i
    st.u = ku
    gamma = [0.0] * k.p
    for e in range(k.p):
        acc = 0.0
        for b in range(n):
            acc += k.F[i, j, e, b] * (x[b] - xh[b])
        gamma[e] = acc
    w, wh, st.coupled = coupled_draw(gamma, rng)
    if not st.coupled:
        st.uncoupled += 1
    xn = [0.0] * n
    mh = [0.0] * n
    for a in range(n):
        acc = 0.0
        acch = 0.0
        for b in range(n):
            acc += k.A[a, b] * x[b]
            acch += k.A[a, b] * xh[b]
        for c in range(k.m):
            acc += k.B[a, c] * k.inputs[ku, c]
            acch += k.B[a, c] * k.inputs[ku, c]
        for e in range(k.p):
            acc += k.Bw[a, e] * w[e]
            acch += k.Bw[a, e] * (wh[e] - gamma[e])
        xn[a] = acc
        mh[a] = acch
    st.x = x = xn
    st.q = q = int(k.dfa_delta[q, letter_of(k, x)])
    s = cell_of(k, mh, xh)
    if s == k.sink:
        st.violated = True
        s = resync(k, x, xh)
    err = dnorm(k, x, xh)
    i = select_layer(k, s, q, err)
    if i < 0:
        st.violated = True
        s = resync(k, x, xh)
        err = dnorm(k, x, xh)
        i = select_layer(k, s, q, err)
        if i < 0:
            i = 0
    st.s, st.i, st.err = s, i, err


def run_trace(k, x0, rng, horizon: int):
    """Simulate one trace; returns ``(verdict, steps, violated, uncoupled)``."""
    st = start(k, x0)
    for t in range(horizon + 1):
        if k.accepting[st.q]:
            return ACCEPTED, t, st.violated, st.uncoupled
        if k.dead[st.q]:
            return REJECTED, t, st.violated, st.uncoupled
        if t == horizon:
            break
        advance(k, st, rng)
    return HORIZON, horizon, st.violated, st.uncoupled


def simulate_batch(k, x0, runs: int, horizon: int, seed: int, first: int = 0):
    verdict = np.zeros(runs, dtype=np.int64)
    steps = np.zeros(runs, dtype=np.int64)
    violated = np.zeros(runs, dtype=np.uint8)
    uncoupled = np.zeros(runs, dtype=np.int64)
    for r in range(runs):
        rng = trace_rng(seed, first + r)
        verdict[r], steps[r], violated[r], uncoupled[r] = run_trace(k, x0, rng, horizon)
    return verdict, steps, violated, uncoupled


def coupling_failures(gamma, draws: int, seed: int):
    """Uncoupled count, plus sums and squares of ``w`` and ``w_hat`` over ``draws``."""
    gamma = [float(g) for g in gamma]
    p = len(gamma)
    rng = np.random.Generator(np.random.PCG64(seed))
    fails = 0
    sw = np.zeros(p)
    sww = np.zeros(p)
    sh = np.zeros(p)
    shh = np.zeros(p)
    for _ in range(draws):
        w, wh, c = coupled_draw(gamma, rng)
        if not c:
            fails += 1
        for e in range(p):
            sw[e] += w[e]
            sww[e] += w[e] * w[e]
            sh[e] += wh[e]
            shh[e] += wh[e] * wh[e]
    return fails, sw, sww, sh, shh
