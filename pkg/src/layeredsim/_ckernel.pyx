# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled closed-loop Monte-Carlo kernel; operation-for-operation twin of _pykernel."""

import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport exp, floor, fabs, sqrt, isfinite
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal

cnp.import_array()

cdef enum:
    MAXD = 16

cdef double SNAP = 1e-9


cdef struct Kern:
    int n, m, p, ny, L, R, nl
    long sink
    long q_init
    long default_letter
    double *A
    double *B
    double *Bw
    double *C
    double *D
    double *F
    double *inputs
    double *origin
    double *widths
    long *counts
    long *strides
    double *box_lo
    double *box_hi
    double *rlo
    double *rhi
    unsigned char *rloc
    unsigned char *rhic
    long *rletter
    long *dfa_delta
    unsigned char *accepting
    unsigned char *dead
    unsigned char *presence
    double *V
    double *eps
    long *policy_u
    long *policy_s
    long nq


cdef inline bint coupled_draw(int p, double *gamma, double *w, double *wh, bitgen_t *bg) nogil:
    cdef double g2 = 0.0, dot = 0.0, u, a
    cdef int e
    for e in range(p):
        g2 += gamma[e] * gamma[e]
    for e in range(p):
        w[e] = random_standard_normal(bg)
    for e in range(p):
        dot += gamma[e] * w[e]
    u = bg.next_double(bg.state)
    a = dot - 0.5 * g2
    if u <= exp(a if a < 0.0 else 0.0):
        for e in range(p):
            wh[e] = w[e]
        return True
    while True:
        for e in range(p):
            wh[e] = gamma[e] + random_standard_normal(bg)
        dot = 0.0
        for e in range(p):
            dot += gamma[e] * wh[e]
        u = bg.next_double(bg.state)
        a = 0.5 * g2 - dot
        if u > exp(a if a < 0.0 else 0.0):
            return False


cdef inline long cell_of(Kern *k, double *x, double *center) nogil:
    cdef long flat = 0, kd
    cdef double v, r
    cdef int d
    for d in range(k.n):
        v = (x[d] - k.origin[d]) / k.widths[d]
        r = floor(v + 0.5) if isfinite(v) else v
        if fabs(v - r) < SNAP:
            v = r
        if not (v >= 0.0 and v <= k.counts[d]):
            return k.sink
        kd = <long>floor(v)
        if kd > k.counts[d] - 1:
            kd = k.counts[d] - 1
        flat += kd * k.strides[d]
        center[d] = k.origin[d] + (kd + 0.5) * k.widths[d]
    return flat


cdef inline long letter_of(Kern *k, double *x) nogil:
    cdef double y[MAXD]
    cdef double acc, v, lo, hi
    cdef int a, b, r, d
    cdef bint hit, above, below
    for a in range(k.ny):
        acc = 0.0
        for b in range(k.n):
            acc += k.C[a * k.n + b] * x[b]
        y[a] = acc
    for r in range(k.R):
        hit = True
        for d in range(k.ny):
            v = y[d]
            lo = k.rlo[r * k.ny + d]
            hi = k.rhi[r * k.ny + d]
            above = v > lo or (k.rloc[r * k.ny + d] and v == lo)
            below = v < hi or (k.rhic[r * k.ny + d] and v == hi)
            if not (above and below):
                hit = False
                break
        if hit:
            return k.rletter[r]
    return k.default_letter


cdef inline double dnorm(Kern *k, double *x, double *xh) nogil:
    cdef double acc = 0.0
    cdef int a, b
    for a in range(k.n):
        for b in range(k.n):
            acc += (x[a] - xh[a]) * k.D[a * k.n + b] * (x[b] - xh[b])
    return sqrt(acc if acc > 0.0 else 0.0)


cdef inline int select_layer(Kern *k, long s, long q, double err) nogil:
    cdef int best = -1, layer
    cdef double bestv = -1.0, v
    cdef long base = (s * k.nq + q) * k.L
    for layer in range(k.L):
        if k.presence[base + layer] and err <= k.eps[layer]:
            v = k.V[base + layer]
            if v >= bestv:
                best = layer
                bestv = v
    return best


cdef inline long resync(Kern *k, double *x, double *xh) nogil:
    cdef double xc[MAXD]
    cdef int d
    for d in range(k.n):
        xc[d] = x[d]
        if xc[d] < k.box_lo[d]:
            xc[d] = k.box_lo[d]
        if xc[d] > k.box_hi[d]:
            xc[d] = k.box_hi[d]
    return cell_of(k, xc, xh)


cdef void run_trace(Kern *k, double *x0, bitgen_t *bg, long horizon,
                    long *verdict, long *steps, unsigned char *violated, long *uncoupled) nogil:
    cdef double x[MAXD]
    cdef double xh[MAXD]
    cdef double xn[MAXD]
    cdef double mh[MAXD]
    cdef double gamma[MAXD]
    cdef double w[MAXD]
    cdef double wh[MAXD]
    cdef int n = k.n, a, b, c, e, i, j
    cdef long s, q, t, ku, base
    cdef double err, acc, acch
    cdef bint viol = False, coupled
    cdef long nunc = 0
    for a in range(n):
        x[a] = x0[a]
        xh[a] = 0.0
    s = cell_of(k, x, xh)
    q = k.dfa_delta[k.q_init * k.nl + letter_of(k, x)]
    if s == k.sink:
        viol = True
        s = resync(k, x, xh)
    err = dnorm(k, x, xh)
    i = select_layer(k, s, q, err)
    if i < 0:
        viol = True
        i = 0
    for t in range(horizon + 1):
        if k.accepting[q]:
            verdict[0] = 1
            steps[0] = t
            violated[0] = viol
            uncoupled[0] = nunc
            return
        if k.dead[q]:
            verdict[0] = 2
            steps[0] = t
            violated[0] = viol
            uncoupled[0] = nunc
            return
        if t == horizon:
            break
        base = (s * k.nq + q) * k.L + i
        ku = k.policy_u[base]
        j = <int>k.policy_s[base]
        if ku < 0:
            ku = 0
            j = i
        for e in range(k.p):
            acc = 0.0
            for b in range(n):
                acc += k.F[((i * k.L + j) * k.p + e) * n + b] * (x[b] - xh[b])
            gamma[e] = acc
        coupled = coupled_draw(k.p, gamma, w, wh, bg)
        if not coupled:
            nunc += 1
        for a in range(n):
            acc = 0.0
            acch = 0.0
            for b in range(n):
                acc += k.A[a * n + b] * x[b]
                acch += k.A[a * n + b] * xh[b]
            for c in range(k.m):
                acc += k.B[a * k.m + c] * k.inputs[ku * k.m + c]
                acch += k.B[a * k.m + c] * k.inputs[ku * k.m + c]
            for e in range(k.p):
                acc += k.Bw[a * k.p + e] * w[e]
                acch += k.Bw[a * k.p + e] * (wh[e] - gamma[e])
            xn[a] = acc
            mh[a] = acch
        for a in range(n):
            x[a] = xn[a]
        q = k.dfa_delta[q * k.nl + letter_of(k, x)]
        s = cell_of(k, mh, xh)
        if s == k.sink:
            viol = True
            s = resync(k, x, xh)
        err = dnorm(k, x, xh)
        i = select_layer(k, s, q, err)
        if i < 0:
            viol = True
            s = resync(k, x, xh)
            err = dnorm(k, x, xh)
            i = select_layer(k, s, q, err)
            if i < 0:
                i = 0
    verdict[0] = 0
    steps[0] = horizon
    violated[0] = viol
    uncoupled[0] = nunc


cdef double *dptr(cnp.ndarray arr):
    return <double *>cnp.PyArray_DATA(arr)


cdef long *lptr(cnp.ndarray arr):
    return <long *>cnp.PyArray_DATA(arr)


cdef unsigned char *bptr(cnp.ndarray arr):
    return <unsigned char *>cnp.PyArray_DATA(arr)


def _c_double(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _c_long(a):
    return np.ascontiguousarray(a, dtype=np.int_)


def _c_bool(a):
    return np.ascontiguousarray(a, dtype=np.uint8)


def simulate_batch(k, x0, long runs, long horizon, seed, long first=0):
    if k.n > MAXD or k.p > MAXD or k.ny > MAXD:
        raise ValueError(f"compiled kernel supports at most {MAXD} dimensions")
    keep = {}
    for name in ("A", "B", "Bw", "C", "D", "F", "inputs", "origin", "widths", "box_lo", "box_hi",
                 "rlo", "rhi", "V", "eps"):
        keep[name] = _c_double(getattr(k, name))
    for name in ("counts", "strides", "rletter", "dfa_delta", "policy_u", "policy_s"):
        keep[name] = _c_long(getattr(k, name))
    for name in ("rloc", "rhic", "accepting", "dead", "presence"):
        keep[name] = _c_bool(getattr(k, name))
    cdef Kern kk
    kk.n, kk.m, kk.p, kk.ny, kk.L = k.n, k.m, k.p, k.ny, k.L
    kk.R = keep["rlo"].shape[0]
    kk.nl = keep["dfa_delta"].shape[1]
    kk.nq = keep["dfa_delta"].shape[0]
    kk.sink, kk.q_init, kk.default_letter = k.sink, k.q_init, k.default_letter
    kk.A = dptr(keep["A"]); kk.B = dptr(keep["B"]); kk.Bw = dptr(keep["Bw"])
    kk.C = dptr(keep["C"]); kk.D = dptr(keep["D"]); kk.F = dptr(keep["F"])
    kk.inputs = dptr(keep["inputs"]); kk.origin = dptr(keep["origin"])
    kk.widths = dptr(keep["widths"]); kk.box_lo = dptr(keep["box_lo"])
    kk.box_hi = dptr(keep["box_hi"]); kk.rlo = dptr(keep["rlo"]); kk.rhi = dptr(keep["rhi"])
    kk.V = dptr(keep["V"]); kk.eps = dptr(keep["eps"])
    kk.counts = lptr(keep["counts"]); kk.strides = lptr(keep["strides"])
    kk.rletter = lptr(keep["rletter"]); kk.dfa_delta = lptr(keep["dfa_delta"])
    kk.policy_u = lptr(keep["policy_u"]); kk.policy_s = lptr(keep["policy_s"])
    kk.rloc = bptr(keep["rloc"]); kk.rhic = bptr(keep["rhic"])
    kk.accepting = bptr(keep["accepting"]); kk.dead = bptr(keep["dead"])
    kk.presence = bptr(keep["presence"])

    cdef cnp.ndarray x0a = _c_double(x0)
    cdef cnp.ndarray verdict = np.zeros(runs, dtype=np.int_)
    cdef cnp.ndarray steps = np.zeros(runs, dtype=np.int_)
    cdef cnp.ndarray violated = np.zeros(runs, dtype=np.uint8)
    cdef cnp.ndarray uncoupled = np.zeros(runs, dtype=np.int_)
    cdef long r
    cdef bitgen_t *bg
    for r in range(runs):
        bit = np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(first + r,)))
        bg = <bitgen_t *>PyCapsule_GetPointer(bit.capsule, "BitGenerator")
        run_trace(&kk, dptr(x0a), bg, horizon, lptr(verdict) + r, lptr(steps) + r,
                  bptr(violated) + r, lptr(uncoupled) + r)
    return (verdict.astype(np.int64), steps.astype(np.int64), violated, uncoupled.astype(np.int64))


def coupling_failures(gamma, long draws, seed):
    cdef cnp.ndarray g = _c_double(np.atleast_1d(gamma))
    cdef int p = g.shape[0], e
    if p > MAXD:
        raise ValueError(f"compiled kernel supports at most {MAXD} dimensions")
    cdef double w[MAXD]
    cdef double wh[MAXD]
    sw = np.zeros(p); sww = np.zeros(p); sh = np.zeros(p); shh = np.zeros(p)
    cdef double[::1] vsw = sw, vsww = sww, vsh = sh, vshh = shh
    bit = np.random.PCG64(seed)
    cdef bitgen_t *bg = <bitgen_t *>PyCapsule_GetPointer(bit.capsule, "BitGenerator")
    cdef long fails = 0, t
    cdef double *gp = dptr(g)
    with nogil:
        for t in range(draws):
            if not coupled_draw(p, gp, w, wh, bg):
                fails += 1
            for e in range(p):
                vsw[e] += w[e]
                vsww[e] += w[e] * w[e]
                vsh[e] += wh[e]
                vshh[e] += wh[e] * wh[e]
    return fails, sw, sww, sh, shh
