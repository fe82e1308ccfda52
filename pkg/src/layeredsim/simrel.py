"""Multi-layered simulation relations for LTI pairs.

For weighted-norm relations ``||x - x_hat||_D <= eps_i`` this module checks
the output-weighting condition ``C^T C <= D``, maps a deviation ``delta`` to
the admissible noise-shift radius ``r``, checks the input-bound and
contraction matrix inequalities for a switch ``i -> j`` and searches their
parameters ``(lambda, F)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Rational approximation of the standard-normal quantile (P. J. Acklam),
# relative error below 1.2e-9 before the Halley correction.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

PSD_TOL = 1e-9


class DomainError(ValueError):
    pass


class UnsupportedSearchError(ValueError):
    pass


class IncompleteRelationError(ValueError):
    pass


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard-normal distribution function."""
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise DomainError(f"probability {p} outside [0, 1]")
    if p > 0.5:
        return -normal_quantile(1.0 - p)  # 1 - p is exact here; keeps the Halley step accurate
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        t = q * q
        x = (((((_A[0] * t + _A[1]) * t + _A[2]) * t + _A[3]) * t + _A[4]) * t + _A[5]) * q / \
            (((((_B[0] * t + _B[1]) * t + _B[2]) * t + _B[3]) * t + _B[4]) * t + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    # One Halley step against the erfc-based CDF brings the error to ~1e-15.
    e = normal_cdf(x) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def radius_from_delta(delta: float) -> float:
    """Shift radius ``r`` with ``TV(N(0, I), N(gamma, I)) = delta`` at ``||gamma|| = r``."""
    if not (0.0 <= delta < 1.0):
        raise DomainError(f"delta must lie in [0, 1), got {delta}")
    if delta == 0.0:
        return 0.0
    return abs(2.0 * normal_quantile((1.0 - delta) / 2.0))


def delta_from_radius(r: float) -> float:
    return 2.0 * normal_cdf(r / 2.0) - 1.0


# ---------------------------------------------------------------------------


def _min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh((M + M.T) / 2)[0])


def check_weighting(C, D) -> bool:
    """``D`` positive definite and ``C^T C <= D``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if D.shape[0] != D.shape[1] or not np.allclose(D, D.T, rtol=0, atol=1e-12 * max(1.0, np.abs(D).max())):
        raise ValueError("weighting matrix D must be symmetric")
    if C.shape[1] != D.shape[0]:
        raise ValueError("C and D dimensions disagree")
    return _min_eig(D) > 0 and _min_eig(D - C.T @ C) >= -1e-10


def default_weighting(C, rho: float = 0.0) -> np.ndarray:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return C.T @ C + rho * np.eye(C.shape[1])


def weighted_norm(x, D) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return math.sqrt(max(float(x @ np.atleast_2d(D) @ x), 0.0))


def input_bound_matrix(D, eps_i, F, r):
    D = np.atleast_2d(D)
    F = np.atleast_2d(F)
    p = F.shape[0]
    return np.block([[D / eps_i**2, F.T], [F, r**2 * np.eye(p)]])


def contraction_matrix(D, eps_i, alpha, lam, F, beta, A, Bw):
    D, A, Bw, F = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (D, A, Bw, F))
    n = D.shape[0]
    beta = np.asarray(beta, dtype=float).reshape(n, 1)
    K = D @ (A + Bw @ F)
    Db = D @ beta
    zero = np.zeros((n, 1))
    return np.block([
        [lam * D, zero, K.T],
        [zero.T, np.array([[(alpha**2 - lam) * eps_i**2]]), Db.T],
        [K, Db, D],
    ])


def lmi_margin(D, eps_i, alpha, r, lam, F, vertices, A, Bw) -> float:
    """Smallest eigenvalue over both inequalities (and every vertex)."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if r == 0.0:
        ib = 0.0 if not np.any(F) else -math.inf
    else:
        ib = _min_eig(input_bound_matrix(D, eps_i, F, r))
    ct = min(_min_eig(contraction_matrix(D, eps_i, alpha, lam, F, b, A, Bw)) for b in vertices)
    return min(ib, ct)


def check_lmi(D, eps_i, alpha, r, lam, F, vertices, A, Bw, tol: float = PSD_TOL) -> bool:
    """True iff the input-bound and contraction inequalities hold (PSD up to ``-tol``).

    With ``r == 0`` the input bound forces ``F`` to be exactly zero.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return lmi_margin(D, eps_i, alpha, r, lam, F, vertices, A, Bw) >= -tol


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    index: int
    epsilon: float
    coverage: np.ndarray | None = None  # boolean mask over abstract states; None = everywhere

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("layer precision must be positive")


@dataclass(frozen=True)
class LmiCertificate:
    i: int
    j: int
    lam: float
    F: np.ndarray
    r: float
    feasible: bool
    margin: float = float("nan")

    def line(self) -> str:
        F = " ".join(repr(float(v)) for v in np.ravel(self.F))
        return f"{self.i} {self.j} {self.lam!r} {F} {self.r!r} {int(self.feasible)}"


@dataclass
class MultiLayerRelation:
    """Nested weighted-norm relations sharing one matrix ``D``.

    ``delta[i][j]`` is the deviation budget for a switch from layer ``i`` to
    ``j`` (0-based); unused pairs may be ``nan``.
    """

    D: np.ndarray
    layers: list
    delta: np.ndarray
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.delta = np.atleast_2d(np.asarray(self.delta, dtype=float))
        L = len(self.layers)
        if self.delta.shape != (L, L):
            raise ValueError(f"delta must be {L}x{L}")
        eps = self.epsilons
        if any(a < b for a, b in zip(eps, eps[1:])):
            raise ValueError("layer precisions must be nonincreasing")
        if _min_eig(self.D) <= 0 or not np.allclose(self.D, self.D.T):
            raise ValueError("D must be symmetric positive definite")
        finite = self.delta[np.isfinite(self.delta)]
        if np.any((finite < 0) | (finite > 1)):
            raise ValueError("delta entries must lie in [0, 1]")
        self.alpha = np.array([[ej / ei for ej in eps] for ei in eps])

    @property
    def epsilons(self) -> list[float]:
        return [layer.epsilon for layer in self.layers]

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def required_pairs(num_layers: int, full: bool = False) -> list[tuple[int, int]]:
    """Switches that need certificates (0-based); the pruned scheme drops downgrades."""
    if full:
        return [(i, j) for i in range(num_layers) for j in range(num_layers)]
    return [(i, j) for i in range(num_layers) for j in range(i, num_layers)]


class _LmiProblem:
    """Precomputed blocks for repeated margin evaluations of one switch."""

    def __init__(self, D, eps_i, alpha, r, vertices, A, Bw):
        self.D, self.A, self.Bw = D, A, Bw
        self.eps_i, self.alpha, self.r = eps_i, alpha, r
        n, p = A.shape[0], Bw.shape[1]
        self.n, self.p = n, p
        V = len(vertices)
        M = np.zeros((V, 2 * n + 1, 2 * n + 1))
        Db = vertices @ D.T  # rows are (D beta_l)^T
        M[:, n, n + 1:] = Db
        M[:, n + 1:, n] = Db
        M[:, n + 1:, n + 1:] = D
        self.base = M
        ib = np.zeros((n + p, n + p))
        ib[:n, :n] = D / eps_i**2
        ib[n:, n:] = r**2 * np.eye(p)
        self.ib = ib

    def margin(self, lam, F) -> float:
        n = self.n
        if self.r == 0.0:
            ib = 0.0 if not np.any(F) else -math.inf
        else:
            m = self.ib.copy()
            m[n:, :n] = F
            m[:n, n:] = F.T
            ib = float(np.linalg.eigvalsh(m)[0])
        M = self.base.copy()
        K = self.D @ (self.A + self.Bw @ F)
        M[:, :n, :n] = lam * self.D
        M[:, n, n] = (self.alpha**2 - lam) * self.eps_i**2
        M[:, n + 1:, :n] = K
        M[:, :n, n + 1:] = K.T
        ct = float(np.linalg.eigvalsh(M)[:, 0].min())
        return min(ib, ct)

    def best_lambda(self, F, n_grid: int = 24, iters: int = 60):
        top = self.alpha**2
        pts = np.append(np.geomspace(1e-6, top, n_grid + 1)[:-1], top * (1 - 1e-12))
        return _grid_then_refine(lambda lam: self.margin(lam, F), pts, iters)


def _golden_max(f, a: float, b: float, iters: int = 60):
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
        if b - a < 1e-12 * max(1.0, abs(a)):
            break
    return (c, fc) if fc >= fd else (d, fd)


def _grid_then_refine(f, points: np.ndarray, iters: int = 60):
    """Maximize a concave ``f`` sampled on sorted ``points``, then golden-section refine."""
    vals = [f(x) for x in points]
    k = int(np.argmax(vals))
    best_x, best_v = float(points[k]), float(vals[k])
    lo = points[max(k - 1, 0)]
    hi = points[min(k + 1, len(points) - 1)]
    if hi > lo:
        x, v = _golden_max(f, float(lo), float(hi), iters)
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v


def search_certificate(D, eps_i: float, eps_j: float, delta: float, vertices, A, Bw,
                       rel_tol: float = 0.0, n_grid: int = 201, max_sweeps: int = 20,
                       pair: tuple[int, int] = (0, 0)) -> LmiCertificate:
    """Search ``(lambda, F)`` satisfying both inequalities for the switch ``i -> j``.

    ``lambda`` is scanned on a log grid in ``(1e-6, alpha^2)``; each entry of
    ``F`` on ``n_grid`` points inside the input-bound box, cyclically, with
    golden-section refinement (the margin is jointly concave in both).
    ``rel_tol`` inflates the contraction factor to ``alpha (1 + rel_tol)``,
    which admits boundary-tight configurations.  Returns as soon as a feasible
    point is found.
    """
    D, A, Bw = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (D, A, Bw))
    vertices = np.atleast_2d(np.asarray(vertices, dtype=float))
    n, p = A.shape[0], Bw.shape[1]
    r = radius_from_delta(delta)
    alpha = eps_j / eps_i * (1.0 + rel_tol)
    prob = _LmiProblem(D, eps_i, alpha, r, vertices, A, Bw)
    F = np.zeros((p, n))
    lam, margin = prob.best_lambda(F)
    if margin >= -PSD_TOL or r == 0.0:
        return LmiCertificate(pair[0], pair[1], lam, F, r, margin >= -PSD_TOL, margin)
    if p * n > 4:
        raise UnsupportedSearchError(
            f"shift matrix has {p * n} entries; supply F explicitly (search supports at most 4)")
    bounds = r / eps_i * np.sqrt(np.diag(D))  # |F[k, l]| <= r/eps * sqrt(D[l, l])
    for _ in range(max_sweeps if p * n > 1 else 1):
        improved = False
        for k in range(p):
            for l in range(n):
                def f(t, k=k, l=l):
                    Ft = F.copy()
                    Ft[k, l] = t
                    return prob.best_lambda(Ft, iters=30)[1]

                t, v = _grid_then_refine(f, np.linspace(-bounds[l], bounds[l], n_grid))
                if v > margin + 1e-15:
                    F = F.copy()
                    F[k, l] = t
                    lam, margin = prob.best_lambda(F)
                    improved = True
                if margin >= -PSD_TOL:
                    return LmiCertificate(pair[0], pair[1], lam, F, r, True, margin)
        if not improved:
            break
    return LmiCertificate(pair[0], pair[1], lam, F, r, False, margin)


def minimal_delta(D, eps_i, eps_j, vertices, A, Bw, rel_tol: float = 0.0, tol: float = 1e-6):
    """Smallest ``delta`` (by bisection) for which the switch ``i -> j`` is certifiable."""
    if search_certificate(D, eps_i, eps_j, 0.0, vertices, A, Bw, rel_tol).feasible:
        return 0.0
    lo, hi = 0.0, 1.0 - 1e-12
    if not search_certificate(D, eps_i, eps_j, hi, vertices, A, Bw, rel_tol).feasible:
        return math.nan
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if search_certificate(D, eps_i, eps_j, mid, vertices, A, Bw, rel_tol).feasible:
            hi = mid
        else:
            lo = mid
    return hi


def certify_relation(relation: MultiLayerRelation, vertices, A, Bw, rel_tol: float = 0.0,
                     full: bool = False, supplied: dict | None = None) -> dict:
    """Certificates for every required pair, keyed by 0-based ``(i, j)``.

    ``supplied`` maps pairs to user-given ``(lambda, F)``; those are only checked.
    """
    certs = {}
    eps = relation.epsilons
    for i, j in required_pairs(relation.num_layers, full):
        delta = float(relation.delta[i, j])
        if not math.isfinite(delta):
            raise IncompleteRelationError(f"delta for switch {i + 1}->{j + 1} is undefined")
        if supplied and (i, j) in supplied:
            lam, F = supplied[(i, j)]
            r = radius_from_delta(delta)
            alpha = eps[j] / eps[i] * (1 + rel_tol)
            F = np.atleast_2d(F)
            margin = lmi_margin(relation.D, eps[i], alpha, r, lam, F, vertices, A, Bw)
            certs[(i, j)] = LmiCertificate(i, j, lam, F, r, margin >= -PSD_TOL, margin)
        else:
            certs[(i, j)] = search_certificate(relation.D, eps[i], eps[j], delta, vertices, A, Bw,
                                               rel_tol=rel_tol, pair=(i, j))
    return certs


@dataclass
class ValidationReport:
    weighting_ok: bool
    infeasible: list
    initial_layers: list
    valid: bool

    def __str__(self):
        lines = [f"weighting C^T C <= D: {'ok' if self.weighting_ok else 'FAILED'}"]
        if self.infeasible:
            lines.append("infeasible switches: " + ", ".join(f"{i + 1}->{j + 1}" for i, j in self.infeasible))
        lines.append("initial layers: " + (", ".join(str(i + 1) for i in self.initial_layers) or "none"))
        lines.append("verdict: " + ("simulated (multi-layered)" if self.valid else "NOT certified"))
        return "\n".join(lines)


def validate_multilayer(relation: MultiLayerRelation, certificates: dict, C, x0, x_hat0,
                        full: bool = False) -> ValidationReport:
    missing = [pq for pq in required_pairs(relation.num_layers, full) if pq not in certificates]
    if missing:
        raise IncompleteRelationError(
            "missing certificates for " + ", ".join(f"{i + 1}->{j + 1}" for i, j in missing))
    weighting_ok = check_weighting(C, relation.D)
    infeasible = [pq for pq in required_pairs(relation.num_layers, full) if not certificates[pq].feasible]
    err = weighted_norm(np.asarray(x0, float) - np.asarray(x_hat0, float), relation.D)
    initial = [i for i, e in enumerate(relation.epsilons) if err <= e]
    return ValidationReport(weighting_ok, infeasible, initial,
                            weighting_ok and not infeasible and bool(initial))


# ---------------------------------------------------------------------------
# Certificate file: "i j lambda F... r feasible" per line, 1-based layers.


def write_certificates(path, certificates: dict) -> None:
    certs = [certificates[k] for k in sorted(certificates)]
    shape = np.atleast_2d(certs[0].F).shape if certs else (1, 1)
    with open(path, "w") as fh:
        fh.write("# i j lambda F(row-major) r feasible\n")
        fh.write(f"# F shape: {shape[0]} {shape[1]}\n")
        for c in certs:
            fh.write(f"{c.i + 1} {c.j + 1} {c.lam!r} "
                     + " ".join(repr(float(v)) for v in np.ravel(c.F))
                     + f" {c.r!r} {int(c.feasible)}\n")


def read_certificates(path) -> dict:
    shape = None
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line.startswith("#"):
                if "F shape:" in line:
                    shape = tuple(int(v) for v in line.split(":", 1)[1].split())
                continue
            if not line:
                continue
            tok = line.split()
            if len(tok) < 6:
                raise ValueError(f"{path}:{lineno}: expected 'i j lambda F... r feasible'")
            i, j = int(tok[0]) - 1, int(tok[1]) - 1
            F = np.array([float(v) for v in tok[3:-2]])
            F = F.reshape(shape) if shape else F.reshape(1, -1)
            out[(i, j)] = LmiCertificate(i, j, float(tok[2]), F, float(tok[-2]),
                                         tok[-1] in ("1", "true", "True"))
    return out
