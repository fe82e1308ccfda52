"""End-to-end stages shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .abstraction import AbstractModel, build_partition, load_or_compute
from .config import RunConfig
from .dp import (LayeredProblem, StrategyError, SwitchingStrategy, ValueIterationResult,
                 robust_satisfaction, satisfaction_curve, value_iteration)
from .model import Box, Labeling, LtiModel, Region
from .refine import RefinedController, monte_carlo_satisfaction, write_summary
from .scltl import Dfa, formula_to_dfa, load_dfa, parse_scltl
from .simrel import (MultiLayerRelation, LayerSpec, certify_relation, check_weighting,
                     default_weighting, delta_from_radius, minimal_delta, read_certificates, required_pairs,
                     validate_multilayer, write_certificates)

log = logging.getLogger(__name__)

TRANSITIONS = "transitions.npz"
CERTIFICATES = "certificates.txt"
SYNTHESIS = "synthesis.npz"
VALUES = "values.csv"
CURVE = "curve.csv"
SUMMARY = "simulation_summary.csv"


class InfeasibleRelation(RuntimeError):
    pass


def build_model(cfg: RunConfig) -> LtiModel:
    Bw = LtiModel.scale_noise(cfg.Bw, cfg.noise_level, cfg.noise_convention)
    return LtiModel(cfg.A, cfg.B, Bw, cfg.C, Box.from_intervals(cfg.state_box),
                    Box.from_intervals(cfg.input_box))


def build_labeling(cfg: RunConfig) -> Labeling:
    regions = [Region(r["lo"], r["hi"], r["letter"], r["lo_closed"], r["hi_closed"]) for r in cfg.regions]
    return Labeling(tuple(cfg.props), tuple(regions), frozenset(cfg.default_letter))


def build_dfa(cfg: RunConfig) -> Dfa:
    if cfg.dfa_file is not None:
        dfa = load_dfa(cfg.dfa_file)
        if tuple(dfa.props) != tuple(cfg.props):
            raise ValueError(f"DFA propositions {list(dfa.props)} differ from labeling {cfg.props}")
        return dfa
    return formula_to_dfa(parse_scltl(cfg.formula, cfg.props), tuple(cfg.props))


def weighting(cfg: RunConfig, model: LtiModel) -> np.ndarray:
    return cfg.D if cfg.D is not None else default_weighting(model.C, cfg.rho)


def abstraction(cfg: RunConfig, model: LtiModel, out: Path | None = None) -> tuple[AbstractModel, bool]:
    grid = build_partition(model.state_box, cfg.cell_width)
    cache = None if out is None else Path(out) / TRANSITIONS
    return load_or_compute(model, grid, cfg.inputs, cache, mc_samples=cfg.mc_samples)


def _interval_mask(points: np.ndarray, box: np.ndarray, closed: tuple) -> np.ndarray:
    lo, hi = box[:, 0], box[:, 1]
    above = points >= lo if closed[0] else points > lo
    below = points <= hi if closed[1] else points < hi
    return np.all(above & below, axis=1)


def coverage_masks(cfg: RunConfig, grid) -> np.ndarray:
    centers = grid.centers()
    masks = []
    for layer in cfg.layers:
        if layer.coverage is None:
            masks.append(np.ones(grid.size, dtype=bool))
        else:
            masks.append(_interval_mask(centers, layer.coverage, layer.coverage_closed))
    return np.array(masks)


# ---------------------------------------------------------------------------
# certification


def searched_deltas(cfg: RunConfig, model: LtiModel, vertices) -> np.ndarray:
    """Smallest certifiable budget for every required switch."""
    eps = [layer.epsilon for layer in cfg.layers]
    L = len(eps)
    delta = np.full((L, L), math.nan)
    for i, j in required_pairs(L, cfg.full_pairs):
        delta[i, j] = minimal_delta(weighting(cfg, model), eps[i], eps[j], vertices, model.A,
                                    model.Bw, cfg.rel_tol, tol=1e-4)
        if not math.isfinite(delta[i, j]):
            raise InfeasibleRelation(f"no budget below 1 certifies switch {i + 1}->{j + 1}")
    return delta


def certify(cfg: RunConfig, model: LtiModel, vertices) -> tuple[MultiLayerRelation, dict]:
    D = weighting(cfg, model)
    if not check_weighting(model.C, D):
        raise ValueError("weighting matrix violates C^T C <= D")
    delta = cfg.delta if cfg.delta is not None else searched_deltas(cfg, model, vertices)
    layers = [LayerSpec(k, layer.epsilon) for k, layer in enumerate(cfg.layers)]
    relation = MultiLayerRelation(D, layers, delta)
    certs = certify_relation(relation, vertices, model.A, model.Bw, cfg.rel_tol, cfg.full_pairs,
                             cfg.shifts or None)
    return relation, certs


def relation_from_certificates(cfg: RunConfig, model: LtiModel, certs: dict) -> MultiLayerRelation:
    """Rebuild the relation without searching; searched budgets come from the radii on file."""
    delta = cfg.delta
    if delta is None:
        L = len(cfg.layers)
        delta = np.full((L, L), math.nan)
        for (i, j), c in certs.items():
            delta[i, j] = delta_from_radius(c.r)
    layers = [LayerSpec(k, layer.epsilon) for k, layer in enumerate(cfg.layers)]
    return MultiLayerRelation(weighting(cfg, model), layers, delta)


def certificate_report(certs: dict) -> list[str]:
    lines = []
    for (i, j), c in sorted(certs.items()):
        F = " ".join(f"{v:.6g}" for v in np.ravel(c.F))
        lines.append(f"pair ({i + 1},{j + 1}): {'feasible' if c.feasible else 'INFEASIBLE'}"
                     f"  lambda={c.lam:.6g}  F=[{F}]  r={c.r:.6g}  margin={c.margin:.3g}")
    return lines


def shifts_from(certs: dict) -> dict:
    return {pq: c.F for pq, c in certs.items()}


# ---------------------------------------------------------------------------
# synthesis


def strategy_for(cfg: RunConfig, problem: LayeredProblem) -> SwitchingStrategy:
    N, nq, L = problem.shape
    if cfg.strategy_mode == "optimize":
        return SwitchingStrategy.optimize(L, pruned=not cfg.full_pairs)
    centers = problem.abstract.grid.centers()
    targets = np.full((L, N, nq), -1, dtype=np.int64)
    for rule in cfg.strategy_rules:
        hit = _interval_mask(centers, rule.region, rule.closed)
        free = targets[rule.layer, :, 0] < 0
        targets[rule.layer, hit & free, :] = rule.target
    strat = SwitchingStrategy.fixed(targets)
    problem.check_strategy(strat)
    return strat


@dataclass
class Synthesis:
    problem: LayeredProblem
    result: ValueIterationResult
    curve: np.ndarray
    D: np.ndarray


def layered_problem(cfg: RunConfig, abstract, dfa, labeling, relation, layers=None) -> LayeredProblem:
    """Problem over ``layers`` (indices into the relation; all by default)."""
    layers = list(range(relation.num_layers)) if layers is None else list(layers)
    cov = coverage_masks(cfg, abstract.grid)[layers]
    if len(layers) == 1:
        cov[:] = True  # a single layer is the constant-precision baseline
    eps = [relation.epsilons[k] for k in layers]
    delta = relation.delta[np.ix_(layers, layers)]
    return LayeredProblem.build(abstract, dfa, labeling, eps, np.nan_to_num(delta, nan=1.0), cov,
                                layer_presence=cfg.presence, strict_adjusted=cfg.strict_adjusted)


def synthesize(cfg: RunConfig, model, abstract, dfa, labeling, relation) -> dict:
    """Value iteration for the layered relation and (optionally) each single layer."""
    runs = {"layered": None}
    if cfg.baselines and relation.num_layers > 1:
        runs.update({f"R{k + 1}": [k] for k in range(relation.num_layers)})
    out = {}
    for name, layers in runs.items():
        prob = layered_problem(cfg, abstract, dfa, labeling, relation, layers)
        strat = strategy_for(cfg, prob) if layers is None else SwitchingStrategy.constant(1, *prob.shape[:2])
        res = value_iteration(prob, strat, cfg.tol, cfg.max_iter)
        curve = satisfaction_curve(prob, res.V, model.C, relation.D)
        out[name] = Synthesis(prob, res, curve, relation.D)
    return out


def write_values(path, syn: Synthesis) -> None:
    pr, res = syn.problem, syn.result
    centers = pr.abstract.grid.centers()
    inputs = np.atleast_2d(pr.abstract.inputs)
    names = pr.dfa.states
    N, nq, L = pr.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_hat", "q", "layer", "value", "u", "s_target"])
        for s in range(N):
            xh = " ".join(repr(float(v)) for v in centers[s])
            for q in range(nq):
                for i in range(L):
                    u = res.policy_u[s, q, i]
                    j = res.policy_s[s, q, i]
                    w.writerow([xh, names[q], i + 1, repr(float(res.V[s, q, i])),
                                "" if u < 0 else " ".join(repr(float(v)) for v in inputs[u]),
                                "" if j < 0 else j + 1])


def write_curve(path, grid, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "robust_probability"])
        for c, v in zip(grid.centers(), curve):
            w.writerow([" ".join(repr(float(t)) for t in c), repr(float(v))])


def save_synthesis(path, syn: Synthesis, key: str) -> None:
    np.savez_compressed(path, V=syn.result.V, policy_u=syn.result.policy_u,
                        policy_s=syn.result.policy_s, key=np.array(key),
                        converged=np.array(syn.result.converged))


def load_synthesis(path, problem: LayeredProblem, key: str) -> ValueIterationResult:
    with np.load(path) as data:
        if str(data["key"]) != key:
            raise ValueError(f"{path} was produced for a different configuration; rerun synthesize")
        V, pu, ps = data["V"], data["policy_u"], data["policy_s"]
        conv = bool(data["converged"])
    if V.shape != problem.shape:
        raise ValueError(f"{path} has shape {V.shape}, expected {problem.shape}")
    return ValueIterationResult(V, pu, ps, 0, math.nan, conv, [])


def synthesis_key(abstract: AbstractModel, relation: MultiLayerRelation, cfg: RunConfig) -> str:
    import hashlib
    h = hashlib.sha256(abstract.checksum().encode())
    h.update(np.ascontiguousarray(np.round(relation.delta, 9)).tobytes())  # radii round-trip
    h.update(np.asarray(relation.epsilons, dtype=float).tobytes())
    h.update(repr((cfg.strategy_mode, cfg.presence, cfg.strict_adjusted, cfg.tol, cfg.max_iter,
                   cfg.formula, str(cfg.dfa_file))).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# simulation


def simulate(cfg: RunConfig, model, syn: Synthesis, certs: dict, x0_list=None, runs=None,
             horizon=None, seed=None, backend=None, trace_dir: Path | None = None):
    """Monte-Carlo estimate against the robust bound at each initial state."""
    ctl = RefinedController(model, syn.problem, syn.result, shifts_from(certs), syn.D)
    x0_list = cfg.x0_list if x0_list is None else np.atleast_2d(x0_list)
    runs = cfg.runs if runs is None else runs
    horizon = cfg.horizon if horizon is None else horizon
    seed = cfg.seed if seed is None else seed
    rows = []
    for idx, x0 in enumerate(x0_list):
        bound = robust_satisfaction(syn.problem, syn.result.V, x0, model.C, syn.D)
        res = monte_carlo_satisfaction(ctl, x0, runs, horizon, seed, backend=backend)
        rows.append((x0, bound, res))
        if trace_dir is not None and cfg.trace_dumps:
            from ._pykernel import trace_rng
            trace_dir.mkdir(parents=True, exist_ok=True)
            for r in range(min(cfg.trace_dumps, runs)):
                ctl.trace(x0, trace_rng(seed, r), horizon).write_csv(trace_dir / f"x0_{idx:03d}_run_{r:05d}.csv")
    return rows


def lower_bound_violations(rows, k: float = 3.0) -> list:
    bad = []
    for x0, bound, res in rows:
        if res.p_hat + k * res.std_error < bound:
            bad.append((x0, bound, res))
    return bad


__all__ = [
    "InfeasibleRelation", "Synthesis", "abstraction", "build_dfa", "build_labeling", "build_model",
    "certificate_report", "certify", "coverage_masks", "layered_problem", "load_synthesis",
    "lower_bound_violations", "read_certificates", "save_synthesis", "simulate", "strategy_for",
    "synthesis_key", "synthesize", "validate_multilayer", "write_certificates", "write_curve",
    "write_summary", "write_values", "StrategyError",
]
