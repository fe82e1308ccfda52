"""Command-line driver.

    layeredsim abstract   --config run.yaml --out out/
    layeredsim certify    ...
    layeredsim synthesize ...
    layeredsim simulate   ...
    layeredsim run        ...   (all four in sequence)

Exit codes: 0 success, 2 configuration/validation error, 3 infeasible
relation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .abstraction import ConfigurationError, NumericError
from .config import ConfigError, example_config_text, load_config, parse_config
from .dp import ContainmentError, StrategyError, robust_satisfaction
from .model import ModelError
from .scltl import DfaFormatError, ScltlSyntaxError, UndeclaredAtomError
from .simrel import (DomainError, IncompleteRelationError, UnsupportedSearchError,
                     read_certificates, validate_multilayer, write_certificates)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("layeredsim")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args):
    if args.config is None:
        cfg = parse_config(example_config_text("parking"), "parking.yaml (built-in)")
    else:
        cfg = load_config(args.config)
    if args.out is not None:
        cfg.output = Path(args.out)
    if args.tol is not None:
        if not args.tol > 0:
            raise CliError("--tol must be positive", EXIT_CONFIG)
        cfg.tol = args.tol
    if args.max_iter is not None:
        if args.max_iter < 1:
            raise CliError("--max-iter must be at least 1", EXIT_CONFIG)
        cfg.max_iter = args.max_iter
    for name in ("seed", "runs", "horizon"):
        v = getattr(args, name)
        if v is not None:
            if v < (0 if name == "seed" else 1):
                raise CliError(f"--{name} must be {'nonnegative' if name == 'seed' else 'positive'}",
                               EXIT_CONFIG)
            setattr(cfg, name, v)
    if args.strict_adjusted_operator:
        cfg.strict_adjusted = True
    try:
        cfg.output.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {cfg.output}: {exc.strerror}", EXIT_IO)
    return cfg


class _Ctx:
    """Lazily builds and caches pipeline stages for one command."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = cfg.output
        self.model = pl.build_model(cfg)
        self.labeling = pl.build_labeling(cfg)
        self.dfa = pl.build_dfa(cfg)
        self._abstract = None
        self._cert = None

    def abstract(self):
        if self._abstract is None:
            self._abstract, hit = pl.abstraction(self.cfg, self.model, self.out)
            log.info("transition tensor %s", "loaded from cache" if hit else "computed")
        return self._abstract

    def certificates(self):
        if self._cert is None:
            grid = self.abstract().grid
            relation, certs = pl.certify(self.cfg, self.model, grid.deviation_vertices())
            write_certificates(self.out / pl.CERTIFICATES, certs)
            self._cert = relation, certs
        return self._cert

    def feasible_certificates(self):
        relation, certs = self.certificates()
        bad = [pq for pq, c in certs.items() if not c.feasible]
        if bad:
            raise CliError("infeasible switches: " + ", ".join(f"{i + 1}->{j + 1}" for i, j in bad),
                           EXIT_INFEASIBLE)
        return relation, certs


def cmd_abstract(ctx: _Ctx) -> int:
    ab = ctx.abstract()
    print(f"{ab.num_states} cells, {ab.num_inputs} inputs, 1 sink")
    print(f"transition tensor: {ctx.out / pl.TRANSITIONS} (sha256 {ab.checksum()[:16]})")
    return EXIT_OK


def cmd_certify(ctx: _Ctx) -> int:
    relation, certs = ctx.certificates()
    for line in pl.certificate_report(certs):
        print(line)
    grid = ctx.abstract().grid
    x0 = ctx.cfg.target_x0 if ctx.cfg.target_x0 is not None else grid.center(0)
    xh0 = grid.project(x0)
    if xh0 is not None:
        print(validate_multilayer(relation, certs, ctx.model.C, x0, xh0, ctx.cfg.full_pairs))
    print(f"certificates: {ctx.out / pl.CERTIFICATES}")
    if any(not c.feasible for c in certs.values()):
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_synthesize(ctx: _Ctx) -> int:
    relation, certs = ctx.feasible_certificates()
    ab = ctx.abstract()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        runs = pl.synthesize(ctx.cfg, ctx.model, ab, ctx.dfa, ctx.labeling, relation)
    for wmsg in caught:
        print(f"warning: {wmsg.message}", file=sys.stderr)
    main = runs["layered"]
    pl.write_values(ctx.out / pl.VALUES, main)
    pl.write_curve(ctx.out / pl.CURVE, ab.grid, main.curve)
    pl.save_synthesis(ctx.out / pl.SYNTHESIS, main, pl.synthesis_key(ab, relation, ctx.cfg))
    res = main.result
    print(f"value iteration: {res.iterations} sweeps, residual {res.residual:.3g}"
          f"{'' if res.converged else ' (NOT converged)'}")
    for name, syn in runs.items():
        if name != "layered":
            pl.write_curve(ctx.out / f"curve_{name}.csv", ab.grid, syn.curve)
    print(f"curves: {', '.join(sorted(p.name for p in ctx.out.glob('curve*.csv')))}")
    cfg = ctx.cfg
    if cfg.target_x0 is not None:
        p = robust_satisfaction(main.problem, res.V, cfg.target_x0, ctx.model.C, main.D)
        line = f"robust satisfaction at x0={cfg.target_x0.tolist()}: {p:.6f}"
        for name, syn in runs.items():
            if name != "layered":
                pb = robust_satisfaction(syn.problem, syn.result.V, cfg.target_x0, ctx.model.C, syn.D)
                line += f"  ({name} only: {pb:.6f})"
        print(line)
        if cfg.target_probability is not None:
            met = p >= cfg.target_probability
            print(f"target probability {cfg.target_probability}: {'met' if met else 'NOT met'}")
    return EXIT_OK


def cmd_simulate(ctx: _Ctx) -> int:
    cfg = ctx.cfg
    syn_path = ctx.out / pl.SYNTHESIS
    cert_path = ctx.out / pl.CERTIFICATES
    for path in (syn_path, cert_path):
        if not path.exists():
            raise CliError(f"{path} not found; run 'synthesize' first", EXIT_CONFIG)
    try:
        certs = read_certificates(cert_path)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    ab = ctx.abstract()
    relation = pl.relation_from_certificates(cfg, ctx.model, certs)
    D = relation.D
    prob = pl.layered_problem(cfg, ab, ctx.dfa, ctx.labeling, relation)
    try:
        res = pl.load_synthesis(syn_path, prob, pl.synthesis_key(ab, relation, cfg))
    except (ValueError, KeyError) as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    if cfg.x0_list.shape[0] == 0:
        raise CliError("sim.x0 lists no initial states", EXIT_CONFIG)
    syn = pl.Synthesis(prob, res, None, D)
    rows = pl.simulate(cfg, ctx.model, syn, certs, trace_dir=ctx.out / "traces")
    pl.write_summary(ctx.out / pl.SUMMARY, rows)
    bad = pl.lower_bound_violations(rows)
    for x0, bound, r in rows:
        print(f"x0={np.ravel(x0).tolist()}  bound={bound:.4f}  p_hat={r.p_hat:.4f} +/- {r.ci_halfwidth:.4f}")
    print(f"lower-bound violations beyond 3 SE: {len(bad)} of {len(rows)}")
    print(f"summary: {ctx.out / pl.SUMMARY}")
    return EXIT_OK


def cmd_run(ctx: _Ctx) -> int:
    for step in (cmd_abstract, cmd_certify, cmd_synthesize, cmd_simulate):
        code = step(ctx)
        if code != EXIT_OK:
            return code
    return EXIT_OK


COMMANDS = {"abstract": cmd_abstract, "certify": cmd_certify, "synthesize": cmd_synthesize,
            "simulate": cmd_simulate, "run": cmd_run}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layeredsim", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration (default: built-in parking example)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--tol", type=float, help="value-iteration stopping tolerance")
    common.add_argument("--max-iter", type=int, help="maximum value-iteration sweeps")
    common.add_argument("--seed", type=int, help="Monte-Carlo master seed")
    common.add_argument("--runs", type=int, help="Monte-Carlo runs per initial state")
    common.add_argument("--horizon", type=int, help="Monte-Carlo horizon")
    common.add_argument("--strict-adjusted-operator", action="store_true",
                        help="use min(1_Qf, V) inside the partial-cover operator instead of max")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    sub.add_parser("example-config", help="print the built-in parking configuration")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "example-config":
        sys.stdout.write(example_config_text("parking"))
        return EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](_Ctx(cfg))
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ConfigurationError, ModelError, ScltlSyntaxError, UndeclaredAtomError,
            DfaFormatError, DomainError, IncompleteRelationError, StrategyError, ContainmentError,
            UnsupportedSearchError) as exc:
        hint = "; supply relation.shifts with lambda and F" if isinstance(exc, UnsupportedSearchError) else ""
        print(f"error: {exc}{hint}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.InfeasibleRelation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
