"""Run configuration: a YAML document with model, labeling, specification,
relation, dp, sim and output blocks.

Errors carry the key path and, when known, the source line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: int | None = None, source: str = ""):
        self.key_path = path
        self.line = line
        where = source or "config"
        if line is not None:
            where += f":{line}"
        if path:
            where += f" [{path}]"
        super().__init__(f"{where}: {message}")


def _line_index(node, prefix="", out=None) -> dict:
    # key path -> 1-based line, from the composed YAML tree
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_index(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for idx, v in enumerate(node.value):
            path = f"{prefix}[{idx}]"
            out[path] = v.start_mark.line + 1
            _line_index(v, path, out)
    return out


class _Reader:
    """Typed access into the raw mapping with diagnostics."""

    def __init__(self, data, lines: dict, source: str):
        self.data = data
        self.lines = lines
        self.source = source

    def error(self, path: str, message: str) -> ConfigError:
        line = self.lines.get(path)
        while line is None and path:
            path_up = path.rsplit(".", 1)[0] if "." in path else ""
            if path_up == path:
                break
            path = path_up
            line = self.lines.get(path)
        return ConfigError(message, path, line, self.source)

    def get(self, path: str, default=KeyError):
        node = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is KeyError:
                    raise self.error(path, "missing required key")
                return default
            node = node[part]
        return node

    def number(self, path: str, default=KeyError, lo=None, hi=None, integer=False):
        v = self.get(path, default)
        if v is None:
            return None
        try:
            x = int(v) if integer else float(v)
        except (TypeError, ValueError):
            raise self.error(path, f"expected a number, got {v!r}") from None
        if integer and float(v) != x:
            raise self.error(path, f"expected an integer, got {v!r}")
        if not math.isfinite(x):
            raise self.error(path, "must be finite")
        if lo is not None and x < lo:
            raise self.error(path, f"must be >= {lo}")
        if hi is not None and x > hi:
            raise self.error(path, f"must be <= {hi}")
        return x

    def matrix(self, path: str, default=KeyError):
        v = self.get(path, default)
        if v is None:
            return None
        try:
            arr = np.atleast_2d(np.asarray(v, dtype=float))
        except (TypeError, ValueError):
            raise self.error(path, "expected a numeric matrix") from None
        if arr.ndim != 2:
            raise self.error(path, "expected a matrix (list of rows)")
        if not np.all(np.isfinite(arr)):
            raise self.error(path, "entries must be finite")
        return arr

    def intervals(self, path: str, default=KeyError):
        arr = self.matrix(path, default)
        if arr is None:
            return None
        if arr.shape[1] != 2:
            arr = arr.reshape(-1, 2) if arr.size % 2 == 0 else None
            if arr is None:
                raise self.error(path, "expected [lo, hi] pairs")
        if np.any(arr[:, 1] < arr[:, 0]):
            raise self.error(path, "interval with hi < lo")
        return arr


@dataclass
class LayerConfig:
    epsilon: float
    coverage: np.ndarray | None = None  # (n, 2) intervals over representative points
    coverage_closed: tuple = (True, True)


@dataclass
class StrategyRule:
    layer: int
    region: np.ndarray
    closed: tuple
    target: int


@dataclass
class RunConfig:
    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    state_box: np.ndarray
    input_box: np.ndarray
    inputs: np.ndarray
    cell_width: np.ndarray
    noise_level: float
    noise_convention: str
    props: list
    regions: list
    default_letter: list
    formula: str | None
    dfa_file: Path | None
    D: np.ndarray | None
    rho: float
    layers: list
    delta: np.ndarray | None          # None: search the smallest certifiable budgets
    rel_tol: float
    full_pairs: bool
    shifts: dict
    presence: str
    strategy_mode: str
    strategy_rules: list
    baselines: bool
    tol: float
    max_iter: int
    strict_adjusted: bool
    runs: int
    horizon: int
    seed: int
    x0_list: np.ndarray
    trace_dumps: int
    target_x0: np.ndarray | None
    target_probability: float | None
    output: Path
    mc_samples: int = 100_000
    source: str = ""
    raw: dict = field(default_factory=dict, repr=False)


def _inputs(rd: _Reader, m: int) -> np.ndarray:
    v = rd.get("model.inputs")
    if isinstance(v, dict):
        grid = rd.matrix("model.inputs.grid")
        if grid.shape != (m, 3):
            raise rd.error("model.inputs.grid", f"expected {m} rows of [lo, hi, count]")
        axes = []
        for d, (lo, hi, cnt) in enumerate(grid):
            if cnt < 1 or cnt != int(cnt):
                raise rd.error("model.inputs.grid", "count must be a positive integer")
            axes.append(np.linspace(lo, hi, int(cnt)))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)
    arr = rd.matrix("model.inputs")
    if arr.shape[1] != m:
        arr = arr.reshape(-1, m) if arr.size % m == 0 else None
        if arr is None:
            raise rd.error("model.inputs", f"inputs must have {m} components each")
    return arr


def _closed(rd: _Reader, path: str, default=(True, True)) -> tuple:
    v = rd.get(path, None)
    if v is None:
        return default
    if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(b, bool) for b in v)):
        raise rd.error(path, "expected [lo_closed, hi_closed] booleans")
    return tuple(v)


def parse_config(text: str, source: str = "config", base_dir: Path | None = None) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", "",
                          mark.line + 1 if mark else None, source) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", "", 1, source)
    rd = _Reader(data, _line_index(node), source)
    base_dir = base_dir or Path.cwd()

    A = rd.matrix("model.A")
    n = A.shape[0]
    if A.shape != (n, n):
        raise rd.error("model.A", "A must be square")
    B = rd.matrix("model.B")
    Bw = rd.matrix("model.Bw")
    C = rd.matrix("model.C")
    for name, M, ax in (("B", B, 0), ("Bw", Bw, 0), ("C", C, 1)):
        if M.shape[ax] != n:
            raise rd.error(f"model.{name}", f"dimension mismatch with A ({n})")
    state_box = rd.intervals("model.state_box")
    if state_box.shape[0] != n:
        raise rd.error("model.state_box", f"expected {n} intervals")
    input_box = rd.intervals("model.input_box")
    if input_box.shape[0] != B.shape[1]:
        raise rd.error("model.input_box", f"expected {B.shape[1]} intervals")
    inputs = _inputs(rd, B.shape[1])
    if np.any(inputs < input_box[:, 0] - 1e-12) or np.any(inputs > input_box[:, 1] + 1e-12):
        raise rd.error("model.inputs", "inputs must lie in the input box")
    width = np.atleast_1d(np.asarray(rd.get("model.cell_width"), dtype=float))
    if width.size not in (1, n) or np.any(~np.isfinite(width)) or np.any(width <= 0):
        raise rd.error("model.cell_width", "cell widths must be positive")
    noise_level = rd.number("model.noise_level", 1.0, lo=0.0)
    convention = rd.get("model.noise_convention", "variance")
    if convention not in ("variance", "std"):
        raise rd.error("model.noise_convention", "must be 'variance' or 'std'")
    mc_samples = rd.number("model.mc_samples", 100_000, lo=1, integer=True)

    props = rd.get("labeling.props")
    if not isinstance(props, list) or not all(isinstance(p, str) for p in props):
        raise rd.error("labeling.props", "expected a list of proposition names")
    regions = []
    for idx, reg in enumerate(rd.get("labeling.regions", [])):
        path = f"labeling.regions[{idx}]"
        if not isinstance(reg, dict):
            raise rd.error(path, "expected a mapping with letter, lo, hi")
        sub = _Reader(reg, {k[len(path) + 1:]: v for k, v in rd.lines.items() if k.startswith(path + ".")}, source)
        try:
            lo = sub.matrix("lo").ravel()
            hi = sub.matrix("hi").ravel()
        except ConfigError as exc:
            raise rd.error(path, str(exc).split(": ", 1)[-1]) from None
        letter = reg.get("letter", [])
        if isinstance(letter, str):
            letter = [letter]
        unknown = set(letter) - set(props)
        if unknown:
            raise rd.error(path + ".letter", f"undeclared propositions {sorted(unknown)}")
        k = lo.size
        lc = np.broadcast_to(reg.get("lo_closed", True), (k,)).tolist()
        hc = np.broadcast_to(reg.get("hi_closed", False), (k,)).tolist()
        regions.append(dict(lo=lo.tolist(), hi=hi.tolist(), letter=list(letter),
                            lo_closed=tuple(lc), hi_closed=tuple(hc)))
    default_letter = rd.get("labeling.default", [])

    formula = rd.get("specification.formula", None)
    dfa_file = rd.get("specification.dfa_file", None)
    if (formula is None) == (dfa_file is None):
        raise rd.error("specification", "give exactly one of 'formula' or 'dfa_file'")
    if dfa_file is not None:
        dfa_file = (base_dir / dfa_file).resolve()
        if not dfa_file.exists():
            raise rd.error("specification.dfa_file", f"file not found: {dfa_file}")

    D = rd.matrix("relation.D", None)
    rho = rd.number("relation.rho", 0.0, lo=0.0)
    if D is not None and D.shape != (n, n):
        raise rd.error("relation.D", f"D must be {n}x{n}")
    layers = []
    lay_raw = rd.get("relation.layers")
    if not isinstance(lay_raw, list) or not lay_raw:
        raise rd.error("relation.layers", "expected a nonempty list of layers")
    for idx in range(len(lay_raw)):
        path = f"relation.layers[{idx}]"
        if not isinstance(lay_raw[idx], dict):
            raise rd.error(path, "expected a mapping with 'epsilon'")
        eps = lay_raw[idx].get("epsilon")
        try:
            eps = float(eps)
        except (TypeError, ValueError):
            raise rd.error(path, "epsilon must be a number") from None
        if not (math.isfinite(eps) and eps > 0):
            raise rd.error(path, "epsilon must be positive and finite")
        cov = lay_raw[idx].get("coverage")
        cov_arr = None
        if cov is not None:
            cov_arr = np.atleast_2d(np.asarray(cov, dtype=float))
            if cov_arr.shape != (n, 2) or not np.all(np.isfinite(cov_arr)):
                raise rd.error(path, f"coverage must be {n} [lo, hi] intervals")
        closed = tuple(lay_raw[idx].get("coverage_closed", (True, True)))
        layers.append(LayerConfig(eps, cov_arr, closed))
    if layers[0].coverage is not None:
        raise rd.error("relation.layers[0]", "the first layer must cover the whole state space")
    if any(a.epsilon < b.epsilon for a, b in zip(layers, layers[1:])):
        raise rd.error("relation.layers", "precisions must be nonincreasing with the layer index")
    L = len(layers)
    delta_raw = rd.get("relation.delta")
    if delta_raw == "search":
        delta = None
    else:
        try:
            delta = np.array([[math.nan if v is None else float(v) for v in row] for row in delta_raw])
        except (TypeError, ValueError):
            raise rd.error("relation.delta", "expected an LxL matrix (null for unused) or 'search'") from None
        if delta.shape != (L, L):
            raise rd.error("relation.delta", f"expected a {L}x{L} matrix")
        fin = delta[np.isfinite(delta)]
        if np.any(np.isinf(delta)):
            raise rd.error("relation.delta", "entries must be finite")
        if np.any((fin < 0) | (fin > 1)):
            raise rd.error("relation.delta", "entries must lie in [0, 1]")
    rel_tol = rd.number("relation.rel_tol", 1e-3, lo=0.0)
    full_pairs = bool(rd.get("relation.full_pairs", False))
    shifts = {}
    for key, val in (rd.get("relation.shifts", {}) or {}).items():
        path = f"relation.shifts.{key}"
        try:
            i, j = (int(t) - 1 for t in str(key).replace("->", "-").split("-"))
            lam = float(val["lambda"])
            F = np.atleast_2d(np.asarray(val["F"], dtype=float))
        except (KeyError, TypeError, ValueError):
            raise rd.error(path, "expected key 'i-j' with 'lambda' and 'F'") from None
        if not (0 <= i < L and 0 <= j < L):
            raise rd.error(path, "layer index out of range")
        shifts[(i, j)] = (lam, F)
    presence = rd.get("relation.presence", "all")
    if presence not in ("all", "self_loop"):
        raise rd.error("relation.presence", "must be 'all' or 'self_loop'")
    strat = rd.get("relation.strategy", "optimize")
    rules = []
    if strat == "optimize":
        mode = "optimize"
    elif isinstance(strat, dict) and "rules" in strat:
        mode = "fixed"
        for idx, rule in enumerate(strat["rules"]):
            path = f"relation.strategy.rules[{idx}]"
            try:
                layer = int(rule["layer"]) - 1
                target = int(rule["target"]) - 1
                region = np.atleast_2d(np.asarray(rule["region"], dtype=float))
            except (KeyError, TypeError, ValueError):
                raise rd.error(path, "rule needs layer, target and region") from None
            if not (0 <= layer < L and 0 <= target < L):
                raise rd.error(path, "layer index out of range")
            if region.shape != (n, 2):
                raise rd.error(path, f"region must be {n} [lo, hi] intervals")
            rules.append(StrategyRule(layer, region, tuple(rule.get("closed", (True, True))), target))
    else:
        raise rd.error("relation.strategy", "expected 'optimize' or a mapping with 'rules'")
    baselines = bool(rd.get("relation.baselines", True))

    tol = rd.number("dp.tol", 1e-6, lo=0.0)
    if tol <= 0:
        raise rd.error("dp.tol", "must be positive")
    max_iter = rd.number("dp.max_iter", 500, lo=1, integer=True)
    strict = bool(rd.get("dp.strict_adjusted_operator", False))

    runs = rd.number("sim.runs", 10_000, lo=1, integer=True)
    horizon = rd.number("sim.horizon", 200, lo=1, integer=True)
    seed = rd.number("sim.seed", 0, lo=0, integer=True)
    x0_raw = rd.get("sim.x0", None)
    if isinstance(x0_raw, dict):
        cnt = rd.number("sim.x0.count", integer=True, lo=1)
        span = rd.intervals("sim.x0.range")
        if span.shape[0] != n:
            raise rd.error("sim.x0.range", f"expected {n} intervals")
        x0_list = np.stack([np.linspace(lo, hi, cnt, endpoint=False) for lo, hi in span], axis=1)
    elif x0_raw is None:
        x0_list = np.zeros((0, n))
    else:
        x0_list = rd.matrix("sim.x0").reshape(-1, n)
    traces = rd.number("sim.trace_dumps", 0, lo=0, integer=True)
    tx0 = rd.matrix("target.x0", None)
    tp = rd.number("target.probability", None, lo=0.0, hi=1.0)
    output = Path(rd.get("output", "out"))
    if not output.is_absolute():
        output = base_dir / output

    return RunConfig(A, B, Bw, C, state_box, input_box, inputs, width, noise_level, convention,
                     list(props), regions, list(default_letter), formula, dfa_file, D, rho, layers,
                     delta, rel_tol, full_pairs, shifts, presence, mode, rules, baselines, tol,
                     max_iter, strict, runs, horizon, seed, x0_list, traces,
                     None if tx0 is None else tx0.ravel(), tp, output, mc_samples, source, data)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


def example_config_text(name: str = "parking") -> str:
    return resources.files("layeredsim").joinpath("configs", f"{name}.yaml").read_text()
