"""Syntactically co-safe LTL: parser, derivative-based DFA construction, DFA files.

Surface syntax (loosest to tightest binding)::

    phi ::= phi U phi          (right associative)
          | phi | phi
          | phi & phi
          | !p | X phi | p | true | false | ( phi )

Negation is only allowed directly on atomic propositions.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import Letter, all_letters


class ScltlSyntaxError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class UndeclaredAtomError(ValueError):
    pass


class DfaFormatError(ValueError):
    pass


class StateLimitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Syntax tree


class Formula:
    __slots__ = ()

    def atoms(self) -> set[str]:
        out: set[str] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if isinstance(node, (Atom, Not)):
                out.add(node.name)
            elif isinstance(node, (And, Or)):
                stack.extend(node.args)
            elif isinstance(node, Next):
                stack.append(node.arg)
            elif isinstance(node, Until):
                stack.extend((node.left, node.right))
        return out


@dataclass(frozen=True, slots=True)
class _Const(Formula):
    value: bool

    def __str__(self):
        return "true" if self.value else "false"


TRUE = _Const(True)
FALSE = _Const(False)


@dataclass(frozen=True, slots=True)
class _Nonempty(Formula):
    """At least one more letter follows (residual of ``X true``)."""

    def __str__(self):
        return "X true"


NONEMPTY = _Nonempty()


@dataclass(frozen=True, slots=True)
class Atom(Formula):
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True, slots=True)
class Not(Formula):
    """Negated atomic proposition."""

    name: str

    def __str__(self):
        return f"!{self.name}"


@dataclass(frozen=True, slots=True)
class And(Formula):
    args: tuple

    def __str__(self):
        return "(" + " & ".join(map(str, self.args)) + ")"


@dataclass(frozen=True, slots=True)
class Or(Formula):
    args: tuple

    def __str__(self):
        return "(" + " | ".join(map(str, self.args)) + ")"


@dataclass(frozen=True, slots=True)
class Next(Formula):
    arg: Formula

    def __str__(self):
        return f"X {self.arg}"


@dataclass(frozen=True, slots=True)
class Until(Formula):
    left: Formula
    right: Formula

    def __str__(self):
        return f"({self.left} U {self.right})"


# ---------------------------------------------------------------------------
# Parser

_TOKEN = re.compile(r"\s*(?:(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[!&|()]))")
_KEYWORDS = {"X", "U", "true", "false"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ScltlSyntaxError(f"unexpected character {text[start]!r}", start)
        start = m.start(m.lastgroup)
        value = m.group(m.lastgroup)
        kind = value if (m.lastgroup == "op" or value in _KEYWORDS) else "id"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None):
        tok = self.tokens[self.i]
        if kind is not None and tok[0] != kind:
            what = "end of input" if tok[0] == "eof" else repr(tok[1])
            raise ScltlSyntaxError(f"expected {kind!r}, found {what}", tok[2])
        self.i += 1
        return tok

    def parse(self) -> Formula:
        node = self.until()
        tok = self.peek()
        if tok[0] != "eof":
            raise ScltlSyntaxError(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def until(self) -> Formula:
        left = self.disj()
        if self.peek()[0] == "U":
            self.take()
            return Until(left, self.until())
        return left

    def disj(self) -> Formula:
        node = self.conj()
        while self.peek()[0] == "|":
            self.take()
            node = Or((node, self.conj()))
        return node

    def conj(self) -> Formula:
        node = self.unary()
        while self.peek()[0] == "&":
            self.take()
            node = And((node, self.unary()))
        return node

    def unary(self) -> Formula:
        kind, value, pos = self.peek()
        if kind == "!":
            self.take()
            nxt = self.peek()
            if nxt[0] != "id":
                raise ScltlSyntaxError("negation is only allowed on atomic propositions", pos)
            self.take()
            return Not(nxt[1])
        if kind == "X":
            self.take()
            return Next(self.unary())
        if kind == "(":
            self.take()
            node = self.until()
            self.take(")")
            return node
        if kind == "id":
            self.take()
            return Atom(value)
        if kind in ("true", "false"):
            self.take()
            return TRUE if kind == "true" else FALSE
        what = "end of input" if kind == "eof" else repr(value)
        raise ScltlSyntaxError(f"expected a formula, found {what}", pos)


def parse_scltl(text: str, atomic_props: Iterable[str] | None = None) -> Formula:
    """Parse ``text`` into a formula tree.

    If ``atomic_props`` is given, every atom must be declared there.
    """
    if not text or not text.strip():
        raise ScltlSyntaxError("empty formula", 0)
    node = _Parser(text).parse()
    if atomic_props is not None:
        unknown = node.atoms() - set(atomic_props)
        if unknown:
            raise UndeclaredAtomError(f"undeclared atomic propositions: {sorted(unknown)}")
    return node


# ---------------------------------------------------------------------------
# Canonicalization and derivatives
#
# Residuals are kept in disjunctive normal form over literals: atoms, negated
# atoms, Next and Until nodes (whose operands are canonical in turn).  Clauses
# are absorbed (a clause implied by a smaller one is dropped), which keeps the
# set of reachable residuals finite.

Dnf = frozenset  # of frozensets of literals; frozenset() is false, {frozenset()} is true

_DNF_TRUE: Dnf = frozenset([frozenset()])
_DNF_FALSE: Dnf = frozenset()


def _key(f: Formula) -> str:
    return str(f)


def _absorb(clauses) -> Dnf:
    clauses = set(clauses)
    return frozenset(c for c in clauses if not any(d < c for d in clauses))


def _conj(a: Dnf, b: Dnf) -> Dnf:
    out = set()
    for c in a:
        for d in b:
            e = c | d
            if any(isinstance(x, Atom) and Not(x.name) in e for x in e):
                continue
            if len(e) > 1:
                e = e - {NONEMPTY}  # every other literal already needs a letter
            out.add(e)
    return _absorb(out)


def _disj(a: Dnf, b: Dnf) -> Dnf:
    return _absorb(a | b)


def _literal(f: Formula) -> Dnf:
    return frozenset([frozenset([f])])


def _to_dnf(f: Formula) -> Dnf:
    if isinstance(f, _Const):
        return _DNF_TRUE if f.value else _DNF_FALSE
    if isinstance(f, (Atom, Not, _Nonempty)):
        return _literal(f)
    if isinstance(f, And):
        out = _DNF_TRUE
        for a in f.args:
            out = _conj(out, _to_dnf(a))
        return out
    if isinstance(f, Or):
        out = _DNF_FALSE
        for a in f.args:
            out = _disj(out, _to_dnf(a))
        return out
    if isinstance(f, Next):
        arg = canonical(f.arg)
        return _DNF_FALSE if arg == FALSE else _literal(Next(arg))
    if isinstance(f, Until):
        left, right = canonical(f.left), canonical(f.right)
        if right == TRUE:
            return _literal(NONEMPTY)  # the until still needs a position
        if right == FALSE or left == FALSE or left == right:
            return _to_dnf(right)
        return _literal(Until(left, right))
    raise TypeError(f"not a formula: {f!r}")


def _from_dnf(d: Dnf) -> Formula:
    if not d:
        return FALSE
    if frozenset() in d:
        return TRUE
    terms = []
    for clause in d:
        lits = sorted(clause, key=_key)
        terms.append(lits[0] if len(lits) == 1 else And(tuple(lits)))
    terms.sort(key=_key)
    return terms[0] if len(terms) == 1 else Or(tuple(terms))


def canonical(f: Formula) -> Formula:
    """Sorted, absorbed DNF with constants folded and trivial untils removed."""
    return _from_dnf(_to_dnf(f))


def _derive(f: Formula, letter: Letter) -> Dnf:
    if isinstance(f, _Const):
        return _DNF_TRUE if f.value else _DNF_FALSE
    if isinstance(f, Atom):
        return _DNF_TRUE if f.name in letter else _DNF_FALSE
    if isinstance(f, Not):
        return _DNF_FALSE if f.name in letter else _DNF_TRUE
    if isinstance(f, And):
        out = _DNF_TRUE
        for a in f.args:
            out = _conj(out, _derive(a, letter))
            if not out:
                break
        return out
    if isinstance(f, Or):
        out = _DNF_FALSE
        for a in f.args:
            out = _disj(out, _derive(a, letter))
        return out
    if isinstance(f, _Nonempty):
        return _DNF_TRUE
    if isinstance(f, Next):
        g = _to_dnf(f.arg)
        return _literal(NONEMPTY) if g == _DNF_TRUE else g
    if isinstance(f, Until):
        # f U g  ==  g | (f & X(f U g))
        return _disj(_derive(f.right, letter), _conj(_derive(f.left, letter), _to_dnf(f)))
    raise TypeError(f"not a formula: {f!r}")


def derivative(f: Formula, letter: Letter) -> Formula:
    """Residual obligation after reading ``letter``."""
    return _from_dnf(_derive(f, letter))


# ---------------------------------------------------------------------------
# DFA


@dataclass(frozen=True, eq=False)
class Dfa:
    """Complete DFA over ``2^props``; letters are indexed in bitmask order.

    ``delta[q, k]`` is the successor of state ``q`` on letter index ``k``.
    """

    props: tuple
    states: tuple
    initial: int
    accepting: frozenset
    delta: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        delta = np.array(self.delta, dtype=np.int64)
        nq, nl = len(self.states), 1 << len(self.props)
        if delta.shape != (nq, nl):
            raise DfaFormatError(f"transition table must be {nq}x{nl}, got {delta.shape}")
        if np.any(delta < 0) or np.any(delta >= nq):
            raise DfaFormatError("transition target out of range")
        if not 0 <= self.initial < nq:
            raise DfaFormatError("initial state out of range")
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "accepting", frozenset(int(q) for q in self.accepting))
        object.__setattr__(self, "props", tuple(self.props))
        object.__setattr__(self, "states", tuple(self.states))

    def __eq__(self, other):
        if not isinstance(other, Dfa):
            return NotImplemented
        return (self.props == other.props and self.states == other.states
                and self.initial == other.initial and self.accepting == other.accepting
                and np.array_equal(self.delta, other.delta))

    __hash__ = None

    @property
    def num_states(self) -> int:
        return len(self.states)

    @property
    def letters(self) -> list[Letter]:
        return all_letters(self.props)

    def letter_index(self, letter: Iterable[str]) -> int:
        idx = 0
        for p in letter:
            try:
                idx |= 1 << self.props.index(p)
            except ValueError:
                raise UndeclaredAtomError(f"unknown proposition {p!r}") from None
        return idx

    def step(self, q: int, letter: Iterable[str]) -> int:
        return int(self.delta[q, self.letter_index(letter)])

    def state_index(self, name: str) -> int:
        return self.states.index(name)

    def accepting_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.accepting)] = True
        return mask

    def run(self, word: Sequence[Iterable[str]]) -> list[int]:
        qs = [self.initial]
        for letter in word:
            qs.append(self.step(qs[-1], letter))
        return qs

    def accepts(self, word: Sequence[Iterable[str]]) -> bool:
        """Finite-word acceptance: some visited state is accepting."""
        return any(q in self.accepting for q in self.run(word))

    def reachable(self) -> set[int]:
        seen = {self.initial}
        todo = [self.initial]
        while todo:
            q = todo.pop()
            for t in self.delta[q]:
                if int(t) not in seen:
                    seen.add(int(t))
                    todo.append(int(t))
        return seen

    def dead_states(self) -> np.ndarray:
        """Mask of states from which no accepting state is reachable."""
        live = self.accepting_mask().copy()
        changed = True
        while changed:
            changed = False
            for q in range(self.num_states):
                if not live[q] and live[self.delta[q]].any():
                    live[q] = changed = True
        return ~live

    def is_vacuous(self) -> bool:
        return not (self.reachable() & self.accepting)

    def self_loop_states(self) -> np.ndarray:
        return np.array([bool(np.any(self.delta[q] == q)) for q in range(self.num_states)])

    def to_text(self) -> str:
        lines = [
            "props: " + " ".join(self.props),
            "states: " + " ".join(self.states),
            "initial: " + self.states[self.initial],
            "accepting: " + " ".join(self.states[q] for q in sorted(self.accepting)),
        ]
        for q in range(self.num_states):
            for k, letter in enumerate(self.letters):
                text = "{" + ",".join(p for p in self.props if p in letter) + "}"
                lines.append(f"{self.states[q]} {text} -> {self.states[self.delta[q, k]]}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def dfa_step(dfa: Dfa, q: int, letter: Iterable[str]) -> int:
    return dfa.step(q, letter)


def formula_to_dfa(phi: Formula, atomic_props: Sequence[str], max_states: int = 4096) -> Dfa:
    """Build the DFA of good prefixes of ``phi`` by exploring residual formulas.

    States are canonical residuals; ``true`` is the (absorbing) accepting
    state and ``false`` the rejecting sink.  States are numbered in
    breadth-first discovery order, letters visited in bitmask order.
    """
    props = tuple(atomic_props)
    unknown = phi.atoms() - set(props)
    if unknown:
        raise UndeclaredAtomError(f"undeclared atomic propositions: {sorted(unknown)}")
    letters = all_letters(props)
    start = canonical(phi)
    index = {start: 0}
    order = [start]
    rows: list[list[int]] = []
    queue = deque([start])
    while queue:
        f = queue.popleft()
        row = []
        for letter in letters:
            g = derivative(f, letter)
            if g not in index:
                if len(order) >= max_states:
                    raise StateLimitError(f"DFA exceeds {max_states} states")
                index[g] = len(order)
                order.append(g)
                queue.append(g)
            row.append(index[g])
        rows.append(row)
    accepting = {index[TRUE]} if TRUE in index else set()
    return Dfa(
        props=props,
        states=tuple(f"q{k}" for k in range(len(order))),
        initial=0,
        accepting=frozenset(accepting),
        delta=np.array(rows, dtype=np.int64),
        labels=tuple(str(f) for f in order),
    )


# ---------------------------------------------------------------------------
# DFA text format

_TRANSITION = re.compile(r"^(\S+)\s*\{([^}]*)\}\s*->\s*(\S+)$")


def parse_dfa(text: str) -> Dfa:
    header: dict[str, list[str]] = {}
    transitions = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _TRANSITION.match(line)
        if m:
            transitions.append((lineno, m.group(1), m.group(2), m.group(3)))
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep or key not in {"props", "states", "initial", "accepting"}:
            raise DfaFormatError(f"line {lineno}: cannot parse {raw.strip()!r}")
        if key in header:
            raise DfaFormatError(f"line {lineno}: duplicate {key!r} header")
        header[key] = rest.split()
    for key in ("props", "states", "initial"):
        if key not in header:
            raise DfaFormatError(f"missing {key!r} header")
    props = tuple(header["props"])
    states = tuple(header["states"])
    if len(set(states)) != len(states):
        raise DfaFormatError("duplicate state names")
    if len(header["initial"]) != 1:
        raise DfaFormatError("exactly one initial state required")
    sidx = {s: k for k, s in enumerate(states)}

    def state(name, lineno):
        if name not in sidx:
            raise DfaFormatError(f"line {lineno}: unknown state {name!r}")
        return sidx[name]

    initial = state(header["initial"][0], "header")
    accepting = {state(s, "header") for s in header.get("accepting", [])}
    nl = 1 << len(props)
    delta = np.full((len(states), nl), -1, dtype=np.int64)
    for lineno, src, letter_text, dst in transitions:
        names = [p for p in re.split(r"[,\s]+", letter_text.strip()) if p]
        k = 0
        for p in names:
            if p not in props:
                raise UndeclaredAtomError(f"line {lineno}: unknown proposition {p!r}")
            k |= 1 << props.index(p)
        q, t = state(src, lineno), state(dst, lineno)
        if delta[q, k] >= 0 and delta[q, k] != t:
            raise DfaFormatError(f"line {lineno}: conflicting transition for ({src}, {{{letter_text}}})")
        delta[q, k] = t
    missing = np.argwhere(delta < 0)
    if missing.size:
        q, k = missing[0]
        letter = ",".join(p for b, p in enumerate(props) if k >> b & 1)
        raise DfaFormatError(
            f"transition function is not total: {len(missing)} missing rows, e.g. ({states[q]}, {{{letter}}})")
    return Dfa(props=props, states=states, initial=initial, accepting=frozenset(accepting), delta=delta)


def load_dfa(path) -> Dfa:
    with open(path) as fh:
        return parse_dfa(fh.read())
