"""Decision procedure for comparisons between symbolic dimensions.

The builtin procedure is sound but incomplete: it answers ``TRUE``/``FALSE``
only when the answer is entailed by the constraint store over non-negative
integers, and ``UNKNOWN`` otherwise.  An external SMT-LIB solver can be
plugged in to resolve the remaining unknowns.
"""

from __future__ import annotations

import enum
import logging
import math
import operator
import re
import subprocess
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .dims import DimExpr, DimLike, parse_dim

log = logging.getLogger(__name__)

INF = math.inf


class Tristate(enum.Enum):
    TRUE = "true"
    FALSE = "false"
    UNKNOWN = "unknown"

    def __bool__(self) -> bool:  # pragma: no cover - guard against misuse
        raise TypeError("Tristate has no truth value; compare against Tristate.TRUE")

    @staticmethod
    def of(flag: bool) -> "Tristate":
        return Tristate.TRUE if flag else Tristate.FALSE


class SolverError(RuntimeError):
    pass


class ConstraintParseError(ValueError):
    pass


RELATIONS = ("==", "<=", "<")
_CONSTRAINT = re.compile(r"^(.*?)(==|<=|>=|<|>)(.*)$")


@dataclass(frozen=True)
class Constraint:
    """``form REL 0`` with REL one of ``==``, ``<=``, ``<``."""

    form: DimExpr
    rel: str

    def __post_init__(self) -> None:
        if self.rel not in RELATIONS:
            raise ValueError(f"bad relation {self.rel!r}")

    @staticmethod
    def make(lhs: DimLike, rel: str, rhs: DimLike) -> "Constraint":
        a, b = DimExpr.of(lhs), DimExpr.of(rhs)
        if rel == ">=":
            return Constraint(b - a, "<=")
        if rel == ">":
            return Constraint(b - a, "<")
        return Constraint(a - b, rel)

    @staticmethod
    def parse(text: str) -> "Constraint":
        m = _CONSTRAINT.match(text.strip())
        if not m:
            raise ConstraintParseError(f"cannot parse constraint {text!r}")
        lhs, rel, rhs = m.groups()
        try:
            return Constraint.make(parse_dim(lhs), rel, parse_dim(rhs))
        except ValueError as exc:
            raise ConstraintParseError(f"cannot parse constraint {text!r}: {exc}") from exc

    def holds(self, env) -> bool:
        v = self.form.evaluate(env)
        return v == 0 if self.rel == "==" else (v <= 0 if self.rel == "<=" else v < 0)

    def __str__(self) -> str:
        return f"{self.form} {self.rel} 0"


class ExternalSolver:
    """SMT-LIB solver subprocess; one query at a time."""

    def __init__(self, cmd: Sequence[str] | str, timeout: float = 10.0):
        self.cmd = cmd.split() if isinstance(cmd, str) else list(cmd)
        self.timeout = timeout
        self._lock = threading.Lock()

    def check_sat(self, script: str) -> str:
        with self._lock:
            try:
                proc = subprocess.run(
                    self.cmd, input=script, capture_output=True, text=True, timeout=self.timeout
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise SolverError(f"solver {self.cmd!r} failed: {exc}") from exc
        lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
        if not lines or lines[0] not in ("sat", "unsat", "unknown"):
            raise SolverError(f"solver {self.cmd!r} gave no verdict: {proc.stdout!r} {proc.stderr!r}")
        return lines[0]


@dataclass(frozen=True)
class ConstraintStore:
    constraints: tuple[Constraint, ...] = ()
    solver: ExternalSolver | None = field(default=None, compare=False, hash=False)
    _memo: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    @staticmethod
    def parse(texts: Iterable[str], solver: ExternalSolver | None = None) -> "ConstraintStore":
        return ConstraintStore(tuple(Constraint.parse(t) for t in texts), solver)

    def extend(self, more: Iterable[Constraint]) -> "ConstraintStore":
        return ConstraintStore(self.constraints + tuple(more), self.solver)

    @property
    def symbols(self) -> frozenset[str]:
        out: set[str] = set()
        for c in self.constraints:
            out |= c.form.symbols
        return frozenset(out)

    def satisfied_by(self, env) -> bool:
        return all(c.holds(env) for c in self.constraints) and all(v >= 0 for v in env.values())


# ---------------------------------------------------------------------------
# builtin procedure

_Lin = dict[str, Fraction]


def _lin(d: DimExpr) -> tuple[_Lin, Fraction]:
    return {k: Fraction(v) for k, v in d.terms}, Fraction(d.const)


def _subst(lin: _Lin, const: Fraction, var: str, repl: _Lin, rconst: Fraction) -> tuple[_Lin, Fraction]:
    c = lin.get(var)
    if not c:
        return lin, const
    out = {k: v for k, v in lin.items() if k != var}
    for k, v in repl.items():
        out[k] = out.get(k, Fraction(0)) + c * v
    return {k: v for k, v in out.items() if v}, const + c * rconst


class _Prepared:
    """Constraint store after equality elimination and bound propagation."""

    def __init__(self, store: ConstraintStore, extra_syms: frozenset[str]):
        eqs: list[tuple[_Lin, Fraction]] = []
        les: list[tuple[_Lin, Fraction]] = []
        syms = set(store.symbols) | set(extra_syms)
        for c in store.constraints:
            lin, k = _lin(c.form)
            if c.rel == "==":
                eqs.append((lin, k))
            elif c.rel == "<=":
                les.append((lin, k))
            else:  # integer strictness: f < 0  <=>  f + 1 <= 0
                les.append((lin, k + 1))
        for s in sorted(syms):  # implicit non-negativity
            les.append(({s: Fraction(-1)}, Fraction(0)))

        self.elim: list[tuple[str, _Lin, Fraction]] = []
        pending = list(eqs)
        progress = True
        while progress:
            progress = False
            for idx, (lin, k) in enumerate(pending):
                pivot = next((v for v in sorted(lin) if abs(lin[v]) == 1), None)
                if pivot is None:
                    continue
                c = lin[pivot]
                repl = {v: -w / c for v, w in lin.items() if v != pivot}
                rconst = -k / c
                self.elim.append((pivot, repl, rconst))
                pending.pop(idx)
                pending = [_subst(l2, k2, pivot, repl, rconst) for l2, k2 in pending]
                les = [_subst(l2, k2, pivot, repl, rconst) for l2, k2 in les]
                progress = True
                break
        self.eqs = [(l, k) for l, k in pending if l or k]
        self.les = les
        self.infeasible = any(not l and k != 0 for l, k in pending)
        self.lo: dict[str, float] = {}
        self.hi: dict[str, float] = {}
        self._propagate()

    def reduce(self, d: DimExpr) -> tuple[_Lin, Fraction]:
        lin, k = _lin(d)
        for var, repl, rconst in self.elim:
            lin, k = _subst(lin, k, var, repl, rconst)
        return lin, k

    def _bound(self, lin: _Lin, k: Fraction) -> tuple[float, float]:
        lo, hi = float(k), float(k)
        for v, c in lin.items():
            vlo, vhi = self.lo.get(v, -INF), self.hi.get(v, INF)
            if c > 0:
                lo += float(c) * vlo if vlo != -INF else -INF
                hi += float(c) * vhi if vhi != INF else INF
            else:
                lo += float(c) * vhi if vhi != INF else -INF
                hi += float(c) * vlo if vlo != -INF else INF
        return lo, hi

    def _propagate(self) -> None:
        for _ in range(4):
            changed = False
            for lin, k in self.les:
                for v, c in lin.items():
                    rest = {w: cw for w, cw in lin.items() if w != v}
                    rlo, _ = self._bound(rest, k)
                    if rlo == -INF:
                        continue
                    # c*v <= -rlo
                    bound = -rlo / float(c)
                    if c > 0:
                        nb = math.floor(bound + 1e-9)
                        if nb < self.hi.get(v, INF):
                            self.hi[v] = nb
                            changed = True
                    else:
                        nb = math.ceil(bound - 1e-9)
                        if nb > self.lo.get(v, -INF):
                            self.lo[v] = nb
                            changed = True
            if not changed:
                break

    def _elim_bounds(self) -> tuple[dict[str, float], dict[str, float]]:
        lo, hi = dict(self.lo), dict(self.hi)
        saved = self.lo, self.hi
        try:
            self.lo, self.hi = lo, hi
            # later pivots may occur in earlier replacements, so go backwards
            for var, repl, rconst in reversed(self.elim):
                rlo, rhi = self._bound(repl, rconst)
                lo[var], hi[var] = max(rlo, 0.0), rhi
        finally:
            self.lo, self.hi = saved
        return lo, hi

    def raw_interval(self, d: DimExpr) -> tuple[float, float]:
        """Bounds of ``d`` itself, with eliminated symbols bounded by their definitions."""
        lin, k = _lin(d)
        saved = self.lo, self.hi
        try:
            self.lo, self.hi = self._elim_bounds()
            return self._bound(lin, k)
        finally:
            self.lo, self.hi = saved

    def interval(self, lin: _Lin, k: Fraction) -> tuple[float, float]:
        lo, hi = self._bound(lin, k)
        # a constraint f <= 0 that is proportional to the query tightens one side
        for flin, fk in self.les:
            if not flin or set(flin) != set(lin):
                continue
            v0 = next(iter(flin))
            lam = lin[v0] / flin[v0]
            if any(lin[v] != lam * flin[v] for v in flin):
                continue
            c = k - lam * fk  # query = lam*f + c
            if lam > 0:
                hi = min(hi, float(c))
            else:
                lo = max(lo, float(c))
        return lo, hi


def _decide_builtin(a: DimExpr, b: DimExpr, rel: str, cs: ConstraintStore) -> Tristate:
    diff = a - b
    if diff.is_concrete and not cs.constraints:
        v = diff.const
        return Tristate.of(v == 0 if rel == "==" else (v <= 0 if rel == "<=" else v < 0))
    prep = _Prepared(cs, diff.symbols)
    lin, k = prep.reduce(diff)
    lo, hi = prep.interval(lin, k)
    if prep.elim:
        rlo, rhi = prep.raw_interval(diff)
        lo, hi = max(lo, rlo), min(hi, rhi)
    if rel == "==":
        if not lin and k == 0:
            return Tristate.TRUE
        if lo > 0 or hi < 0:
            return Tristate.FALSE
        if lin and all(c.denominator == 1 for c in lin.values()) and k.denominator == 1:
            g = math.gcd(*(int(c) for c in lin.values()))
            if g and int(k) % g:
                return Tristate.FALSE
        if lo == hi == 0:
            return Tristate.TRUE
        return Tristate.UNKNOWN
    if rel == "<=":
        if hi <= 0:
            return Tristate.TRUE
        if lo > 0:
            return Tristate.FALSE
        return Tristate.UNKNOWN
    if hi < 0:
        return Tristate.TRUE
    if lo >= 0:
        return Tristate.FALSE
    return Tristate.UNKNOWN


def decide_cmp(a: DimLike, b: DimLike, rel: str, cs: ConstraintStore | None = None) -> Tristate:
    """Decide ``a REL b`` under ``cs`` for REL in ``==``, ``<=``, ``<``."""
    if rel not in RELATIONS:
        raise ValueError(f"unsupported relation {rel!r}")
    a, b = DimExpr.of(a), DimExpr.of(b)
    if not a.terms and not b.terms:
        return Tristate.of(_CMP[rel](a.const, b.const))
    cs = cs or ConstraintStore()
    key = (a, b, rel)
    out = cs._memo.get(key)
    if out is None:
        out = cs._memo[key] = _decide(a, b, rel, cs)
    return out


_CMP = {"==": operator.eq, "<=": operator.le, "<": operator.lt}


def _decide(a: DimExpr, b: DimExpr, rel: str, cs: ConstraintStore) -> Tristate:
    out = _decide_builtin(a, b, rel, cs)
    if out is Tristate.UNKNOWN and cs.solver is not None:
        if cs.solver.check_sat(emit_smtlib((a, b, rel), cs)) == "unsat":
            return Tristate.TRUE
        if cs.solver.check_sat(emit_smtlib((a, b, rel), cs, negate=False)) == "unsat":
            return Tristate.FALSE
    if out is Tristate.UNKNOWN:
        log.debug("undecided: %s %s %s", a, rel, b)
    return out


# ---------------------------------------------------------------------------
# SMT-LIB

def _smt_term(d: DimExpr) -> str:
    parts = []
    for k, c in d.terms:
        if c == 1:
            parts.append(k)
        elif c < 0:
            parts.append(f"(* (- {-c}) {k})")
        else:
            parts.append(f"(* {c} {k})")
    if d.const or not parts:
        parts.append(str(d.const) if d.const >= 0 else f"(- {-d.const})")
    return parts[0] if len(parts) == 1 else f"(+ {' '.join(parts)})"


_SMT_REL = {"==": "=", "<=": "<=", "<": "<"}


def emit_smtlib(query: tuple[DimLike, DimLike, str], cs: ConstraintStore | None = None,
                negate: bool = True) -> str:
    """SMT-LIB 2 (QF_LIA) script; ``unsat`` on the negated goal means entailed."""
    cs = cs or ConstraintStore()
    a, b, rel = DimExpr.of(query[0]), DimExpr.of(query[1]), query[2]
    syms = sorted(a.symbols | b.symbols | cs.symbols)
    lines = ["(set-logic QF_LIA)"]
    for s in syms:
        lines.append(f"(declare-const {s} Int)")
    for s in syms:
        lines.append(f"(assert (>= {s} 0))")
    for c in cs.constraints:
        lines.append(f"(assert ({_SMT_REL[c.rel]} {_smt_term(c.form)} 0))")
    goal = f"({_SMT_REL[rel]} {_smt_term(a)} {_smt_term(b)})"
    lines.append(f"(assert (not {goal}))" if negate else f"(assert {goal})")
    lines.append("(check-sat)")
    return "\n".join(lines) + "\n"
