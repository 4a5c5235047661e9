"""Lemmas written as expression patterns, loadable from JSON.

Example document::

    {"lemmas": [{
        "name": "relu-concat2",
        "lhs": "(relu (concat ?a ?b :dim ?d))",
        "rhs": "(concat (relu ?a) (relu ?b) :dim ?d)",
        "condition": "eq(shape(?a, 1), shape(?b, 1))",
        "direction": "forward",
        "samples": [{"?a": [2, 3], "?b": [1, 3], "?d": 0}]
    }]}

``?name`` in operand position binds an e-class; in attribute position it
binds the attribute value. Conditions use ``eq``, ``le``, ``lt``, ``and``,
``or``, ``not``, ``shape(?x, i)``, ``rank(?x)`` and integer literals.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from ..dims import DimExpr
from ..egraph import EGraph, T, Term
from ..expr import Apply, Expr, TensorRef, _canon_attrs, _tokenize, _atom
from ..ops import has_op
from ..symbolic import Tristate, decide_cmp
from .base import Lemma, LemmaSample, LemmaValidationError, Rule


@dataclass(frozen=True)
class PVar:
    name: str


@dataclass(frozen=True)
class PApp:
    op: str
    kids: tuple
    attrs: tuple  # (name, value | PVar)


Pattern = "PVar | PApp"


class _PatParser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def take(self) -> str:
        if self.i >= len(self.toks):
            raise LemmaValidationError("?", f"unexpected end of pattern {self.text!r}")
        self.i += 1
        return self.toks[self.i - 1]

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def pattern(self):
        tok = self.take()
        if tok.startswith("?"):
            return PVar(tok)
        if tok != "(":
            raise LemmaValidationError("?", f"bad pattern token {tok!r} in {self.text!r}")
        op = self.take()
        kids, attrs = [], []
        while self.peek() != ")":
            nxt = self.peek()
            if nxt is None:
                raise LemmaValidationError("?", f"unbalanced pattern {self.text!r}")
            if nxt.startswith(":"):
                self.take()
                v = self.take()
                if v == "[":
                    items = []
                    while self.peek() != "]":
                        items.append(_atom(self.take()))
                    self.take()
                    attrs.append((nxt[1:], tuple(items)))
                else:
                    attrs.append((nxt[1:], PVar(v) if v.startswith("?") else _atom(v)))
            else:
                kids.append(self.pattern())
        self.take()
        return PApp(op, tuple(kids), tuple(attrs))


def parse_pattern(text: str):
    p = _PatParser(text)
    out = p.pattern()
    if p.peek() is not None:
        raise LemmaValidationError("?", f"trailing input in pattern {text!r}")
    return out


def pattern_vars(p) -> tuple[set[str], set[str]]:
    """(operand variables, attribute variables)."""
    if isinstance(p, PVar):
        return {p.name}, set()
    ops, ats = set(), set()
    for k in p.kids:
        a, b = pattern_vars(k)
        ops |= a
        ats |= b
    ats |= {v.name for _, v in p.attrs if isinstance(v, PVar)}
    return ops, ats


def _attr_eq(eg: EGraph, a, b) -> bool:
    if isinstance(a, DimExpr) or isinstance(b, DimExpr):
        try:
            return eg.dim_eq(DimExpr.of(a), DimExpr.of(b))
        except TypeError:
            return False
    return a == b


def ematch(eg: EGraph, p, c: int, env: dict) -> Iterator[dict]:
    if isinstance(p, PVar):
        bound = env.get(p.name)
        if bound is None:
            yield {**env, p.name: eg.find(c)}
        elif eg.equiv(bound, c):
            yield env
        return
    for n in eg.nodes_op(c, p.op):
        if len(n[2]) != len(p.kids):
            continue
        have = dict(n[1])
        e2 = dict(env)
        ok = True
        for name, v in p.attrs:
            if name not in have:
                ok = False
                break
            if isinstance(v, PVar):
                if v.name in e2 and not _attr_eq(eg, e2[v.name], have[name]):
                    ok = False
                    break
                e2[v.name] = have[name]
            elif not _attr_eq(eg, v, have[name]):
                ok = False
                break
        if ok:
            yield from _match_kids(eg, p.kids, n[2], e2)


def _match_kids(eg, pats, kids, env):
    if not pats:
        yield env
        return
    for e2 in ematch(eg, pats[0], kids[0], env):
        yield from _match_kids(eg, pats[1:], kids[1:], e2)


def build(p, env: dict) -> "Term | int":
    if isinstance(p, PVar):
        return env[p.name]
    attrs = {k: (env[v.name] if isinstance(v, PVar) else v) for k, v in p.attrs}
    return T(p.op, *[build(k, env) for k in p.kids], **attrs)


# -- conditions ---------------------------------------------------------------

_COND_TOKEN = re.compile(r"\s*(\?\w+|\w+|-?\d+|[(),])")


def parse_condition(text: str):
    toks, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _COND_TOKEN.match(text, pos)
        if not m:
            raise LemmaValidationError("?", f"bad condition {text!r}")
        toks.append(m.group(1))
        pos = m.end()
    i = 0

    def expr():
        nonlocal i
        tok = toks[i]
        i += 1
        if i < len(toks) and toks[i] == "(":
            i += 1
            args = []
            while toks[i] != ")":
                args.append(expr())
                if toks[i] == ",":
                    i += 1
            i += 1
            if tok not in ("eq", "le", "lt", "and", "or", "not", "shape", "rank"):
                raise LemmaValidationError("?", f"unknown condition function {tok!r}")
            return (tok, *args)
        if re.fullmatch(r"-?\d+", tok):
            return int(tok)
        if tok.startswith("?"):
            return tok
        if tok == "true":
            return True
        raise LemmaValidationError("?", f"bad condition token {tok!r}")

    if not toks:
        return True
    try:
        out = expr()
    except IndexError:
        raise LemmaValidationError("?", f"truncated condition {text!r}") from None
    if i != len(toks):
        raise LemmaValidationError("?", f"trailing input in condition {text!r}")
    return out


def eval_condition(eg: EGraph, cond, env: dict) -> Any:
    if isinstance(cond, bool):
        return cond
    if isinstance(cond, int):
        return DimExpr(cond)
    if isinstance(cond, str):
        return env[cond]
    op, *args = cond
    if op == "shape":
        shp = eg.shape(env[args[0]])
        i = args[1]
        return None if shp is None or i >= len(shp) else shp[i]
    if op == "rank":
        shp = eg.shape(env[args[0]])
        return None if shp is None else DimExpr(len(shp))
    if op in ("eq", "le", "lt"):
        a, b = (eval_condition(eg, x, env) for x in args)
        if a is None or b is None:
            return False
        rel = {"eq": "==", "le": "<=", "lt": "<"}[op]
        return decide_cmp(DimExpr.of(a), DimExpr.of(b), rel, eg.cs) is Tristate.TRUE
    if op == "and":
        return all(eval_condition(eg, x, env) for x in args)
    if op == "or":
        return any(eval_condition(eg, x, env) for x in args)
    if op == "not":
        return not eval_condition(eg, args[0], env)
    raise LemmaValidationError("?", f"unknown condition {op!r}")


# -- lemma construction ----------------------------------------------------------

def pattern_lemma(name: str, lhs: str, rhs: str, condition: str = "true", direction: str = "forward",
                  samples: list[dict] | None = None, family: str = "user", doc: str = "") -> Lemma:
    try:
        lp, rp = parse_pattern(lhs), parse_pattern(rhs)
        cond = parse_condition(condition)
    except LemmaValidationError as exc:
        raise LemmaValidationError(name, str(exc).split(": ", 1)[-1]) from None
    lo, la = pattern_vars(lp)
    ro, ra = pattern_vars(rp)
    if not isinstance(lp, PApp):
        raise LemmaValidationError(name, "left-hand side must be an operator application")
    if not (ro | ra) <= (lo | la):
        raise LemmaValidationError(name, f"unbound pattern variable(s) {sorted((ro | ra) - (lo | la))}")
    if direction == "both":
        if not isinstance(rp, PApp) or not (lo | la) <= (ro | ra):
            raise LemmaValidationError(name, "reverse direction would leave variables unbound")
    for p in (lp, rp):
        for op in _ops_of(p):
            if not has_op(op):
                raise LemmaValidationError(name, f"unregistered operator {op!r}")

    def make(src, dst):
        def search(eg, c, n):
            for env in _match_kids(eg, src.kids, n[2], _root_env(eg, src, n)):
                if env is None:
                    continue
                if cond is True or eval_condition(eg, cond, env):
                    yield c, build(dst, env)
        return Rule((src.op,), search)

    rules = [make(lp, rp)]
    if direction == "both":
        rules.append(make(rp, lp))
    sampler = None
    if samples:
        sampler = _sampler(lp, samples)
    return Lemma(name, lhs, rhs, tuple(rules), family=family, condition=condition,
                 direction=direction, sample=sampler, doc=doc)


def _root_env(eg, p: PApp, n):
    if len(n[2]) != len(p.kids):
        return None
    have = dict(n[1])
    env: dict = {}
    for name, v in p.attrs:
        if name not in have:
            return None
        if isinstance(v, PVar):
            env[v.name] = have[name]
        elif not _attr_eq(eg, v, have[name]):
            return None
    return env


def _ops_of(p) -> set[str]:
    if isinstance(p, PVar):
        return set()
    out = {p.op}
    for k in p.kids:
        out |= _ops_of(k)
    return out


def _instantiate(p, s: dict) -> Expr:
    if isinstance(p, PVar):
        return TensorRef(p.name[1:])
    attrs = {k: (s[v.name] if isinstance(v, PVar) else v) for k, v in p.attrs}
    return Apply(p.op, tuple(_instantiate(k, s) for k in p.kids), _canon_attrs(p.op, attrs))


def _sampler(lp, samples: list[dict]):
    ops, _ = pattern_vars(lp)
    state = {"i": 0}

    def sample(rng):
        s = samples[state["i"] % len(samples)]
        state["i"] += 1
        shapes = {v[1:]: tuple(s[v]) for v in ops}
        return LemmaSample(_instantiate(lp, s), shapes)

    return sample


def load_lemma_file(path: str | Path) -> list[Lemma]:
    doc = json.loads(Path(path).read_text())
    items = doc["lemmas"] if isinstance(doc, dict) else doc
    out = []
    for item in items:
        out.append(pattern_lemma(item["name"], item["lhs"], item["rhs"], item.get("condition", "true"),
                                 item.get("direction", "forward"), item.get("samples"),
                                 item.get("family", "user"), item.get("doc", "")))
    return out
