"""Expressions over tensor references, clean-expression checks, relations.

Expressions print as s-expressions::

    (concat (t A_1) (t A_2) :dim 1)
    (slice (t X) :dim 0 :start 0 :end s0)
    (sum (t C_1) (t C_2))
    (div (t L) (s 2))

``(t NAME)`` is a tensor reference and ``(s DIM)`` a scalar operand.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Union

from .dims import DimExpr, parse_dim

AttrValue = Union[int, DimExpr, str, tuple]


class ExprParseError(ValueError):
    pass


# Populated by the op registry so attributes get canonical types and order.
_attr_schema: Callable[[str], "tuple[Mapping[str, str], Mapping] | None"] = lambda op: None


_ATTR_CACHE: dict = {}


def set_attr_schema_hook(fn: Callable[[str], "tuple[Mapping[str, str], Mapping] | None"]) -> None:
    global _attr_schema
    _attr_schema = fn
    clear_attr_cache()


def clear_attr_cache() -> None:
    """Forget canonical attribute tuples (call when operator schemas change)."""
    _ATTR_CACHE.clear()


def coerce_attr(kind: str, value) -> AttrValue:
    if kind == "int":
        if isinstance(value, DimExpr):
            return value.to_int()
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected int, got {value!r}")
        return value
    if kind == "dim":
        return DimExpr.of(value)
    if kind == "ints":
        return tuple(coerce_attr("int", v) for v in value)
    if kind == "dims":
        return tuple(DimExpr.of(v) for v in value)
    if kind == "str":
        if not isinstance(value, str):
            raise TypeError(f"expected string, got {value!r}")
        return value
    raise ValueError(f"unknown attribute kind {kind!r}")


def _canon_attrs(op: str, attrs) -> tuple[tuple[str, AttrValue], ...]:
    pairs = attrs.items() if isinstance(attrs, Mapping) else attrs
    try:
        # value types are part of the key so that e.g. True and 1 stay distinct
        key = (op, tuple((k, type(v), v) for k, v in pairs))
        hit = _ATTR_CACHE.get(key)
    except TypeError:  # unhashable values such as lists
        return _canon_attrs_uncached(op, attrs)
    if hit is None:
        hit = _canon_attrs_uncached(op, attrs)
        if len(_ATTR_CACHE) > 100_000:
            _ATTR_CACHE.clear()
        _ATTR_CACHE[key] = hit
    return hit


def _canon_attrs_uncached(op: str, attrs) -> tuple[tuple[str, AttrValue], ...]:
    items = dict(attrs)
    schema = _attr_schema(op)
    if schema is None:
        out = []
        for k in sorted(items):
            v = items[k]
            out.append((k, tuple(v) if isinstance(v, list) else v))
        return tuple(out)
    kinds, defaults = schema
    out = []
    for name, kind in kinds.items():
        if name in items:
            v = coerce_attr(kind, items.pop(name))
            if name in defaults and v == defaults[name]:
                continue  # defaults are implicit so equal terms hash equal
            out.append((name, v))
    for k in sorted(items):  # unknown attrs kept; validation reports them
        v = items[k]
        out.append((k, tuple(v) if isinstance(v, list) else v))
    return tuple(out)


class Expr:
    __slots__ = ()

    def __str__(self) -> str:
        return to_sexpr(self)


@dataclass(frozen=True, eq=True, repr=False)
class TensorRef(Expr):
    name: str

    def __repr__(self) -> str:
        return f"TensorRef({self.name!r})"


@dataclass(frozen=True, eq=True, repr=False)
class ScalarRef(Expr):
    value: DimExpr

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", DimExpr.of(self.value))

    def __repr__(self) -> str:
        return f"ScalarRef({self.value})"


@dataclass(frozen=True, eq=True, repr=False)
class Apply(Expr):
    op: str
    children: tuple[Expr, ...] = ()
    attrs: tuple[tuple[str, AttrValue], ...] = ()
    _hash: int = field(default=0, compare=False, init=False)
    _print: str | None = field(default=None, compare=False, init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(self, "attrs", _canon_attrs(self.op, self.attrs))
        object.__setattr__(self, "_hash", hash((self.op, self.children, self.attrs)))

    def __hash__(self) -> int:
        return self._hash

    def attr(self, name: str, default=None):
        for k, v in self.attrs:
            if k == name:
                return v
        return default

    @property
    def attr_map(self) -> dict[str, AttrValue]:
        return dict(self.attrs)

    def __repr__(self) -> str:
        return f"Apply({to_sexpr(self)})"


def ref(name: str) -> TensorRef:
    return TensorRef(name)


def scalar(value) -> ScalarRef:
    return ScalarRef(DimExpr.of(value))


def app(op: str, *children: Expr, **attrs) -> Apply:
    return Apply(op, tuple(children), tuple(attrs.items()))


# ---------------------------------------------------------------------------
# traversal

def walk(e: Expr) -> Iterator[Expr]:
    stack = [e]
    while stack:
        x = stack.pop()
        yield x
        if isinstance(x, Apply):
            stack.extend(reversed(x.children))


def tensor_refs(e: Expr) -> set[str]:
    return {x.name for x in walk(e) if isinstance(x, TensorRef)}


def depth(e: Expr) -> int:
    if isinstance(e, Apply):
        return 1 + max((depth(c) for c in e.children), default=0)
    return 0


def simplicity(e: Expr) -> int:
    """Number of operator applications in ``e``."""
    return sum(1 for x in walk(e) if isinstance(x, Apply))


def simplicity_key(e: Expr) -> tuple[int, str]:
    return simplicity(e), to_sexpr(e)


def substitute(e: Expr, bindings: Mapping[str, Expr]) -> Expr:
    """Replace every ``TensorRef`` named in ``bindings``; structural only."""
    if not bindings:
        return e
    if isinstance(e, TensorRef):
        return bindings.get(e.name, e)
    if isinstance(e, Apply):
        kids = tuple(substitute(c, bindings) for c in e.children)
        if kids == e.children:
            return e
        return Apply(e.op, kids, e.attrs)
    return e


# ---------------------------------------------------------------------------
# clean expressions

DEFAULT_REARRANGE = frozenset({"slice", "concat", "transpose", "reshape", "identity"})
DEFAULT_REDUCE = frozenset({"sum", "reduce_sum"})


@dataclass(frozen=True)
class CleanOpSet:
    rearrange: frozenset[str] = DEFAULT_REARRANGE
    reduce: frozenset[str] = DEFAULT_REDUCE

    def __post_init__(self) -> None:
        object.__setattr__(self, "rearrange", frozenset(self.rearrange))
        object.__setattr__(self, "reduce", frozenset(self.reduce))
        if not (self.rearrange | self.reduce):
            raise ValueError("clean op set must not be empty")

    @property
    def ops(self) -> frozenset[str]:
        return self.rearrange | self.reduce

    def to_json(self) -> dict:
        return {"rearrange": sorted(self.rearrange), "reduce": sorted(self.reduce)}

    @staticmethod
    def from_json(doc: Mapping) -> "CleanOpSet":
        return CleanOpSet(frozenset(doc.get("rearrange", DEFAULT_REARRANGE)),
                          frozenset(doc.get("reduce", DEFAULT_REDUCE)))


def is_clean(e: Expr, ops: CleanOpSet | None = None) -> bool:
    allowed = (ops or CleanOpSet()).ops
    for x in walk(e):
        if isinstance(x, ScalarRef):
            return False
        if isinstance(x, Apply) and x.op not in allowed:
            return False
    return True


# ---------------------------------------------------------------------------
# printing and parsing

def _fmt_dim(d: DimExpr) -> str:
    return str(d).replace(" ", "")


def _fmt_attr(v: AttrValue) -> str:
    if isinstance(v, DimExpr):
        return _fmt_dim(v)
    if isinstance(v, tuple):
        return "[" + " ".join(_fmt_attr(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v) if (not v or re.search(r"[\s()\[\]\"]", v) or v[0].isdigit()) else v
    return str(v)


def to_sexpr(e: Expr) -> str:
    if isinstance(e, TensorRef):
        return f"(t {e.name})"
    if isinstance(e, ScalarRef):
        return f"(s {_fmt_dim(e.value)})"
    assert isinstance(e, Apply)
    if e._print is None:
        parts = [e.op] + [to_sexpr(c) for c in e.children]
        parts += [f":{k} {_fmt_attr(v)}" for k, v in e.attrs]
        object.__setattr__(e, "_print", "(" + " ".join(parts) + ")")
    return e._print


_SX_TOKEN = re.compile(r'\s*(\(|\)|\[|\]|"(?:[^"\\]|\\.)*"|[^\s()\[\]"]+)')


def _tokenize(text: str) -> list[str]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _SX_TOKEN.match(text, pos)
        if not m:
            raise ExprParseError(f"bad character at {pos} in {text!r}")
        out.append(m.group(1))
        pos = m.end()
    return out


def _atom(tok: str) -> AttrValue:
    if tok.startswith('"'):
        return json.loads(tok)
    if re.fullmatch(r"-?\d+", tok):
        return int(tok)
    if re.fullmatch(r"[s0-9+\-*()]+", tok) and "s" in tok:
        return parse_dim(tok)
    return tok


class _SxParser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def take(self) -> str:
        if self.i >= len(self.toks):
            raise ExprParseError(f"unexpected end of {self.text!r}")
        t = self.toks[self.i]
        self.i += 1
        return t

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def value(self) -> AttrValue:
        tok = self.take()
        if tok == "[":
            items = []
            while self.peek() != "]":
                items.append(self.value())
            self.take()
            return tuple(items)
        if tok in ("(", ")", "]"):
            raise ExprParseError(f"unexpected {tok!r} in attribute of {self.text!r}")
        return _atom(tok)

    def expr(self) -> Expr:
        if self.take() != "(":
            raise ExprParseError(f"expected '(' in {self.text!r}")
        head = self.take()
        if head == "t":
            name = self.take()
            if self.take() != ")":
                raise ExprParseError(f"malformed tensor reference in {self.text!r}")
            return TensorRef(name)
        if head == "s":
            v = self.value()
            if self.take() != ")":
                raise ExprParseError(f"malformed scalar in {self.text!r}")
            return ScalarRef(DimExpr.of(v))
        if head in ("(", ")", "[", "]"):
            raise ExprParseError(f"missing operator in {self.text!r}")
        kids: list[Expr] = []
        attrs: list[tuple[str, AttrValue]] = []
        while True:
            nxt = self.peek()
            if nxt is None:
                raise ExprParseError(f"unbalanced expression {self.text!r}")
            if nxt == ")":
                self.take()
                break
            if nxt == "(":
                if attrs:
                    raise ExprParseError(f"operand after attributes in {self.text!r}")
                kids.append(self.expr())
            elif nxt.startswith(":"):
                self.take()
                attrs.append((nxt[1:], self.value()))
            else:
                raise ExprParseError(f"unexpected token {nxt!r} in {self.text!r}")
        try:
            return Apply(head, tuple(kids), tuple(attrs))
        except (TypeError, ValueError) as exc:
            raise ExprParseError(f"bad attributes in {self.text!r}: {exc}") from exc


def parse_sexpr(text: str) -> Expr:
    p = _SxParser(text)
    e = p.expr()
    if p.peek() is not None:
        raise ExprParseError(f"trailing input in {text!r}")
    return e


# ---------------------------------------------------------------------------
# relations

@dataclass(frozen=True)
class Relation:
    """Multiset of ``(target, expr)`` pairs, deduplicated by canonical print."""

    entries: tuple[tuple[str, Expr], ...] = ()

    def __post_init__(self) -> None:
        seen: set[tuple[str, str]] = set()
        out = []
        for t, e in self.entries:
            key = (t, to_sexpr(e))
            if key not in seen:
                seen.add(key)
                out.append((t, e))
        object.__setattr__(self, "entries", tuple(out))

    @staticmethod
    def of(pairs: Iterable[tuple[str, Expr]]) -> "Relation":
        return Relation(tuple(pairs))

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item) -> bool:
        t, e = item
        return any(t == t2 and to_sexpr(e) == to_sexpr(e2) for t2, e2 in self.entries)

    @property
    def targets(self) -> set[str]:
        return {t for t, _ in self.entries}

    def for_target(self, target: str) -> list[Expr]:
        return [e for t, e in self.entries if t == target]

    def union(self, other: Iterable[tuple[str, Expr]]) -> "Relation":
        return Relation(self.entries + tuple(other))

    def restrict(self, targets: Iterable[str]) -> "Relation":
        keep = set(targets)
        return Relation(tuple((t, e) for t, e in self.entries if t in keep))

    def to_json(self) -> list[dict]:
        return [{"target": t, "expr": to_sexpr(e)} for t, e in self.entries]

    @staticmethod
    def from_json(doc) -> "Relation":
        if not isinstance(doc, list):
            raise ExprParseError("relation document must be a JSON list")
        pairs = []
        for item in doc:
            if not isinstance(item, dict) or "target" not in item or "expr" not in item:
                raise ExprParseError(f"bad relation entry {item!r}")
            pairs.append((str(item["target"]), parse_sexpr(item["expr"])))
        return Relation(tuple(pairs))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @staticmethod
    def loads(text: str) -> "Relation":
        return Relation.from_json(json.loads(text))


def is_complete(r: Relation, graph_or_outputs) -> bool:
    outputs = getattr(graph_or_outputs, "graph_outputs", graph_or_outputs)
    have = r.targets
    return all(o in have for o in outputs)
