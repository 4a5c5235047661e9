"""Lemma type, registry and self-validation.

A lemma is a conditional rewrite between two expression shapes. Code-level
lemmas supply a ``search`` function that, given an e-graph and a matched
e-node, yields ``(class, rhs)`` pairs; the engine adds ``rhs`` and merges it
with ``class``. Each lemma carries a sampler producing small concrete
instances so it can be checked numerically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Collection, Iterable, Mapping, Sequence

import numpy as np

from ..egraph import Budget, EGraph, ENode, ShapeConflict, Term
from ..expr import Expr, tensor_refs, to_sexpr
from ..ops import ShapeError
from ..dims import DimExpr

log = logging.getLogger(__name__)

SearchFn = Callable[[EGraph, int, ENode], Iterable[tuple[int, "Term | int"]]]


class LemmaValidationError(ValueError):
    def __init__(self, name: str, detail: str):
        self.lemma = name
        super().__init__(f"lemma {name!r}: {detail}")


class DuplicateName(ValueError):
    pass


@dataclass
class LemmaSample:
    """A concrete left-hand side plus the leaf shapes it needs."""

    lhs: Expr
    shapes: dict[str, tuple[int, ...]]
    extra: list[Expr] = field(default_factory=list)  # pre-existing nodes for constrained lemmas
    ints: dict[str, int] = field(default_factory=dict)  # integer leaves and their exclusive bound


@dataclass(frozen=True)
class Rule:
    root_ops: tuple[str, ...]
    search: SearchFn


@dataclass(frozen=True)
class Lemma:
    name: str
    lhs: str
    rhs: str
    rules: tuple[Rule, ...]
    family: str = "misc"
    condition: str = "true"
    direction: str = "forward"
    constrained: bool = False
    sample: Callable[[np.random.Generator], LemmaSample] | None = None
    doc: str = ""

    def describe(self) -> dict:
        return {"name": self.name, "family": self.family, "lhs": self.lhs, "rhs": self.rhs,
                "condition": self.condition, "direction": self.direction,
                "constrained": self.constrained}


def lemma(name: str, lhs: str, rhs: str, *rules: Rule, **kw) -> Lemma:
    return Lemma(name, lhs, rhs, tuple(rules), **kw)


# ---------------------------------------------------------------------------
# applying lemmas

def matches(eg: EGraph, lem: Lemma,
            only: Collection[int] | None = None) -> list[tuple[int, "Term | int", tuple]]:
    """All ``(class, rhs, key)`` instantiations of ``lem`` in the current e-graph.

    ``only`` restricts the search to nodes in the given classes.
    """
    out = []
    for ri, rule in enumerate(lem.rules):
        for op in rule.root_ops:
            for cid, node in list(eg.by_op(op)):
                if only is not None and cid not in only:
                    continue
                try:
                    found = list(rule.search(eg, cid, node))
                except ShapeError:
                    continue
                for k, (root, rhs) in enumerate(found):
                    out.append((root, rhs, (ri, node, k)))
    return out


def apply_match(eg: EGraph, root: int, rhs: "Term | int") -> bool:
    """Add ``rhs`` and merge with ``root``; ill-shaped instantiations are skipped."""
    try:
        c = eg.add_term(rhs)
    except ShapeError as exc:
        log.debug("skipped ill-shaped rewrite: %s", exc)
        return False
    return eg.union(root, c)


# ---------------------------------------------------------------------------
# validation

def _sample_graph(s: LemmaSample) -> tuple[EGraph, int]:
    shapes = {k: tuple(DimExpr(v) for v in shp) for k, shp in s.shapes.items()}
    eg = EGraph(ref_shape=lambda sp, n: shapes[n], budget=Budget(1, 5000))
    for e in s.extra:
        eg.add_expr(e)
    root = eg.add_expr(s.lhs)
    eg.rebuild()
    return eg, root


def sample_values(s: LemmaSample, rng: np.random.Generator) -> dict[str, np.ndarray]:
    vals = {}
    for name, shp in sorted(s.shapes.items()):
        if name in s.ints:
            vals[name] = rng.integers(0, s.ints[name], size=shp).astype(np.float64)
        else:
            vals[name] = rng.standard_normal(shp)
    return vals


def instantiate(lem: Lemma, s: LemmaSample) -> list[Expr]:
    """Expressions equal to ``s.lhs`` obtained by one round of ``lem``."""
    eg, root = _sample_graph(s)
    before = eg.node_set()
    for r, rhs, _ in matches(eg, lem):
        apply_match(eg, r, rhs)
    eg.rebuild()
    if eg.node_set() == before and eg.n_unions == 0:
        return []
    lhs_print = to_sexpr(s.lhs)
    return [e for e in eg.terms(root, max_depth=4, limit=64) if to_sexpr(e) != lhs_print]


def validate_lemma(lem: Lemma, rng: np.random.Generator | None = None, instances: int = 1,
                   rtol: float = 1e-6) -> int:
    """Check ``lem`` on random concrete instances; returns the number of checked equalities."""
    from ..oracle import eval_expr

    if not lem.rules:
        raise LemmaValidationError(lem.name, "has no rewrite rules")
    if lem.direction not in ("forward", "both"):
        raise LemmaValidationError(lem.name, f"bad direction {lem.direction!r}")
    if lem.sample is None:
        return 0
    rng = rng or np.random.default_rng(0)
    checked = 0
    for _ in range(instances):
        s = lem.sample(rng)
        try:
            rhs = instantiate(lem, s)
        except ShapeConflict as exc:
            raise LemmaValidationError(lem.name, f"left and right shapes differ: {exc}") from exc
        if not rhs:
            raise LemmaValidationError(lem.name, f"did not fire on its sample {to_sexpr(s.lhs)}")
        vals = sample_values(s, rng)
        want = eval_expr(s.lhs, vals)
        for e in rhs:
            if not tensor_refs(e) <= set(s.shapes):
                raise LemmaValidationError(lem.name, f"unbound tensor in {to_sexpr(e)}")
            got = eval_expr(e, vals)
            if got.shape != want.shape or not np.allclose(got, want, rtol=rtol, atol=1e-9):
                raise LemmaValidationError(
                    lem.name, f"numeric mismatch: {to_sexpr(s.lhs)} vs {to_sexpr(e)}")
            checked += 1
    return checked


# ---------------------------------------------------------------------------
# registry

_REGISTRY: dict[str, Lemma] = {}


def register_lemma(lem: Lemma, validate: bool = True) -> Lemma:
    if lem.name in _REGISTRY:
        raise DuplicateName(f"lemma {lem.name!r} is already registered")
    if validate:
        validate_lemma(lem)
    _REGISTRY[lem.name] = lem
    return lem


def unregister_lemma(name: str) -> None:
    _REGISTRY.pop(name, None)


def registered_lemmas() -> list[Lemma]:
    return list(_REGISTRY.values())


def get_lemma(name: str) -> Lemma:
    return _REGISTRY[name]


def select(names: Sequence[str] | None) -> list[Lemma]:
    if names is None:
        return registered_lemmas()
    return [_REGISTRY[n] for n in names]
