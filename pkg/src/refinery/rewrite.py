"""Saturation driver and the three expression rewrite functions."""

from __future__ import annotations

import itertools
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .dims import DimExpr
from .egraph import Budget, BudgetExceeded, EGraph
from .expr import Apply, Expr, Relation, TensorRef, depth, simplicity_key, tensor_refs, to_sexpr
from .lemmas import Lemma, apply_match, matches
from .symbolic import ConstraintStore

log = logging.getLogger(__name__)


@dataclass
class SaturationResult:
    iterations: int = 0
    stop: str = "saturated"  # saturated | iterations | nodes
    counts: Counter = field(default_factory=Counter)

    @property
    def budget_hit(self) -> bool:
        return self.stop != "saturated"


def saturate(eg: EGraph, lemmas: Sequence[Lemma], budget: Budget | None = None,
             seen: set | None = None, incremental: bool = True) -> SaturationResult:
    """Apply ``lemmas`` until fixpoint or budget; counts distinct instantiations."""
    budget = budget or eg.budget
    seen = set() if seen is None else seen
    res = SaturationResult()
    eg.rebuild()
    for it in range(budget.max_iterations):
        res.iterations = it + 1
        # unconstrained lemmas only inspect a node's descendants, so nodes
        # outside the changed region cannot produce new matches
        cone = eg.take_dirty()
        found = []
        for lem in lemmas:
            only = cone if incremental and not lem.constrained else None
            for root, rhs, key in matches(eg, lem, only):
                found.append((lem.name, root, rhs, key))
        nodes, unions = eg.n_nodes, eg.n_unions
        try:
            for name, root, rhs, (ri, node, k) in found:
                mk = (name, ri, eg.canon(node), k)
                if mk not in seen:
                    seen.add(mk)
                    res.counts[name] += 1
                apply_match(eg, root, rhs)
        except BudgetExceeded as exc:
            log.warning("saturation stopped: %s", exc)
            res.stop = "nodes"
            eg.mark_all_dirty()
            eg.rebuild()
            return res
        eg.rebuild()
        if eg.n_nodes == nodes and eg.n_unions == unions:
            return res
    res.stop = "iterations"
    log.warning("saturation stopped after %d iterations", budget.max_iterations)
    return res


def _shape_lookup(shapes: Mapping[str, Sequence] | None):
    table = {k: tuple(DimExpr.of(d) for d in v) for k, v in (shapes or {}).items()}
    return lambda space, name: table.get(name)


def rewrite_using_lemma(e: Expr, lemmas: Sequence[Lemma], cs: ConstraintStore | None = None,
                        budget: Budget | None = None, shapes: Mapping[str, Sequence] | None = None,
                        max_depth: int | None = None, limit: int = 500) -> set[Expr]:
    """Expressions equivalent to ``e`` under ``lemmas`` (bounded enumeration)."""
    eg = EGraph(cs, _shape_lookup(shapes), budget)
    root = eg.add_expr(e)
    saturate(eg, lemmas)
    out = set(eg.terms(root, max_depth if max_depth is not None else depth(e) + 2, limit))
    out.add(e)
    return out


def rewrite_t_to_expr(e: Expr, r: Relation) -> set[Expr]:
    """Every combination of keeping each mapped tensor or replacing it by one of its mappings."""
    from .expr import substitute

    names = sorted(n for n in tensor_refs(e) if r.for_target(n))
    options = [[None] + r.for_target(n) for n in names]
    out = set()
    for combo in itertools.product(*options):
        bindings = {n: x for n, x in zip(names, combo) if x is not None}
        out.add(substitute(e, bindings))
    return out


def _replace(e: Expr, table: Mapping[str, str]) -> Expr:
    key = to_sexpr(e)
    if key in table:
        return TensorRef(table[key])
    if isinstance(e, Apply):
        kids = tuple(_replace(c, table) for c in e.children)
        return e if kids == e.children else Apply(e.op, kids, e.attrs)
    return e


def rewrite_expr_to_t(e: Expr, r: Relation) -> set[Expr]:
    """Replace occurrences of mapped subexpressions by the tensors they define."""
    prints = {to_sexpr(x) for x in _subterms(e)}
    usable = [(t, to_sexpr(x)) for t, x in r if to_sexpr(x) in prints]
    out = {e}
    for k in range(1, len(usable) + 1):
        for subset in itertools.combinations(usable, k):
            table: dict[str, str] = {}
            for t, p in subset:
                table.setdefault(p, t)
            out.add(_replace(e, table))
    return out


def _subterms(e: Expr) -> Iterable[Expr]:
    yield e
    if isinstance(e, Apply):
        for c in e.children:
            yield from _subterms(c)


def self_provable_groups(exprs: Sequence[Expr], lemmas: Sequence[Lemma], shapes,
                         cs: ConstraintStore | None = None,
                         budget: Budget | None = None) -> list[list[Expr]]:
    """Partition ``exprs`` into classes provably equal by lemmas alone."""
    if len(exprs) < 2:
        return [list(exprs)]
    eg = EGraph(cs, shapes, budget or Budget(8, 5000))
    ids = [eg.add_expr(x) for x in exprs]
    saturate(eg, lemmas)
    groups: dict[int, list[Expr]] = {}
    for x, c in zip(exprs, ids):
        groups.setdefault(eg.find(c), []).append(x)
    return list(groups.values())


def prune(exprs: Sequence[Expr], lemmas: Sequence[Lemma], shapes, cs=None) -> list[Expr]:
    """Keep the simplest member of each self-provable equivalence group."""
    groups = self_provable_groups(exprs, lemmas, shapes, cs)
    return sorted((min(g, key=simplicity_key) for g in groups), key=simplicity_key)
