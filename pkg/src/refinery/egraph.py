"""E-graph with hash-consing, congruence closure and per-class shapes.

E-nodes are plain tuples ``(op, attrs, children)``. Leaves use reserved
operator names: ``@d`` and ``@s`` for tensor references into the
destination and source graph (``attrs`` holds the tensor id) and ``#`` for
scalar operands (``attrs`` holds a :class:`DimExpr`).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Collection, Iterable, Iterator, Mapping, Sequence

from .dims import DimExpr
from .expr import Apply, Expr, ScalarRef, TensorRef, _canon_attrs, to_sexpr
from .ops import Shape, ShapeError, get_op, same
from .symbolic import ConstraintStore, Tristate, decide_cmp
from .unionfind import UnionFind

log = logging.getLogger(__name__)

DST = "@d"
SRC = "@s"
SCALAR = "#"
LEAVES = frozenset({DST, SRC, SCALAR})

ENode = tuple  # (op, attrs, children)


class BudgetExceeded(RuntimeError):
    pass


class ShapeConflict(ValueError):
    """Two classes with provably different shapes were merged."""


@dataclass(frozen=True)
class Budget:
    max_iterations: int = 30
    max_nodes: int = 50_000

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.max_nodes < 1:
            raise ValueError("saturation budgets must be positive")


class Term:
    """Build recipe for lemma right-hand sides: children are class ids or terms."""

    __slots__ = ("op", "kids", "attrs")

    def __init__(self, op: str, kids: Sequence["Term | int"], attrs: Mapping | tuple = ()):
        self.op = op
        self.kids = tuple(kids)
        self.attrs = _canon_attrs(op, attrs)

    def __repr__(self) -> str:
        a = " ".join(f":{k} {v}" for k, v in self.attrs)
        return f"({self.op} {' '.join(map(repr, self.kids))}{' ' + a if a else ''})"


def T(op: str, *kids: "Term | int", **attrs) -> Term:
    return Term(op, kids, attrs)


class EClass:
    __slots__ = ("id", "nodes", "parents", "shape")

    def __init__(self, cid: int, node: ENode, shape: Shape | None):
        self.id = cid
        self.nodes: list[ENode] = [node]
        self.parents: list[tuple[ENode, int]] = []
        self.shape = shape


class EGraph:
    def __init__(self, cs: ConstraintStore | None = None,
                 ref_shape: Callable[[str, str], Shape] | None = None,
                 budget: Budget | None = None):
        self.cs = cs or ConstraintStore()
        self.ref_shape = ref_shape
        self.budget = budget or Budget()
        self.uf = UnionFind()
        self.classes: dict[int, EClass] = {}
        self.memo: dict[ENode, int] = {}
        self.pending: list[int] = []
        self.n_nodes = 0
        self.n_unions = 0
        self._index: dict[str, list[tuple[int, ENode]]] | None = None
        self.touched: set[int] = set()  # classes created or merged since the last take_dirty()

    # -- basic access -----------------------------------------------------

    def find(self, c: int) -> int:
        return self.uf.find(c)

    def canon(self, n: ENode) -> ENode:
        kids = n[2]
        return (n[0], n[1], self.uf.canon(kids)) if kids else n

    def shape(self, c: int) -> Shape | None:
        return self.classes[self.find(c)].shape

    def nodes(self, c: int) -> list[ENode]:
        return self.classes[self.find(c)].nodes

    def nodes_op(self, c: int, op: str) -> list[ENode]:
        return [n for n in self.classes[self.find(c)].nodes if n[0] == op]

    def parents(self, c: int) -> list[tuple[ENode, int]]:
        return [(self.canon(n), self.find(p)) for n, p in self.classes[self.find(c)].parents]

    def take_dirty(self) -> set[int]:
        """Touched classes plus all their ancestors; resets the touched set."""
        find = self.find
        out: set[int] = set()
        stack = [find(c) for c in self.touched]
        self.touched = set()
        while stack:
            c = stack.pop()
            if c in out:
                continue
            out.add(c)
            stack.extend(find(p) for _, p in self.classes[c].parents)
        return out

    def mark_all_dirty(self) -> None:
        self.touched.update(self.classes)

    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    def by_op(self, op: str) -> list[tuple[int, ENode]]:
        if self._index is None:
            idx: dict[str, list[tuple[int, ENode]]] = {}
            for cid in sorted(self.classes):
                for n in self.classes[cid].nodes:
                    idx.setdefault(n[0], []).append((cid, n))
            self._index = idx
        return self._index.get(op, [])

    def node_set(self) -> set[ENode]:
        return {self.canon(n) for c in self.classes.values() for n in c.nodes}

    # -- construction -----------------------------------------------------

    def _node_shape(self, n: ENode) -> Shape | None:
        op, attrs, kids = n
        if op == SCALAR:
            return ()
        if op in (DST, SRC):
            return self.ref_shape(op, attrs) if self.ref_shape else None
        shapes = [self.classes[k].shape for k in kids]
        if any(s is None for s in shapes):
            return None
        res = get_op(op).shape(shapes, dict(attrs), self.cs)
        if isinstance(res, list):
            raise ShapeError(f"multi-output operator {op} cannot appear in expressions")
        return tuple(res)

    def add(self, n: ENode) -> int:
        n = self.canon(n)
        hit = self.memo.get(n)
        if hit is not None:
            return self.find(hit)
        shape = self._node_shape(n)
        if self.n_nodes >= self.budget.max_nodes:
            raise BudgetExceeded(f"e-graph node budget {self.budget.max_nodes} exhausted")
        cid = self.uf.make()
        self.classes[cid] = EClass(cid, n, shape)
        for k in set(n[2]):
            self.classes[k].parents.append((n, cid))
        self.memo[n] = cid
        self.touched.add(cid)
        self.n_nodes += 1
        self._index = None
        return cid

    def add_ref(self, name: str, space: str = DST) -> int:
        return self.add((space, name, ()))

    def add_scalar(self, value) -> int:
        return self.add((SCALAR, DimExpr.of(value), ()))

    def add_expr(self, e: Expr, space: str = DST,
                 leaves: Mapping[str, int] | None = None) -> int:
        """Insert ``e``; tensor references resolve through ``leaves`` first."""
        if isinstance(e, TensorRef):
            if leaves is not None and e.name in leaves:
                return self.find(leaves[e.name])
            return self.add_ref(e.name, space)
        if isinstance(e, ScalarRef):
            return self.add_scalar(e.value)
        assert isinstance(e, Apply)
        kids = tuple(self.add_expr(c, space, leaves) for c in e.children)
        return self.add((e.op, e.attrs, kids))

    def add_term(self, t: "Term | int") -> int:
        if isinstance(t, int):
            return self.find(t)
        kids = tuple(self.add_term(k) for k in t.kids)
        return self.add((t.op, t.attrs, kids))

    def lookup(self, t: "Term | int | ENode") -> int | None:
        """Class of ``t`` if it is already represented, without adding anything."""
        if isinstance(t, int):
            return self.find(t)
        if isinstance(t, tuple):
            hit = self.memo.get(self.canon(t))
            return None if hit is None else self.find(hit)
        kids = []
        for k in t.kids:
            c = self.lookup(k)
            if c is None:
                return None
            kids.append(c)
        hit = self.memo.get((t.op, t.attrs, tuple(kids)))
        return None if hit is None else self.find(hit)

    def lookup_expr(self, e: Expr, space: str = DST) -> int | None:
        if isinstance(e, TensorRef):
            return self.lookup((space, e.name, ()))
        if isinstance(e, ScalarRef):
            return self.lookup((SCALAR, e.value, ()))
        kids = []
        for c in e.children:
            k = self.lookup_expr(c, space)
            if k is None:
                return None
            kids.append(k)
        return self.lookup((e.op, e.attrs, tuple(kids)))

    # -- merging ----------------------------------------------------------

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        ca, cb = self.classes[ra], self.classes[rb]
        self._check_shapes(ca.shape, cb.shape)
        root = self.uf.union(ra, rb)
        keep, gone = (ca, cb) if root == ra else (cb, ca)
        keep.nodes.extend(gone.nodes)
        keep.parents.extend(gone.parents)
        if keep.shape is None:
            keep.shape = gone.shape
        del self.classes[gone.id]
        self.pending.append(root)
        self.touched.add(root)
        self.n_unions += 1
        self._index = None
        return True

    def _check_shapes(self, a: Shape | None, b: Shape | None) -> None:
        if a is None or b is None:
            return
        if len(a) != len(b):
            raise ShapeConflict(f"rank mismatch {len(a)} vs {len(b)}")
        for x, y in zip(a, b):
            if decide_cmp(x, y, "==", self.cs) is Tristate.FALSE:
                raise ShapeConflict(f"dimension mismatch {x} vs {y}")

    def rebuild(self) -> None:
        """Restore the hash-cons and congruence invariants."""
        while self.pending:
            todo = sorted({self.find(c) for c in self.pending})
            self.pending = []
            for c in todo:
                self._repair(self.find(c))
        for cls in self.classes.values():
            cls.nodes = list(dict.fromkeys(self.canon(n) for n in cls.nodes))
        self._index = None

    def _repair(self, c: int) -> None:
        cls = self.classes[c]
        old = list(cls.parents)
        for n, _ in old:
            self.memo.pop(n, None)
        fresh: dict[ENode, int] = {}
        for n, p in old:
            n = self.canon(n)
            p = self.find(p)
            if n in fresh and self.find(fresh[n]) != p:
                self.union(fresh[n], p)
                p = self.find(p)
            other = self.memo.get(n)
            if other is not None and self.find(other) != p:
                self.union(other, p)
                p = self.find(p)
            fresh[n] = p
            self.memo[n] = p
        if c in self.classes:
            cls = self.classes[c]
            extra = cls.parents[len(old):]  # merged in while repairing; repaired later
            cls.parents = list(fresh.items()) + extra

    # -- queries ----------------------------------------------------------

    def equiv(self, a: int, b: int) -> bool:
        return self.find(a) == self.find(b)

    def dim_eq(self, a: DimExpr, b: DimExpr) -> bool:
        return decide_cmp(a, b, "==", self.cs) is Tristate.TRUE

    def dim_le(self, a: DimExpr, b: DimExpr) -> bool:
        return decide_cmp(a, b, "<=", self.cs) is Tristate.TRUE

    def dim_lt(self, a: DimExpr, b: DimExpr) -> bool:
        return decide_cmp(a, b, "<", self.cs) is Tristate.TRUE

    def shapes_eq(self, a: Shape | None, b: Shape | None) -> bool:
        return (a is not None and b is not None and len(a) == len(b)
                and all(same(x, y, self.cs) for x, y in zip(a, b)))

    # -- extraction -------------------------------------------------------

    def reachable(self, roots: Iterable[int]) -> list[int]:
        seen: set[int] = set()
        stack = [self.find(r) for r in roots]
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            for n in self.classes[c].nodes:
                stack.extend(self.find(k) for k in n[2])
        return sorted(seen)

    def _postorder(self, roots: Sequence[int]) -> list[int]:
        # children before parents, so acyclic regions settle in one pass
        seen: set[int] = set()
        out: list[int] = []
        for r in roots:
            if r in seen:
                continue
            seen.add(r)
            stack = [(r, iter(self._kids(r)))]
            while stack:
                c, it = stack[-1]
                for k in it:
                    if k not in seen:
                        seen.add(k)
                        stack.append((k, iter(self._kids(k))))
                        break
                else:
                    stack.pop()
                    out.append(c)
        return out

    def _kids(self, c: int) -> list[int]:
        find = self.find
        return sorted({find(k) for n in self.classes[c].nodes for k in n[2]})

    def extract_clean(self, roots: Iterable[int], ops: frozenset[str], k: int = 8,
                      max_passes: int = 64, allow_scalars: bool = False,
                      leaves: Collection[str] | None = None) -> dict[int, list[Expr]]:
        """Up to ``k`` simplest clean terms over destination refs per root class.

        Ranking is by operator count, ties broken by canonical print. When
        ``leaves`` is given only those destination tensors may appear.
        """
        roots = [self.find(r) for r in roots]
        scope = self._postorder(roots)
        users: dict[int, set[int]] = {}
        for c in scope:
            for kid in self._kids(c):
                users.setdefault(kid, set()).add(c)
        best: dict[int, list[tuple[tuple[int, str], Expr]]] = {}
        dirty = set(scope)  # classes whose children changed since they were last ranked
        for _ in range(max_passes):
            if not dirty:
                break
            for c in scope:
                if c not in dirty:
                    continue
                dirty.discard(c)
                cands = dict(best.get(c, ()))
                for n in self.classes[c].nodes:
                    for key, e in self._clean_candidates(n, ops, best, k, allow_scalars, leaves):
                        cands.setdefault(key, e)
                ranked = sorted(cands.items(), key=lambda kv: kv[0])[:k]
                if ranked and [x[0] for x in ranked] != [x[0] for x in best.get(c, ())]:
                    best[c] = ranked
                    dirty |= users.get(c, set())
        return {r: [e for _, e in best.get(r, ())] for r in roots}

    def _clean_candidates(self, n: ENode, ops, best, k, allow_scalars=False,
                          leaves=None) -> Iterator[tuple[tuple[int, str], Expr]]:
        op, attrs, kids = n
        if op == DST and leaves is not None and attrs not in leaves:
            return
        if op == DST or (op == SCALAR and allow_scalars):
            e = TensorRef(attrs) if op == DST else ScalarRef(attrs)
            yield (0, to_sexpr(e)), e
            return
        if op in LEAVES or op not in ops:
            return
        opts = []
        for kid in kids:
            b = best.get(self.find(kid))
            if not b:
                return
            opts.append(b)
        base = [o[0] for o in opts]
        combos = [tuple(base)]
        for i, o in enumerate(opts):
            for alt in o[1:k]:
                combos.append(tuple(base[:i] + [alt] + base[i + 1:]))
        for combo in combos:
            e = Apply(op, tuple(x[1] for x in combo), attrs)
            yield (1 + sum(x[0][0] for x in combo), to_sexpr(e)), e

    def terms(self, c: int, max_depth: int = 4, limit: int = 200) -> list[Expr]:
        """Enumerate expressions represented by class ``c`` (bounded)."""
        memo: dict[tuple[int, int], list[Expr]] = {}

        def go(cid: int, d: int) -> list[Expr]:
            cid = self.find(cid)
            key = (cid, d)
            if key in memo:
                return memo[key]
            memo[key] = []
            out: list[Expr] = []
            for op, attrs, kids in self.classes[cid].nodes:
                if op in (DST, SRC):
                    out.append(TensorRef(attrs))
                elif op == SCALAR:
                    out.append(ScalarRef(attrs))
                elif d > 0:
                    for combo in itertools.islice(itertools.product(*(go(x, d - 1) for x in kids)), limit):
                        out.append(Apply(op, combo, attrs))
                if len(out) >= limit:
                    break
            memo[key] = out[:limit]
            return memo[key]

        return go(c, max_depth)

    def check_invariants(self) -> None:
        """Assert hash-cons and congruence closure (used by tests)."""
        seen: dict[ENode, int] = {}
        for cid, cls in self.classes.items():
            assert self.find(cid) == cid
            for n in cls.nodes:
                cn = self.canon(n)
                if cn in seen:
                    assert seen[cn] == cid, f"congruence violated for {cn}"
                seen[cn] = cid
