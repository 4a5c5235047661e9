import pytest
from hypothesis import given, settings, strategies as st

from refinery.dims import dims
from refinery.egraph import DST, SRC, Budget, BudgetExceeded, EGraph, ShapeConflict, T
from refinery.expr import CleanOpSet, app, parse_sexpr, ref, to_sexpr
from refinery.unionfind import UnionFind

CLEAN = CleanOpSet().ops


def shaped(**shapes):
    return EGraph(ref_shape=lambda space, name: dims(shapes[name]))


def test_unionfind_basics():
    uf = UnionFind()
    a, b, c = uf.make(), uf.make(), uf.make()
    assert uf.union(c, b) == b and uf.find(c) == b
    uf.union(b, a)
    assert uf.canon((a, b, c)) == (a, a, a) and len(uf) == 3


def test_hash_consing():
    eg = EGraph()
    x = eg.add_expr(parse_sexpr("(concat (t A) (t B) :dim 0)"))
    assert eg.add_expr(parse_sexpr("(concat (t A) (t B) :dim 0)")) == x
    assert eg.n_nodes == 3


def test_spaces_are_distinct():
    eg = EGraph()
    assert eg.add_ref("A", DST) != eg.add_ref("A", SRC)


def test_congruence_after_rebuild():
    eg = EGraph()
    fa = eg.add_expr(app("relu", ref("A")))
    fb = eg.add_expr(app("relu", ref("B")))
    eg.union(eg.add_ref("A"), eg.add_ref("B"))
    eg.rebuild()
    assert eg.equiv(fa, fb)
    eg.check_invariants()


def test_lookup_does_not_insert():
    eg = EGraph()
    a = eg.add_ref("A")
    n = eg.n_nodes
    assert eg.lookup(T("relu", a)) is None and eg.n_nodes == n
    assert eg.lookup_expr(ref("A")) == a


def test_shape_conflict_on_merge():
    eg = shaped(A=[2, 3], B=[3, 2])
    with pytest.raises(ShapeConflict):
        eg.union(eg.add_ref("A"), eg.add_ref("B"))


def test_shapes_propagate():
    eg = shaped(A=[2, 3], B=[2, 5])
    c = eg.add_expr(app("concat", ref("A"), ref("B"), dim=1))
    assert eg.shape(c) == dims([2, 8])


def test_node_budget():
    eg = EGraph(budget=Budget(max_iterations=1, max_nodes=2))
    eg.add_ref("A")
    eg.add_ref("B")
    with pytest.raises(BudgetExceeded):
        eg.add_ref("C")


def test_budget_must_be_positive():
    with pytest.raises(ValueError):
        Budget(0, 10)


def test_extract_prefers_simplest_clean_term():
    eg = EGraph()
    root = eg.add_expr(app("matmul", ref("A"), ref("B")))
    s = eg.add_expr(app("sum", ref("C1"), ref("C2")))
    d = eg.add_expr(app("concat", ref("D1"), app("identity", ref("D2")), dim=0))
    eg.union(root, s)
    eg.union(root, d)
    eg.rebuild()
    got = [to_sexpr(e) for e in eg.extract_clean([root], CLEAN)[eg.find(root)]]
    assert got[0] == "(sum (t C1) (t C2))"
    assert "(concat (t D1) (identity (t D2)) :dim 0)" in got
    assert all("matmul" not in g for g in got)


def test_extract_restricted_leaves():
    eg = EGraph()
    root = eg.add_expr(app("sum", ref("C1"), ref("C2")))
    eg.union(root, eg.add_ref("F"))
    eg.rebuild()
    only_f = eg.extract_clean([root], CLEAN, leaves={"F"})[eg.find(root)]
    assert [to_sexpr(e) for e in only_f] == ["(t F)"]
    assert eg.extract_clean([root], CLEAN, leaves={"Z"})[eg.find(root)] == []


def test_source_refs_never_extracted():
    eg = EGraph()
    c = eg.add_ref("X", SRC)
    assert eg.extract_clean([c], CLEAN)[c] == []


def test_terms_enumeration():
    eg = EGraph()
    c = eg.add_expr(app("relu", ref("A")))
    eg.union(c, eg.add_ref("R"))
    eg.rebuild()
    assert {to_sexpr(e) for e in eg.terms(c, max_depth=1)} == {"(relu (t A))", "(t R)"}


# -- property: congruence closure under random unions --------------------

LEAF = st.sampled_from(["A", "B", "C", "D"])
EXPR = st.recursive(LEAF.map(ref), lambda kids: st.one_of(
    kids.map(lambda k: app("relu", k)),
    st.tuples(kids, kids).map(lambda p: app("sum", *p)),
), max_leaves=6)


@settings(max_examples=60, deadline=None)
@given(st.lists(EXPR, min_size=2, max_size=8), st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=6))
def test_random_unions_keep_invariants(exprs, pairs):
    eg = EGraph()
    ids = [eg.add_expr(e) for e in exprs]
    wrapped = [eg.add_term(T("relu", c)) for c in ids]
    for i, j in pairs:
        eg.union(ids[i % len(ids)], ids[j % len(ids)])
    eg.rebuild()
    eg.check_invariants()
    for i, j in pairs:  # equal children imply equal parents
        assert eg.equiv(wrapped[i % len(ids)], wrapped[j % len(ids)])


@settings(max_examples=40, deadline=None)
@given(st.lists(EXPR, min_size=1, max_size=6))
def test_extraction_roundtrips_inserted_terms(exprs):
    eg = EGraph()
    ids = [eg.add_expr(e) for e in exprs]
    for e, c in zip(exprs, ids):
        got = eg.extract_clean([c], frozenset({"relu", "sum"}), k=50)[eg.find(c)]
        assert to_sexpr(e) in {to_sexpr(g) for g in got}
