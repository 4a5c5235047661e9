import numpy as np
import pytest

from refinery.egraph import Budget, EGraph
from refinery.expr import Relation, app, ref, to_sexpr
from refinery.lemmas import get_lemma, load_builtin_lemmas
from refinery.oracle import eval_expr
from refinery.rewrite import (prune, rewrite_expr_to_t, rewrite_t_to_expr, rewrite_using_lemma, saturate,
                              self_provable_groups)

LIB = load_builtin_lemmas()


def prints(es):
    return {to_sexpr(e) for e in es}


def sl(x, a, b):
    return app("slice", x, dim=0, start=a, end=b)


def test_block_matmul_rewrite():
    e = app("matmul", app("concat", ref("A1"), ref("A2"), dim=1), app("concat", ref("B1"), ref("B2"), dim=0))
    out = rewrite_using_lemma(e, LIB, shapes={"A1": (4, 3), "A2": (4, 3), "B1": (3, 4), "B2": (3, 4)})
    assert "(sum (matmul (t A1) (t B1)) (matmul (t A2) (t B2)))" in prints(out)


def test_no_applicable_lemma_is_reflexive():
    assert prints(rewrite_using_lemma(ref("X"), LIB, shapes={"X": (3,)})) == {"(t X)"}


def test_slice_merge_then_full_slice():
    e = app("concat", sl(ref("X"), 0, 4), sl(ref("X"), 4, 8), dim=0)
    out = rewrite_using_lemma(e, LIB, shapes={"X": (8,)})
    assert {"(slice (t X) :dim 0 :start 0 :end 8)", "(t X)"} <= prints(out)
    x = np.random.default_rng(0).standard_normal(8)
    for alt in out:
        np.testing.assert_allclose(eval_expr(alt, {"X": x}), x)


def test_expand_is_deterministic():
    e = app("relu", app("concat", ref("A"), ref("B"), dim=0))
    shapes = {"A": (2, 3), "B": (1, 3)}
    assert prints(rewrite_using_lemma(e, LIB, shapes=shapes)) == prints(rewrite_using_lemma(e, LIB, shapes=shapes))


def test_budget_stops_cleanly():
    eg = EGraph(ref_shape=lambda s, n: (4, 4), budget=Budget(1, 10_000))
    eg.add_expr(app("matmul", app("concat", ref("A1"), ref("A2"), dim=1),
                    app("concat", ref("B1"), ref("B2"), dim=0)))
    res = saturate(eg, LIB, Budget(1, 10_000))
    assert res.iterations == 1 and res.stop in ("saturated", "iterations")
    tiny = EGraph(ref_shape=lambda s, n: (2, 2), budget=Budget(30, 5))
    tiny.add_expr(app("relu", app("concat", ref("A"), ref("B"), dim=0)))
    res = saturate(tiny, LIB)
    assert res.stop == "nodes" and res.budget_hit


# -- substitution combinations -------------------------------------------

def test_t_to_expr_all_combinations():
    r = Relation((("A", ref("alpha0")), ("B", ref("beta0"))))
    got = prints(rewrite_t_to_expr(app("matmul", ref("A"), ref("B")), r))
    assert got == {"(matmul (t A) (t B))", "(matmul (t alpha0) (t B))", "(matmul (t A) (t beta0))",
                   "(matmul (t alpha0) (t beta0))"}


def test_t_to_expr_empty_relation():
    e = app("matmul", ref("A"), ref("B"))
    assert rewrite_t_to_expr(e, Relation()) == {e}


def test_t_to_expr_multiple_mappings():
    r = Relation((("A", ref("alpha0")), ("A", ref("alpha1"))))
    got = prints(rewrite_t_to_expr(app("matmul", ref("A"), ref("B")), r))
    assert {"(matmul (t alpha0) (t B))", "(matmul (t alpha1) (t B))"} <= got


@pytest.mark.parametrize("k", [1, 2, 3])
def test_t_to_expr_count_is_power_of_two(k):
    names = [f"X{i}" for i in range(k)]
    r = Relation(tuple((n, ref(n + "_d")) for n in names))
    assert len(rewrite_t_to_expr(app("sum", *map(ref, names)), r)) == 2 ** k


def test_expr_to_t_contracts_partial_products():
    e = app("sum", app("matmul", ref("A1"), ref("B1")), app("matmul", ref("A2"), ref("B2")))
    r = Relation((("C1", app("matmul", ref("A1"), ref("B1"))), ("C2", app("matmul", ref("A2"), ref("B2")))))
    assert "(sum (t C1) (t C2))" in prints(rewrite_expr_to_t(e, r))


def test_expr_to_t_empty():
    e = app("relu", ref("A"))
    assert rewrite_expr_to_t(e, Relation()) == {e}


def test_expr_to_t_all_occurrences():
    m = app("matmul", ref("A1"), ref("B1"))
    got = prints(rewrite_expr_to_t(app("concat", m, m, dim=0), Relation((("C1", m),))))
    assert "(concat (t C1) (t C1) :dim 0)" in got


# -- pruning --------------------------------------------------------------

def test_prune_keeps_simplest_of_provable_group():
    x = ref("X")
    single = sl(x, 16, 48)
    split = app("concat", sl(x, 16, 32), sl(x, 32, 48), dim=0)
    other = sl(x, 0, 16)
    kept = prune([split, single, other], LIB, lambda s, n: (64,))
    assert prints(kept) == {to_sexpr(single), to_sexpr(other)}


def test_self_provable_groups_separates_distinct_values():
    groups = self_provable_groups([ref("A"), ref("B")], LIB, lambda s, n: (4,))
    assert len(groups) == 2


def test_lemma_counts_are_recorded():
    eg = EGraph(ref_shape=lambda s, n: {"A": (2, 3), "B": (1, 3)}[n])
    eg.add_expr(app("relu", app("concat", ref("A"), ref("B"), dim=0)))
    res = saturate(eg, [get_lemma("unary-concat")])
    assert res.counts["unary-concat"] == 1


def _staged(incremental):
    shapes = {"A1": (4, 3), "A2": (4, 3), "B1": (3, 4), "B2": (3, 4), "X": (4, 4), "Y": (4, 4)}
    eg = EGraph(ref_shape=lambda sp, n: shapes[n])
    seen, counts = set(), {}
    root = eg.add_expr(app("matmul", app("concat", ref("A1"), ref("A2"), dim=1),
                           app("concat", ref("B1"), ref("B2"), dim=0)))
    for stage in range(2):
        if stage == 1:  # new facts after a first fixpoint, as exploration does
            eg.union(root, eg.add_expr(app("concat", sl(ref("X"), 0, 2), sl(ref("X"), 2, 4), dim=0)))
            eg.add_expr(app("add", sl(ref("Y"), 0, 2), sl(ref("X"), 0, 2)))
        res = saturate(eg, LIB, seen=seen, incremental=incremental)
        for k, v in res.counts.items():
            counts[k] = counts.get(k, 0) + v
    terms = eg.extract_clean([root], frozenset({"concat", "slice", "sum", "matmul"}), 8)
    return eg.n_nodes, len(eg.classes), eg.n_unions, counts, prints(terms[eg.find(root)])


def test_incremental_matching_reaches_same_fixpoint():
    assert _staged(True) == _staged(False)
