import pytest
from hypothesis import given, strategies as st

from refinery.dims import parse_dim
from refinery.expr import (CleanOpSet, ExprParseError, Relation, app, is_clean, is_complete, parse_sexpr,
                           ref, scalar, simplicity, simplicity_key, substitute, tensor_refs, to_sexpr)

A, B, X = ref("A"), ref("B"), ref("X")


def concat(*xs, dim=0):
    return app("concat", *xs, dim=dim)


def sl(x, a, b, dim=0):
    return app("slice", x, dim=dim, start=a, end=b)


# -- cleanliness ----------------------------------------------------------

def test_concat_is_clean():
    assert is_clean(concat(ref("F1"), ref("F2")))


def test_sum_is_clean():
    assert is_clean(app("sum", ref("C1"), ref("C2")))


def test_division_is_not_clean():
    e = app("div", app("sum", ref("L1"), ref("L2")), scalar("s0"))
    assert not is_clean(e)


def test_scalar_operand_is_not_clean():
    assert not is_clean(app("sum", A, scalar(2)))


def test_symbolic_slice_bounds_stay_clean():
    assert is_clean(sl(X, 0, parse_dim("s0")))


def test_matmul_not_clean_by_default_but_configurable():
    e = app("matmul", A, B)
    assert not is_clean(e)
    assert is_clean(e, CleanOpSet(rearrange=frozenset({"matmul"}), reduce=frozenset()))


def test_reshape_can_be_dropped_from_clean_set():
    e = app("reshape", X, shape=(4,))
    strict = CleanOpSet(rearrange=frozenset({"slice", "concat", "transpose", "identity"}))
    assert is_clean(e) and not is_clean(e, strict)


def test_empty_clean_set_rejected():
    with pytest.raises(ValueError):
        CleanOpSet(frozenset(), frozenset())


# -- completeness ---------------------------------------------------------

def test_complete_when_every_output_mapped():
    assert is_complete(Relation((("F", concat(ref("F1"), ref("F2"))),)), ["F"])


def test_empty_relation_incomplete():
    assert not is_complete(Relation(), ["F"])


def test_intermediate_only_incomplete():
    assert not is_complete(Relation((("C", app("sum", ref("C1"), ref("C2"))),)), ["F"])


# -- substitution ---------------------------------------------------------

def test_substitute_single():
    a0 = ref("alpha0")
    assert substitute(app("matmul", A, B), {"A": a0}) == app("matmul", a0, B)


def test_substitute_empty_is_identity():
    e = app("matmul", A, B)
    assert substitute(e, {}) is e or substitute(e, {}) == e


def test_substitute_all_occurrences():
    got = substitute(concat(A, app("matmul", A, B)), {"A": X})
    assert got == concat(X, app("matmul", X, B))


@given(st.sampled_from(["A", "B"]))
def test_substitute_idempotent(name):
    e = concat(A, app("matmul", A, B))
    once = substitute(e, {name: X})
    assert substitute(once, {name: X}) == once


# -- simplicity -----------------------------------------------------------

def test_simplicity_counts_applies():
    assert simplicity(X) == 0
    assert simplicity(app("sum", ref("C1"), ref("C2"))) == 1
    single = sl(X, 16, 48)
    split = concat(sl(X, 16, 32), sl(X, 32, 48))
    assert (simplicity(single), simplicity(split)) == (1, 3)
    assert min([split, single], key=simplicity_key) == single


def test_simplicity_tie_break_is_printed_form():
    a, b = concat(A, B), concat(B, A)
    assert sorted([b, a], key=simplicity_key)[0] == a


# -- text form ------------------------------------------------------------

@pytest.mark.parametrize("text", [
    "(concat (t A_1) (t A_2) :dim 1)",
    "(slice (t X) :dim 0 :start 0 :end s0)",
    "(sum (t C_1) (t C_2))",
    "(reshape (t X) :shape [2 4])",
])
def test_sexpr_roundtrip(text):
    assert to_sexpr(parse_sexpr(text)) == text


@pytest.mark.parametrize("bad", ["(concat (t A)", "(t)", "concat", "(concat (t A) :dim)"])
def test_sexpr_errors(bad):
    with pytest.raises(ExprParseError):
        parse_sexpr(bad)


def test_tensor_refs():
    assert tensor_refs(concat(A, app("matmul", A, B))) == {"A", "B"}


# -- relations ------------------------------------------------------------

def test_relation_keeps_several_mappings_and_dedups():
    r = Relation((("C", app("sum", A, B)), ("C", concat(A, B)), ("C", app("sum", A, B))))
    assert len(r) == 2 and len(r.for_target("C")) == 2


def test_relation_json_roundtrip():
    r = Relation((("F", concat(ref("F1"), ref("F2"))), ("G", X)))
    assert Relation.loads(r.dumps()).to_json() == r.to_json()


def test_relation_restrict_and_union():
    r = Relation((("F", X), ("G", A)))
    assert r.restrict(["G"]).targets == {"G"}
    assert ("H", B) in r.union([("H", B)])


def test_relation_from_json_rejects_garbage():
    with pytest.raises(ExprParseError):
        Relation.from_json({"F": "(t X)"})
    with pytest.raises(ExprParseError):
        Relation.from_json([{"target": "F"}])
