import json

import numpy as np
import pytest

from refinery.egraph import Budget, EGraph
from refinery.expr import app, ref, to_sexpr
from refinery.harness.custom import custom_lemmas
from refinery.lemmas import (DuplicateName, LemmaValidationError, apply_match, builtin_lemmas, get_lemma,
                             load_builtin_lemmas, load_lemma_file, matches, pattern_lemma, register_lemma,
                             registered_lemmas, unregister_lemma, validate_lemma)
from refinery.lemmas.base import _sample_graph
from refinery.rewrite import saturate

BUILTIN = [l.name for l in builtin_lemmas()]


def test_library_size_and_uniqueness():
    lib = load_builtin_lemmas()
    assert 30 <= len(lib) == len(set(BUILTIN))


@pytest.mark.parametrize("name", ["matmul-block", "slice-split", "rmsnorm-concat", "slice-merge",
                                  "reduce-sum-concat", "transpose-concat", "embedding-vocab", "pad-slice"])
def test_library_contains(name):
    assert name in BUILTIN


def test_slice_split_is_constrained():
    assert get_lemma("slice-split").constrained


@pytest.mark.parametrize("name", BUILTIN + [l.name for l in custom_lemmas()])
def test_lemma_numerically_sound(name):
    lem = get_lemma(name)
    assert validate_lemma(lem, np.random.default_rng(hash(name) % 2**32), instances=10, rtol=1e-6) >= 10


CONSTRAINED = [l.name for l in builtin_lemmas() if l.constrained]


@pytest.mark.parametrize("name", CONSTRAINED)
def test_constrained_lemmas_only_reuse_existing_classes(name):
    lem = get_lemma(name)
    rng = np.random.default_rng(7)
    for _ in range(5):
        eg, _ = _sample_graph(lem.sample(rng))
        before = set(eg.classes)
        old_nodes = eg.node_set()
        for root, rhs, _ in matches(eg, lem):
            c = eg.add_term(rhs)
            if eg.find(c) not in {eg.find(x) for x in before}:
                node = next(n for n in eg.nodes(c) if n not in old_nodes)
                assert all(eg.find(k) in {eg.find(x) for x in before} for k in node[2]), name
            eg.union(root, c)
        eg.rebuild()


def test_constrained_split_does_not_fire_without_pieces():
    eg = EGraph(ref_shape=lambda s, n: (8,))
    root = eg.add_expr(app("slice", ref("X"), dim=0, start=0, end=6))
    n = eg.n_nodes
    for r, rhs, _ in matches(eg, get_lemma("slice-split")):
        apply_match(eg, r, rhs)
    assert eg.n_nodes == n and eg.n_unions == 0 and root == eg.find(root)


BOTH = [l.name for l in builtin_lemmas() if l.direction == "both"]


@pytest.mark.parametrize("name", BOTH)
def test_bidirectional_lemmas_round_trip(name):
    lem = get_lemma(name)
    s = lem.sample(np.random.default_rng(3))
    eg, root = _sample_graph(s)
    saturate(eg, [lem], Budget(2, 5000))
    lhs = to_sexpr(s.lhs)
    rewritten = [e for e in eg.terms(root, max_depth=4, limit=64) if to_sexpr(e) != lhs]
    assert rewritten
    for e in rewritten[:4]:
        back, _ = _sample_graph(type(s)(e, s.shapes, s.extra, s.ints))
        r2 = back.add_expr(e)
        saturate(back, [lem], Budget(2, 5000))
        assert back.lookup_expr(s.lhs) is not None and back.equiv(back.lookup_expr(s.lhs), r2)


# -- registry -------------------------------------------------------------

def test_duplicate_name():
    with pytest.raises(DuplicateName):
        register_lemma(get_lemma("slice-full"))


def test_unbound_rhs_variable():
    with pytest.raises(LemmaValidationError, match="unbound"):
        pattern_lemma("bad", "(relu ?x)", "(sum ?x ?y)")


def test_reverse_direction_needs_all_variables():
    with pytest.raises(LemmaValidationError):
        pattern_lemma("bad-rev", "(sum ?x ?y)", "(relu ?x)", direction="both")


def test_unregistered_operator_in_pattern():
    with pytest.raises(LemmaValidationError):
        pattern_lemma("bad-op", "(nosuch ?x)", "?x")


def test_unsound_lemma_rejected_at_registration():
    bad = pattern_lemma("relu-drop", "(relu ?x)", "?x", samples=[{"?x": [3, 2]}])
    with pytest.raises(LemmaValidationError, match="numeric mismatch"):
        register_lemma(bad)
    assert "relu-drop" not in [l.name for l in registered_lemmas()]


LEMMA_DOC = {"lemmas": [{
    "name": "neg-concat2-test",
    "lhs": "(neg (concat ?a ?b :dim ?d))",
    "rhs": "(concat (neg ?a) (neg ?b) :dim ?d)",
    "condition": "eq(shape(?a, 1), shape(?b, 1))",
    "samples": [{"?a": [2, 3], "?b": [1, 3], "?d": 0}],
}]}


def test_lemma_file_roundtrip(tmp_path):
    p = tmp_path / "lemmas.json"
    p.write_text(json.dumps(LEMMA_DOC))
    (lem,) = load_lemma_file(p)
    try:
        register_lemma(lem)
        eg = EGraph(ref_shape=lambda s, n: {"A": (2, 3), "B": (1, 3)}[n])
        root = eg.add_expr(app("neg", app("concat", ref("A"), ref("B"), dim=0)))
        res = saturate(eg, [lem])
        assert res.counts["neg-concat2-test"] == 1
        want = eg.lookup_expr(app("concat", app("neg", ref("A")), app("neg", ref("B")), dim=0))
        assert want is not None and eg.equiv(root, want)
    finally:
        unregister_lemma("neg-concat2-test")


def test_pattern_condition_blocks_firing():
    doc = dict(LEMMA_DOC["lemmas"][0], condition="eq(shape(?a, 0), shape(?b, 0))")
    doc.pop("samples")
    lem = pattern_lemma(**doc)
    eg = EGraph(ref_shape=lambda s, n: {"A": (2, 3), "B": (1, 3)}[n])
    eg.add_expr(app("neg", app("concat", ref("A"), ref("B"), dim=0)))
    assert matches(eg, lem) == []
