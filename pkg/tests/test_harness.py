import json

import pytest

from refinery.checker import compute_out_rel, validate_certificate
from refinery.harness import (BUGS, BugSpec, ModelSpec, SpecError, StrategySpec, generate, get_fixture,
                              list_fixtures, read_fixture, write_fixture)
from refinery.oracle import check_reconstruction

CLEAN = [e.name for e in list_fixtures() if e.bug is None]
BUGGY = [e.name for e in list_fixtures() if e.bug is not None]


def test_catalog_coverage():
    assert len(BUGGY) == 6 and len(CLEAN) >= 6
    assert sorted(e.bug_number for e in list_fixtures() if e.bug_number) == [1, 2, 3, 4, 5, 6]


def test_catalog_is_deterministic():
    a = [e.to_json() for e in list_fixtures()]
    b = [e.to_json() for e in list_fixtures()]
    assert a == b
    g1, g2 = get_fixture("attention_sp").build(), get_fixture("attention_sp").build()
    assert g1[0] == g2[0] and g1[1] == g2[1] and g1[2].to_json() == g2[2].to_json()


def test_grad_accum_has_no_ranks(catalog):
    _, gd, ri, _ = catalog["regression_grad_accum"]
    assert not any(n.op in ("all_gather", "all_reduce", "reduce_scatter") for n in gd.nodes)
    assert any("_m1" in t for t in gd.graph_inputs)


def test_unknown_fixture():
    with pytest.raises(SpecError):
        get_fixture("nope")


@pytest.mark.parametrize("name", CLEAN)
def test_clean_fixture_refines_and_validates(name, catalog):
    gs, gd, ri, exp = catalog[name]
    assert check_reconstruction(gs, gd, ri, exp.ro)
    rep = compute_out_rel(gs, gd, ri)
    assert rep.refines
    assert validate_certificate(rep, gs, gd, ri)


@pytest.mark.parametrize("name", [n for n in BUGGY if "ln_aggregate" not in n])
def test_bug_fixture_localizes(name, catalog):
    gs, gd, ri, exp = catalog[name]
    rep = compute_out_rel(gs, gd, ri)
    assert not rep.refines and rep.failure["node"] == exp.failure_node
    assert exp.exit_code == 2


def test_bug5_expectation(catalog):
    assert catalog["bug5_missing_ln_aggregate"][3].exit_code == 3


def test_tp_mlp_structure():
    gs, gd, ri, _ = generate(ModelSpec("mlp"), StrategySpec("tp", 2))
    w1, w2 = ri.for_target("W1_l0")[0], ri.for_target("W2_l0")[0]
    assert (w1.op, w1.attr("dim"), w2.op, w2.attr("dim")) == ("concat", 1, "concat", 0)
    assert sum(n.op == "matmul" for n in gd.nodes) == 4
    assert any(n.op in ("reduce_scatter", "all_reduce") for n in gd.nodes)


def test_rope_offset_bug_zeroes_backward_offsets():
    _, gd, _, exp = generate(ModelSpec("attention_rope"), StrategySpec("sp", 2), BugSpec("rope_offset"))
    starts = [gd.producer[t].attr_map["start"].to_int()
              for n in gd.nodes if n.op == "rope_bwd" for t in n.inputs[1:]]
    assert starts and set(starts) == {0}
    assert exp.failure_node == "rope_bwd"


def test_grad_accum_bug_fails_at_loss():
    _, _, _, exp = generate(ModelSpec("regression_mse"), StrategySpec("grad_accum", 2), BugSpec("grad_accum_scale"))
    assert exp.failure_node == "loss" and exp.ro is None


@pytest.mark.parametrize("kw, strat", [
    (dict(family="mlp", hidden=3), StrategySpec("tp", 4)),
    (dict(family="mlp", seq=6), StrategySpec("tp", 4)),
    (dict(family="mlp"), StrategySpec("ep", 2)),
    (dict(family="attention_rope", heads=3), StrategySpec("tp", 2)),
])
def test_spec_errors(kw, strat):
    with pytest.raises(SpecError):
        generate(ModelSpec(**kw), strat)


def test_invalid_specs():
    with pytest.raises(SpecError):
        ModelSpec("cnn")
    with pytest.raises(SpecError):
        ModelSpec("mlp", layers=0)
    with pytest.raises(SpecError):
        StrategySpec("tp", 1)
    with pytest.raises(SpecError):
        BugSpec("typo")


def test_incompatible_bug():
    with pytest.raises(SpecError, match="applies to"):
        generate(ModelSpec("mlp"), StrategySpec("tp", 2), BugSpec("rope_offset"))


def test_wrong_annotation_rejected():
    with pytest.raises(SpecError):
        generate(ModelSpec("regression_mse"), StrategySpec("grad_accum", 2),
                 BugSpec("grad_accum_scale", expected_failure_node="somewhere_else"))


@pytest.mark.parametrize("family, kind", [("mlp", "tp"), ("mlp", "sp"), ("attention_rope", "tp"),
                                          ("attention_rope", "sp")])
def test_node_count_linear_in_degree(family, kind):
    sizes = {}
    for d in (2, 4, 8):
        sizes[d] = len(generate(ModelSpec(family, hidden=16, heads=8, seq=16), StrategySpec(kind, d))[1].nodes)
    assert sizes[8] - sizes[4] == 2 * (sizes[4] - sizes[2])


def test_every_bug_id_has_a_fixture():
    assert {e.bug.id for e in list_fixtures() if e.bug} == set(BUGS)


def test_bundle_roundtrip(tmp_path, catalog):
    fx = catalog["moe_tp"]
    out = write_fixture(tmp_path / "b", fx)
    assert sorted(p.name for p in out.iterdir()) == ["expected.json", "gd.json", "gs.json", "ri.json"]
    gs, gd, ri, exp = read_fixture(out)
    assert gs == fx[0] and gd == fx[1] and ri.to_json() == fx[2].to_json()
    assert exp.to_json() == fx[3].to_json()
    assert json.loads((out / "expected.json").read_text())["verdict"] == "Refines"


def test_custom_lemma_shows_in_stats(catalog):
    gs, gd, ri, _ = catalog["attention_sp"]
    rep = compute_out_rel(gs, gd, ri)
    assert rep.lemma_stats["rope-seq-concat"] > 0 and rep.family_stats["custom"] > 0
