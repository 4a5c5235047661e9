import pytest

from refinery.checker import (REFINEMENT_ERROR, REFINES, CertificateInvalid, CheckConfig, CheckReport,
                              ConfigError, ExplorationState, compute_node_out_rel, compute_out_rel,
                              expectation_diff, validate_certificate)
from refinery.egraph import Budget
from refinery.expr import Relation, app, is_clean, parse_sexpr, ref, to_sexpr
from refinery.graph import ValidationError
from refinery.harness import GraphBuilder, get_fixture, running_example


def prints(rel, target):
    return sorted(to_sexpr(e) for e in rel.for_target(target))


@pytest.fixture(scope="module")
def fig():
    return running_example()


@pytest.fixture(scope="module")
def fig_report(fig):
    gs, gd, ri, _ = fig
    return compute_out_rel(gs, gd, ri)


# -- running example ------------------------------------------------------

def test_running_example_refines(fig_report):
    assert fig_report.verdict == REFINES
    assert fig_report.certificate.to_json() == [{"target": "F", "expr": "(concat (t F1) (t F2) :dim 0)"}]


def test_running_example_keeps_both_forms_for_c(fig_report):
    got = prints(fig_report.relation, "C")
    assert "(sum (t C1) (t C2))" in got and "(concat (t D1) (t D2) :dim 0)" in got


def test_matmul_node_relation(fig):
    gs, gd, ri, _ = fig
    rv = compute_node_out_rel(gs.node_by_id["matmul"], gd, ri, gs=gs)
    assert {"(sum (t C1) (t C2))", "(concat (t D1) (t D2) :dim 0)"} <= set(prints(rv, "C"))
    assert all(is_clean(e) for _, e in rv)


def test_exploration_trace(fig):
    gs, gd, ri, _ = fig
    st = ExplorationState()
    compute_node_out_rel(gs.node_by_id["matmul"], gd, ri, CheckConfig(), st, gs=gs)
    assert st.r_explored == {"matmul1", "matmul2", "reduce_scatter"}
    assert {"C1", "C2", "D1", "D2"} <= st.t_rel
    assert not {"E1", "E2", "F1", "F2"} & st.t_rel
    assert st.frontier == []  # the loop ends on an empty frontier


def test_exploration_fixpoint_when_everything_known(fig):
    gs, gd, ri, _ = fig
    st = ExplorationState(t_rel=set(gd.tensors), r_explored={n.id for n in gd.nodes})
    compute_node_out_rel(gs.node_by_id["matmul"], gd, ri, CheckConfig(), st, gs=gs)
    assert st.rounds == 1 and st.frontier == []


def test_mixed_input_operator_never_enters_frontier():
    s = GraphBuilder()
    s.input("X", [4, 3])
    s.op("relu", "X", out="Y", node="relu")
    s.output("Y")
    d = GraphBuilder()
    d.input("X1", [4, 3])
    d.input("Z", [4, 3])
    d.op("relu", "X1", out="Y1", node="relu1")
    d.op("add", "X1", "Z", out="W", node="mixed")
    d.op("relu", "W", out="V", node="after")
    d.output("Y1", "V")
    gs, gd = s.build(), d.build()
    st = ExplorationState()
    rv = compute_node_out_rel(gs.node_by_id["relu"], gd, Relation((("X", ref("X1")),)), CheckConfig(), st, gs=gs)
    assert prints(rv, "Y") == ["(t Y1)"]
    assert "mixed" not in st.r_explored and "after" not in st.r_explored


def _relu_pair():
    s = GraphBuilder()
    s.input("X", [4, 3])
    s.op("relu", "X", out="Y", node="relu")
    s.output("Y")
    d = GraphBuilder()
    d.input("X1", [2, 3])
    d.input("X2", [2, 3])
    d.op("relu", "X1", out="Y1", node="relu1")
    d.op("relu", "X2", out="Y2", node="relu2")
    d.output("Y1", "Y2")
    ri = Relation((("X", parse_sexpr("(concat (t X1) (t X2) :dim 0)")),))
    return s.build(), d.build(), ri


def test_elementwise_per_shard():
    gs, gd, ri = _relu_pair()
    rep = compute_out_rel(gs, gd, ri)
    assert rep.refines and prints(rep.certificate, "Y") == ["(concat (t Y1) (t Y2) :dim 0)"]
    assert validate_certificate(rep, gs, gd, ri)


def test_identity_refinement():
    gs, _, _ = _relu_pair()
    ri = Relation((("X", ref("X")),))
    rep = compute_out_rel(gs, gs, ri)
    assert rep.refines and prints(rep.certificate, "Y") == ["(t Y)"]


def test_first_matmul_fails_when_weights_wrongly_sharded():
    gs, gd, ri, exp = get_fixture("bug4_shard_vs_replicate").build()
    rep = compute_out_rel(gs, gd, ri)
    assert rep.verdict == REFINEMENT_ERROR and rep.failure["node"] == exp.failure_node
    assert rep.failure["op"] == "matmul" and rep.failure["unmapped"]
    assert rep.certificate is None


def test_aux_loss_without_division_has_empty_relation():
    gs, gd, ri, _ = get_fixture("bug2_auxloss_scale").build()
    rep = compute_out_rel(gs, gd, ri)
    assert rep.failure["node"] == "aux_loss"
    v = gs.node_by_id["aux_loss"]
    rv = compute_node_out_rel(v, gd, rep.relation.restrict(v.inputs), gs=gs)
    assert len(rv) == 0


def test_failure_detail_contents():
    gs, gd, ri, _ = get_fixture("bug1_rope_offset").build()
    f = compute_out_rel(gs, gd, ri).failure
    assert f["node"] == "rope_bwd"
    assert {e["target"] for e in f["input_relation"]} <= set(gs.node_by_id["rope_bwd"].inputs)
    c = f["candidates"]
    assert c["nearest_unclean"] and c["admitted"] and c["eclasses"] > 0
    assert c["lemmas"].get("rope-seq-concat", 0) > 0


# -- certificates ---------------------------------------------------------

def test_certificate_validates(fig, fig_report):
    gs, gd, ri, _ = fig
    assert validate_certificate(fig_report, gs, gd, ri)


def test_forged_certificate_rejected(fig):
    gs, gd, ri, _ = fig
    forged = CheckReport(REFINES, certificate=Relation((("F", ref("F1")),)))
    with pytest.raises(CertificateInvalid, match="shape"):
        validate_certificate(forged, gs, gd, ri)


def test_certificate_must_use_outputs_only(fig):
    gs, gd, ri, _ = fig
    forged = CheckReport(REFINES, certificate=Relation((("F", parse_sexpr("(concat (t D1) (t D2) :dim 0)")),)))
    with pytest.raises(CertificateInvalid, match="non-output"):
        validate_certificate(forged, gs, gd, ri)


def test_incomplete_or_missing_certificate(fig):
    gs, gd, ri, _ = fig
    with pytest.raises(CertificateInvalid):
        validate_certificate(CheckReport(REFINES, certificate=Relation()), gs, gd)
    with pytest.raises(CertificateInvalid):
        validate_certificate(CheckReport(REFINEMENT_ERROR), gs, gd)


def test_numerically_wrong_certificate(fig):
    gs, gd, ri, _ = fig
    swapped = CheckReport(REFINES, certificate=Relation((("F", parse_sexpr("(concat (t F2) (t F1) :dim 0)")),)))
    assert validate_certificate(swapped, gs, gd)  # structurally fine
    with pytest.raises(CertificateInvalid, match="numeric"):
        validate_certificate(swapped, gs, gd, ri)


def test_tp_mlp_certificate(catalog):
    gs, gd, ri, _ = catalog["mlp_tp"]
    rep = compute_out_rel(gs, gd, ri)
    assert validate_certificate(rep, gs, gd, ri, seeds=(0,), tol=1e-5)


# -- modes, determinism, config ------------------------------------------

def test_modes_agree_on_running_example(fig):
    gs, gd, ri, _ = fig
    a = compute_out_rel(gs, gd, ri, CheckConfig(exploration="exhaustive"))
    b = compute_out_rel(gs, gd, ri, CheckConfig(pruning=False))
    assert a.certificate.to_json() == b.certificate.to_json() == [
        {"target": "F", "expr": "(concat (t F1) (t F2) :dim 0)"}]


def test_reports_are_deterministic(fig):
    gs, gd, ri, _ = fig
    assert compute_out_rel(gs, gd, ri).dumps(timings=False) == compute_out_rel(gs, gd, ri).dumps(timings=False)


def test_relation_grows_monotonically(fig_report, fig):
    _, _, ri, _ = fig
    for t, e in ri:
        assert (t, e) in fig_report.relation


def test_exhaustive_cap(fig):
    gs, gd, ri, _ = fig
    with pytest.raises(ConfigError):
        compute_out_rel(gs, gd, ri, CheckConfig(exploration="exhaustive", exhaustive_cap=3))


def test_config_validation():
    with pytest.raises(ConfigError):
        CheckConfig(exploration="greedy")
    with pytest.raises(ConfigError):
        CheckConfig.from_dict({"max_iteration": 3})
    with pytest.raises(ConfigError):
        CheckConfig.from_dict({"max_nodes": "lots"})
    cfg = CheckConfig.from_dict({"max_iterations": 5, "mode": "exhaustive", "pruning": False})
    assert cfg.budget == Budget(5, 50_000) and CheckConfig.from_dict(cfg.to_dict()) == cfg


def test_tiny_budget_is_a_warning_not_a_crash(fig):
    gs, gd, ri, _ = fig
    rep = compute_out_rel(gs, gd, ri, CheckConfig(budget=Budget(1, 40)))
    assert rep.budget_warning
    assert rep.verdict in (REFINES, REFINEMENT_ERROR)


def test_input_relation_validation(fig):
    gs, gd, _, _ = fig
    with pytest.raises(ValidationError):
        compute_out_rel(gs, gd, Relation((("C", ref("A1")),)))
    with pytest.raises(ValidationError):
        compute_out_rel(gs, gd, Relation((("A", ref("C1")),)))
    with pytest.raises(ValidationError):
        compute_out_rel(gs, gd, Relation((("A", app("relu", ref("A1"))),)))


def test_report_json_shape(fig_report):
    doc = fig_report.to_json()
    assert doc["schema"] == "refinery.report/1"
    assert set(doc) >= {"verdict", "certificate", "failure", "lemma_stats", "timings", "warnings"}
    assert "timings" not in fig_report.to_json(timings=False)
    assert doc["lemma_stats"]["matmul-block"] >= 1
    assert "verdict: Refines" in fig_report.to_text()


# -- expectation mode -----------------------------------------------------

def test_expectation_match_and_mismatch(fig, fig_report):
    _, gd, _, exp = fig
    assert expectation_diff(fig_report, exp.ro, gd)["match"]
    wrong = Relation((("F", parse_sexpr("(concat (t F2) (t F1) :dim 0)")),))
    d = expectation_diff(fig_report, wrong, gd)
    assert not d["match"] and "F" in d["diff"]


def test_missing_ln_aggregate_refines_but_differs(catalog):
    gs, gd, ri, exp = catalog["bug5_missing_ln_aggregate"]
    rep = compute_out_rel(gs, gd, ri)
    assert rep.refines
    assert not expectation_diff(rep, exp.ro, gd)["match"]
