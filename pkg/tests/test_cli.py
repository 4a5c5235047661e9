import json
import subprocess
import sys

import pytest

from refinery.cli import main
from refinery.harness import get_fixture, write_fixture


@pytest.fixture(scope="module")
def bundles(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    out = {}
    for name in ("mlp_tp", "bug4_shard_vs_replicate", "bug5_missing_ln_aggregate", "running_example"):
        out[name] = write_fixture(root / name, get_fixture(name).build())
    return out


def check_args(d, *extra):
    return ["check", "--gs", str(d / "gs.json"), "--gd", str(d / "gd.json"), "--ri", str(d / "ri.json"), *extra]


def test_check_clean_exit_0(bundles, capsys):
    assert main(check_args(bundles["mlp_tp"], "--json", "-")) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["verdict"] == "Refines" and doc["schema"] == "refinery.report/1"
    assert doc["certificate"][0]["target"] == "Y"


def test_check_bug_exit_2_names_first_matmul(bundles, capsys):
    assert main(check_args(bundles["bug4_shard_vs_replicate"])) == 2
    out = capsys.readouterr().out
    assert "could not map outputs of operator mm1_l0 (matmul)" in out


def test_check_expected_mismatch_exit_3(bundles, capsys, tmp_path):
    d = bundles["bug5_missing_ln_aggregate"]
    report = tmp_path / "r.json"
    assert main(check_args(d, "--expected", str(d / "expected.json"), "--json", str(report))) == 3
    out = capsys.readouterr().out
    assert "expectation: MISMATCH" in out and "ln_w_grad" in out
    doc = json.loads(report.read_text())
    assert doc["expectation"]["match"] is False and "ln_w_grad" in doc["expectation"]["diff"]


def test_check_expected_match(bundles):
    d = bundles["running_example"]
    assert main(check_args(d, "--expected", str(d / "expected.json"), "-q")) == 0


def test_exhaustive_mode_and_no_timings(bundles, capsys):
    assert main(check_args(bundles["running_example"], "--mode", "exhaustive", "--no-timings", "--json", "-")) == 0
    doc = json.loads(capsys.readouterr().out)
    assert "timings" not in doc and doc["config"]["exploration"] == "exhaustive"


def test_config_file_flags_win(bundles, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_iterations": 7, "pruning": False, "exploration": "exhaustive"}))
    assert main(check_args(bundles["running_example"], "--config", str(cfg), "--mode", "optimized",
                           "--json", "-")) == 0
    conf = json.loads(capsys.readouterr().out)["config"]
    assert (conf["max_iterations"], conf["pruning"], conf["exploration"]) == (7, False, "optimized")


@pytest.mark.parametrize("argv", [
    [],
    ["check"],
    ["check", "--gs", "missing.json", "--gd", "x", "--ri", "y"],
    ["frobnicate"],
    ["gen", "--out", "x"],
    ["eval", "--fixture", "no_such_fixture"],
    ["lemmas"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_bad_json_and_bad_config(bundles, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    d = bundles["running_example"]
    assert main(["check", "--gs", str(bad), "--gd", str(d / "gd.json"), "--ri", str(d / "ri.json")]) == 1
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_iteration": 3}))
    assert main(check_args(d, "--config", str(cfg))) == 1
    assert main(check_args(d, "--max-nodes", "0")) == 1


def test_invalid_input_relation_exit_1(bundles, tmp_path):
    d = bundles["running_example"]
    ri = tmp_path / "ri.json"
    ri.write_text(json.dumps([{"target": "A", "expr": "(relu (t A1))"}]))
    assert main(["check", "--gs", str(d / "gs.json"), "--gd", str(d / "gd.json"), "--ri", str(ri)]) == 1


def test_gen_then_check(tmp_path, capsys):
    out = tmp_path / "g"
    assert main(["gen", "--model", "mlp", "--strategy", "tp", "--degree", "4", "--out", str(out)]) == 0
    assert main(check_args(out, "--expected", str(out / "expected.json"), "-q")) == 0


def test_gen_bug_and_incompatible_bug(tmp_path):
    assert main(["gen", "--fixture", "bug6_grad_accum_scale", "--out", str(tmp_path / "b6")]) == 0
    assert json.loads((tmp_path / "b6" / "expected.json").read_text())["failure_node"] == "loss"
    assert main(["gen", "--model", "mlp", "--strategy", "tp", "--bug", "rope_offset",
                 "--out", str(tmp_path / "x")]) == 1


def test_eval_directory_and_name(bundles, capsys):
    assert main(["eval", "--fixture", str(bundles["mlp_tp"]), "--seed", "2"]) == 0
    assert "max_dev" in capsys.readouterr().out
    assert main(["eval", "--fixture", "running_example"]) == 0


def test_eval_mismatch_exit_2(bundles, tmp_path, capsys):
    ro = tmp_path / "ro.json"
    ro.write_text(json.dumps([{"target": "F", "expr": "(concat (t F2) (t F1) :dim 0)"}]))
    assert main(["eval", "--fixture", str(bundles["running_example"]), "--ro", str(ro)]) == 2
    assert "MISMATCH" in capsys.readouterr().out


def test_eval_bug_without_relation(capsys):
    assert main(["eval", "--fixture", "bug4_shard_vs_replicate"]) == 2


def test_lemmas_list_and_stats(bundles, tmp_path, capsys):
    assert main(["lemmas", "--list"]) == 0
    listing = capsys.readouterr().out
    assert "matmul-block" in listing and "rope-seq-concat" in listing
    report = tmp_path / "r.json"
    main(check_args(bundles["running_example"], "--json", str(report), "-q"))
    assert main(["lemmas", "--stats", str(report)]) == 0
    out = capsys.readouterr().out
    assert "matmul-block" in out and "by family:" in out
    assert main(["lemmas", "--stats", str(bundles["running_example"] / "ri.json")]) == 1


def test_lemma_file_flag(bundles, tmp_path, capsys):
    lf = tmp_path / "l.json"
    lf.write_text(json.dumps([{"name": "cli-neg-neg", "lhs": "(neg (neg ?x))", "rhs": "?x",
                               "samples": [{"?x": [2, 2]}]}]))
    try:
        assert main(["lemmas", "--list", "--lemma-file", str(lf)]) == 0
        assert "cli-neg-neg" in capsys.readouterr().out
    finally:
        from refinery.lemmas import unregister_lemma
        unregister_lemma("cli-neg-neg")


def test_fixtures_listing(tmp_path, capsys):
    assert main(["fixtures", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc) == 15 and {d["bug_number"] for d in doc} >= {1, 2, 3, 4, 5, 6}
    assert main(["fixtures", "--write", str(tmp_path / "all")]) == 0
    assert (tmp_path / "all" / "bug3_pad_slice_mismatch" / "gd.json").exists()


def test_log_level(bundles, monkeypatch):
    monkeypatch.setenv("REFINERY_LOG", "debug")
    assert main(check_args(bundles["running_example"], "-q")) == 0
    assert main(["--log-level", "loud", "fixtures"]) == 1


def test_module_entry_point(bundles):
    proc = subprocess.run([sys.executable, "-m", "refinery", *check_args(bundles["bug4_shard_vs_replicate"], "-q")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "refinery", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "refinery" in proc.stdout
