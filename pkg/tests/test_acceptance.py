"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``);
the lines are also repeated in the terminal summary.
"""

import time

import numpy as np
import pytest

from refinery.checker import (REFINEMENT_ERROR, REFINES, CheckConfig,
                              compute_out_rel, validate_certificate, with_mode)
from refinery.cli import EXIT_EXPECTATION, main
from refinery.expr import to_sexpr
from refinery.harness import ModelSpec, StrategySpec, generate, list_fixtures, write_fixture
from refinery.lemmas import LemmaValidationError, builtin_lemmas, get_lemma, validate_lemma

pytestmark = pytest.mark.acceptance


def _timed(gs, gd, ri, cfg=None):
    t = time.perf_counter()
    rep = compute_out_rel(gs, gd, ri, cfg)
    return rep, time.perf_counter() - t


def test_worked_example(catalog, criterion):
    gs, gd, ri, _ = catalog["running_example"]
    rep = compute_out_rel(gs, gd, ri)
    ro = [(t, to_sexpr(e)) for t, e in rep.certificate] if rep.certificate else []
    c_prints = {to_sexpr(e) for e in rep.relation.for_target("C")}
    want_c = {"(sum (t C1) (t C2))", "(concat (t D1) (t D2) :dim 0)"}
    ok = (rep.verdict == REFINES and ro == [("F", "(concat (t F1) (t F2) :dim 0)")]
          and want_c <= c_prints)
    assert criterion("worked example", ok,
                     f"verdict={rep.verdict} certificate={ro} C has sum+concat={want_c <= c_prints}")


def test_bug_corpus(catalog, criterion, tmp_path):
    bugs = [e for e in list_fixtures() if e.bug is not None]
    rows, ok = [], len(bugs) == 6
    for e in bugs:
        gs, gd, ri, exp = catalog[e.name]
        t = time.perf_counter()
        rep = compute_out_rel(gs, gd, ri)
        if exp.verdict == REFINES:
            d = write_fixture(tmp_path / e.name, (gs, gd, ri, exp))
            code = main(["check", "--gs", str(d / "gs.json"), "--gd", str(d / "gd.json"),
                         "--ri", str(d / "ri.json"), "--expected", str(d / "expected.json"), "-q"])
            good = rep.verdict == REFINES and code == EXIT_EXPECTATION
            got = f"exit {code}"
        else:
            node = (rep.failure or {}).get("node")
            good = rep.verdict == REFINEMENT_ERROR and node == exp.failure_node
            got = node
        dt = time.perf_counter() - t
        good = good and dt < 10
        ok = ok and good
        rows.append(f"{e.name.split('_')[0]}:{got}({dt:.2f}s){'' if good else '!'}")
    assert criterion("bug corpus", ok, " ".join(rows))


def test_certificates_validate(catalog, criterion):
    checked, bad = 0, []
    for name, (gs, gd, ri, _) in catalog.items():
        rep = compute_out_rel(gs, gd, ri)
        if rep.verdict != REFINES:
            continue
        try:
            validate_certificate(rep, gs, gd, ri, seeds=(0, 1, 2), tol=1e-5)
            checked += 1
        except Exception as exc:  # CertificateInvalid or anything unexpected
            bad.append(f"{name}: {exc}")
    ok = not bad and checked > 0
    assert criterion("certificate soundness", ok,
                     f"{checked} Refines certificates validated on 3 seeds at 1e-5"
                     + (f"; failures: {bad}" if bad else ""))


def test_builtin_lemmas_sound(criterion):
    names = [l.name for l in builtin_lemmas()]
    bad = []
    for i, name in enumerate(names):
        try:
            n = validate_lemma(get_lemma(name), np.random.default_rng(1000 + i), instances=10, rtol=1e-6)
        except LemmaValidationError as exc:
            bad.append(str(exc))
            continue
        if n < 10:
            bad.append(f"{name}: only {n} checked")
    assert criterion("lemma soundness", not bad,
                     f"{len(names) - len(bad)}/{len(names)} lemmas pass 10 instances at rtol 1e-6"
                     + (f"; {bad}" if bad else ""))


def _small_fixtures(catalog):
    out = {k: v for k, v in catalog.items()}
    extra = [("mlp", "tp", 4, {}), ("mlp", "sp", 4, {}), ("attention_rope", "tp", 4, {}),
             ("attention_rope", "sp", 4, {}), ("moe", "ep", 4, {}), ("mlp", "tp", 2, {"layers": 3})]
    for fam, kind, deg, kw in extra:
        out[f"{fam}_{kind}{deg}{'_' + str(kw) if kw else ''}"] = generate(
            ModelSpec(fam, **kw), StrategySpec(kind, deg))
    return {k: v for k, v in out.items() if len(v[1].nodes) <= 200}


def test_optimizations_preserve_verdicts(catalog, criterion):
    base = CheckConfig()
    modes = {"exhaustive": with_mode(base, exploration="exhaustive"),
             "no-pruning": with_mode(base, pruning=False),
             "exhaustive+no-pruning": with_mode(base, exploration="exhaustive", pruning=False)}
    fixtures = _small_fixtures(catalog)
    diffs = []
    for name, (gs, gd, ri, _) in fixtures.items():
        ref = compute_out_rel(gs, gd, ri, base)
        key = (ref.verdict, (ref.failure or {}).get("node"))
        for mode, cfg in modes.items():
            rep = compute_out_rel(gs, gd, ri, cfg)
            got = (rep.verdict, (rep.failure or {}).get("node"))
            if got != key:
                diffs.append(f"{name}/{mode}: {got} vs {key}")
    assert criterion("optimization equivalence", not diffs,
                     f"{len(fixtures)} fixtures x {len(modes) + 1} modes agree on verdict and failure node"
                     + (f"; diffs: {diffs}" if diffs else ""))


def test_scalability(criterion):
    tp2 = StrategySpec("tp", 2)
    graphs = {n: generate(ModelSpec("attention_rope", layers=n), tp2)[:3] for n in (1, 4, 8)}
    for g in graphs.values():
        compute_out_rel(*g)
    # interleaved best-of-N so every size sees the same machine load
    t = dict.fromkeys(graphs, float("inf"))
    for _ in range(5):
        for n, g in graphs.items():
            t[n] = min(t[n], _timed(*g)[1])
    ratio = t[8] / t[1]
    step_a, step_b = (t[4] - t[1]) / 3, (t[8] - t[4]) / 4
    sweep = {}
    for deg in (2, 4, 8):
        rep, dt = _timed(*generate(ModelSpec("attention_rope", hidden=16, heads=8), StrategySpec("tp", deg))[:3])
        sweep[deg] = (rep.verdict, dt)
    sweep_ok = all(v == REFINES and dt < 60 for v, dt in sweep.values())
    ok = ratio <= 12 and sweep_ok
    assert criterion("scalability", ok,
                     f"t(8)/t(1) = {t[8]:.3f}s/{t[1]:.3f}s = {ratio:.2f} (bound 12); "
                     f"per added layer {1000 * step_a:.0f}ms (1->4) vs {1000 * step_b:.0f}ms (4->8); "
                     "degree sweep " + ", ".join(f"{d}:{v}/{dt:.2f}s" for d, (v, dt) in sweep.items()))


def test_concat_slice_usage_grows_with_degree(criterion):
    rows, ok = [], True
    for fam, kw, degrees in (("mlp", {}, (2, 4, 8)), ("attention_rope", {"hidden": 16, "heads": 8}, (2, 4, 8))):
        counts = []
        for deg in degrees:
            gs, gd, ri, _ = generate(ModelSpec(fam, **kw), StrategySpec("tp", deg))
            counts.append(compute_out_rel(gs, gd, ri).family_stats.get("concat-slice", 0))
        ok = ok and all(c > 0 for c in counts) and all(a < b for a, b in zip(counts, counts[1:]))
        rows.append(f"{fam} " + "/".join(map(str, counts)) + f" at degrees {'/'.join(map(str, degrees))}")
    assert criterion("lemma usage statistics", ok, "; ".join(rows))


def test_decide_cmp_sound(criterion):
    from test_symbolic import random_query_soundness

    unsound, decided = random_query_soundness(n=1000, seed=0)
    assert criterion("symbolic soundness", unsound == 0,
                     f"1000 random queries, {decided} decided, {unsound} unsound (dims 0..8)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
