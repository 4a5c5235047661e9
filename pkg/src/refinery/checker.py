"""Refinement checker.

For every operator of the sequential graph, in topological order, the
checker builds an e-graph containing

* the operator applied to its inputs,
* each input merged with every expression the relation maps it to,
* definitions of distributed-graph tensors admitted by exploration,

saturates it with the lemma library, and reads back clean expressions for
the operator's outputs. The first operator with an unmapped output is
reported as the failure.
"""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .egraph import DST, SRC, Budget, BudgetExceeded, EGraph
from .expr import (CleanOpSet, Expr, Relation, TensorRef, is_clean, is_complete, simplicity_key,
                   tensor_refs, to_sexpr)
from .graph import ComputationGraph, OpNode
from .lemmas import Lemma, load_builtin_lemmas, registered_lemmas, select
from .ops import ShapeError, expr_shape, get_op, output_exprs
from .rewrite import SaturationResult, prune, saturate
from .symbolic import ConstraintStore, ExternalSolver, Tristate, decide_cmp

log = logging.getLogger(__name__)

REPORT_SCHEMA = "refinery.report/1"
REFINES = "Refines"
REFINEMENT_ERROR = "RefinementError"


class ConfigError(ValueError):
    pass


class CertificateInvalid(AssertionError):
    pass


@dataclass(frozen=True)
class CheckConfig:
    clean_ops: CleanOpSet = field(default_factory=CleanOpSet)
    budget: Budget = field(default_factory=Budget)
    exploration: str = "optimized"  # optimized | exhaustive
    pruning: bool = True
    record_stats: bool = True
    exhaustive_cap: int = 2000
    k_best: int = 8
    lemmas: tuple[str, ...] | None = None
    solver_cmd: str | None = None

    def __post_init__(self) -> None:
        if self.exploration not in ("optimized", "exhaustive"):
            raise ConfigError(f"unknown exploration mode {self.exploration!r}")
        if self.k_best < 1 or self.exhaustive_cap < 1:
            raise ConfigError("k_best and exhaustive_cap must be positive")

    @staticmethod
    def from_dict(doc: Mapping[str, Any]) -> "CheckConfig":
        known = {"clean_ops", "max_iterations", "max_nodes", "exploration", "mode", "pruning",
                 "record_stats", "exhaustive_cap", "k_best", "lemmas", "solver_cmd"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        try:
            budget = Budget(int(doc.get("max_iterations", 30)), int(doc.get("max_nodes", 50_000)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid budget: {exc}") from exc
        lem = doc.get("lemmas")
        return CheckConfig(
            clean_ops=CleanOpSet.from_json(doc["clean_ops"]) if "clean_ops" in doc else CleanOpSet(),
            budget=budget,
            exploration=doc.get("exploration", doc.get("mode", "optimized")),
            pruning=bool(doc.get("pruning", True)),
            record_stats=bool(doc.get("record_stats", True)),
            exhaustive_cap=int(doc.get("exhaustive_cap", 2000)),
            k_best=int(doc.get("k_best", 8)),
            lemmas=tuple(lem) if lem is not None else None,
            solver_cmd=doc.get("solver_cmd"),
        )

    def to_dict(self) -> dict:
        return {"clean_ops": self.clean_ops.to_json(), "max_iterations": self.budget.max_iterations,
                "max_nodes": self.budget.max_nodes, "exploration": self.exploration,
                "pruning": self.pruning, "record_stats": self.record_stats,
                "exhaustive_cap": self.exhaustive_cap, "k_best": self.k_best,
                "lemmas": list(self.lemmas) if self.lemmas is not None else None,
                "solver_cmd": self.solver_cmd}


@dataclass
class ExplorationState:
    t_rel: set[str] = field(default_factory=set)
    r_explored: set[str] = field(default_factory=set)  # ids of admitted destination nodes
    frontier: list[str] = field(default_factory=list)
    rounds: int = 0


@dataclass
class NodeResult:
    relation: Relation
    complete: bool
    state: ExplorationState
    counts: Counter
    warnings: list[str]
    detail: dict


@dataclass
class CheckReport:
    verdict: str
    certificate: Relation | None = None
    alternates: Relation | None = None
    relation: Relation | None = None  # every mapping found, for inspection
    failure: dict | None = None
    lemma_stats: dict[str, int] = field(default_factory=dict)
    family_stats: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    expectation: dict | None = None

    @property
    def refines(self) -> bool:
        return self.verdict == REFINES

    @property
    def budget_warning(self) -> bool:
        return any("budget" in w or "saturation" in w for w in self.warnings)

    def to_json(self, timings: bool = True) -> dict:
        out = {
            "schema": REPORT_SCHEMA,
            "verdict": self.verdict,
            "budget_warning": self.budget_warning,
            "certificate": self.certificate.to_json() if self.certificate is not None else None,
            "alternates": self.alternates.to_json() if self.alternates is not None else [],
            "failure": self.failure,
            "lemma_stats": dict(sorted(self.lemma_stats.items())),
            "lemma_family_stats": dict(sorted(self.family_stats.items())),
            "warnings": list(self.warnings),
            "config": self.config,
        }
        if self.expectation is not None:
            out["expectation"] = self.expectation
        if timings:
            out["timings"] = self.timings
        return out

    def dumps(self, timings: bool = True) -> str:
        return json.dumps(self.to_json(timings), indent=2, sort_keys=False)

    def to_text(self) -> str:
        lines = [f"verdict: {self.verdict}" + (" (budget warning)" if self.budget_warning else "")]
        if self.certificate is not None:
            lines.append("certificate:")
            lines += [f"  {t} = {to_sexpr(e)}" for t, e in self.certificate]
            if self.alternates:
                lines.append("alternates:")
                lines += [f"  {t} = {to_sexpr(e)}" for t, e in self.alternates]
        if self.failure:
            f = self.failure
            lines.append(f"could not map outputs of operator {f['node']} ({f['op']})")
            if f.get("unmapped"):
                lines.append(f"  unmapped outputs: {', '.join(f['unmapped'])}")
            for entry in f.get("input_relation", []):
                lines.append(f"  input {entry['target']} = {entry['expr']}")
            cands = f.get("candidates", {})
            for t, exprs in cands.get("nearest_unclean", {}).items():
                for e in exprs[:3]:
                    lines.append(f"  nearest for {t}: {e}")
            if cands.get("lemmas"):
                tried = ", ".join(f"{k}x{v}" for k, v in sorted(cands["lemmas"].items()))
                lines.append(f"  lemmas tried: {tried}")
        if self.expectation is not None:
            lines.append("expectation: " + ("match" if self.expectation["match"] else "MISMATCH"))
            for t, d in self.expectation.get("diff", {}).items():
                lines.append(f"  {t}: expected {d['expected']} got {d['actual']}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        used = {k: v for k, v in self.lemma_stats.items() if v}
        if used:
            top = sorted(used.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
            lines.append("lemma usage: " + ", ".join(f"{k}={v}" for k, v in top))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# per-operator step

class _Step:
    """Saturation state for one source-graph operator."""

    def __init__(self, v: OpNode, gs: ComputationGraph, gd: ComputationGraph, r: Relation,
                 cfg: CheckConfig, lemmas: Sequence[Lemma], cs: ConstraintStore):
        self.v, self.gs, self.gd, self.cfg, self.lemmas = v, gs, gd, cfg, lemmas
        gs_shapes, gd_shapes = gs.shapes, gd.shapes
        self.eg = EGraph(cs, lambda sp, n: gs_shapes[n] if sp == SRC else gd_shapes[n], cfg.budget)
        self.counts: Counter = Counter()
        self.seen: set = set()
        self.warnings: list[str] = []
        self.budget_hit = False
        eg = self.eg
        self.inputs: dict[str, int] = {}
        for t in dict.fromkeys(v.inputs):
            c = eg.add_ref(t, SRC)
            for e in r.for_target(t):
                eg.union(c, eg.add_expr(e, DST))
            self.inputs[t] = c
        exprs = output_exprs(v.op, [TensorRef(t) for t in v.inputs], v.attr_map,
                             [gs_shapes[t] for t in v.inputs])
        self.roots = {o: eg.add_expr(e, SRC) for o, e in zip(v.outputs, exprs)}
        # graph outputs must eventually map onto distributed-graph outputs
        self.finals = [o for o in v.outputs if o in set(gs.graph_outputs)]
        self.gd_outputs = frozenset(gd.graph_outputs)
        eg.rebuild()
        self.admitted: list[str] = []
        self._outs: tuple[dict, dict] | None = None
        self._clean: dict[int, list[Expr]] = {}

    # -- exploration ------------------------------------------------------

    def admit(self, nodes: Iterable[OpNode]) -> None:
        eg, shapes = self.eg, self.gd.shapes
        for n in nodes:
            ins = [TensorRef(t) for t in n.inputs]
            try:
                exprs = output_exprs(n.op, ins, n.attr_map, [shapes[t] for t in n.inputs])
                for t, e in zip(n.outputs, exprs):
                    eg.union(eg.add_ref(t, DST), eg.add_expr(e, DST))
            except BudgetExceeded as exc:
                self._budget(str(exc))
                return
            self.admitted.append(n.id)
        eg.rebuild()
        self._outs, self._clean = None, {}

    def run_lemmas(self) -> None:
        if self.budget_hit:
            return
        res: SaturationResult = saturate(self.eg, self.lemmas, self.cfg.budget, self.seen)
        self._outs, self._clean = None, {}
        self.counts.update(res.counts)
        if res.budget_hit:
            self._budget(f"saturation budget reached ({res.stop}) at operator {self.v.id}")

    def _budget(self, msg: str) -> None:
        self.budget_hit = True
        self._outs, self._clean = None, {}
        if msg not in self.warnings:
            self.warnings.append(msg)

    def clean_terms(self, classes: Sequence[int]) -> dict[int, list[Expr]]:
        find, memo = self.eg.find, self._clean
        want = [find(c) for c in classes]
        missing = [c for c in want if c not in memo]
        if missing:
            memo.update(self.eg.extract_clean(missing, self.cfg.clean_ops.ops, self.cfg.k_best))
        return {c: memo[c] for c in want}

    def _extract(self) -> tuple[dict, dict]:
        if self._outs is None:
            got = self.clean_terms(list(self.roots.values()))
            out = {o: got[self.eg.find(c)] for o, c in self.roots.items()}
            final: dict[str, list[Expr]] = {}
            if self.finals:
                fin = self.eg.extract_clean([self.roots[o] for o in self.finals],
                                            self.cfg.clean_ops.ops, self.cfg.k_best,
                                            leaves=self.gd_outputs)
                for o in self.finals:
                    final[o] = fin[self.eg.find(self.roots[o])]
                    out[o] = out[o] + [e for e in final[o] if e not in out[o]]
            self._outs = (out, final)
        return self._outs

    def outputs_clean(self) -> dict[str, list[Expr]]:
        return dict(self._extract()[0])

    def outputs_final(self) -> dict[str, list[Expr]]:
        return {o: terms[:1] for o, terms in self._extract()[1].items()}

    def complete(self) -> bool:
        out, final = self._extract()
        return all(out.values()) and all(final.values())


def _frontier(gd: ComputationGraph, known: set[str], done: set[str]) -> list[OpNode]:
    cand = {n.id: n for t in known for n in gd.consumers.get(t, ())
            if n.id not in done and all(x in known for x in n.inputs)}
    pos = gd.position
    return sorted(cand.values(), key=lambda n: pos[n.id])


def explore_step(st: ExplorationState, gd: ComputationGraph, step: "_Step") -> Relation:
    """One optimized exploration round; returns the frontier relation it admitted."""
    front = _frontier(gd, st.t_rel, st.r_explored)
    st.frontier = [n.id for n in front]
    st.rounds += 1
    if not front:
        return Relation()
    step.admit(front)
    st.r_explored |= {n.id for n in front}
    step.run_lemmas()
    classes = list(step.roots.values()) + list(step.inputs.values())
    for terms in step.clean_terms(classes).values():
        for e in terms:
            st.t_rel |= tensor_refs(e)
    return Relation(tuple((t, TensorRef(t)) for n in front for t in n.outputs))


def _closure(gd: ComputationGraph, known: set[str], done: set[str], depth: int | None) -> list[OpNode]:
    known = set(known)
    out: list[OpNode] = []
    level = 0
    while depth is None or level < depth:
        front = _frontier(gd, known, done | {n.id for n in out})
        if not front:
            break
        out.extend(front)
        for n in front:
            known |= set(n.outputs)
        level += 1
    return out


def compute_node_out_rel(v: OpNode, gd: ComputationGraph, r: Relation, cfg: CheckConfig | None = None,
                         st: ExplorationState | None = None, *, gs: ComputationGraph,
                         lemmas: Sequence[Lemma] | None = None,
                         cs: ConstraintStore | None = None) -> Relation:
    """Every clean mapping found for the outputs of ``v`` (possibly empty)."""
    return _node_out_rel(v, gs, gd, r, cfg or CheckConfig(), st, lemmas, cs).relation


def _node_out_rel(v, gs, gd, r, cfg, st, lemmas, cs) -> NodeResult:
    lemmas = list(lemmas) if lemmas is not None else _lemmas(cfg)
    cs = cs or _store(gs, gd, cfg)
    st = st or ExplorationState()
    step = _Step(v, gs, gd, r, cfg, lemmas, cs)
    for t in v.inputs:
        for e in r.for_target(t):
            st.t_rel |= tensor_refs(e)
    step.run_lemmas()
    if cfg.exploration == "exhaustive":
        step.admit(_closure(gd, st.t_rel, st.r_explored, None))
        st.r_explored |= set(step.admitted)
        step.run_lemmas()
    else:
        while not step.budget_hit:
            if not explore_step(st, gd, step).entries:
                break
        if not step.complete() and not step.budget_hit:
            # bulk exploration: admit everything computable within growing depth
            depth = 2
            while not step.budget_hit:
                known = st.t_rel | {t for nid in st.r_explored for t in gd.node_by_id[nid].outputs}
                extra = _closure(gd, known, st.r_explored, depth)
                if not extra:
                    break
                step.admit(extra)
                st.r_explored |= {n.id for n in extra}
                step.run_lemmas()
                if step.complete():
                    break
                depth *= 2
    outs = step.outputs_clean()
    entries = []
    for o, terms in outs.items():
        if cfg.pruning and len(terms) > 1:
            terms = prune(terms, lemmas, lambda sp, n: gd.shapes[n], cs)
        entries += [(o, e) for e in terms]
    detail = {}
    complete = all(outs.values())  # outputs mapped only onto intermediates fail later, when graph outputs are collected
    if not complete:
        detail = _failure_detail(step, r, outs)
    return NodeResult(Relation(tuple(entries)), complete, st, step.counts, step.warnings, detail)


def _failure_detail(step: _Step, r: Relation, outs: Mapping[str, list[Expr]]) -> dict:
    eg = step.eg
    from .ops import registered_ops
    ops = frozenset(registered_ops())
    near = eg.extract_clean(list(step.roots.values()), ops, 5, allow_scalars=True)
    v = step.v
    return {
        "node": v.id,
        "op": v.op,
        "unmapped": [o for o, t in outs.items() if not t],
        "input_relation": r.restrict(v.inputs).to_json(),
        "candidates": {
            "nearest_unclean": {o: [to_sexpr(e) for e in near[eg.find(c)]] for o, c in step.roots.items()},
            "admitted": list(step.admitted),
            "lemmas": dict(sorted(step.counts.items())),
            "eclasses": len(eg.classes),
            "enodes": eg.n_nodes,
        },
    }


# ---------------------------------------------------------------------------
# whole-graph driver

def _lemmas(cfg: CheckConfig) -> list[Lemma]:
    load_builtin_lemmas()
    return select(list(cfg.lemmas)) if cfg.lemmas is not None else registered_lemmas()


def _store(gs: ComputationGraph, gd: ComputationGraph, cfg: CheckConfig) -> ConstraintStore:
    solver = ExternalSolver(cfg.solver_cmd) if cfg.solver_cmd else None
    return ConstraintStore(tuple(gs.dim_constraints) + tuple(gd.dim_constraints), solver)


def family_counts(stats: Mapping[str, int], lemmas: Sequence[Lemma]) -> dict[str, int]:
    out: Counter = Counter()
    for lem in lemmas:
        out[lem.family] += stats.get(lem.name, 0)
    return dict(out)


def validate_input_relation(ri: Relation, gs: ComputationGraph, gd: ComputationGraph,
                            cfg: CheckConfig) -> None:
    from .graph import ValidationError

    for t, e in ri:
        if t not in gs.graph_inputs:
            raise ValidationError(f"input relation target {t!r} is not a sequential-graph input")
        bad = tensor_refs(e) - set(gd.graph_inputs)
        if bad:
            raise ValidationError(f"input relation for {t!r} references non-inputs {sorted(bad)}")
        if not is_clean(e, cfg.clean_ops):
            raise ValidationError(f"input relation for {t!r} is not clean: {to_sexpr(e)}")


def compute_out_rel(gs: ComputationGraph, gd: ComputationGraph, ri: Relation,
                    cfg: CheckConfig | None = None) -> CheckReport:
    cfg = cfg or CheckConfig()
    if cfg.exploration == "exhaustive" and len(gd.nodes) > cfg.exhaustive_cap:
        raise ConfigError(f"exhaustive mode is capped at {cfg.exhaustive_cap} distributed nodes")
    validate_input_relation(ri, gs, gd, cfg)
    lemmas = _lemmas(cfg)
    cs = _store(gs, gd, cfg)
    known: dict[str, list[tuple[str, Expr]]] = {}
    for t, e in ri:
        known.setdefault(t, []).append((t, e))
    stats: Counter = Counter({lem.name: 0 for lem in lemmas}) if cfg.record_stats else Counter()
    timings: dict[str, float] = {}
    warnings: list[str] = []
    report = CheckReport(REFINES, config=cfg.to_dict())
    start = time.perf_counter()
    for v in gs.order:
        t0 = time.perf_counter()
        r_in = Relation(tuple(x for t in dict.fromkeys(v.inputs) for x in known.get(t, ())))
        res = _node_out_rel(v, gs, gd, r_in, cfg, None, lemmas, cs)
        timings[v.id] = round(time.perf_counter() - t0, 6)
        if cfg.record_stats:
            stats.update(res.counts)
        warnings += [w for w in res.warnings if w not in warnings]
        if not res.complete:
            report.verdict = REFINEMENT_ERROR
            report.failure = res.detail
            break
        for t, e in res.relation:
            known.setdefault(t, []).append((t, e))
    timings["total"] = round(time.perf_counter() - start, 6)
    report.lemma_stats = dict(stats)
    report.family_stats = family_counts(stats, lemmas)
    report.timings = timings
    report.warnings = warnings
    r = Relation(tuple(x for xs in known.values() for x in xs))
    report.relation = r
    if report.verdict == REFINES:
        _finish(report, gs, gd, r, cfg)
    return report


def _finish(report: CheckReport, gs, gd, r: Relation, cfg: CheckConfig) -> None:
    outs_d = set(gd.graph_outputs)
    ro = [(t, e) for t, e in r if t in gs.graph_outputs and tensor_refs(e) <= outs_d]
    missing = [o for o in gs.graph_outputs if not any(t == o for t, _ in ro)]
    if missing:
        prod = gs.producer.get(missing[0])
        report.verdict = REFINEMENT_ERROR
        report.failure = {
            "node": prod.id if prod else None,
            "op": prod.op if prod else None,
            "unmapped": missing,
            "input_relation": [],
            "candidates": {"mapped_to_intermediates": Relation(tuple(
                (t, e) for t, e in r if t in missing)).to_json()},
            "reason": "no mapping onto outputs of the distributed graph",
        }
        return
    best, alt = [], []
    for o in gs.graph_outputs:
        cands = sorted((e for t, e in ro if t == o), key=simplicity_key)
        best.append((o, cands[0]))
        alt += [(o, e) for e in cands[1:]]
    report.certificate = Relation(tuple(best))
    report.alternates = Relation(tuple(alt))
    if not is_complete(report.certificate, gs) or not all(is_clean(e, cfg.clean_ops) for _, e in best):
        raise CertificateInvalid("checker produced an incomplete or unclean certificate")


# ---------------------------------------------------------------------------
# certificates and expectations

def validate_certificate(report: CheckReport, gs: ComputationGraph, gd: ComputationGraph,
                         ri: Relation | None = None, seeds: Sequence[int] = (0, 1, 2),
                         tol: float = 1e-5, clean_ops: CleanOpSet | None = None) -> bool:
    """Independent re-check of a Refines verdict; raises CertificateInvalid."""
    if report.verdict != REFINES or report.certificate is None:
        raise CertificateInvalid("report has no certificate")
    cert = report.certificate
    if report.alternates:
        cert = cert.union(report.alternates)
    if not is_complete(cert, gs):
        raise CertificateInvalid("certificate does not map every output")
    cs = ConstraintStore(tuple(gs.dim_constraints) + tuple(gd.dim_constraints))
    outs_d = {t: gd.shapes[t] for t in gd.graph_outputs}
    for t, e in cert:
        if not is_clean(e, clean_ops or CleanOpSet()):
            raise CertificateInvalid(f"mapping for {t} is not clean: {to_sexpr(e)}")
        if not tensor_refs(e) <= set(outs_d):
            raise CertificateInvalid(f"mapping for {t} uses non-output tensors")
        try:
            shp = expr_shape(e, outs_d, cs)
        except ShapeError as exc:
            raise CertificateInvalid(f"mapping for {t} is ill-shaped: {exc}") from exc
        want = gs.shapes[t]
        if len(shp) != len(want) or any(decide_cmp(a, b, "==", cs) is not Tristate.TRUE
                                        for a, b in zip(shp, want)):
            raise CertificateInvalid(f"mapping for {t} has shape {[str(d) for d in shp]}, "
                                     f"expected {[str(d) for d in want]}")
    if ri is not None:
        from .oracle import reconstruction_report

        rows = reconstruction_report(gs, gd, ri, cert, seeds, tol)
        bad = [row for row in rows if not row["ok"]]
        if bad:
            b = bad[0]
            raise CertificateInvalid(f"numeric reconstruction failed for {b['target']} "
                                     f"(seed {b['seed']}, deviation {b['max_dev']:.3g})")
    return True


def expectation_diff(report: CheckReport, expected: Relation, gd: ComputationGraph | None = None,
                     lemmas: Sequence[Lemma] | None = None) -> dict:
    """Compare the certificate (with alternates) against an expected output relation."""
    actual = Relation()
    if report.certificate is not None:
        actual = report.certificate.union(report.alternates or ())
    diff = {}
    for t in sorted(expected.targets):
        want = expected.for_target(t)
        have = actual.for_target(t)
        have_p = {to_sexpr(e) for e in have}
        missing = [e for e in want if to_sexpr(e) not in have_p
                   and not _provably_in(e, have, gd, lemmas)]
        if missing:
            diff[t] = {"expected": [to_sexpr(e) for e in want], "actual": sorted(have_p)}
    return {"match": not diff and report.verdict == REFINES, "diff": diff}


def _provably_in(e: Expr, pool: Sequence[Expr], gd, lemmas) -> bool:
    if not pool or gd is None:
        return False
    from .rewrite import self_provable_groups

    try:
        groups = self_provable_groups([e, *pool], lemmas or _lemmas(CheckConfig()),
                                      lambda sp, n: gd.shapes.get(n))
    except (ShapeError, KeyError):
        return False
    return any(e in g and len(g) > 1 for g in groups)


def with_mode(cfg: CheckConfig, **changes) -> CheckConfig:
    return replace(cfg, **changes)
