"""Command-line entry point.

Exit codes: 0 refines, 2 refinement error (or numeric mismatch in ``eval``),
3 refines but the expected output relation differs, 1 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

EXIT_OK, EXIT_USAGE, EXIT_REFINEMENT, EXIT_EXPECTATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which means "refinement error" here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _load_graph(path: str):
    from .graph import GraphError, parse_graph
    from .ops import ShapeError

    doc = _read_json(path)
    try:
        return parse_graph(doc)
    except (GraphError, ShapeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_relation(path: str):
    from .expr import ExprParseError, Relation

    doc = _read_json(path)
    if isinstance(doc, dict):  # an expected.json bundle file
        doc = doc.get("ro")
        if doc is None:
            raise UsageError(f"{path}: no output relation recorded")
    try:
        return Relation.from_json(doc)
    except ExprParseError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _config(args):
    from .checker import CheckConfig, ConfigError

    doc = dict(_read_json(args.config)) if getattr(args, "config", None) else {}
    if getattr(args, "mode", None):
        doc["exploration"] = args.mode
    if getattr(args, "no_pruning", False):
        doc["pruning"] = False
    if getattr(args, "max_iterations", None) is not None:
        doc["max_iterations"] = args.max_iterations
    if getattr(args, "max_nodes", None) is not None:
        doc["max_nodes"] = args.max_nodes
    try:
        return CheckConfig.from_dict(doc)
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _register_lemma_files(paths: Sequence[str]) -> None:
    from .lemmas import LemmaValidationError, load_builtin_lemmas, load_lemma_file, register_lemma

    load_builtin_lemmas()
    for p in paths or ():
        try:
            for lem in load_lemma_file(p):
                register_lemma(lem)
        except (OSError, KeyError, ValueError, LemmaValidationError) as exc:
            raise UsageError(f"{p}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_check(args) -> int:
    from .checker import ConfigError, compute_out_rel, expectation_diff
    from .graph import ValidationError
    from .harness import register_custom

    register_custom()
    _register_lemma_files(args.lemma_file)
    cfg = _config(args)
    gs, gd = _load_graph(args.gs), _load_graph(args.gd)
    ri = _load_relation(args.ri)
    try:
        report = compute_out_rel(gs, gd, ri, cfg)
    except (ValidationError, ConfigError) as exc:
        raise UsageError(str(exc)) from None
    code = EXIT_OK if report.refines else EXIT_REFINEMENT
    if args.expected and report.refines:
        report.expectation = expectation_diff(report, _load_relation(args.expected), gd)
        if not report.expectation["match"]:
            code = EXIT_EXPECTATION
    if args.json:
        text = report.dumps(timings=not args.no_timings)
        if args.json == "-":
            print(text)
        else:
            Path(args.json).write_text(text + "\n")
    if args.json != "-" and not args.quiet:
        print(report.to_text())
    return code


def cmd_gen(args) -> int:
    from .harness import BugSpec, ModelSpec, SpecError, StrategySpec, generate, get_fixture, write_fixture

    try:
        if args.fixture:
            fx = get_fixture(args.fixture).build()
        else:
            if not (args.model and args.strategy):
                raise UsageError("gen needs --model and --strategy (or --fixture)")
            model = ModelSpec(args.model, layers=args.layers, hidden=args.hidden, heads=args.heads,
                              experts=args.experts, seq=args.seq)
            fx = generate(model, StrategySpec(args.strategy, args.degree),
                          BugSpec(args.bug) if args.bug else None)
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    out = write_fixture(args.out, fx)
    print(f"wrote {out}/{{gs,gd,ri,expected}}.json")
    return EXIT_OK


def _fixture_from(arg: str):
    from .harness import SpecError, get_fixture, read_fixture

    if Path(arg).is_dir():
        try:
            return read_fixture(arg)
        except OSError as exc:
            raise UsageError(f"{arg}: {exc}") from None
    try:
        return get_fixture(arg).build()
    except SpecError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    from .checker import compute_out_rel
    from .oracle import reconstruction_report

    gs, gd, ri, exp = _fixture_from(args.fixture)
    if args.ro:
        ro = _load_relation(args.ro)
    elif exp is not None and exp.ro is not None:
        ro = exp.ro
    else:
        report = compute_out_rel(gs, gd, ri, _config(args))
        if not report.refines:
            print(f"no output relation: checker reports {report.verdict} at "
                  f"{report.failure['node']}; pass --ro to evaluate one")
            return EXIT_REFINEMENT
        ro = report.certificate
    rows = reconstruction_report(gs, gd, ri, ro, (args.seed,), args.tol)
    width = max(len(r["target"]) for r in rows)
    for r in rows:
        print(f"seed {r['seed']}  {r['target']:<{width}}  max_dev {r['max_dev']:.3e}  "
              f"{'ok' if r['ok'] else 'MISMATCH'}")
    return EXIT_OK if all(r["ok"] for r in rows) else EXIT_REFINEMENT


def cmd_lemmas(args) -> int:
    from .harness import register_custom
    from .lemmas import registered_lemmas

    register_custom()
    _register_lemma_files(args.lemma_file)
    if args.stats:
        doc = _read_json(args.stats)
        stats = doc.get("lemma_stats") if isinstance(doc, dict) else None
        if not isinstance(stats, dict):
            raise UsageError(f"{args.stats}: not a check report")
        fam = {lem.name: lem.family for lem in registered_lemmas()}
        width = max((len(k) for k in stats), default=10)
        for name, count in sorted(stats.items(), key=lambda kv: (-kv[1], kv[0])):
            print(f"{name:<{width}}  {fam.get(name, '?'):<14} {count}")
        totals: dict[str, int] = {}
        for name, count in stats.items():
            totals[fam.get(name, "?")] = totals.get(fam.get(name, "?"), 0) + count
        print("by family: " + ", ".join(f"{k}={v}" for k, v in sorted(totals.items())))
        return EXIT_OK
    for lem in registered_lemmas():
        cond = "" if lem.condition == "true" else f"   if {lem.condition}"
        arrow = "<->" if lem.direction == "both" else "->"
        print(f"{lem.name:<20} [{lem.family}] {lem.lhs} {arrow} {lem.rhs}{cond}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    from .harness import list_fixtures, write_fixture

    entries = list_fixtures()
    if args.json:
        print(json.dumps([e.to_json() for e in entries], indent=2))
    else:
        for e in entries:
            tag = f"bug {e.bug_number}" if e.bug_number else "clean"
            print(f"{e.name:<28} {tag:<6} {e.description}")
    if args.write:
        for e in entries:
            write_fixture(Path(args.write) / e.name, e.build())
        print(f"wrote {len(entries)} bundles under {args.write}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    p = _Parser(prog="refinery", description="Static refinement checker for distributed model graphs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default=None,
                   help="DEBUG, INFO, WARNING (default) or ERROR; env REFINERY_LOG sets the default")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    c = sub.add_parser("check", help="check that the distributed graph refines the sequential one")
    c.add_argument("--gs", required=True, help="sequential graph JSON")
    c.add_argument("--gd", required=True, help="distributed graph JSON")
    c.add_argument("--ri", required=True, help="input relation JSON")
    c.add_argument("--expected", help="expected output relation (relation JSON or expected.json)")
    c.add_argument("--mode", choices=("optimized", "exhaustive"))
    c.add_argument("--json", metavar="OUT", help="write the JSON report to OUT ('-' for stdout)")
    c.add_argument("--config", help="JSON file with check settings; flags win")
    c.add_argument("--lemma-file", action="append", help="extra pattern lemmas (JSON), repeatable")
    c.add_argument("--no-pruning", action="store_true")
    c.add_argument("--max-iterations", type=int)
    c.add_argument("--max-nodes", type=int)
    c.add_argument("--no-timings", action="store_true", help="omit timings from the JSON report")
    c.add_argument("-q", "--quiet", action="store_true", help="no text report")
    c.set_defaults(func=cmd_check)

    g = sub.add_parser("gen", help="generate a fixture bundle")
    g.add_argument("--model", choices=("mlp", "attention_rope", "moe", "regression_mse"))
    g.add_argument("--strategy", choices=("tp", "sp", "ep", "grad_accum"))
    g.add_argument("--degree", type=int, default=2)
    g.add_argument("--bug")
    g.add_argument("--layers", type=int, default=1)
    g.add_argument("--hidden", type=int, default=8)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--experts", type=int, default=4)
    g.add_argument("--seq", type=int, default=8)
    g.add_argument("--fixture", help="catalog entry name instead of a model/strategy")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="numerically evaluate an output relation on a fixture")
    e.add_argument("--fixture", required=True, help="bundle directory or catalog name")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ro", help="relation to evaluate (default: the fixture's expected relation)")
    e.add_argument("--tol", type=float, default=1e-5)
    e.set_defaults(func=cmd_eval)

    lm = sub.add_parser("lemmas", help="list the lemma library or summarize usage")
    grp = lm.add_mutually_exclusive_group(required=True)
    grp.add_argument("--list", action="store_true")
    grp.add_argument("--stats", metavar="REPORT", help="check report JSON")
    lm.add_argument("--lemma-file", action="append")
    lm.set_defaults(func=cmd_lemmas)

    f = sub.add_parser("fixtures", help="print the fixture catalog")
    f.add_argument("--json", action="store_true")
    f.add_argument("--write", metavar="DIR", help="also write every bundle under DIR")
    f.set_defaults(func=cmd_fixtures)
    return p


def _setup_logging(flag: str | None) -> None:
    level = (flag or os.environ.get("REFINERY_LOG") or "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise UsageError(f"unknown log level {level!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _setup_logging(args.log_level)
        return args.func(args)
    except UsageError as exc:
        print(f"refinery: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
