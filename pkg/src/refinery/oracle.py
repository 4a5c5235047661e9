"""Reference numeric interpreter for graphs, expressions and relations.

Everything is evaluated in float64 regardless of the declared dtype.
Integer-typed tensors (token ids) are sampled as integers and stored as
float64 values that operators round back to indices.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dims import DimExpr
from .expr import Apply, Expr, Relation, ScalarRef, TensorRef
from .graph import ComputationGraph, check_acyclic_and_sort
from .ops import EvalError, Shape, get_op, output_exprs, resolve_attrs, split_attrs

RTOL = 1e-5
ATOL = 1e-8


@dataclass
class Binding:
    values: dict[str, np.ndarray] = field(default_factory=dict)
    dims: dict[str, int] = field(default_factory=dict)
    seed: int = 0


def concrete(shape: Shape, env: Mapping[str, int]) -> tuple[int, ...]:
    return tuple(d.evaluate(env) for d in shape)


def _scalar_value(v) -> np.float64:
    return np.float64(v)


def _apply(op: str, args: Sequence[np.ndarray], attrs: Mapping, env: Mapping[str, int]) -> np.ndarray:
    spec = get_op(op)
    if spec.evaluate is None:
        raise EvalError(f"operator {op!r} has no reference implementation")
    try:
        return np.asarray(spec.evaluate(list(args), resolve_attrs(attrs, env)), dtype=np.float64)
    except EvalError:
        raise
    except Exception as exc:  # numpy shape errors and the like
        raise EvalError(f"{op}: {exc}") from exc


def eval_expr(e: Expr, values: Mapping[str, np.ndarray], env: Mapping[str, int] | None = None) -> np.ndarray:
    env = env or {}
    if isinstance(e, TensorRef):
        try:
            return values[e.name]
        except KeyError:
            raise EvalError(f"unbound tensor {e.name!r}") from None
    if isinstance(e, ScalarRef):
        return np.asarray(_scalar_value(e.value.evaluate(env)))
    assert isinstance(e, Apply)
    args = [eval_expr(c, values, env) for c in e.children]
    return _apply(e.op, args, e.attr_map, env)


def eval_graph(g: ComputationGraph, b: Binding) -> dict[str, np.ndarray]:
    vals: dict[str, np.ndarray] = {}
    for t in g.graph_inputs:
        if t not in b.values:
            raise EvalError(f"graph input {t!r} is not bound")
        vals[t] = np.asarray(b.values[t], dtype=np.float64)
    shapes = g.shapes
    for n in check_acyclic_and_sort(g):
        spec = get_op(n.op)
        attrs = n.attr_map
        if spec.expand is not None:
            ins = [TensorRef(t) for t in n.inputs]
            exprs = output_exprs(n.op, ins, attrs, [shapes[t] for t in n.inputs])
            for t, e in zip(n.outputs, exprs):
                vals[t] = eval_expr(e, vals, b.dims)
            continue
        rest, sc = split_attrs(spec, attrs)
        args = [vals[t] for t in n.inputs]
        if sc is not None:
            args.append(np.asarray(_scalar_value(DimExpr.of(sc).evaluate(b.dims))))
        vals[n.outputs[0]] = _apply(spec.name, args, rest, b.dims)
    return vals


# ---------------------------------------------------------------------------
# sampling

def choose_dims(g: ComputationGraph, rng: np.random.Generator, lo: int = 1, hi: int = 6,
                tries: int = 2000) -> dict[str, int]:
    syms = sorted({s for t in g.tensors.values() if t.shape for d in t.shape for s in d.symbols}
                  | g.store.symbols)
    if not syms:
        return {}
    for _ in range(tries):
        env = {s: int(rng.integers(lo, hi + 1)) for s in syms}
        if g.store.satisfied_by(env) and _shapes_ok(g, env):
            return env
    for vals in itertools.product(range(0, hi + 1), repeat=len(syms)):
        env = dict(zip(syms, vals))
        if g.store.satisfied_by(env) and _shapes_ok(g, env):
            return env
    raise EvalError("could not find dimension values satisfying the constraints")


def _shapes_ok(g: ComputationGraph, env: Mapping[str, int]) -> bool:
    return all(d.evaluate(env) >= 0 for t in g.tensors.values() if t.shape for d in t.shape)


def _int_bounds(g: ComputationGraph, env: Mapping[str, int]) -> dict[str, int]:
    """Upper bound for integer-typed inputs: rows of the tables they index."""
    out: dict[str, int] = {}
    for n in g.nodes:
        if n.name in ("embedding", "embedding_masked") and n.inputs[0] in g.graph_inputs:
            rows = g.shapes[n.inputs[1]][0].evaluate(env)
            if n.name == "embedding":
                prev = out.get(n.inputs[0])
                out[n.inputs[0]] = rows if prev is None else min(prev, rows)
    return out


def sample_inputs(g: ComputationGraph, seed: int, env: Mapping[str, int] | None = None) -> Binding:
    rng = np.random.default_rng(seed)
    env = dict(env) if env is not None else choose_dims(g, rng)
    bounds = _int_bounds(g, env)
    vals = {}
    for t in g.graph_inputs:
        decl = g.tensors[t]
        shp = concrete(decl.shape, env)
        if decl.dtype in ("i64", "bool"):
            hi = bounds.get(t, 2 if decl.dtype == "bool" else 4)
            vals[t] = rng.integers(0, max(hi, 1), size=shp).astype(np.float64)
        else:
            vals[t] = rng.standard_normal(shp)
    return Binding(vals, env, seed)


# ---------------------------------------------------------------------------
# relations

def _invert(e: Expr, value: np.ndarray, gd: ComputationGraph, env, out: dict, rng) -> None:
    """Assign destination-input values so that ``e`` evaluates to ``value``."""
    if isinstance(e, TensorRef):
        out.setdefault(e.name, value)
        return
    if not isinstance(e, Apply):
        raise EvalError(f"cannot invert {e}")
    a = e.attr_map
    if e.op == "identity":
        _invert(e.children[0], value, gd, env, out, rng)
    elif e.op == "concat":
        d = a["dim"]
        sizes = [_expr_shape(c, gd, env)[d] for c in e.children]
        parts = np.split(value, np.cumsum(sizes)[:-1], axis=d)
        for c, p in zip(e.children, parts):
            _invert(c, p, gd, env, out, rng)
    elif e.op == "transpose":
        inv = np.argsort(a["perm"])
        _invert(e.children[0], np.transpose(value, inv), gd, env, out, rng)
    elif e.op == "reshape":
        shp = _expr_shape(e.children[0], gd, env)
        _invert(e.children[0], np.reshape(value, shp), gd, env, out, rng)
    elif e.op == "sum":
        acc = np.zeros_like(value)
        for c in e.children[:-1]:
            part = rng.standard_normal(value.shape)
            _invert(c, part, gd, env, out, rng)
            acc = acc + part
        _invert(e.children[-1], value - acc, gd, env, out, rng)
    elif e.op == "slice":
        child = e.children[0]
        shp = _expr_shape(child, gd, env)
        base = rng.standard_normal(shp)
        idx = [slice(None)] * len(shp)
        ra = resolve_attrs(a, env)
        idx[ra["dim"]] = slice(ra["start"], ra["end"])
        base[tuple(idx)] = value
        _invert(child, base, gd, env, out, rng)
    else:
        raise EvalError(f"cannot derive inputs through {e.op!r}")


def _expr_shape(e: Expr, gd: ComputationGraph, env) -> tuple[int, ...]:
    if isinstance(e, TensorRef):
        return concrete(gd.shapes[e.name], env)
    vals = {t: np.zeros(concrete(gd.shapes[t], env)) for t in _refs(e)}
    return eval_expr(e, vals, env).shape


def _refs(e: Expr) -> set[str]:
    from .expr import tensor_refs
    return tensor_refs(e)


def derive_inputs(gs: ComputationGraph, gd: ComputationGraph, ri: Relation, bs: Binding) -> Binding:
    """Destination-graph inputs consistent with source inputs under ``ri``."""
    rng = np.random.default_rng(bs.seed + 7919)
    env = dict(bs.dims)
    for s in sorted(gd.store.symbols - set(env)):
        env[s] = 1
    out: dict[str, np.ndarray] = {}
    for t in gs.graph_inputs:
        for e in ri.for_target(t):
            _invert(e, bs.values[t], gd, env, out, rng)
    for t in gd.graph_inputs:
        if t not in out:
            out[t] = rng.standard_normal(concrete(gd.shapes[t], env))
    return Binding(out, env, bs.seed)


def max_deviation(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        return float("inf")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / (ATOL + np.abs(b))))


def reconstruction_report(gs: ComputationGraph, gd: ComputationGraph, ri: Relation, ro: Relation,
                          seeds: Sequence[int] = (0, 1, 2), tol: float = RTOL) -> list[dict]:
    """Per seed and output entry: does the mapping reproduce the source output?"""
    rows = []
    for seed in seeds:
        bs = sample_inputs(gs, seed)
        bd = derive_inputs(gs, gd, ri, bs)
        vs = eval_graph(gs, bs)
        vd = eval_graph(gd, bd)
        for t, e in ro:
            got = eval_expr(e, vd, bd.dims)
            want = vs[t]
            ok = got.shape == want.shape and bool(np.allclose(got, want, rtol=tol, atol=ATOL if tol else 0.0))
            rows.append({"seed": seed, "target": t, "ok": ok, "max_dev": max_deviation(got, want)})
    return rows


def check_reconstruction(gs: ComputationGraph, gd: ComputationGraph, ri: Relation, ro: Relation,
                         seeds: Sequence[int] = (0, 1, 2), tol: float = RTOL) -> bool:
    return all(r["ok"] for r in reconstruction_report(gs, gd, ri, ro, seeds, tol))
