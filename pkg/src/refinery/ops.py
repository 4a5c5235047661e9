"""Operator registry: attribute schemas, shape rules, reference semantics.

Every operator kind known to the checker is described by an :class:`OpSpec`.
Graph documents spell builtin kinds with a ``core.`` prefix (``core.matmul``);
inside expressions the prefix is dropped (``matmul``).  Custom operators keep
their full name (``custom.rope``) and must be registered before a graph that
uses them is parsed.

Collectives (``all_gather``, ``all_reduce``, ``reduce_scatter``) have one
output per participating rank; each output is defined by an expansion into
clean expressions over the inputs, which is how both the checker and the
numeric oracle see them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dims import DimExpr
from .expr import Apply, Expr, ScalarRef, TensorRef, app, clear_attr_cache, set_attr_schema_hook
from .symbolic import ConstraintStore, Tristate, decide_cmp

Shape = tuple[DimExpr, ...]

EPS = 1e-6


class ShapeError(ValueError):
    pass


class UnknownOpError(KeyError):
    pass


class EvalError(RuntimeError):
    pass


ShapeFn = Callable[[Sequence[Shape], Mapping, ConstraintStore], "Shape | list[Shape]"]
EvalFn = Callable[[Sequence[np.ndarray], Mapping], np.ndarray]


@dataclass
class OpSpec:
    name: str
    arity: int | None
    shape: ShapeFn
    evaluate: EvalFn | None = None
    attrs: dict[str, str] = field(default_factory=dict)
    required: frozenset[str] = frozenset()
    defaults: dict = field(default_factory=dict)
    category: str | None = None  # "rearrange" | "reduce" | None
    num_outputs: Callable[[int, Mapping], int] | None = None
    expand: Callable[[Sequence[Expr], Mapping, Sequence[Shape], int], Expr] | None = None
    scalar_operand: bool = False
    doc: str = ""

    def check_arity(self, n: int) -> bool:
        return n >= 1 if self.arity is None else n == self.arity


_REGISTRY: dict[str, OpSpec] = {}


def op_name(kind: str) -> str:
    return kind[5:] if kind.startswith("core.") else kind


def op_kind(name: str) -> str:
    return name if "." in name else f"core.{name}"


def register_op(spec: OpSpec, replace: bool = False) -> OpSpec:
    if spec.name in _REGISTRY and not replace:
        raise ValueError(f"operator {spec.name!r} already registered")
    _REGISTRY[spec.name] = spec
    clear_attr_cache()
    return spec


def get_op(name: str) -> OpSpec:
    try:
        return _REGISTRY[op_name(name)]
    except KeyError:
        raise UnknownOpError(name) from None


def has_op(name: str) -> bool:
    return op_name(name) in _REGISTRY


def registered_ops() -> list[str]:
    return sorted(_REGISTRY)


set_attr_schema_hook(
    lambda op: (_REGISTRY[op].attrs, _REGISTRY[op].defaults) if op in _REGISTRY else None)


# ---------------------------------------------------------------------------
# shape helpers

def _true(t: Tristate) -> bool:
    return t is Tristate.TRUE


def same(a: DimExpr, b: DimExpr, cs: ConstraintStore) -> bool:
    return a == b or _true(decide_cmp(a, b, "==", cs))


def require_same(a: DimExpr, b: DimExpr, cs: ConstraintStore, what: str) -> None:
    if not same(a, b, cs):
        raise ShapeError(f"{what}: {a} vs {b}")


def require_shape(a: Shape, b: Shape, cs: ConstraintStore, what: str) -> None:
    if len(a) != len(b):
        raise ShapeError(f"{what}: rank {len(a)} vs {len(b)}")
    for x, y in zip(a, b):
        require_same(x, y, cs, what)


def _check_dim(d: int, rank: int, what: str) -> None:
    if not 0 <= d < rank:
        raise ShapeError(f"{what}: dim {d} out of range for rank {rank}")


def numel(shape: Shape) -> DimExpr | None:
    out = DimExpr(1)
    for d in shape:
        try:
            out = out * d
        except ValueError:
            return None
    return out


def _unary(shapes, attrs, cs):
    return shapes[0]


def _elementwise(shapes, attrs, cs):
    if len(shapes) == 1:
        return shapes[0]
    a, b = shapes
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    require_shape(a, b, cs, "elementwise operand shapes differ")
    return a


def _slice(shapes, attrs, cs):
    (x,) = shapes
    d = attrs["dim"]
    _check_dim(d, len(x), "slice")
    start, end = attrs["start"], attrs["end"]
    if decide_cmp(0, start, "<=", cs) is not Tristate.TRUE:
        raise ShapeError(f"slice start {start} not provably >= 0")
    if decide_cmp(start, end, "<=", cs) is not Tristate.TRUE:
        raise ShapeError(f"slice start {start} not provably <= end {end}")
    if decide_cmp(end, x[d], "<=", cs) is not Tristate.TRUE:
        raise ShapeError(f"slice end {end} not provably <= size {x[d]}")
    return x[:d] + (end - start,) + x[d + 1:]


def _concat_shape(shapes, d, cs) -> Shape:
    first = shapes[0]
    _check_dim(d, len(first), "concat")
    total = DimExpr(0)
    for s in shapes:
        if len(s) != len(first):
            raise ShapeError("concat rank mismatch")
        for i, (a, b) in enumerate(zip(s, first)):
            if i != d:
                require_same(a, b, cs, f"concat dim {i}")
        total = total + s[d]
    return first[:d] + (total,) + first[d + 1:]


def _concat(shapes, attrs, cs):
    return _concat_shape(shapes, attrs["dim"], cs)


def _transpose(shapes, attrs, cs):
    (x,) = shapes
    perm = attrs["perm"]
    if sorted(perm) != list(range(len(x))):
        raise ShapeError(f"bad permutation {perm} for rank {len(x)}")
    return tuple(x[p] for p in perm)


def _reshape(shapes, attrs, cs):
    (x,) = shapes
    target = tuple(attrs["shape"])
    a, b = numel(x), numel(target)
    if a is not None and b is not None:
        require_same(a, b, cs, "reshape element count")
    else:
        sa = sorted(str(d) for d in x if not d.is_concrete)
        sb = sorted(str(d) for d in target if not d.is_concrete)
        ca = math.prod(d.const for d in x if d.is_concrete)
        cb = math.prod(d.const for d in target if d.is_concrete)
        if sa != sb or ca != cb:
            raise ShapeError(f"reshape {x} -> {target} not provably size-preserving")
    return target


def _sum(shapes, attrs, cs):
    for s in shapes[1:]:
        require_shape(s, shapes[0], cs, "sum operand shapes differ")
    return shapes[0]


def _reduce_sum(shapes, attrs, cs):
    (x,) = shapes
    d = attrs["dim"]
    _check_dim(d, len(x), "reduce_sum")
    if attrs.get("keepdim", 0):
        return x[:d] + (DimExpr(1),) + x[d + 1:]
    return x[:d] + x[d + 1:]


def _matmul(shapes, attrs, cs):
    a, b = shapes
    if len(a) < 2 or len(a) != len(b):
        raise ShapeError(f"matmul needs equal ranks >= 2, got {len(a)} and {len(b)}")
    for x, y in zip(a[:-2], b[:-2]):
        require_same(x, y, cs, "matmul batch dims")
    require_same(a[-1], b[-2], cs, "matmul inner dims")
    return a[:-2] + (a[-2], b[-1])


def _softmax(shapes, attrs, cs):
    _check_dim(attrs["dim"], len(shapes[0]), "softmax")
    return shapes[0]


def _rmsnorm(shapes, attrs, cs):
    x, w = shapes
    if not x:
        raise ShapeError("rmsnorm needs rank >= 1")
    require_shape(w, (x[-1],), cs, "rmsnorm weight")
    return x


def _layernorm(shapes, attrs, cs):
    x, w, b = shapes
    if not x:
        raise ShapeError("layernorm needs rank >= 1")
    require_shape(w, (x[-1],), cs, "layernorm weight")
    require_shape(b, (x[-1],), cs, "layernorm bias")
    return x


def _pad(shapes, attrs, cs):
    (x,) = shapes
    d = attrs["dim"]
    _check_dim(d, len(x), "pad")
    return x[:d] + (x[d] + attrs["before"] + attrs["after"],) + x[d + 1:]


def _embedding(shapes, attrs, cs):
    ids, table = shapes
    if len(table) != 2:
        raise ShapeError("embedding table must be rank 2")
    return ids + (table[1],)


def _mse(shapes, attrs, cs):
    require_shape(shapes[0], shapes[1], cs, "mse_loss operand shapes differ")
    return ()


def _gather_shape(shapes, attrs, cs):
    out = _concat_shape(shapes, attrs["dim"], cs)
    return [out] * len(shapes)


def _reduce_shape(shapes, attrs, cs):
    return [_sum(shapes, attrs, cs)] * len(shapes)


def _reduce_scatter_shape(shapes, attrs, cs):
    full = _sum(shapes, attrs, cs)
    d = attrs["dim"]
    _check_dim(d, len(full), "reduce_scatter")
    part = full[d].exact_div(len(shapes))
    if part is None:
        raise ShapeError(f"reduce_scatter: {full[d]} not divisible by {len(shapes)}")
    return [full[:d] + (part,) + full[d + 1:]] * len(shapes)


# ---------------------------------------------------------------------------
# reference semantics (float64)

def _ev_slice(xs, a):
    x = xs[0]
    idx = [slice(None)] * x.ndim
    idx[a["dim"]] = slice(a["start"], a["end"])
    return x[tuple(idx)]


def _softmax_np(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _rms_np(x, w):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + EPS) * w


def _ln_np(x, w, b):
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * w + b


def _ev_pad(xs, a):
    x = xs[0]
    widths = [(0, 0)] * x.ndim
    widths[a["dim"]] = (a["before"], a["after"])
    return np.pad(x, widths)


def _ids(x):
    return np.rint(x).astype(np.int64)


def _ev_embedding(xs, a):
    ids, table = xs
    i = _ids(ids)
    if i.size and (i.min() < 0 or i.max() >= table.shape[0]):
        raise EvalError("embedding index out of range")
    return table[i]


def _ev_embedding_masked(xs, a):
    ids, table = xs
    local = _ids(ids) - a["offset"]
    mask = (local >= 0) & (local < table.shape[0])
    out = table[np.clip(local, 0, table.shape[0] - 1)]
    return out * mask[..., None]


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _binary(fn):
    def ev(xs, a):
        if len(xs) == 1:
            return fn(xs[0], np.float64(a["scalar"]))
        return fn(xs[0], xs[1])
    return ev


# ---------------------------------------------------------------------------
# collective expansions

def _exp_gather(inputs, attrs, shapes, i):
    return app("concat", *inputs, dim=attrs["dim"])


def _exp_reduce(inputs, attrs, shapes, i):
    return app("sum", *inputs)


def _exp_reduce_scatter(inputs, attrs, shapes, i):
    d = attrs["dim"]
    n = len(inputs)
    part = shapes[0][d].exact_div(n)
    if part is None:
        raise ShapeError("reduce_scatter: indivisible")
    return app("slice", app("sum", *inputs), dim=d, start=part * i, end=part * (i + 1))


def _n_inputs(n, attrs):
    return n


def _builtin() -> None:
    R = "rearrange"
    reg = register_op
    reg(OpSpec("identity", 1, _unary, lambda xs, a: xs[0], category=R))
    reg(OpSpec("slice", 1, _slice, _ev_slice, {"dim": "int", "start": "dim", "end": "dim"},
               frozenset({"dim", "start", "end"}), category=R))
    reg(OpSpec("concat", None, _concat, lambda xs, a: np.concatenate(xs, axis=a["dim"]),
               {"dim": "int"}, frozenset({"dim"}), category=R))
    reg(OpSpec("transpose", 1, _transpose, lambda xs, a: np.transpose(xs[0], a["perm"]),
               {"perm": "ints"}, frozenset({"perm"}), category=R))
    reg(OpSpec("reshape", 1, _reshape, lambda xs, a: np.reshape(xs[0], a["shape"]),
               {"shape": "dims"}, frozenset({"shape"}), category=R))
    reg(OpSpec("sum", None, _sum, lambda xs, a: sum(xs[1:], xs[0].copy()), category="reduce"))
    reg(OpSpec("reduce_sum", 1, _reduce_sum,
               lambda xs, a: np.sum(xs[0], axis=a["dim"], keepdims=bool(a.get("keepdim", 0))),
               {"dim": "int", "keepdim": "int"}, frozenset({"dim"}), {"keepdim": 0},
               category="reduce"))
    reg(OpSpec("all_gather", None, _gather_shape, None, {"dim": "int"}, frozenset({"dim"}),
               num_outputs=_n_inputs, expand=_exp_gather))
    reg(OpSpec("all_reduce", None, _reduce_shape, None, num_outputs=_n_inputs, expand=_exp_reduce))
    reg(OpSpec("reduce_scatter", None, _reduce_scatter_shape, None, {"dim": "int"},
               frozenset({"dim"}), num_outputs=_n_inputs, expand=_exp_reduce_scatter))
    reg(OpSpec("matmul", 2, _matmul, lambda xs, a: np.matmul(xs[0], xs[1])))
    for name, fn in (("add", np.add), ("sub", np.subtract), ("mul", np.multiply),
                     ("div", np.divide)):
        reg(OpSpec(name, 2, _elementwise, _binary(fn), {"scalar": "dim"}, scalar_operand=True))
    reg(OpSpec("neg", 1, _unary, lambda xs, a: -xs[0]))
    reg(OpSpec("relu", 1, _unary, lambda xs, a: np.maximum(xs[0], 0.0)))
    reg(OpSpec("gelu", 1, _unary, lambda xs, a: _gelu(xs[0])))
    reg(OpSpec("exp", 1, _unary, lambda xs, a: np.exp(xs[0])))
    reg(OpSpec("softmax", 1, _softmax, lambda xs, a: _softmax_np(xs[0], a["dim"]),
               {"dim": "int"}, frozenset({"dim"})))
    reg(OpSpec("rmsnorm", 2, _rmsnorm, lambda xs, a: _rms_np(xs[0], xs[1])))
    reg(OpSpec("layernorm", 3, _layernorm, lambda xs, a: _ln_np(*xs)))
    reg(OpSpec("pad", 1, _pad, _ev_pad, {"dim": "int", "before": "dim", "after": "dim"},
               frozenset({"dim", "before", "after"})))
    reg(OpSpec("embedding", 2, _embedding, _ev_embedding))
    reg(OpSpec("embedding_masked", 2, _embedding, _ev_embedding_masked, {"offset": "dim"},
               frozenset({"offset"})))
    reg(OpSpec("mse_loss", 2, _mse, lambda xs, a: np.asarray(np.mean((xs[0] - xs[1]) ** 2))))


_builtin()


# ---------------------------------------------------------------------------
# node <-> expression

def split_attrs(spec: OpSpec, attrs: Mapping) -> tuple[dict, object | None]:
    """Separate the scalar operand (if any) from structural attributes."""
    if spec.scalar_operand and "scalar" in attrs:
        rest = {k: v for k, v in attrs.items() if k != "scalar"}
        return rest, attrs["scalar"]
    return dict(attrs), None


def output_count(spec: OpSpec, n_inputs: int, attrs: Mapping) -> int:
    return spec.num_outputs(n_inputs, attrs) if spec.num_outputs else 1


def output_exprs(name: str, inputs: Sequence[Expr], attrs: Mapping,
                 in_shapes: Sequence[Shape]) -> list[Expr]:
    """Expressions defining each output of an operator applied to ``inputs``."""
    spec = get_op(name)
    attrs, sc = split_attrs(spec, attrs)
    if spec.expand is not None:
        return [spec.expand(inputs, attrs, in_shapes, i)
                for i in range(output_count(spec, len(inputs), attrs))]
    kids = list(inputs)
    if sc is not None:
        kids.append(ScalarRef(DimExpr.of(sc)))
    return [Apply(spec.name, tuple(kids), tuple(attrs.items()))]


def resolve_attrs(attrs: Mapping, env: Mapping[str, int]) -> dict:
    out = {}
    for k, v in attrs.items():
        if isinstance(v, DimExpr):
            out[k] = v.evaluate(env)
        elif isinstance(v, tuple):
            out[k] = tuple(x.evaluate(env) if isinstance(x, DimExpr) else x for x in v)
        else:
            out[k] = v
    return out


def expr_shape(e: Expr, ref_shapes: Mapping[str, Shape], cs: ConstraintStore) -> Shape:
    """Shape of ``e`` given the shapes of the tensors it references."""
    if isinstance(e, TensorRef):
        if e.name not in ref_shapes:
            raise ShapeError(f"unknown tensor {e.name!r}")
        return tuple(ref_shapes[e.name])
    if isinstance(e, ScalarRef):
        return ()
    assert isinstance(e, Apply)
    spec = get_op(e.op)
    if spec.expand is not None:
        raise ShapeError(f"collective {e.op!r} cannot appear inside an expression")
    res = spec.shape([expr_shape(c, ref_shapes, cs) for c in e.children], e.attr_map, cs)
    return tuple(res)
