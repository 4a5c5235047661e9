"""Computation-graph data model, JSON (de)serialization, ordering, shapes.

Graph document layout::

    {
      "tensors": [{"id": "A", "shape": [4, "s0"], "dtype": "f32"}, ...],
      "nodes":   [{"id": "mm", "op": "core.matmul", "attrs": {},
                   "inputs": ["A", "B"], "outputs": ["C"]}, ...],
      "inputs":  ["A", "B"],
      "outputs": ["C"],
      "dim_constraints": ["s0 >= 1", "s0 == 2*s1"]
    }

A produced tensor may omit its shape (``null``); it is then inferred.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import jsonschema

from . import ops as _ops
from .dims import DimExpr, DimParseError
from .expr import coerce_attr
from .ops import Shape, ShapeError, get_op, has_op, op_name
from .symbolic import Constraint, ConstraintParseError, ConstraintStore

DTYPES = ("f32", "f64", "i64", "bool")
CONTROL_FLOW = frozenset({"cond", "while", "if", "loop", "switch", "while_loop", "scan"})


class GraphError(ValueError):
    pass


class SchemaError(GraphError):
    pass


class ValidationError(GraphError):
    pass


class CycleError(ValidationError):
    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        super().__init__(f"cycle through nodes {', '.join(self.cycle)}")


class NodeShapeError(ShapeError):
    def __init__(self, node_id: str, detail: str):
        self.node_id = node_id
        super().__init__(f"node {node_id}: {detail}")


GRAPH_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["tensors", "nodes", "inputs", "outputs"],
    "properties": {
        "tensors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "dtype"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "shape": {"type": ["array", "null"],
                              "items": {"type": ["integer", "string"]}},
                    "dtype": {"enum": list(DTYPES)},
                },
            },
        },
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "op", "inputs", "outputs"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "op": {"type": "string", "minLength": 1},
                    "attrs": {"type": "object"},
                    "inputs": {"type": "array", "items": {"type": "string"}},
                    "outputs": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                },
            },
        },
        "inputs": {"type": "array", "items": {"type": "string"}},
        "outputs": {"type": "array", "items": {"type": "string"}},
        "dim_constraints": {"type": "array", "items": {"type": "string"}},
    },
}


@dataclass(frozen=True)
class TensorDecl:
    id: str
    shape: Shape | None
    dtype: str = "f32"

    @property
    def rank(self) -> int:
        if self.shape is None:
            raise ValueError(f"tensor {self.id} has no declared shape")
        return len(self.shape)


@dataclass(frozen=True)
class OpNode:
    id: str
    op: str
    attrs: tuple[tuple[str, Any], ...] = ()
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()

    @property
    def name(self) -> str:
        return op_name(self.op)

    @property
    def attr_map(self) -> dict[str, Any]:
        return dict(self.attrs)


@dataclass(frozen=True, eq=False)
class ComputationGraph:
    tensors: Mapping[str, TensorDecl]
    nodes: tuple[OpNode, ...]
    graph_inputs: tuple[str, ...]
    graph_outputs: tuple[str, ...]
    dim_constraints: tuple[Constraint, ...] = ()
    _meta: dict = field(default_factory=dict, compare=False, repr=False)

    @cached_property
    def producer(self) -> dict[str, OpNode]:
        return {t: n for n in self.nodes for t in n.outputs}

    @cached_property
    def consumers(self) -> dict[str, list[OpNode]]:
        out: dict[str, list[OpNode]] = {t: [] for t in self.tensors}
        for n in self.nodes:
            for t in dict.fromkeys(n.inputs):
                out.setdefault(t, []).append(n)
        return out

    @cached_property
    def node_by_id(self) -> dict[str, OpNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def store(self) -> ConstraintStore:
        return ConstraintStore(self.dim_constraints)

    @cached_property
    def order(self) -> list[OpNode]:
        return check_acyclic_and_sort(self)

    @cached_property
    def position(self) -> dict[str, int]:
        """Topological index of every node id."""
        return {n.id: i for i, n in enumerate(self.order)}

    @cached_property
    def shapes(self) -> dict[str, Shape]:
        return infer_shapes(self)

    def to_json(self) -> dict:
        return serialize(self)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ComputationGraph) and serialize(self) == serialize(other)

    def __hash__(self) -> int:
        return hash(json.dumps(serialize(self), sort_keys=True))

    def __len__(self) -> int:
        return len(self.nodes)


# ---------------------------------------------------------------------------
# parsing

def _parse_shape(raw, tid: str) -> Shape | None:
    if raw is None:
        return None
    out = []
    for d in raw:
        try:
            v = DimExpr.of(d)
        except (DimParseError, TypeError) as exc:
            raise ValidationError(f"tensor {tid}: bad dimension {d!r}: {exc}") from exc
        if v.is_concrete and v.const < 0:
            raise ValidationError(f"tensor {tid}: negative dimension {d}")
        out.append(v)
    return tuple(out)


def _parse_attrs(node_id: str, kind: str, raw: Mapping) -> tuple[tuple[str, Any], ...]:
    spec = get_op(kind)
    unknown = set(raw) - set(spec.attrs)
    if unknown:
        raise ValidationError(f"node {node_id}: unknown attribute(s) {sorted(unknown)} for {kind}")
    missing = spec.required - set(raw)
    if missing:
        raise ValidationError(f"node {node_id}: missing attribute(s) {sorted(missing)} for {kind}")
    out = []
    for name, k in spec.attrs.items():
        if name not in raw:
            if name in spec.defaults:
                out.append((name, spec.defaults[name]))
            continue
        try:
            out.append((name, coerce_attr(k, raw[name])))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"node {node_id}: attribute {name!r}: {exc}") from exc
    return tuple(out)


def parse_graph(data: bytes | str | Mapping, validate: bool = True) -> ComputationGraph:
    """Parse and validate a serialized graph document."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    if isinstance(data, str):
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from exc
    else:
        doc = data
    try:
        jsonschema.validate(doc, GRAPH_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"malformed graph document: {exc.message}") from exc

    tensors: dict[str, TensorDecl] = {}
    for t in doc["tensors"]:
        if t["id"] in tensors:
            raise ValidationError(f"duplicate tensor id {t['id']!r}")
        tensors[t["id"]] = TensorDecl(t["id"], _parse_shape(t.get("shape"), t["id"]), t["dtype"])

    nodes = []
    for n in doc["nodes"]:
        kind = n["op"]
        short = op_name(kind)
        if short in CONTROL_FLOW:
            raise ValidationError(f"node {n['id']}: control flow operator {kind!r} is not supported")
        if not has_op(kind):
            raise ValidationError(f"node {n['id']}: unregistered operator {kind!r}")
        nodes.append(OpNode(n["id"], kind, _parse_attrs(n["id"], kind, n.get("attrs", {})),
                            tuple(n["inputs"]), tuple(n["outputs"])))
    try:
        cons = tuple(Constraint.parse(c) for c in doc.get("dim_constraints", []))
    except ConstraintParseError as exc:
        raise ValidationError(str(exc)) from exc
    g = ComputationGraph(tensors, tuple(nodes), tuple(doc["inputs"]), tuple(doc["outputs"]), cons)
    if validate:
        validate_graph(g)
    return g


def validate_graph(g: ComputationGraph) -> ComputationGraph:
    seen_nodes: set[str] = set()
    produced: dict[str, str] = {}
    for n in g.nodes:
        if n.id in seen_nodes:
            raise ValidationError(f"duplicate node id {n.id!r}")
        seen_nodes.add(n.id)
        spec = get_op(n.op)
        attrs = n.attr_map
        n_in = len(n.inputs)
        if spec.scalar_operand and "scalar" in attrs:
            n_in += 1
        if not spec.check_arity(n_in):
            raise ValidationError(f"node {n.id}: {n.op} takes {spec.arity} operand(s), got {n_in}")
        expected = _ops.output_count(spec, len(n.inputs), attrs)
        if len(n.outputs) != expected:
            raise ValidationError(f"node {n.id}: {n.op} yields {expected} output(s), got {len(n.outputs)}")
        for t in n.inputs + n.outputs:
            if t not in g.tensors:
                raise ValidationError(f"node {n.id} references undeclared tensor {t!r}")
        for t in n.outputs:
            if t in produced:
                raise ValidationError(f"tensor {t!r} produced by both {produced[t]} and {n.id}")
            produced[t] = n.id
    for t in g.graph_inputs:
        if t not in g.tensors:
            raise ValidationError(f"graph input {t!r} is not declared")
        if t in produced:
            raise ValidationError(f"graph input {t!r} is produced by node {produced[t]}")
        if g.tensors[t].shape is None:
            raise ValidationError(f"graph input {t!r} needs a declared shape")
    if len(set(g.graph_inputs)) != len(g.graph_inputs):
        raise ValidationError("duplicate graph input")
    for t in g.graph_outputs:
        if t not in g.tensors:
            raise ValidationError(f"graph output {t!r} is not declared")
    inputs = set(g.graph_inputs)
    for t in g.tensors:
        if t not in inputs and t not in produced:
            raise ValidationError(f"tensor {t!r} is neither a graph input nor produced by a node")
    check_acyclic_and_sort(g)
    infer_shapes(g)
    return g


def serialize(g: ComputationGraph) -> dict:
    def attr_json(v):
        if isinstance(v, DimExpr):
            return v.to_json()
        if isinstance(v, tuple):
            return [attr_json(x) for x in v]
        return v

    return {
        "tensors": [
            {"id": t.id, "shape": None if t.shape is None else [d.to_json() for d in t.shape],
             "dtype": t.dtype}
            for t in g.tensors.values()
        ],
        "nodes": [
            {"id": n.id, "op": n.op, "attrs": {k: attr_json(v) for k, v in n.attrs},
             "inputs": list(n.inputs), "outputs": list(n.outputs)}
            for n in g.nodes
        ],
        "inputs": list(g.graph_inputs),
        "outputs": list(g.graph_outputs),
        "dim_constraints": [str(c) for c in g.dim_constraints],
    }


def dumps(g: ComputationGraph) -> str:
    return json.dumps(serialize(g), indent=2)


# ---------------------------------------------------------------------------
# ordering and shapes

def check_acyclic_and_sort(g: ComputationGraph) -> list[OpNode]:
    """Topological order; ties broken by node declaration order."""
    index = {n.id: i for i, n in enumerate(g.nodes)}
    producer = {t: n for n in g.nodes for t in n.outputs}
    deps: dict[str, set[str]] = {}
    users: dict[str, list[str]] = {n.id: [] for n in g.nodes}
    for n in g.nodes:
        ds = {producer[t].id for t in n.inputs if t in producer}
        deps[n.id] = ds
        for d in ds:
            users[d].append(n.id)
    missing = {k: len(v) for k, v in deps.items()}
    heap = [index[k] for k, v in missing.items() if v == 0]
    heapq.heapify(heap)
    out: list[OpNode] = []
    while heap:
        n = g.nodes[heapq.heappop(heap)]
        out.append(n)
        for u in users[n.id]:
            missing[u] -= 1
            if missing[u] == 0:
                heapq.heappush(heap, index[u])
    if len(out) != len(g.nodes):
        remaining = {k for k, v in missing.items() if v > 0}
        raise CycleError(_find_cycle(remaining, deps, index))
    return out


def _find_cycle(remaining: set[str], deps: dict[str, set[str]], index: dict[str, int]) -> list[str]:
    start = min(remaining, key=index.__getitem__)
    path: list[str] = []
    pos: dict[str, int] = {}
    cur = start
    while cur not in pos:
        pos[cur] = len(path)
        path.append(cur)
        cur = min((d for d in deps[cur] if d in remaining), key=index.__getitem__)
    cyc = path[pos[cur]:]
    return list(reversed(cyc))


def infer_shapes(g: ComputationGraph) -> dict[str, Shape]:
    """Resolve every tensor's shape, checking declared shapes against op rules."""
    cs = ConstraintStore(g.dim_constraints)
    shapes: dict[str, Shape] = {t: g.tensors[t].shape for t in g.graph_inputs}
    for n in check_acyclic_and_sort(g):
        spec = get_op(n.op)
        attrs = n.attr_map
        in_shapes = [shapes[t] for t in n.inputs]
        if spec.scalar_operand and "scalar" in attrs:
            in_shapes.append(())
            attrs = {k: v for k, v in attrs.items() if k != "scalar"}
        try:
            res = spec.shape(in_shapes, attrs, cs)
        except ShapeError as exc:
            raise NodeShapeError(n.id, str(exc)) from exc
        outs = res if isinstance(res, list) else [res]
        for t, s in zip(n.outputs, outs):
            declared = g.tensors[t].shape
            if declared is not None:
                if len(declared) != len(s) or not all(_ops.same(a, b, cs) for a, b in zip(declared, s)):
                    raise NodeShapeError(
                        n.id, f"output {t} declared {[str(d) for d in declared]}, "
                              f"inferred {[str(d) for d in s]}")
                shapes[t] = declared
            else:
                shapes[t] = tuple(s)
    return shapes


def reachable_nodes(g: ComputationGraph, targets: Sequence[str]) -> set[str]:
    """Ids of nodes that contribute to any tensor in ``targets``."""
    out: set[str] = set()
    stack = [g.producer[t] for t in targets if t in g.producer]
    while stack:
        n = stack.pop()
        if n.id in out:
            continue
        out.add(n.id)
        stack.extend(g.producer[t] for t in n.inputs if t in g.producer)
    return out
