"""Small imperative builder for computation graphs."""

from __future__ import annotations

from typing import Sequence

from ..dims import DimExpr
from ..graph import ComputationGraph, parse_graph
from ..ops import get_op, output_count, split_attrs


def _json_attr(v):
    if isinstance(v, DimExpr):
        return v.to_json()
    if isinstance(v, (tuple, list)):
        return [_json_attr(x) for x in v]
    return v


class GraphBuilder:
    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self.tensors: dict[str, dict] = {}
        self.nodes: list[dict] = []
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.constraints: list[str] = []
        self._n = 0

    def _fresh(self, base: str) -> str:
        self._n += 1
        name = f"{self.prefix}{base}{self._n}"
        while name in self.tensors:
            self._n += 1
            name = f"{self.prefix}{base}{self._n}"
        return name

    def input(self, name: str, shape: Sequence, dtype: str = "f32") -> str:
        if name in self.tensors:
            raise ValueError(f"duplicate tensor {name!r}")
        self.tensors[name] = {"id": name, "shape": [_json_attr(d) for d in shape], "dtype": dtype}
        self.inputs.append(name)
        return name

    def op(self, op: str, *inputs: str, out: str | Sequence[str] | None = None,
           node: str | None = None, dtype: str = "f32", **attrs):
        spec = get_op(op)
        n_out = output_count(spec, len(inputs), split_attrs(spec, attrs)[0])
        if out is None:
            outs = [self._fresh(f"{op}_") for _ in range(n_out)]
        elif isinstance(out, str):
            outs = [out]
        else:
            outs = list(out)
        for t in outs:
            if t in self.tensors:
                raise ValueError(f"duplicate tensor {t!r}")
            self.tensors[t] = {"id": t, "shape": None, "dtype": dtype}
        self.nodes.append({"id": node or f"n_{outs[0]}", "op": op,
                           "attrs": {k: _json_attr(v) for k, v in attrs.items()},
                           "inputs": list(inputs), "outputs": outs})
        return outs[0] if n_out == 1 and (out is None or isinstance(out, str)) else outs

    def output(self, *names: str) -> None:
        self.outputs.extend(names)

    def constrain(self, *texts: str) -> None:
        self.constraints.extend(texts)

    def doc(self) -> dict:
        return {"tensors": list(self.tensors.values()), "nodes": self.nodes,
                "inputs": self.inputs, "outputs": self.outputs,
                "dim_constraints": self.constraints}

    def build(self) -> ComputationGraph:
        return parse_graph(self.doc())
