"""Paired sequential/distributed fixtures over toy models.

Every generator returns ``(gs, gd, ri, expected)``. Distributed tensors carry
a ``_r{rank}`` suffix; gradient accumulation uses ``_m{step}`` instead since
all micro-batches run on one device.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from ..expr import Expr, Relation, app, ref
from ..graph import ComputationGraph, dumps as dump_graph, parse_graph
from .builder import GraphBuilder
from .custom import register_custom

FAMILIES = ("mlp", "attention_rope", "moe", "regression_mse")
KINDS = ("tp", "sp", "ep", "grad_accum")
BUGS = ("rope_offset", "auxloss_scale", "pad_slice_mismatch", "shard_vs_replicate",
        "missing_ln_aggregate", "grad_accum_scale")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    layers: int = 1
    hidden: int = 8
    heads: int = 4
    experts: int = 4
    seq: int = 8  # tokens (sequence length or batch rows)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise SpecError(f"unknown model family {self.family!r}")
        for k in ("layers", "hidden", "heads", "experts", "seq"):
            if getattr(self, k) < 1:
                raise SpecError(f"{k} must be >= 1")


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    degree: int = 2

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"unknown strategy {self.kind!r}")
        if self.degree < 2:
            raise SpecError("degree must be >= 2")


@dataclass(frozen=True)
class BugSpec:
    id: str
    expected_failure_node: str | None = None  # filled in by the generator when omitted

    def __post_init__(self) -> None:
        if self.id not in BUGS:
            raise SpecError(f"unknown bug {self.id!r}")


@dataclass(frozen=True)
class Expectation:
    verdict: str
    exit_code: int
    failure_node: str | None = None
    ro: Relation | None = None
    bug: str | None = None
    description: str = ""

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "exit_code": self.exit_code,
                "failure_node": self.failure_node,
                "ro": self.ro.to_json() if self.ro is not None else None,
                "bug": self.bug, "description": self.description}

    @staticmethod
    def from_json(doc: dict) -> "Expectation":
        ro = doc.get("ro")
        return Expectation(doc["verdict"], int(doc["exit_code"]), doc.get("failure_node"),
                           Relation.from_json(ro) if ro is not None else None, doc.get("bug"),
                           doc.get("description", ""))


Fixture = tuple[ComputationGraph, ComputationGraph, Relation, Expectation]


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise SpecError(msg)


def _cat(names, dim: int) -> Expr:
    return app("concat", *[ref(n) for n in names], dim=dim)


class _Pair:
    """Builders for both graphs plus the input relation under construction."""

    def __init__(self, degree: int, tag: str = "r"):
        self.s = GraphBuilder()
        self.d = GraphBuilder()
        self.n = degree
        self.tag = tag
        self.ri: list[tuple[str, Expr]] = []

    def rk(self, name: str, r: int) -> str:
        return f"{name}_{self.tag}{r}"

    def replicated(self, name: str, shape) -> list[str]:
        self.s.input(name, shape)
        outs = [self.d.input(self.rk(name, r), shape) for r in range(self.n)]
        self.ri += [(name, ref(o)) for o in outs]
        return outs

    def sharded(self, name: str, shape, dim: int) -> list[str]:
        self.s.input(name, shape)
        part = list(shape)
        part[dim] = shape[dim] // self.n
        outs = [self.d.input(self.rk(name, r), part) for r in range(self.n)]
        self.ri.append((name, _cat(outs, dim)))
        return outs

    def relation(self) -> Relation:
        return Relation(tuple(self.ri))


def _expect(ro: list[tuple[str, Expr]], desc: str) -> Expectation:
    return Expectation("Refines", 0, None, Relation(tuple(ro)), None, desc)


# ---------------------------------------------------------------------------
# MLP

def _mlp_gs(p: _Pair, m: ModelSpec) -> str:
    x = "X"
    for l in range(m.layers):
        h = p.s.op("matmul", x, f"W1_l{l}", out=f"h_l{l}", node=f"mm1_l{l}")
        a = p.s.op("gelu", h, out=f"a_l{l}", node=f"act_l{l}")
        x = p.s.op("matmul", a, f"W2_l{l}", out=("Y" if l == m.layers - 1 else f"y_l{l}"),
                   node=f"mm2_l{l}")
    p.s.output(x)
    return x


def _mlp_tp(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    n, H, F, B = st.degree, m.hidden, 2 * m.hidden, m.seq
    _need(F % n == 0, f"ffn width {F} not divisible by degree {n}")
    _need(B % n == 0, f"{B} tokens not divisible by degree {n}")
    p = _Pair(n)
    xs = p.replicated("X", [B, H])
    for l in range(m.layers):
        w1 = p.sharded(f"W1_l{l}", [H, F], 1)
        w2 = p.sharded(f"W2_l{l}", [F, H], 0)
        if l > 0:
            xs = p.d.op("all_gather", *xs, dim=0, out=[f"x_l{l}_r{r}" for r in range(n)],
                        node=f"allgather_l{l}")
        parts = []
        for r in range(n):
            h = p.d.op("matmul", xs[r], w1[r], out=f"h_l{l}_r{r}")
            a = p.d.op("gelu", h, out=f"a_l{l}_r{r}")
            parts.append(p.d.op("matmul", a, w2[r], out=f"part_l{l}_r{r}"))
        last = l == m.layers - 1
        xs = p.d.op("reduce_scatter", *parts, dim=0,
                    out=[(f"Y_r{r}" if last else f"y_l{l}_r{r}") for r in range(n)],
                    node=f"reducescatter_l{l}")
    p.d.output(*xs)
    _mlp_gs(p, m)
    return (p.s.build(), p.d.build(), p.relation(),
            _expect([("Y", _cat(xs, 0))], "tensor-parallel MLP: column then row sharded weights, "
                     "reduce-scatter / all-gather between layers"))


def _mlp_sp(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    n, H, F, B = st.degree, m.hidden, 2 * m.hidden, m.seq
    if B % n:
        return _mlp_sp_pad(m, st, bug)
    _need(bug is None or bug.id != "pad_slice_mismatch",
          "pad_slice_mismatch needs a token count not divisible by the degree")
    p = _Pair(n)
    xs = p.sharded("X", [B, H], 0)
    fail = None
    for l in range(m.layers):
        if bug is not None and l == 0:
            # weights must be replicated under sequence parallelism; shard them instead
            w1 = p.sharded(f"W1_l{l}", [H, F], 1)
            w2 = p.sharded(f"W2_l{l}", [F, H], 0)
            fail = "mm1_l0"
        else:
            w1 = p.replicated(f"W1_l{l}", [H, F])
            w2 = p.replicated(f"W2_l{l}", [F, H])
        last = l == m.layers - 1
        nxt = []
        for r in range(n):
            h = p.d.op("matmul", xs[r], w1[r], out=f"h_l{l}_r{r}")
            a = p.d.op("gelu", h, out=f"a_l{l}_r{r}")
            nxt.append(p.d.op("matmul", a, w2[r], out=(f"Y_r{r}" if last else f"y_l{l}_r{r}")))
        xs = nxt
    p.d.output(*xs)
    _mlp_gs(p, m)
    exp = _expect([("Y", _cat(xs, 0))], "sequence-parallel MLP: tokens sharded, weights replicated")
    if bug is not None:
        exp = Expectation("RefinementError", 2, fail, None, bug.id,
                          "first-layer weights sharded where replication is required")
    return p.s.build(), p.d.build(), p.relation(), exp


def _mlp_sp_pad(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    n, H, F, B = st.degree, m.hidden, 2 * m.hidden, m.seq
    _need(bug is None or bug.id == "pad_slice_mismatch", f"bug {bug and bug.id} needs divisible tokens")
    c = -(-B // n)
    pad = c * n - B
    p = _Pair(n)
    xs = p.replicated("X", [B, H])
    for l in range(m.layers):
        w1 = p.replicated(f"W1_l{l}", [H, F])
        w2 = p.replicated(f"W2_l{l}", [F, H])
        hs = []
        for r in range(n):
            xp = p.d.op("pad", xs[r], dim=0, before=0, after=pad, out=f"xpad_l{l}_r{r}")
            xl = p.d.op("slice", xp, dim=0, start=r * c, end=(r + 1) * c, out=f"xloc_l{l}_r{r}")
            hs.append(p.d.op("matmul", xl, w1[r], out=f"h_l{l}_r{r}"))
        full = p.d.op("all_gather", *hs, dim=0, out=[f"hg_l{l}_r{r}" for r in range(n)],
                      node=f"allgather_l{l}")
        start = pad if (bug is not None and l == 0) else 0
        last = l == m.layers - 1
        nxt = []
        for r in range(n):
            hu = p.d.op("slice", full[r], dim=0, start=start, end=start + B, out=f"hu_l{l}_r{r}")
            a = p.d.op("gelu", hu, out=f"a_l{l}_r{r}")
            nxt.append(p.d.op("matmul", a, w2[r], out=(f"Y_r{r}" if last else f"y_l{l}_r{r}")))
        xs = nxt
    p.d.output(*xs)
    _mlp_gs(p, m)
    exp = _expect([("Y", ref(xs[0]))], "padded all-gather of an uneven token split, then unpad")
    if bug is not None:
        exp = Expectation("RefinementError", 2, "mm1_l0", None, bug.id,
                          "unpad slice skips the padding offset the wrong way")
    return p.s.build(), p.d.build(), p.relation(), exp


# ---------------------------------------------------------------------------
# attention with rotary embeddings

def _heads(m: ModelSpec) -> tuple[int, int]:
    _need(m.hidden % m.heads == 0, "hidden must be divisible by heads")
    hd = m.hidden // m.heads
    _need(hd % 2 == 0, "head dim must be even for rotary embeddings")
    return m.heads, hd


def _attn_gs(p: _Pair, m: ModelSpec) -> str:
    S, H = m.seq, m.hidden
    nh, hd = _heads(m)
    s = p.s
    x = "X"
    for l in range(m.layers):
        hs = {}
        for w in "qkv":
            t = s.op("matmul", x, f"W{w}_l{l}", out=f"{w}_l{l}", node=f"proj_{w}_l{l}")
            t = s.op("reshape", t, shape=[S, nh, hd], out=f"{w}s_l{l}", node=f"split_{w}_l{l}")
            t = s.op("transpose", t, perm=[1, 0, 2], out=f"{w}h_l{l}", node=f"heads_{w}_l{l}")
            if w != "v":
                t = s.op("rope", t, "cos", "sin", out=f"{w}r_l{l}", node=f"rope_{w}_l{l}")
            hs[w] = t
        kt = s.op("transpose", hs["k"], perm=[0, 2, 1], out=f"kt_l{l}", node=f"kt_l{l}")
        sc = s.op("matmul", hs["q"], kt, out=f"scores_l{l}", node=f"scores_l{l}")
        pr = s.op("softmax", sc, dim=2, out=f"probs_l{l}", node=f"softmax_l{l}")
        o = s.op("matmul", pr, hs["v"], out=f"ctx_l{l}", node=f"ctx_l{l}")
        o = s.op("transpose", o, perm=[1, 0, 2], out=f"ctxt_l{l}", node=f"merge_t_l{l}")
        o = s.op("reshape", o, shape=[S, H], out=f"ctxm_l{l}", node=f"merge_l{l}")
        x = s.op("matmul", o, f"Wo_l{l}", out=("Y" if l == m.layers - 1 else f"y_l{l}"),
                 node=f"proj_o_l{l}")
    s.output(x)
    return x


def _attn_tp(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    n, S, H = st.degree, m.seq, m.hidden
    nh, hd = _heads(m)
    _need(nh % n == 0, f"{nh} heads not divisible by degree {n}")
    p = _Pair(n)
    d = p.d
    xs = p.replicated("X", [S, H])
    cos = p.replicated("cos", [S, hd])
    sin = p.replicated("sin", [S, hd])
    _need(S % n == 0, f"sequence {S} not divisible by degree {n}")
    hl, Hl = nh // n, H // n
    for l in range(m.layers):
        ws = {w: p.sharded(f"W{w}_l{l}", [H, H], 1) for w in "qkv"}
        wo = p.sharded(f"Wo_l{l}", [H, H], 0)
        if l > 0:
            xs = d.op("all_gather", *xs, dim=0, out=[f"x_l{l}_r{r}" for r in range(n)],
                      node=f"allgather_l{l}")
        parts = []
        for r in range(n):
            hs = {}
            for w in "qkv":
                t = d.op("matmul", xs[r], ws[w][r], out=f"{w}_l{l}_r{r}")
                t = d.op("reshape", t, shape=[S, hl, hd], out=f"{w}s_l{l}_r{r}")
                t = d.op("transpose", t, perm=[1, 0, 2], out=f"{w}h_l{l}_r{r}")
                if w != "v":
                    t = d.op("rope", t, cos[r], sin[r], out=f"{w}r_l{l}_r{r}")
                hs[w] = t
            kt = d.op("transpose", hs["k"], perm=[0, 2, 1], out=f"kt_l{l}_r{r}")
            sc = d.op("matmul", hs["q"], kt, out=f"scores_l{l}_r{r}")
            pr = d.op("softmax", sc, dim=2, out=f"probs_l{l}_r{r}")
            o = d.op("matmul", pr, hs["v"], out=f"ctx_l{l}_r{r}")
            o = d.op("transpose", o, perm=[1, 0, 2], out=f"ctxt_l{l}_r{r}")
            o = d.op("reshape", o, shape=[S, Hl], out=f"ctxm_l{l}_r{r}")
            parts.append(d.op("matmul", o, wo[r], out=f"part_l{l}_r{r}"))
        last = l == m.layers - 1
        xs = d.op("reduce_scatter", *parts, dim=0,
                  out=[(f"Y_r{r}" if last else f"y_l{l}_r{r}") for r in range(n)],
                  node=f"reducescatter_l{l}")
    d.output(*xs)
    _attn_gs(p, m)
    return (p.s.build(), p.d.build(), p.relation(),
            _expect([("Y", _cat(xs, 0))], "head-parallel rotary attention, reduce-scatter / "
                     "all-gather between layers"))


def _attn_sp(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    n, S, H = st.degree, m.seq, m.hidden
    nh, hd = _heads(m)
    _need(S % n == 0, f"sequence {S} not divisible by degree {n}")
    c = S // n
    p = _Pair(n)
    d = p.d
    xs = p.sharded("X", [S, H], 0)
    cos = p.replicated("cos", [S, hd])
    sin = p.replicated("sin", [S, hd])

    def tables(r: int, off: int, tag: str) -> tuple[str, str]:
        kw = dict(dim=0, start=off, end=off + c)
        return (d.op("slice", cos[r], out=f"cos_{tag}_r{r}", **kw),
                d.op("slice", sin[r], out=f"sin_{tag}_r{r}", **kw))

    local = [tables(r, r * c, "fwd") for r in range(n)]
    for l in range(m.layers):
        ws = {w: p.replicated(f"W{w}_l{l}", [H, H]) for w in "qkvo"}
        proj = {w: [d.op("matmul", xs[r], ws[w][r], out=f"{w}_l{l}_r{r}") for r in range(n)] for w in "qkv"}
        kfull = d.op("all_gather", *proj["k"], dim=0, out=[f"kg_l{l}_r{r}" for r in range(n)],
                     node=f"gather_k_l{l}")
        vfull = d.op("all_gather", *proj["v"], dim=0, out=[f"vg_l{l}_r{r}" for r in range(n)],
                     node=f"gather_v_l{l}")
        last = l == m.layers - 1
        nxt = []
        for r in range(n):
            q = d.op("reshape", proj["q"][r], shape=[c, nh, hd], out=f"qs_l{l}_r{r}")
            q = d.op("transpose", q, perm=[1, 0, 2], out=f"qh_l{l}_r{r}")
            q = d.op("rope", q, *local[r], out=f"qr_l{l}_r{r}")
            k = d.op("reshape", kfull[r], shape=[S, nh, hd], out=f"ks_l{l}_r{r}")
            k = d.op("transpose", k, perm=[1, 0, 2], out=f"kh_l{l}_r{r}")
            k = d.op("rope", k, cos[r], sin[r], out=f"kr_l{l}_r{r}")
            v = d.op("reshape", vfull[r], shape=[S, nh, hd], out=f"vs_l{l}_r{r}")
            v = d.op("transpose", v, perm=[1, 0, 2], out=f"vh_l{l}_r{r}")
            kt = d.op("transpose", k, perm=[0, 2, 1], out=f"kt_l{l}_r{r}")
            sc = d.op("matmul", q, kt, out=f"scores_l{l}_r{r}")
            pr = d.op("softmax", sc, dim=2, out=f"probs_l{l}_r{r}")
            o = d.op("matmul", pr, v, out=f"ctx_l{l}_r{r}")
            o = d.op("transpose", o, perm=[1, 0, 2], out=f"ctxt_l{l}_r{r}")
            o = d.op("reshape", o, shape=[c, H], out=f"ctxm_l{l}_r{r}")
            nxt.append(d.op("matmul", o, ws["o"][r], out=(f"Y_r{r}" if last else f"y_l{l}_r{r}")))
        xs = nxt
    d.output(*xs)
    _attn_gs(p, m)

    # rotary backward on this rank's sequence shard
    gq = p.sharded("gq", [nh, S, hd], 1)
    offset_bug = bug is not None and bug.id == "rope_offset"
    dq = []
    for r in range(n):
        tabs = tables(r, 0 if offset_bug else r * c, "bwd")
        dq.append(d.op("rope_bwd", gq[r], *tabs, out=f"dq_r{r}"))
    p.s.op("rope_bwd", "gq", "cos", "sin", out="dq", node="rope_bwd")
    d.output(*dq)

    # layer-norm weight gradient: token-local partial sums, then all-reduce
    hn = p.sharded("ln_in", [S, H], 0)
    gy = p.sharded("ln_gy", [S, H], 0)
    partial_names = [f"ln_w_grad_r{r}" if bug is not None and bug.id == "missing_ln_aggregate"
                     else f"ln_w_partial_r{r}" for r in range(n)]
    partials = []
    for r in range(n):
        prod = d.op("mul", gy[r], hn[r], out=f"ln_prod_r{r}")
        partials.append(d.op("reduce_sum", prod, dim=0, out=partial_names[r]))
    if bug is not None and bug.id == "missing_ln_aggregate":
        grads = partials
    else:
        grads = d.op("all_reduce", *partials, out=[f"ln_w_grad_r{r}" for r in range(n)],
                     node="allreduce_ln_w")
    d.output(*grads)
    t = p.s.op("mul", "ln_gy", "ln_in", out="ln_prod", node="ln_prod")
    p.s.op("reduce_sum", t, dim=0, out="ln_w_grad", node="ln_w_grad")
    p.s.output("dq", "ln_w_grad")

    ro = [("Y", _cat(xs, 0)), ("dq", _cat(dq, 1)), ("ln_w_grad", ref("ln_w_grad_r0"))]
    exp = _expect(ro, "sequence-parallel attention with rotary tables sliced per shard")
    if offset_bug:
        exp = Expectation("RefinementError", 2, "rope_bwd", None, bug.id,
                          "backward rotary tables use offset 0 on every rank")
    elif bug is not None:
        exp = Expectation("Refines", 3, None, exp.ro, bug.id,
                          "layer-norm weight gradients never all-reduced; verdict holds but "
                          "the output relation differs from the expected one")
    return p.s.build(), p.d.build(), p.relation(), exp


# ---------------------------------------------------------------------------
# mixture of experts

def _moe_ep(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    n, N, H, E = st.degree, m.seq, m.hidden, m.experts
    _need(E % n == 0, f"{E} experts not divisible by degree {n}")
    per = E // n
    p = _Pair(n)
    s, d = p.s, p.d
    xs = p.replicated("X", [N, H])
    x = "X"
    for l in range(m.layers):
        outs = []
        contrib = []
        for e in range(E):
            r = e // per
            s.input(f"W1_l{l}_e{e}", [H, H])
            s.input(f"W2_l{l}_e{e}", [H, H])
            s.input(f"M_l{l}_e{e}", [N, H])
            for nm in ("W1", "W2", "M"):
                shape = [N, H] if nm == "M" else [H, H]
                dn = d.input(f"{nm}_l{l}_e{e}_r{r}", shape)
                p.ri.append((f"{nm}_l{l}_e{e}", ref(dn)))
            h = s.op("matmul", x, f"W1_l{l}_e{e}", out=f"h_l{l}_e{e}", node=f"up_l{l}_e{e}")
            a = s.op("relu", h, out=f"a_l{l}_e{e}", node=f"act_l{l}_e{e}")
            o = s.op("matmul", a, f"W2_l{l}_e{e}", out=f"o_l{l}_e{e}", node=f"down_l{l}_e{e}")
            outs.append(s.op("mul", o, f"M_l{l}_e{e}", out=f"m_l{l}_e{e}", node=f"gate_l{l}_e{e}"))
            hd = d.op("matmul", xs[r], f"W1_l{l}_e{e}_r{r}", out=f"h_l{l}_e{e}_r{r}")
            ad = d.op("relu", hd, out=f"a_l{l}_e{e}_r{r}")
            od = d.op("matmul", ad, f"W2_l{l}_e{e}_r{r}", out=f"o_l{l}_e{e}_r{r}")
            contrib.append(d.op("mul", od, f"M_l{l}_e{e}_r{r}", out=f"m_l{l}_e{e}_r{r}"))
        last = l == m.layers - 1
        acc = outs[0]
        for e in range(1, E):
            name = ("Y" if last else f"y_l{l}") if e == E - 1 else f"acc_l{l}_e{e}"
            acc = s.op("add", acc, outs[e], out=name, node=f"combine_l{l}_e{e}")
        x = acc if E > 1 else s.op("identity", acc, out=("Y" if last else f"y_l{l}"),
                                   node=f"combine_l{l}")
        local = []
        for r in range(n):
            t = contrib[r * per]
            for j in range(1, per):
                t = d.op("add", t, contrib[r * per + j], out=f"local_l{l}_r{r}_{j}")
            local.append(t)
        xs = d.op("all_reduce", *local, out=[(f"Y_r{r}" if last else f"y_l{l}_r{r}") for r in range(n)],
                  node=f"combine_l{l}")
    s.output(x)
    d.output(*xs)
    return (s.build(), d.build(), p.relation(),
            _expect([("Y", ref("Y_r0"))], "expert parallel, static top-1 routing by fixed gate masks"))


def _moe_tp(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    n, N, H, E = st.degree, m.seq, m.hidden, m.experts
    F = 2 * H
    _need(N % n == 0 and F % n == 0, "tokens and ffn width must be divisible by the degree")
    p = _Pair(n)
    s, d = p.s, p.d
    xs = p.sharded("X", [N, H], 0)
    wg = p.replicated("Wg", [H, E])
    # router and auxiliary loss, computed on the local token shard
    lg = s.op("matmul", "X", "Wg", out="logits", node="router")
    pr = s.op("softmax", lg, dim=1, out="probs", node="router_softmax")
    s.op("aux_loss", pr, out="aux", node="aux_loss")
    scaled = []
    for r in range(n):
        t = d.op("matmul", xs[r], wg[r], out=f"logits_r{r}")
        t = d.op("softmax", t, dim=1, out=f"probs_r{r}")
        t = d.op("aux_loss", t, out=f"aux_local_r{r}")
        if bug is None:
            t = d.op("div", t, scalar=n, out=f"aux_scaled_r{r}")
        scaled.append(t)
    aux = d.op("all_reduce", *scaled, out=[f"aux_r{r}" for r in range(n)], node="allreduce_aux")
    # tensor-parallel expert FFN over the gathered tokens
    full = d.op("all_gather", *xs, dim=0, out=[f"xg_r{r}" for r in range(n)], node="gather_x")
    x = "X"
    for l in range(m.layers):
        w1 = p.sharded(f"W1_l{l}", [H, F], 1)
        w2 = p.sharded(f"W2_l{l}", [F, H], 0)
        h = s.op("matmul", x, f"W1_l{l}", out=f"h_l{l}", node=f"up_l{l}")
        a = s.op("relu", h, out=f"a_l{l}", node=f"act_l{l}")
        last = l == m.layers - 1
        x = s.op("matmul", a, f"W2_l{l}", out=("Y" if last else f"y_l{l}"), node=f"down_l{l}")
        parts = []
        for r in range(n):
            hd = d.op("matmul", full[r], w1[r], out=f"h_l{l}_r{r}")
            ad = d.op("relu", hd, out=f"a_l{l}_r{r}")
            parts.append(d.op("matmul", ad, w2[r], out=f"part_l{l}_r{r}"))
        full = d.op("all_reduce", *parts, out=[(f"Y_r{r}" if last else f"y_l{l}_r{r}") for r in range(n)],
                    node=f"allreduce_l{l}")
    s.output("aux", x)
    d.output(*aux, *full)
    exp = _expect([("aux", ref("aux_r0")), ("Y", ref("Y_r0"))],
                  "router auxiliary loss averaged over the token shards, TP expert FFN")
    if bug is not None:
        exp = Expectation("RefinementError", 2, "aux_loss", None, bug.id,
                          "auxiliary loss summed across ranks without dividing by the degree")
    return s.build(), d.build(), p.relation(), exp


# ---------------------------------------------------------------------------
# regression with gradient accumulation

def _regression(m: ModelSpec, st: StrategySpec, bug: BugSpec | None) -> Fixture:
    k, B, H = st.degree, m.seq, m.hidden
    _need(B % k == 0, f"batch {B} not divisible into {k} micro-batches")
    p = _Pair(k, tag="m")
    s, d = p.s, p.d
    xs = p.sharded("X", [B, H], 0)
    ts = p.sharded("T", [B, 1], 0)
    ws = []
    for l in range(m.layers):
        shape = [H, 1] if l == m.layers - 1 else [H, H]
        s.input(f"W_l{l}", shape)
        ws.append(d.input(f"W_l{l}", shape))
        p.ri.append((f"W_l{l}", ref(f"W_l{l}")))
    x = "X"
    for l in range(m.layers):
        x = s.op("matmul", x, f"W_l{l}", out=f"z_l{l}", node=f"linear_l{l}")
        if l < m.layers - 1:
            x = s.op("relu", x, out=f"a_l{l}", node=f"act_l{l}")
    s.op("mse_loss", x, "T", out="loss", node="loss")
    s.output("loss")
    terms = []
    for i in range(k):
        h = xs[i]
        for l in range(m.layers):
            h = d.op("matmul", h, ws[l], out=f"z_l{l}_m{i}")
            if l < m.layers - 1:
                h = d.op("relu", h, out=f"a_l{l}_m{i}")
        li = d.op("mse_loss", h, ts[i], out=f"loss_m{i}")
        if bug is None:
            li = d.op("div", li, scalar=k, out=f"loss_scaled_m{i}")
        terms.append(li)
    d.op("sum", *terms, out="loss", node="accumulate")
    d.output("loss")
    exp = _expect([("loss", ref("loss"))], "gradient accumulation over micro-batches, loss scaled by 1/k")
    if bug is not None:
        exp = Expectation("RefinementError", 2, "loss", None, bug.id,
                          "micro-batch losses accumulated without scaling by the step count")
    return s.build(), d.build(), p.relation(), exp


# ---------------------------------------------------------------------------
# running example

def running_example() -> Fixture:
    """Matmul followed by subtraction; the distributed side reduce-scatters partial products."""
    s, d = GraphBuilder(), GraphBuilder()
    s.input("A", [4, 6])
    s.input("B", [6, 4])
    s.input("E", [4, 4])
    s.op("matmul", "A", "B", out="C", node="matmul")
    s.op("sub", "C", "E", out="F", node="sub")
    s.output("F")
    for nm, shp in (("A1", [4, 3]), ("A2", [4, 3]), ("B1", [3, 4]), ("B2", [3, 4]),
                    ("E1", [2, 4]), ("E2", [2, 4])):
        d.input(nm, shp)
    d.op("matmul", "A1", "B1", out="C1", node="matmul1")
    d.op("matmul", "A2", "B2", out="C2", node="matmul2")
    d.op("reduce_scatter", "C1", "C2", dim=0, out=["D1", "D2"], node="reduce_scatter")
    d.op("sub", "D1", "E1", out="F1", node="sub1")
    d.op("sub", "D2", "E2", out="F2", node="sub2")
    d.output("F1", "F2")
    ri = Relation((("A", _cat(["A1", "A2"], 1)), ("B", _cat(["B1", "B2"], 0)),
                   ("E", _cat(["E1", "E2"], 0))))
    return s.build(), d.build(), ri, _expect([("F", _cat(["F1", "F2"], 0))],
                                             "running example: matmul, reduce-scatter, sub")


# ---------------------------------------------------------------------------
# dispatch and catalog

_GENERATORS: dict[tuple[str, str], Callable] = {
    ("mlp", "tp"): _mlp_tp,
    ("mlp", "sp"): _mlp_sp,
    ("attention_rope", "tp"): _attn_tp,
    ("attention_rope", "sp"): _attn_sp,
    ("moe", "ep"): _moe_ep,
    ("moe", "tp"): _moe_tp,
    ("regression_mse", "grad_accum"): _regression,
}

_BUG_HOSTS = {
    "rope_offset": ("attention_rope", "sp"),
    "auxloss_scale": ("moe", "tp"),
    "pad_slice_mismatch": ("mlp", "sp"),
    "shard_vs_replicate": ("mlp", "sp"),
    "missing_ln_aggregate": ("attention_rope", "sp"),
    "grad_accum_scale": ("regression_mse", "grad_accum"),
}


def generate(model: ModelSpec, strat: StrategySpec, bug: BugSpec | None = None) -> Fixture:
    """Build a fixture; raises SpecError for unsupported or inconsistent requests."""
    register_custom()
    key = (model.family, strat.kind)
    gen = _GENERATORS.get(key)
    _need(gen is not None, f"no generator for {model.family} with {strat.kind}")
    if bug is not None:
        _need(_BUG_HOSTS[bug.id] == key,
              f"bug {bug.id} applies to {'/'.join(_BUG_HOSTS[bug.id])}, not {'/'.join(key)}")
    gs, gd, ri, exp = gen(model, strat, bug)
    if bug is not None and bug.expected_failure_node is not None:
        _need(bug.expected_failure_node == exp.failure_node,
              f"bug {bug.id} fails at {exp.failure_node}, not {bug.expected_failure_node}")
    return gs, gd, ri, exp


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    model: ModelSpec | None
    strategy: StrategySpec | None
    bug: BugSpec | None
    description: str
    bug_number: int | None = None

    def build(self) -> Fixture:
        if self.model is None:
            register_custom()
            return running_example()
        return generate(self.model, self.strategy, self.bug)

    def to_json(self) -> dict:
        return {"name": self.name, "model": asdict(self.model) if self.model else None,
                "strategy": asdict(self.strategy) if self.strategy else None,
                "bug": self.bug.id if self.bug else None, "bug_number": self.bug_number,
                "description": self.description}


def _e(name, fam, kind, deg=2, bug=None, desc="", bug_number=None, **kw) -> CatalogEntry:
    return CatalogEntry(name, ModelSpec(fam, **kw), StrategySpec(kind, deg),
                        BugSpec(bug) if bug else None, desc, bug_number)


_CATALOG: tuple[CatalogEntry, ...] = (
    CatalogEntry("running_example", None, None, None, "matmul + sub with reduce-scatter (running example)"),
    _e("mlp_tp", "mlp", "tp", 2, desc="two-layer tensor-parallel MLP", layers=2),
    _e("mlp_sp", "mlp", "sp", 2, desc="sequence-parallel MLP", layers=2),
    _e("mlp_sp_pad", "mlp", "sp", 2, desc="sequence-parallel MLP with uneven split and padding", seq=7),
    _e("attention_tp", "attention_rope", "tp", 2, desc="head-parallel rotary attention"),
    _e("attention_sp", "attention_rope", "sp", 2, desc="sequence-parallel rotary attention + LN grads"),
    _e("moe_ep", "moe", "ep", 2, desc="expert-parallel MoE with fixed routing"),
    _e("moe_tp", "moe", "tp", 2, desc="MoE router aux loss + TP expert FFN"),
    _e("regression_grad_accum", "regression_mse", "grad_accum", 2,
       desc="MSE regression with gradient accumulation (single device)", layers=2),
    _e("bug1_rope_offset", "attention_rope", "sp", 2, "rope_offset",
       "rotary backward ignores the sequence offset", 1),
    _e("bug2_auxloss_scale", "moe", "tp", 2, "auxloss_scale",
       "aux loss not divided by the TP size", 2),
    _e("bug3_pad_slice_mismatch", "mlp", "sp", 2, "pad_slice_mismatch",
       "padded gather unpadded at the wrong offset", 3, seq=7),
    _e("bug4_shard_vs_replicate", "mlp", "sp", 2, "shard_vs_replicate",
       "weights sharded where replication is required", 4),
    _e("bug5_missing_ln_aggregate", "attention_rope", "sp", 2, "missing_ln_aggregate",
       "layer-norm weight gradients not all-reduced (expectation mismatch)", 5),
    _e("bug6_grad_accum_scale", "regression_mse", "grad_accum", 2, "grad_accum_scale",
       "accumulated loss not scaled by the step count", 6),
)


def list_fixtures() -> list[CatalogEntry]:
    return list(_CATALOG)


def get_fixture(name: str) -> CatalogEntry:
    for e in _CATALOG:
        if e.name == name:
            return e
    raise SpecError(f"unknown fixture {name!r}; see `refinery fixtures`")


# ---------------------------------------------------------------------------
# bundles on disk

def write_fixture(out_dir: str | Path, fx: Fixture) -> Path:
    gs, gd, ri, exp = fx
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gs.json").write_text(dump_graph(gs) + "\n")
    (out / "gd.json").write_text(dump_graph(gd) + "\n")
    (out / "ri.json").write_text(ri.dumps() + "\n")
    (out / "expected.json").write_text(json.dumps(exp.to_json(), indent=2) + "\n")
    return out


def read_fixture(path: str | Path) -> Fixture:
    register_custom()
    p = Path(path)
    gs = parse_graph((p / "gs.json").read_text())
    gd = parse_graph((p / "gd.json").read_text())
    ri = Relation.loads((p / "ri.json").read_text())
    exp_path = p / "expected.json"
    exp = Expectation.from_json(json.loads(exp_path.read_text())) if exp_path.exists() else None
    return gs, gd, ri, exp
