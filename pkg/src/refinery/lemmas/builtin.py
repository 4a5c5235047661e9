"""Builtin lemma library.

Each lemma is a small search function over one matched e-node plus a
sampler used for numeric self-validation. Conventions: ``c`` is the class of
the matched node ``n``, ``A(n)`` its attributes and ``n[2]`` its children.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..dims import DimExpr
from ..egraph import SCALAR, EGraph, ENode, T, Term
from ..expr import app, ref, scalar
from .base import Lemma, LemmaSample, Rule, lemma

UNARY = ("relu", "gelu", "exp", "neg", "identity")
BINARY = ("add", "sub", "mul", "div")
ZERO = DimExpr(0)


def A(n: ENode) -> dict:
    return dict(n[1])


def _concats(eg: EGraph, c: int, dim: int | None = None) -> Iterator[tuple[tuple[int, ...], int]]:
    for n in eg.nodes_op(c, "concat"):
        d = A(n)["dim"]
        if dim is None or d == dim:
            yield n[2], d


def _sizes(eg: EGraph, kids, d: int) -> list[DimExpr] | None:
    out = []
    for k in kids:
        s = eg.shape(k)
        if s is None or d >= len(s):
            return None
        out.append(s[d])
    return out


def _offsets(sizes: list[DimExpr]) -> list[DimExpr]:
    out, acc = [], ZERO
    for s in sizes:
        out.append(acc)
        acc = acc + s
    return out


def _same_sizes(eg: EGraph, a: list[DimExpr] | None, b: list[DimExpr] | None) -> bool:
    return (a is not None and b is not None and len(a) == len(b)
            and all(eg.dim_eq(x, y) for x, y in zip(a, b)))


def _scalar_of(eg: EGraph, c: int) -> DimExpr | None:
    for n in eg.nodes_op(c, SCALAR):
        return n[1]
    return None


def _rank(eg: EGraph, c: int) -> int | None:
    s = eg.shape(c)
    return None if s is None else len(s)


# -- samplers ---------------------------------------------------------------

def _shape(rng, rank: int, lo: int = 1, hi: int = 4) -> tuple[int, ...]:
    return tuple(int(x) for x in rng.integers(lo, hi + 1, size=rank))


def _parts(rng, n_lo: int = 2, n_hi: int = 3, lo: int = 1, hi: int = 3) -> list[int]:
    return [int(x) for x in rng.integers(lo, hi + 1, size=int(rng.integers(n_lo, n_hi + 1)))]


def _with(shape: tuple[int, ...], d: int, v: int) -> tuple[int, ...]:
    return shape[:d] + (v,) + shape[d + 1:]


def _concat_sample(rng, base: tuple[int, ...], d: int, prefix: str = "X", parts=None):
    parts = parts or _parts(rng)
    names = [f"{prefix}{i}" for i in range(len(parts))]
    shapes = {nm: _with(base, d, p) for nm, p in zip(names, parts)}
    return app("concat", *[ref(nm) for nm in names], dim=d), shapes, parts


# ---------------------------------------------------------------------------
# concat / slice algebra

def _slice_full(eg, c, n):
    a = A(n)
    x = n[2][0]
    shp = eg.shape(x)
    if shp is not None and eg.dim_eq(a["start"], ZERO) and eg.dim_eq(a["end"], shp[a["dim"]]):
        yield c, x


def _s_slice_full(rng):
    shp = _shape(rng, 2)
    d = int(rng.integers(0, 2))
    return LemmaSample(app("slice", ref("X"), dim=d, start=0, end=shp[d]), {"X": shp})


def _slice_slice(eg, c, n):
    a = A(n)
    for inner in eg.nodes_op(n[2][0], "slice"):
        b = A(inner)
        if b["dim"] == a["dim"]:
            yield c, T("slice", inner[2][0], dim=a["dim"], start=b["start"] + a["start"],
                       end=b["start"] + a["end"])


def _s_slice_slice(rng):
    L = int(rng.integers(4, 9))
    s0 = int(rng.integers(0, 2))
    e0 = int(rng.integers(L - 1, L + 1))
    s1 = int(rng.integers(0, 2))
    e1 = int(rng.integers(s1 + 1, e0 - s0 + 1))
    inner = app("slice", ref("X"), dim=0, start=s0, end=e0)
    return LemmaSample(app("slice", inner, dim=0, start=s1, end=e1), {"X": (L, 2)})


def _slice_merge(eg, c, n):
    d = A(n)["dim"]
    kids = n[2]
    if len(kids) < 2:
        return
    for first in eg.nodes_op(kids[0], "slice"):
        fa = A(first)
        if fa["dim"] != d:
            continue
        x = eg.find(first[2][0])
        end = fa["end"]
        for k in kids[1:]:
            nxt = None
            for s in eg.nodes_op(k, "slice"):
                sa = A(s)
                if sa["dim"] == d and eg.find(s[2][0]) == x and eg.dim_eq(sa["start"], end):
                    nxt = sa
                    break
            if nxt is None:
                break
            end = nxt["end"]
        else:
            yield c, T("slice", x, dim=d, start=fa["start"], end=end)


def _s_slice_merge(rng):
    parts = _parts(rng)
    L = sum(parts) + int(rng.integers(0, 2))
    offs = np.cumsum([0] + parts)
    kids = [app("slice", ref("X"), dim=0, start=int(offs[i]), end=int(offs[i + 1]))
            for i in range(len(parts))]
    return LemmaSample(app("concat", *kids, dim=0), {"X": (L, 3)})


def _chains(eg, x, d, start, stop, limit=4, max_len=16):
    """Chains of existing slices of ``x`` along ``d`` tiling ``[start, stop)``."""
    pieces = []
    for node, pc in eg.parents(x):
        if node[0] == "slice" and eg.find(node[2][0]) == eg.find(x):
            a = A(node)
            if a["dim"] == d and eg.dim_lt(a["start"], a["end"]):
                pieces.append((a["start"], a["end"], pc))
    pieces.sort(key=lambda p: (str(p[0]), str(p[1]), p[2]))
    out: list[list[int]] = []

    def go(cur, acc):
        if len(out) >= limit or len(acc) > max_len:
            return
        if acc and eg.dim_eq(cur, stop):
            if len(acc) >= 2:
                out.append(list(acc))
            return
        for s, e, pc in pieces:
            if eg.dim_eq(s, cur) and eg.dim_le(e, stop):
                acc.append(pc)
                go(e, acc)
                acc.pop()

    go(start, [])
    return out


def _slice_split(eg, c, n):
    a = A(n)
    x, d = n[2][0], a["dim"]
    for chain in _chains(eg, x, d, a["start"], a["end"]):
        yield c, T("concat", *chain, dim=d)
    shp = eg.shape(x)
    if shp is not None and eg.dim_eq(a["start"], ZERO):
        for chain in _chains(eg, x, d, ZERO, shp[d]):
            yield eg.find(x), T("concat", *chain, dim=d)


def _s_slice_split(rng):
    parts = _parts(rng)
    L = sum(parts)
    offs = [int(v) for v in np.cumsum([0] + parts)]
    extra = [app("slice", ref("X"), dim=0, start=offs[i], end=offs[i + 1]) for i in range(len(parts))]
    if rng.integers(0, 2) or len(parts) < 3:
        lhs = app("slice", ref("X"), dim=0, start=0, end=L)
    else:
        lhs = app("slice", ref("X"), dim=0, start=offs[1], end=L)
    return LemmaSample(lhs, {"X": (L, 2)}, extra=extra)


def _slice_concat(eg, c, n):
    a = A(n)
    d, lo, hi = a["dim"], a["start"], a["end"]
    if not eg.dim_lt(lo, hi):
        return
    for kids, _ in _concats(eg, n[2][0], d):
        sizes = _sizes(eg, kids, d)
        if sizes is None:
            continue
        pieces: list[Term | int] = []
        ok = True
        for k, o, s in zip(kids, _offsets(sizes), sizes):
            e = o + s
            if eg.dim_le(e, lo) or eg.dim_le(hi, o):
                continue
            if not (eg.dim_lt(lo, e) and eg.dim_lt(o, hi)):
                ok = False
                break
            if eg.dim_le(lo, o):
                start = o
            elif eg.dim_lt(o, lo):
                start = lo
            else:
                ok = False
                break
            if eg.dim_le(e, hi):
                stop = e
            elif eg.dim_lt(hi, e):
                stop = hi
            else:
                ok = False
                break
            if start == o and stop == e:
                pieces.append(k)
            else:
                pieces.append(T("slice", k, dim=d, start=start - o, end=stop - o))
        if ok and pieces:
            yield c, pieces[0] if len(pieces) == 1 else T("concat", *pieces, dim=d)


def _s_slice_concat(rng):
    cat, shapes, parts = _concat_sample(rng, (1, 2), 0)
    L = sum(parts)
    lo = int(rng.integers(0, L))
    hi = int(rng.integers(lo + 1, L + 1))
    return LemmaSample(app("slice", cat, dim=0, start=lo, end=hi), shapes)


def _slice_concat_other(eg, c, n):
    a = A(n)
    for kids, cd in _concats(eg, n[2][0]):
        if cd != a["dim"]:
            yield c, T("concat", *[T("slice", k, **a) for k in kids], dim=cd)


def _s_slice_concat_other(rng):
    base = _shape(rng, 2, 2, 4)
    cat, shapes, _ = _concat_sample(rng, base, 1)
    lo = int(rng.integers(0, base[0]))
    hi = int(rng.integers(lo + 1, base[0] + 1))
    return LemmaSample(app("slice", cat, dim=0, start=lo, end=hi), shapes)


def _concat_flatten(eg, c, n):
    d = A(n)["dim"]
    out: list[int] = []
    changed = False
    for k in n[2]:
        inner = next((ks for ks, _ in _concats(eg, k, d)), None)
        if inner is not None and len(inner) > 1:
            out.extend(inner)
            changed = True
        else:
            out.append(k)
    if changed:
        yield c, T("concat", *out, dim=d)


def _s_concat_flatten(rng):
    inner, shapes, _ = _concat_sample(rng, (2, 2), 0)
    shapes["Y"] = (int(rng.integers(1, 3)), 2)
    return LemmaSample(app("concat", ref("Y"), inner, dim=0), shapes)


def _concat_single(eg, c, n):
    if len(n[2]) == 1:
        yield c, n[2][0]


def _s_concat_single(rng):
    return LemmaSample(app("concat", ref("X"), dim=0), {"X": _shape(rng, 2)})


# ---------------------------------------------------------------------------
# transpose / reshape

def _transpose_transpose(eg, c, n):
    q = A(n)["perm"]
    for inner in eg.nodes_op(n[2][0], "transpose"):
        p = A(inner)["perm"]
        r = tuple(p[i] for i in q)
        y = inner[2][0]
        yield c, (y if r == tuple(range(len(r))) else T("transpose", y, perm=r))


def _transpose_id(eg, c, n):
    p = A(n)["perm"]
    if tuple(p) == tuple(range(len(p))):
        yield c, n[2][0]


def _s_transpose_transpose(rng):
    p = tuple(int(v) for v in rng.permutation(3))
    q = tuple(int(v) for v in rng.permutation(3))
    inner = app("transpose", ref("X"), perm=p)
    return LemmaSample(app("transpose", inner, perm=q), {"X": _shape(rng, 3)})


def _transpose_concat(eg, c, n):
    p = A(n)["perm"]
    for kids, d in _concats(eg, n[2][0]):
        yield c, T("concat", *[T("transpose", k, perm=p) for k in kids], dim=list(p).index(d))


def _concat_transpose(eg, c, n):
    d = A(n)["dim"]
    kids = n[2]
    for first in eg.nodes_op(kids[0], "transpose"):
        p = A(first)["perm"]
        inner = [first[2][0]]
        for k in kids[1:]:
            hit = next((t[2][0] for t in eg.nodes_op(k, "transpose") if A(t)["perm"] == p), None)
            if hit is None:
                break
            inner.append(hit)
        else:
            yield c, T("transpose", T("concat", *inner, dim=p[d]), perm=p)


def _s_transpose_concat(rng):
    p = tuple(int(v) for v in rng.permutation(3))
    d = int(rng.integers(0, 3))
    cat, shapes, _ = _concat_sample(rng, _shape(rng, 3), d)
    return LemmaSample(app("transpose", cat, perm=p), shapes)


def _reshape_id(eg, c, n):
    x = n[2][0]
    if eg.shapes_eq(eg.shape(x), A(n)["shape"]):
        yield c, x


def _s_reshape_id(rng):
    shp = _shape(rng, 2)
    return LemmaSample(app("reshape", ref("X"), shape=shp), {"X": shp})


def _reshape_reshape(eg, c, n):
    target = A(n)["shape"]
    for inner in eg.nodes_op(n[2][0], "reshape"):
        y = inner[2][0]
        if eg.shapes_eq(eg.shape(y), target):
            yield c, y
            continue
        hit = eg.lookup(T("reshape", y, shape=target))
        if hit is not None:
            yield c, hit


def _s_reshape_reshape(rng):
    a, b = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = (2 * a, 3 * b)
    mid = app("reshape", ref("X"), shape=(a, 6 * b))
    if rng.integers(0, 2):
        return LemmaSample(app("reshape", mid, shape=x), {"X": x})
    other = (3 * b, 2 * a)
    return LemmaSample(app("reshape", mid, shape=other), {"X": x},
                       extra=[app("reshape", ref("X"), shape=other)])


def _prod_concrete(ds) -> int | None:
    if not all(d.is_concrete for d in ds):
        return None
    return math.prod(d.const for d in ds)


def _reshape_concat(eg, c, n):
    tgt = tuple(A(n)["shape"])
    x = n[2][0]
    shp = eg.shape(x)
    if shp is None:
        return
    r = len(shp)
    for kids, d in _concats(eg, x):
        sizes = _sizes(eg, kids, d)
        if sizes is None:
            continue
        if not all(eg.dim_eq(tgt[i], shp[i]) for i in range(min(d, len(tgt)))) or len(tgt) <= d:
            continue
        if eg.dim_eq(tgt[d], shp[d]):
            pieces = [T("reshape", k, shape=tgt[:d] + (s,) + tgt[d + 1:]) for k, s in zip(kids, sizes)]
            yield c, T("concat", *pieces, dim=d)
        elif d == r - 1 and len(tgt) >= d + 2:
            rest = tgt[d + 1:]
            m = _prod_concrete(rest)
            split = [s.exact_div(m) for s in sizes] if m else None
            if split and all(v is not None for v in split):
                pieces = [T("reshape", k, shape=shp[:d] + (v,) + rest) for k, v in zip(kids, split)]
                yield c, T("concat", *pieces, dim=d)
        elif len(tgt) == d + 1:
            m = _prod_concrete(shp[d + 1:])
            if m:
                pieces = [T("reshape", k, shape=shp[:d] + (s * m,)) for k, s in zip(kids, sizes)]
                yield c, T("concat", *pieces, dim=d)


def _s_reshape_concat(rng):
    mode = int(rng.integers(0, 3))
    S, h = int(rng.integers(1, 4)), 2
    if mode == 0:  # split trailing dims after the concat dim
        cat, shapes, parts = _concat_sample(rng, (1, 6), 0)
        return LemmaSample(app("reshape", cat, shape=(sum(parts), 2, 3)), shapes)
    if mode == 1:  # split the (last) concat dim into heads
        parts = [h * int(v) for v in rng.integers(1, 3, size=2)]
        cat, shapes, _ = _concat_sample(rng, (S, 1), 1, parts=parts)
        return LemmaSample(app("reshape", cat, shape=(S, sum(parts) // h, h)), shapes)
    cat, shapes, parts = _concat_sample(rng, (S, 1, 3), 1)
    return LemmaSample(app("reshape", cat, shape=(S, 3 * sum(parts))), shapes)


# ---------------------------------------------------------------------------
# elementwise

def _unary_concat(eg, c, n):
    for kids, d in _concats(eg, n[2][0]):
        yield c, T("concat", *[T(n[0], k) for k in kids], dim=d)


def _s_unary_concat(rng):
    op = UNARY[int(rng.integers(0, len(UNARY)))]
    cat, shapes, _ = _concat_sample(rng, _shape(rng, 2), int(rng.integers(0, 2)))
    return LemmaSample(app(op, cat), shapes)


def _unary_slice(eg, c, n):
    a = A(n)
    for op in UNARY:
        for inner in eg.nodes_op(n[2][0], op):
            yield c, T(op, T("slice", inner[2][0], **a))


def _s_unary_slice(rng):
    op = UNARY[int(rng.integers(0, len(UNARY)))]
    L = int(rng.integers(2, 6))
    lo = int(rng.integers(0, L))
    return LemmaSample(app("slice", app(op, ref("X")), dim=0, start=lo, end=L), {"X": (L, 2)})


def _binary_concat(eg, c, n):
    x, y = n[2]
    if _scalar_of(eg, y) is not None:
        for kids, d in _concats(eg, x):
            yield c, T("concat", *[T(n[0], k, y) for k in kids], dim=d)
        return
    for xs, d in _concats(eg, x):
        sx = _sizes(eg, xs, d)
        for ys, d2 in _concats(eg, y, d):
            if _same_sizes(eg, sx, _sizes(eg, ys, d2)):
                yield c, T("concat", *[T(n[0], a, b) for a, b in zip(xs, ys)], dim=d)


def _s_binary_concat(rng):
    op = BINARY[int(rng.integers(0, len(BINARY)))]
    base = _shape(rng, 2)
    d = int(rng.integers(0, 2))
    parts = _parts(rng)
    x, shapes, _ = _concat_sample(rng, base, d, "X", parts)
    if rng.integers(0, 2):
        return LemmaSample(app(op, x, scalar(int(rng.integers(1, 5)))), shapes)
    y, sy, _ = _concat_sample(rng, base, d, "Y", parts)
    shapes.update(sy)
    return LemmaSample(app(op, x, y), shapes)


# ---------------------------------------------------------------------------
# matmul

def _matmul_split(eg, c, n):
    a, b = n[2]
    r = _rank(eg, a)
    if r is None:
        return
    for kids, d in _concats(eg, a, r - 2):
        yield c, T("concat", *[T("matmul", k, b) for k in kids], dim=d)
    for kids, d in _concats(eg, b, r - 1):
        yield c, T("concat", *[T("matmul", a, k) for k in kids], dim=d)


def _s_matmul_split(rng):
    m, k, p = _shape(rng, 3)
    if rng.integers(0, 2):
        cat, shapes, parts = _concat_sample(rng, (1, k), 0)
        shapes["B"] = (k, p)
        return LemmaSample(app("matmul", cat, ref("B")), shapes)
    cat, shapes, parts = _concat_sample(rng, (k, 1), 1)
    shapes["A"] = (m, k)
    return LemmaSample(app("matmul", ref("A"), cat), shapes)


def _matmul_block(eg, c, n):
    a, b = n[2]
    r = _rank(eg, a)
    if r is None:
        return
    for xs, _ in _concats(eg, a, r - 1):
        sx = _sizes(eg, xs, r - 1)
        for ys, _ in _concats(eg, b, r - 2):
            if _same_sizes(eg, sx, _sizes(eg, ys, r - 2)):
                yield c, T("sum", *[T("matmul", p, q) for p, q in zip(xs, ys)])


def _s_matmul_block(rng):
    m, p = _shape(rng, 2)
    parts = _parts(rng)
    x, shapes, _ = _concat_sample(rng, (m, 1), 1, "A", parts)
    y, sy, _ = _concat_sample(rng, (1, p), 0, "B", parts)
    shapes.update(sy)
    return LemmaSample(app("matmul", x, y), shapes)


def _matmul_batch(eg, c, n):
    a, b = n[2]
    r = _rank(eg, a)
    if r is None or r < 3:
        return
    for xs, d in _concats(eg, a):
        if d >= r - 2:
            continue
        sx = _sizes(eg, xs, d)
        for ys, _ in _concats(eg, b, d):
            if _same_sizes(eg, sx, _sizes(eg, ys, d)):
                yield c, T("concat", *[T("matmul", p, q) for p, q in zip(xs, ys)], dim=d)


def _s_matmul_batch(rng):
    m, k, p = _shape(rng, 3)
    parts = _parts(rng)
    x, shapes, _ = _concat_sample(rng, (1, m, k), 0, "A", parts)
    y, sy, _ = _concat_sample(rng, (1, k, p), 0, "B", parts)
    shapes.update(sy)
    return LemmaSample(app("matmul", x, y), shapes)


def _matmul_slice(eg, c, n):
    at = A(n)
    d = at["dim"]
    for mm in eg.nodes_op(n[2][0], "matmul"):
        p, q = mm[2]
        r = _rank(eg, p)
        if r is None:
            continue
        if d == r - 2:
            yield c, T("matmul", T("slice", p, **at), q)
        elif d == r - 1:
            yield c, T("matmul", p, T("slice", q, **at))
        else:
            yield c, T("matmul", T("slice", p, **at), T("slice", q, **at))


def _s_matmul_slice(rng):
    m, k, p = (int(v) for v in rng.integers(2, 5, size=3))
    d = int(rng.integers(0, 2))
    size = m if d == 0 else p
    lo = int(rng.integers(0, size))
    hi = int(rng.integers(lo + 1, size + 1))
    lhs = app("slice", app("matmul", ref("A"), ref("B")), dim=d, start=lo, end=hi)
    return LemmaSample(lhs, {"A": (m, k), "B": (k, p)})


def _matmul_scale_out(eg, c, n):
    a, b = n[2]
    for op in ("mul", "div"):
        for g in eg.nodes_op(a, op):
            if _scalar_of(eg, g[2][1]) is not None:
                yield c, T(op, T("matmul", g[2][0], b), g[2][1])
        for g in eg.nodes_op(b, op):
            if _scalar_of(eg, g[2][1]) is not None:
                yield c, T(op, T("matmul", a, g[2][0]), g[2][1])


def _matmul_scale_in(eg, c, n):
    x, s = n[2]
    if _scalar_of(eg, s) is None:
        return
    for mm in eg.nodes_op(x, "matmul"):
        yield c, T("matmul", T(n[0], mm[2][0], s), mm[2][1])


def _s_matmul_scale(rng):
    m, k, p = _shape(rng, 3)
    op = ("mul", "div")[int(rng.integers(0, 2))]
    s = scalar(int(rng.integers(1, 5)))
    if rng.integers(0, 2):
        lhs = app("matmul", app(op, ref("A"), s), ref("B"))
    else:
        lhs = app(op, app("matmul", ref("A"), ref("B")), s)
    return LemmaSample(lhs, {"A": (m, k), "B": (k, p)})


def _matmul_sum(eg, c, n):
    a, b = n[2]
    for s in eg.nodes_op(a, "sum"):
        yield c, T("sum", *[T("matmul", k, b) for k in s[2]])
    for s in eg.nodes_op(b, "sum"):
        yield c, T("sum", *[T("matmul", a, k) for k in s[2]])


def _s_matmul_sum(rng):
    m, k, p = _shape(rng, 3)
    shapes = {"A0": (m, k), "A1": (m, k), "B": (k, p)}
    return LemmaSample(app("matmul", app("sum", ref("A0"), ref("A1")), ref("B")), shapes)


# ---------------------------------------------------------------------------
# reductions and sums

def _reduce_sum_concat(eg, c, n):
    a = A(n)
    e, keep = a["dim"], a.get("keepdim", 0)
    for kids, d in _concats(eg, n[2][0]):
        parts = [T("reduce_sum", k, dim=e, keepdim=keep) for k in kids]
        if d == e:
            yield c, T("sum", *parts)
        else:
            yield c, T("concat", *parts, dim=d if (keep or d < e) else d - 1)


def _s_reduce_sum_concat(rng):
    d, e = (int(v) for v in rng.integers(0, 2, size=2))
    cat, shapes, _ = _concat_sample(rng, _shape(rng, 2), d)
    return LemmaSample(app("reduce_sum", cat, dim=e, keepdim=int(rng.integers(0, 2))), shapes)


def _sum_comm(eg, c, n):
    if len(n[2]) == 2:
        yield c, T("sum", n[2][1], n[2][0])


def _s_sum_comm(rng):
    shp = _shape(rng, 2)
    return LemmaSample(app("sum", ref("X"), ref("Y")), {"X": shp, "Y": shp})


def _sum_flatten(eg, c, n):
    out: list[int] = []
    changed = False
    for k in n[2]:
        inner = next((s[2] for s in eg.nodes_op(k, "sum") if len(s[2]) > 1), None)
        if inner is not None:
            out.extend(inner)
            changed = True
        else:
            out.append(k)
    if changed:
        yield c, T("sum", *out)


def _s_sum_flatten(rng):
    shp = _shape(rng, 2)
    lhs = app("sum", app("sum", ref("X"), ref("Y")), ref("Z"))
    return LemmaSample(lhs, {"X": shp, "Y": shp, "Z": shp})


def _sum_mean(eg, c, n):
    kids = n[2]
    k = len(kids)
    if k < 2 or any(not eg.equiv(x, kids[0]) for x in kids[1:]):
        return
    for g in eg.nodes_op(kids[0], "div"):
        s = _scalar_of(eg, g[2][1])
        if s is not None and eg.dim_eq(s, DimExpr(k)):
            yield c, g[2][0]


def _s_sum_mean(rng):
    k = int(rng.integers(2, 5))
    part = app("div", ref("X"), scalar(k))
    return LemmaSample(app("sum", *[part] * k), {"X": _shape(rng, 2)})


def _scale_unit(eg, c, n):
    s = _scalar_of(eg, n[2][1])
    if s is not None and eg.dim_eq(s, DimExpr(1)):
        yield c, n[2][0]


def _s_scale_unit(rng):
    op = ("mul", "div")[int(rng.integers(0, 2))]
    return LemmaSample(app(op, ref("X"), scalar(1)), {"X": _shape(rng, 2)})


def _div_sum(eg, c, n):
    x, s = n[2]
    if _scalar_of(eg, s) is None:
        return
    for sm in eg.nodes_op(x, "sum"):
        yield c, T("sum", *[T("div", k, s) for k in sm[2]])


def _sum_div(eg, c, n):
    kids = n[2]
    for first in eg.nodes_op(kids[0], "div"):
        s = first[2][1]
        if _scalar_of(eg, s) is None:
            continue
        inner = [first[2][0]]
        for k in kids[1:]:
            hit = next((g[2][0] for g in eg.nodes_op(k, "div") if eg.equiv(g[2][1], s)), None)
            if hit is None:
                break
            inner.append(hit)
        else:
            yield c, T("div", T("sum", *inner), s)


def _s_div_sum(rng):
    shp = _shape(rng, 2)
    s = scalar(int(rng.integers(1, 5)))
    if rng.integers(0, 2):
        lhs = app("div", app("sum", ref("X"), ref("Y")), s)
    else:
        lhs = app("sum", app("div", ref("X"), s), app("div", ref("Y"), s))
    return LemmaSample(lhs, {"X": shp, "Y": shp})


def _sum_group(eg, c, n):
    kids = n[2]
    m = len(kids)
    if m < 3:
        return
    for i in range(m):
        for j in range(i + 2, m + 1):
            if j - i == m:
                continue
            hit = eg.lookup(T("sum", *kids[i:j]))
            if hit is not None:
                yield c, T("sum", *kids[:i], hit, *kids[j:])


def _s_sum_group(rng):
    shp = _shape(rng, 2)
    names = ["W", "X", "Y", "Z"][: int(rng.integers(3, 5))]
    i = int(rng.integers(0, len(names) - 1))
    group = app("sum", *[ref(nm) for nm in names[i:i + 2]])
    return LemmaSample(app("sum", *[ref(nm) for nm in names]), {nm: shp for nm in names},
                       extra=[group])


def _add_sum(eg, c, n):
    if all(_scalar_of(eg, k) is None for k in n[2]):
        yield c, T("sum", *n[2])


def _sum_add(eg, c, n):
    if len(n[2]) == 2:
        yield c, T("add", *n[2])


def _s_add_sum(rng):
    shp = _shape(rng, 2)
    op = ("add", "sum")[int(rng.integers(0, 2))]
    return LemmaSample(app(op, ref("X"), ref("Y")), {"X": shp, "Y": shp})


def _mse_concat(eg, c, n):
    y, t = n[2]
    for ys, d in _concats(eg, y):
        sy = _sizes(eg, ys, d)
        if sy is None or not all(eg.dim_eq(s, sy[0]) for s in sy):
            continue
        for ts, _ in _concats(eg, t, d):
            if _same_sizes(eg, sy, _sizes(eg, ts, d)):
                k = eg.add_scalar(len(ys))
                yield c, T("sum", *[T("div", T("mse_loss", a, b), k) for a, b in zip(ys, ts)])


def _s_mse_concat(rng):
    k = int(rng.integers(2, 4))
    base = _shape(rng, 2)
    d = int(rng.integers(0, 2))
    parts = [base[d]] * k
    y, shapes, _ = _concat_sample(rng, base, d, "Y", parts)
    t, st, _ = _concat_sample(rng, base, d, "T", parts)
    shapes.update(st)
    return LemmaSample(app("mse_loss", y, t), shapes)


# ---------------------------------------------------------------------------
# normalizations

def _softmax_concat(eg, c, n):
    k = A(n)["dim"]
    for kids, d in _concats(eg, n[2][0]):
        if d != k:
            yield c, T("concat", *[T("softmax", x, dim=k) for x in kids], dim=d)


def _s_softmax_concat(rng):
    cat, shapes, _ = _concat_sample(rng, _shape(rng, 2), 0)
    return LemmaSample(app("softmax", cat, dim=1), shapes)


def _norm_concat(eg, c, n):
    x, params = n[2][0], n[2][1:]
    r = _rank(eg, x)
    for kids, d in _concats(eg, x):
        if r is not None and d != r - 1:
            yield c, T("concat", *[T(n[0], k, *params) for k in kids], dim=d)


def _s_rmsnorm_concat(rng):
    base = _shape(rng, 2)
    cat, shapes, _ = _concat_sample(rng, base, 0)
    shapes["W"] = (base[1],)
    return LemmaSample(app("rmsnorm", cat, ref("W")), shapes)


def _s_layernorm_concat(rng):
    base = _shape(rng, 3, 2, 4)
    d = int(rng.integers(0, 2))
    cat, shapes, _ = _concat_sample(rng, base, d)
    shapes["W"] = shapes["B"] = (base[2],)
    return LemmaSample(app("layernorm", cat, ref("W"), ref("B")), shapes)


# ---------------------------------------------------------------------------
# embedding and padding

def _embedding_vocab(eg, c, n):
    ids, tab = n[2]
    for kids, _ in _concats(eg, tab, 0):
        sizes = _sizes(eg, kids, 0)
        if sizes is None:
            continue
        parts = [T("embedding_masked", ids, k, offset=o) for k, o in zip(kids, _offsets(sizes))]
        yield c, T("sum", *parts)


def _s_embedding_vocab(rng):
    cat, shapes, parts = _concat_sample(rng, (1, 3), 0, "E")
    shapes["I"] = _shape(rng, 1, 2, 5)
    return LemmaSample(app("embedding", ref("I"), cat), shapes, ints={"I": sum(parts)})


def _embedding_ids(eg, c, n):
    ids, tab = n[2]
    for kids, d in _concats(eg, ids):
        yield c, T("concat", *[T("embedding", k, tab) for k in kids], dim=d)


def _s_embedding_ids(rng):
    cat, shapes, _ = _concat_sample(rng, (1,), 0, "I")
    v = int(rng.integers(2, 6))
    shapes["E"] = (v, 3)
    return LemmaSample(app("embedding", cat, ref("E")), shapes, ints={k: v for k in shapes if k != "E"})


def _pad_slice(eg, c, n):
    a = A(n)
    d = a["dim"]
    for p in eg.nodes_op(n[2][0], "pad"):
        pa = A(p)
        y = p[2][0]
        shp = eg.shape(y)
        if pa["dim"] != d or shp is None:
            continue
        b = pa["before"]
        if eg.dim_le(b, a["start"]) and eg.dim_le(a["end"], b + shp[d]):
            yield c, T("slice", y, dim=d, start=a["start"] - b, end=a["end"] - b)


def _s_pad_slice(rng):
    L = int(rng.integers(1, 5))
    b, af = (int(v) for v in rng.integers(0, 3, size=2))
    lo = int(rng.integers(b, b + L))
    hi = int(rng.integers(lo + 1, b + L + 1))
    padded = app("pad", ref("X"), dim=0, before=b, after=af)
    return LemmaSample(app("slice", padded, dim=0, start=lo, end=hi), {"X": (L, 2)})


def _identity(eg, c, n):
    yield c, n[2][0]


def _s_identity(rng):
    return LemmaSample(app("identity", ref("X")), {"X": _shape(rng, 2)})


# ---------------------------------------------------------------------------
# library

CS = "concat-slice"


def builtin_lemmas() -> list[Lemma]:
    R = Rule
    return [
        lemma("slice-full", "(slice x :dim d :start 0 :end n)", "x", R(("slice",), _slice_full),
              family=CS, condition="n == shape(x, d)", sample=_s_slice_full),
        lemma("slice-of-slice", "(slice (slice x :dim d :start a :end b) :dim d :start c :end e)",
              "(slice x :dim d :start a+c :end a+e)", R(("slice",), _slice_slice),
              family=CS, sample=_s_slice_slice),
        lemma("slice-merge", "(concat (slice x :start a0 :end a1) ... (slice x :start ak-1 :end ak))",
              "(slice x :start a0 :end ak)", R(("concat",), _slice_merge),
              family=CS, condition="adjacent bounds", sample=_s_slice_merge),
        lemma("slice-split", "(slice x :start a :end c)", "(concat (slice x :start a :end b) ...)",
              R(("slice",), _slice_split), family=CS, constrained=True,
              condition="every piece already exists", sample=_s_slice_split,
              doc="Also rewrites x itself when existing slices tile all of x."),
        lemma("slice-concat", "(slice (concat x1 .. xn :dim d) :dim d :start a :end b)",
              "(concat (slice xi ..) ..)", R(("slice",), _slice_concat), family=CS,
              condition="boundary cases decided", sample=_s_slice_concat),
        lemma("slice-concat-other", "(slice (concat xs :dim d) :dim e ..)",
              "(concat (slice xi :dim e ..) .. :dim d)", R(("slice",), _slice_concat_other),
              family=CS, condition="d != e", sample=_s_slice_concat_other),
        lemma("concat-flatten", "(concat .. (concat ys :dim d) .. :dim d)", "(concat .. ys .. :dim d)",
              R(("concat",), _concat_flatten), family=CS, sample=_s_concat_flatten),
        lemma("concat-single", "(concat x)", "x", R(("concat",), _concat_single), family=CS,
              sample=_s_concat_single),
        lemma("transpose-transpose", "(transpose (transpose x :perm p) :perm q)",
              "(transpose x :perm p.q)", R(("transpose",), _transpose_transpose),
              R(("transpose",), _transpose_id), family="layout", sample=_s_transpose_transpose),
        lemma("transpose-concat", "(transpose (concat xs :dim d) :perm p)",
              "(concat (transpose xi :perm p) .. :dim p^-1(d))", R(("transpose",), _transpose_concat),
              R(("concat",), _concat_transpose), family="layout", direction="both",
              sample=_s_transpose_concat),
        lemma("reshape-identity", "(reshape x :shape s)", "x", R(("reshape",), _reshape_id),
              family="layout", condition="shape(x) == s", sample=_s_reshape_id),
        lemma("reshape-reshape", "(reshape (reshape x :shape s1) :shape s2)", "(reshape x :shape s2)",
              R(("reshape",), _reshape_reshape), family="layout", constrained=True,
              condition="result already exists or equals x", sample=_s_reshape_reshape),
        lemma("reshape-concat", "(reshape (concat xs :dim d) :shape s)",
              "(concat (reshape xi :shape si) .. :dim d)", R(("reshape",), _reshape_concat),
              family="layout", condition="reshape keeps dims before d", sample=_s_reshape_concat),
        lemma("unary-concat", "(f (concat xs :dim d))", "(concat (f xi) .. :dim d)",
              R(UNARY, _unary_concat), family="elementwise", sample=_s_unary_concat),
        lemma("unary-slice", "(slice (f x) ..)", "(f (slice x ..))", R(("slice",), _unary_slice),
              family="elementwise", sample=_s_unary_slice),
        lemma("binary-concat", "(g (concat xs :dim d) (concat ys :dim d))",
              "(concat (g xi yi) .. :dim d)", R(BINARY, _binary_concat), family="elementwise",
              condition="matching part sizes, or a scalar operand", sample=_s_binary_concat),
        lemma("matmul-split", "(matmul (concat as :dim r-2) b)", "(concat (matmul ai b) .. :dim r-2)",
              R(("matmul",), _matmul_split), family="matmul",
              doc="Row split of the left operand and column split of the right operand.",
              sample=_s_matmul_split),
        lemma("matmul-block", "(matmul (concat as :dim r-1) (concat bs :dim r-2))",
              "(sum (matmul ai bi) ..)", R(("matmul",), _matmul_block), family="matmul",
              condition="matching inner part sizes", sample=_s_matmul_block),
        lemma("matmul-batch", "(matmul (concat as :dim d) (concat bs :dim d))",
              "(concat (matmul ai bi) .. :dim d)", R(("matmul",), _matmul_batch), family="matmul",
              condition="d is a batch dim; matching part sizes", sample=_s_matmul_batch),
        lemma("matmul-slice", "(slice (matmul a b) ..)", "(matmul (slice a ..) b)",
              R(("slice",), _matmul_slice), family="matmul", sample=_s_matmul_slice),
        lemma("matmul-scale", "(matmul (g a s) b)", "(g (matmul a b) s)",
              R(("matmul",), _matmul_scale_out), R(("mul", "div"), _matmul_scale_in),
              family="matmul", direction="both", condition="s is a scalar; g in {mul, div}",
              sample=_s_matmul_scale),
        lemma("matmul-sum", "(matmul (sum as) b)", "(sum (matmul ai b) ..)",
              R(("matmul",), _matmul_sum), family="matmul", sample=_s_matmul_sum),
        lemma("reduce-sum-concat", "(reduce_sum (concat xs :dim d) :dim e)",
              "(sum (reduce_sum xi :dim e) ..) if d == e else (concat (reduce_sum xi :dim e) ..)",
              R(("reduce_sum",), _reduce_sum_concat), family="reduction",
              sample=_s_reduce_sum_concat),
        lemma("sum-comm", "(sum a b)", "(sum b a)", R(("sum",), _sum_comm), family="reduction",
              sample=_s_sum_comm),
        lemma("sum-flatten", "(sum .. (sum ys) ..)", "(sum .. ys ..)", R(("sum",), _sum_flatten),
              family="reduction", sample=_s_sum_flatten),
        lemma("sum-mean", "(sum (div m k) .. k times)", "m", R(("sum",), _sum_mean),
              family="reduction", condition="k identical operands", sample=_s_sum_mean),
        lemma("scale-unit", "(div x 1)", "x", R(("mul", "div"), _scale_unit), family="reduction",
              sample=_s_scale_unit),
        lemma("div-sum", "(div (sum xs) s)", "(sum (div xi s) ..)", R(("div",), _div_sum),
              R(("sum",), _sum_div), family="reduction", direction="both", sample=_s_div_sum),
        lemma("sum-group", "(sum .. xi .. xj ..)", "(sum .. g ..)", R(("sum",), _sum_group),
              family="reduction", constrained=True, condition="g = (sum xi .. xj) already exists",
              sample=_s_sum_group),
        lemma("add-sum", "(add a b)", "(sum a b)", R(("add",), _add_sum), R(("sum",), _sum_add),
              family="reduction", direction="both", sample=_s_add_sum),
        lemma("mse-concat", "(mse_loss (concat ys :dim d) (concat ts :dim d))",
              "(sum (div (mse_loss yi ti) k) ..)", R(("mse_loss",), _mse_concat),
              family="reduction", condition="k equal parts", sample=_s_mse_concat),
        lemma("softmax-concat", "(softmax (concat xs :dim d) :dim k)",
              "(concat (softmax xi :dim k) .. :dim d)", R(("softmax",), _softmax_concat),
              family="normalization", condition="d != k", sample=_s_softmax_concat),
        lemma("rmsnorm-concat", "(rmsnorm (concat xs :dim d) w)", "(concat (rmsnorm xi w) .. :dim d)",
              R(("rmsnorm",), _norm_concat), family="normalization", condition="d is not the last dim",
              sample=_s_rmsnorm_concat),
        lemma("layernorm-concat", "(layernorm (concat xs :dim d) w b)",
              "(concat (layernorm xi w b) .. :dim d)", R(("layernorm",), _norm_concat),
              family="normalization", condition="d is not the last dim", sample=_s_layernorm_concat),
        lemma("embedding-vocab", "(embedding ids (concat es :dim 0))",
              "(sum (embedding_masked ids ei :offset oi) ..)", R(("embedding",), _embedding_vocab),
              family="embedding", sample=_s_embedding_vocab),
        lemma("embedding-ids", "(embedding (concat ids :dim d) e)", "(concat (embedding idsi e) .. :dim d)",
              R(("embedding",), _embedding_ids), family="embedding", sample=_s_embedding_ids),
        lemma("pad-slice", "(slice (pad x :dim d :before b) :dim d :start s :end e)",
              "(slice x :dim d :start s-b :end e-b)", R(("slice",), _pad_slice), family=CS,
              condition="b <= s and e <= b + shape(x, d)", sample=_s_pad_slice),
        lemma("identity-elim", "(identity x)", "x", R(("identity",), _identity), family="layout",
              sample=_s_identity),
    ]
