"""Operators outside the core set used by the harness models, with their lemmas.

``rope(x, cos, sin)``
    rotary position embedding over the last two dims of ``x`` (``[.., S, D]``)
    with tables of shape ``[S, D]``: ``x * cos + rotate_half(x) * sin``.
``rope_bwd(g, cos, sin)``
    its input gradient: ``g * cos + rotate_half_t(g * sin)``.
``aux_loss(p)``
    router load-balancing penalty, the mean over tokens (dim 0) of the
    per-token sum of squares. Returns a scalar.

Registering these is idempotent; :func:`register_custom` also installs the
distribution lemmas so fixtures using the operators can be checked.
"""

from __future__ import annotations

import numpy as np

from ..dims import DimExpr
from ..egraph import T
from ..expr import app, ref
from ..lemmas import Lemma, LemmaSample, Rule, get_lemma, lemma, register_lemma
from ..lemmas.builtin import _concats, _offsets, _rank, _sizes
from ..ops import OpSpec, ShapeError, get_op, has_op, register_op, require_shape

CUSTOM_FAMILY = "custom"


def _rot(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rot_t(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def rope_np(x, cos, sin):
    return x * cos + _rot(x) * sin


def rope_bwd_np(g, cos, sin):
    return g * cos + _rot_t(g * sin)


def _rope_shape(shapes, attrs, cs):
    x, c, s = shapes
    if len(x) < 2:
        raise ShapeError("rope: input must have rank >= 2")
    require_shape(tuple(c), tuple(x[-2:]), cs, "rope: cos table does not match input")
    require_shape(tuple(s), tuple(x[-2:]), cs, "rope: sin table does not match input")
    d = x[-1]
    if d.is_concrete and d.to_int() % 2:
        raise ShapeError("rope: last dim must be even")
    return x


def _aux_shape(shapes, attrs, cs):
    if len(shapes[0]) < 1:
        raise ShapeError("aux_loss: input must have rank >= 1")
    return ()


def _aux_np(xs, a):
    p = xs[0]
    per_token = np.sum(np.reshape(p * p, (p.shape[0], -1)), axis=1)
    return np.asarray(np.mean(per_token))


def register_custom_ops() -> None:
    specs = [
        OpSpec("rope", 3, _rope_shape, lambda xs, a: rope_np(*xs), doc="rotary embedding"),
        OpSpec("rope_bwd", 3, _rope_shape, lambda xs, a: rope_bwd_np(*xs), doc="rotary embedding grad"),
        OpSpec("aux_loss", 1, _aux_shape, _aux_np, category=None, doc="router z-style penalty"),
    ]
    for spec in specs:
        if not has_op(spec.name):
            register_op(spec)


# ---------------------------------------------------------------------------
# lemmas

ROPE_OPS = ("rope", "rope_bwd")


def _rope_seq(eg, c, n):
    x, cos, sin = n[2]
    r = _rank(eg, x)
    if r is None:
        return
    d = r - 2
    for kids, _ in _concats(eg, x, d):
        sizes = _sizes(eg, kids, d)
        if sizes is None:
            continue
        pieces = []
        for k, off, sz in zip(kids, _offsets(sizes), sizes):
            tab = dict(dim=0, start=off, end=off + sz)
            pieces.append(T(n[0], k, T("slice", cos, **tab), T("slice", sin, **tab)))
        yield c, T("concat", *pieces, dim=d)


def _rope_batch(eg, c, n):
    x, cos, sin = n[2]
    r = _rank(eg, x)
    if r is None:
        return
    for kids, d in _concats(eg, x):
        if d < r - 2:
            yield c, T("concat", *[T(n[0], k, cos, sin) for k in kids], dim=d)


def _s_rope(rng, batch: bool):
    op = ROPE_OPS[int(rng.integers(0, 2))]
    S, D = int(rng.integers(2, 6)), 2 * int(rng.integers(1, 3))
    k = int(rng.integers(2, 4))
    if batch:
        parts = [int(v) for v in rng.integers(1, 3, size=k)]
        names = [f"X{i}" for i in range(k)]
        shapes = {nm: (p, S, D) for nm, p in zip(names, parts)}
        d = 0
    else:
        cuts = sorted(int(v) for v in rng.choice(np.arange(1, S), size=min(k - 1, S - 1), replace=False))
        parts = [b - a for a, b in zip([0] + cuts, cuts + [S])]
        names = [f"X{i}" for i in range(len(parts))]
        shapes = {nm: (2, p, D) for nm, p in zip(names, parts)}
        d = 1
    shapes.update(C=(S, D), N=(S, D))
    x = app("concat", *[ref(nm) for nm in names], dim=d)
    return LemmaSample(app(op, x, ref("C"), ref("N")), shapes)


def _aux_concat(eg, c, n):
    for kids, d in _concats(eg, n[2][0], 0):
        sizes = _sizes(eg, kids, 0)
        if sizes is None or not all(eg.dim_eq(s, sizes[0]) for s in sizes):
            continue
        k = eg.add_scalar(len(kids))
        yield c, T("sum", *[T("div", T("aux_loss", x), k) for x in kids])


def _s_aux_concat(rng):
    k = int(rng.integers(2, 4))
    m, e = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    names = [f"P{i}" for i in range(k)]
    return LemmaSample(app("aux_loss", app("concat", *[ref(nm) for nm in names], dim=0)),
                       {nm: (m, e) for nm in names})


def custom_lemmas() -> list[Lemma]:
    return [
        lemma("rope-seq-concat", "(rope (concat xs :dim r-2) cos sin)",
              "(concat (rope xi (slice cos :start oi :end oi+si) (slice sin ..)) .. :dim r-2)",
              Rule(ROPE_OPS, _rope_seq), family=CUSTOM_FAMILY,
              doc="Sequence shards use the matching rows of the rotary tables; also for rope_bwd.",
              sample=lambda rng: _s_rope(rng, False)),
        lemma("rope-batch-concat", "(rope (concat xs :dim d) cos sin)",
              "(concat (rope xi cos sin) .. :dim d)", Rule(ROPE_OPS, _rope_batch),
              family=CUSTOM_FAMILY, condition="d < rank - 2",
              sample=lambda rng: _s_rope(rng, True)),
        lemma("aux-loss-concat", "(aux_loss (concat ps :dim 0))", "(sum (div (aux_loss pi) k) ..)",
              Rule(("aux_loss",), _aux_concat), family=CUSTOM_FAMILY, condition="k equal parts",
              sample=_s_aux_concat),
    ]


def register_custom(validate: bool = True) -> list[Lemma]:
    """Register the harness operators and lemmas (idempotent)."""
    from ..lemmas import load_builtin_lemmas

    register_custom_ops()
    load_builtin_lemmas()
    out = []
    for lem in custom_lemmas():
        try:
            out.append(get_lemma(lem.name))
        except KeyError:
            out.append(register_lemma(lem, validate=validate))
    return out


register_custom_ops()
