"""Affine dimension expressions.

A :class:`DimExpr` is either a concrete non-negative integer or an affine
combination ``c + sum(k_i * s_i)`` over symbolic dimension identifiers.
Forms are kept normalized (no zero coefficients, identifiers sorted) so
structural equality coincides with syntactic equality after normalization.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

DimLike = Union["DimExpr", int, str]

_IDENT = re.compile(r"s\d+")
_TOKEN = re.compile(r"\s*(?:(\d+)|(s\d+)|([+\-*()]))")


class DimParseError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class DimExpr:
    const: int = 0
    terms: tuple[tuple[str, int], ...] = ()

    # -- construction -----------------------------------------------------

    @staticmethod
    def of(value: DimLike) -> "DimExpr":
        if isinstance(value, DimExpr):
            return value
        if isinstance(value, bool):
            raise TypeError("bool is not a dimension")
        if isinstance(value, int):
            return DimExpr(value)
        if isinstance(value, str):
            return parse_dim(value)
        raise TypeError(f"cannot convert {value!r} to DimExpr")

    @staticmethod
    def sym(name: str) -> "DimExpr":
        if not _IDENT.fullmatch(name):
            raise DimParseError(f"bad symbolic dim identifier {name!r}")
        return DimExpr(0, ((name, 1),))

    @staticmethod
    def _norm(const: int, coeffs: Mapping[str, int]) -> "DimExpr":
        return DimExpr(const, tuple(sorted((k, v) for k, v in coeffs.items() if v != 0)))

    # -- inspection -------------------------------------------------------

    @property
    def is_concrete(self) -> bool:
        return not self.terms

    @property
    def symbols(self) -> frozenset[str]:
        return frozenset(k for k, _ in self.terms)

    def coeffs(self) -> dict[str, int]:
        return dict(self.terms)

    def to_int(self) -> int:
        if self.terms:
            raise ValueError(f"dimension {self} is symbolic")
        return self.const

    def evaluate(self, env: Mapping[str, int]) -> int:
        return self.const + sum(c * env[k] for k, c in self.terms)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other: DimLike) -> "DimExpr":
        o = DimExpr.of(other)
        acc = self.coeffs()
        for k, v in o.terms:
            acc[k] = acc.get(k, 0) + v
        return DimExpr._norm(self.const + o.const, acc)

    __radd__ = __add__

    def __neg__(self) -> "DimExpr":
        return DimExpr(-self.const, tuple((k, -v) for k, v in self.terms))

    def __sub__(self, other: DimLike) -> "DimExpr":
        return self + (-DimExpr.of(other))

    def __rsub__(self, other: DimLike) -> "DimExpr":
        return DimExpr.of(other) - self

    def __mul__(self, other: DimLike) -> "DimExpr":
        o = DimExpr.of(other)
        if o.is_concrete:
            k = o.const
            return DimExpr._norm(self.const * k, {n: c * k for n, c in self.terms})
        if self.is_concrete:
            return o * self
        raise ValueError(f"non-affine product {self} * {o}")

    __rmul__ = __mul__

    def exact_div(self, k: int) -> "DimExpr | None":
        """Divide by a positive integer when every coefficient divides evenly."""
        if k <= 0:
            return None
        if self.const % k or any(c % k for _, c in self.terms):
            return None
        return DimExpr(self.const // k, tuple((n, c // k) for n, c in self.terms))

    def substitute(self, env: Mapping[str, "DimExpr"]) -> "DimExpr":
        out = DimExpr(self.const)
        for k, c in self.terms:
            out = out + (env[k] * c if k in env else DimExpr(0, ((k, c),)))
        return out

    # -- printing ---------------------------------------------------------

    def __str__(self) -> str:
        if not self.terms:
            return str(self.const)
        parts: list[str] = []
        for k, c in self.terms:
            mag = abs(c)
            body = k if mag == 1 else f"{mag}*{k}"
            if not parts:
                parts.append(body if c > 0 else f"-{body}")
            else:
                parts.append(("+ " if c > 0 else "- ") + body)
        if self.const:
            parts.append(("+ " if self.const > 0 else "- ") + str(abs(self.const)))
        return " ".join(parts)

    def __repr__(self) -> str:
        return f"DimExpr({str(self)!r})"

    def to_json(self) -> int | str:
        return self.const if self.is_concrete else str(self)


def dim(value: DimLike) -> DimExpr:
    return DimExpr.of(value)


def dims(values: Iterable[DimLike]) -> tuple[DimExpr, ...]:
    return tuple(DimExpr.of(v) for v in values)


def parse_dim(text: str) -> DimExpr:
    """Parse ``2*s0 + s1 - 3`` style affine expressions."""
    tokens: list[str] = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise DimParseError(f"unexpected character in {text!r} at {pos}")
        tokens.append(m.group(m.lastindex))
        pos = m.end()
    if not tokens:
        raise DimParseError("empty dimension expression")
    parser = _Parser(tokens, text)
    out = parser.expr()
    if parser.i != len(tokens):
        raise DimParseError(f"trailing tokens in {text!r}")
    return out


class _Parser:
    def __init__(self, tokens: list[str], text: str):
        self.toks = tokens
        self.i = 0
        self.text = text

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self) -> str:
        if self.i >= len(self.toks):
            raise DimParseError(f"unexpected end of {self.text!r}")
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expr(self) -> DimExpr:
        out = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            out = out + rhs if op == "+" else out - rhs
        return out

    def term(self) -> DimExpr:
        out = self.unary()
        while self.peek() == "*":
            self.take()
            out = out * self.unary()
        return out

    def unary(self) -> DimExpr:
        tok = self.take()
        if tok == "-":
            return -self.unary()
        if tok == "(":
            inner = self.expr()
            if self.take() != ")":
                raise DimParseError(f"unbalanced parentheses in {self.text!r}")
            return inner
        if tok.isdigit():
            return DimExpr(int(tok))
        if _IDENT.fullmatch(tok):
            return DimExpr.sym(tok)
        raise DimParseError(f"unexpected token {tok!r} in {self.text!r}")
