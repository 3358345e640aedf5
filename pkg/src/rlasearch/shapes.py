"""Symbolic shapes for typed registers and kernel signatures.

Dimensions are symbolic labels from a tiny alphabet: ``m`` (system rows),
``n`` (columns / unknowns), ``s`` (sketch rows), ``k`` (subsample rows).
Labels bind to concrete positive integers once per execution; two shapes
are compatible for an operator exactly when their labels unify with the
operator's signature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

DIM_LABELS = ("m", "n", "s", "k")

SCALAR_KIND = "SCALAR"
VEC_KIND = "VEC"
MAT_KIND = "MAT"


@dataclass(frozen=True)
class Shape:
    """A scalar, vector or matrix shape over symbolic dimension labels."""

    kind: str
    dims: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (SCALAR_KIND, VEC_KIND, MAT_KIND):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        expect = {SCALAR_KIND: 0, VEC_KIND: 1, MAT_KIND: 2}[self.kind]
        if len(self.dims) != expect:
            raise ValueError(f"{self.kind} shape takes {expect} dims, got {self.dims}")
        for d in self.dims:
            if d not in DIM_LABELS:
                raise ValueError(f"unknown dimension label {d!r}")
        object.__setattr__(self, "_h", hash((self.kind, self.dims)))

    def __hash__(self) -> int:  # hot in action enumeration; precomputed
        return self._h

    def __str__(self) -> str:
        if self.kind == SCALAR_KIND:
            return "SCALAR"
        return f"{self.kind}({','.join(self.dims)})"

    def concrete(self, binding: dict[str, int]) -> tuple[int, ...]:
        """Resolve symbolic dims against a label -> integer binding."""
        try:
            return tuple(binding[d] for d in self.dims)
        except KeyError as e:
            raise KeyError(f"unbound dimension label {e.args[0]!r}") from None


_INTERNED: dict[tuple, Shape] = {}


def _intern(kind: str, dims: tuple[str, ...]) -> Shape:
    key = (kind, dims)
    s = _INTERNED.get(key)
    if s is None:
        s = Shape(kind, dims)
        _INTERNED[key] = s
    return s


def scalar() -> Shape:
    return _intern(SCALAR_KIND, ())


def vec(d: str) -> Shape:
    return _intern(VEC_KIND, (d,))


def mat(r: str, c: str) -> Shape:
    return _intern(MAT_KIND, (r, c))


def parse_shape(text: str) -> Shape:
    """Inverse of ``str(shape)``; used by tests and diagnostics."""
    text = text.strip()
    if text == "SCALAR":
        return scalar()
    for kind in (VEC_KIND, MAT_KIND):
        if text.startswith(kind + "(") and text.endswith(")"):
            dims = tuple(p.strip() for p in text[len(kind) + 1 : -1].split(","))
            return Shape(kind, dims)
    raise ValueError(f"cannot parse shape {text!r}")


class SignatureVar:
    """Pattern variable in an operator signature, e.g. R, C, D."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return f"?{self.name}"


@dataclass(frozen=True)
class Pattern:
    """Shape pattern whose dims may be variables or fixed labels."""

    kind: str
    dims: tuple[object, ...] = ()  # SignatureVar | str


def unify(pattern: Pattern, shape: Shape, env: dict[str, str]) -> Optional[dict[str, str]]:
    """Match ``shape`` against ``pattern`` extending ``env``; None on failure."""
    if pattern.kind != shape.kind:
        return None
    out = dict(env)
    for p, d in zip(pattern.dims, shape.dims):
        if isinstance(p, SignatureVar):
            bound = out.get(p.name)
            if bound is None:
                out[p.name] = d
            elif bound != d:
                return None
        elif p != d:
            return None
    return out


def substitute(pattern: Pattern, env: dict[str, str]) -> Shape:
    """Instantiate a pattern under a variable binding produced by unify."""
    dims = []
    for p in pattern.dims:
        if isinstance(p, SignatureVar):
            dims.append(env[p.name])
        else:
            dims.append(p)
    return Shape(pattern.kind, tuple(dims))
