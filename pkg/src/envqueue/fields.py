"""Scalar fields on the environment space.

Rates, drifts and diffusion entries are all built from a small catalog of
named fields so that a model can be written down in a config file and
evaluated both from Python and inside compiled simulation kernels.  Every
field encodes to ``(kind_code, params)`` with a fixed parameter width.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import SpecError

PARAM_WIDTH = 36
MAX_KNOTS = 16

CONST, AFFINE, POLE, TABLE = 0, 1, 2, 3
_CODES = {"const": CONST, "affine": AFFINE, "pole": POLE, "table": TABLE}


@dataclass(frozen=True)
class Field:
    """A named scalar function of the environment point ``z``.

    kinds
    -----
    const   ``value``
    affine  ``c0 + c1*z[0] + c2*z[1]``
    pole    ``theta / (at - z[coord])``
    table   piecewise-linear interpolation in ``z[coord]``, flat outside the knots
    """

    kind: str
    params: tuple[float, ...]
    coord: int = 0

    def __post_init__(self):
        if self.kind not in _CODES:
            raise SpecError(f"unknown field kind {self.kind!r}")
        if self.kind == "table":
            m = len(self.params) // 2
            if m < 2 or len(self.params) != 2 * m:
                raise SpecError("table field needs at least 2 knots given as xs + ys")
            xs = self.params[:m]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise SpecError("table knots must be strictly increasing")
        if self.coord not in (0, 1):
            raise SpecError("coord must be 0 or 1")

    def __call__(self, z) -> float:
        """Evaluate at one point: a scalar for 1-D environments or a length-d vector."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return float(self.grid(z[None, :])[0])

    def grid(self, zs) -> np.ndarray:
        """Evaluate on many points: shape (k,) for 1-D or (k, d); a 0-d input gives a 0-d result."""
        zs = np.asarray(zs, dtype=float)
        if zs.ndim == 0:
            return self.grid(zs[None]).reshape(())
        if zs.ndim == 1:
            zs = zs[:, None]
        x0 = zs[:, 0]
        x1 = zs[:, 1] if zs.shape[1] > 1 else np.zeros_like(x0)
        p = self.params
        if self.kind == "const":
            return np.full_like(x0, p[0])
        if self.kind == "affine":
            return p[0] + p[1] * x0 + p[2] * x1
        x = x0 if self.coord == 0 else x1
        if self.kind == "pole":
            with np.errstate(divide="ignore"):
                return p[0] / (p[1] - x)
        m = len(p) // 2
        return np.interp(x, p[:m], p[m:])

    def encode(self) -> tuple[int, np.ndarray]:
        out = np.zeros(PARAM_WIDTH)
        p = self.params
        if self.kind == "const":
            out[0] = p[0]
        elif self.kind == "affine":
            out[: len(p)] = p
        elif self.kind == "pole":
            out[0], out[1], out[2] = p[0], p[1], self.coord
        else:
            m = len(p) // 2
            if m > MAX_KNOTS:
                raise SpecError(f"compiled tables take at most {MAX_KNOTS} knots, got {m}")
            out[0], out[1] = m, self.coord
            out[2 : 2 + m] = p[:m]
            out[2 + m : 2 + 2 * m] = p[m:]
        return _CODES[self.kind], out

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        p = self.params
        if self.kind == "const":
            d["value"] = p[0]
        elif self.kind == "affine":
            d["coef"] = list(p)
        elif self.kind == "pole":
            d.update(theta=p[0], at=p[1], coord=self.coord)
        else:
            m = len(p) // 2
            d.update(xs=list(p[:m]), ys=list(p[m:]), coord=self.coord)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Field":
        kind = d["kind"]
        if kind == "const":
            return const(d["value"])
        if kind == "affine":
            return affine(*d["coef"])
        if kind == "pole":
            return pole(d["theta"], d.get("at", 1.0), d.get("coord", 0))
        if kind == "table":
            return table(d["xs"], d["ys"], d.get("coord", 0))
        raise SpecError(f"unknown field kind {kind!r}")


def const(value: float) -> Field:
    return Field("const", (float(value),))


def affine(c0: float, c1: float = 0.0, c2: float = 0.0) -> Field:
    return Field("affine", (float(c0), float(c1), float(c2)))


def linear(slope: float, intercept: float = 0.0, coord: int = 0) -> Field:
    if coord == 0:
        return affine(intercept, slope, 0.0)
    return affine(intercept, 0.0, slope)


def pole(theta: float, at: float = 1.0, coord: int = 0) -> Field:
    """``theta / (at - z)``; the pushing drift of the pole family."""
    return Field("pole", (float(theta), float(at)), coord)


def table(xs, ys, coord: int = 0) -> Field:
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    if len(xs) != len(ys):
        raise SpecError("table xs and ys differ in length")
    return Field("table", tuple(xs) + tuple(ys), coord)


def encode_many(fields) -> tuple[np.ndarray, np.ndarray]:
    kinds = np.zeros(len(fields), dtype=np.int64)
    params = np.zeros((len(fields), PARAM_WIDTH))
    for i, f in enumerate(fields):
        kinds[i], params[i] = f.encode()
    return kinds, params


@njit(cache=True)
def feval(kind, p, z0, z1):
    if kind == 0:
        return p[0]
    if kind == 1:
        return p[0] + p[1] * z0 + p[2] * z1
    x = z0 if p[2 if kind == 2 else 1] == 0 else z1
    if kind == 2:
        return p[0] / (p[1] - x)
    m = int(p[0])
    if x <= p[2]:
        return p[2 + m]
    if x >= p[1 + m]:
        return p[1 + 2 * m]
    for i in range(m - 1):
        a = p[2 + i]
        b = p[3 + i]
        if x <= b:
            w = (x - a) / (b - a)
            return p[2 + m + i] * (1.0 - w) + p[3 + m + i] * w
    return p[1 + 2 * m]
