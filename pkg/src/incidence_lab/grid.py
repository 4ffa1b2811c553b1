"""Dyadic geometry kernel.

Cells are dyadic squares ``[x*d, (x+1)*d) x [y*d, (y+1)*d)`` with ``d = 2**-m``.
Dual cells are the same kind of square in the (slope, intercept) plane; each one
stands for the dyadic tube swept by the lines ``y = a*x + b`` it contains.

Every incidence decision is made in exact integer arithmetic after scaling by
``2**(2m)``.  Floating point only appears in the diagnostic line metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .sets import CellFamily, DualCellFamily


class ScaleMismatch(ValueError):
    pass


class DomainError(ValueError):
    """An index lies outside the admissible band."""


@dataclass(frozen=True)
class Scale:
    m: int
    H: int | None = None

    def __post_init__(self):
        # m == 0 is the trivial one-cell grid produced by rescaling onto a delta-cell
        if self.m < 0:
            raise ValueError(f"scale exponent must be >= 0, got m={self.m}")
        if self.H is not None and (self.H < 1 or self.m % self.H):
            raise ValueError(f"block size H={self.H} does not divide m={self.m}")

    @property
    def delta(self) -> float:
        return 2.0 ** -self.m

    @property
    def side(self) -> int:
        return 1 << self.m


# Admissible band shared by dual cells and (extended) cells:
# first index in [-2^m, 2^m), second index in [-2^m, 2*2^m).
def band_bounds(m: int) -> tuple[int, int, int, int]:
    n = 1 << m
    return -n, n, -n, 2 * n


@dataclass(frozen=True, order=True)
class Cell:
    x: int
    y: int
    scale: Scale

    def __post_init__(self):
        n = self.scale.side
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise DomainError(f"cell ({self.x},{self.y}) outside [0,{n})^2")


@dataclass(frozen=True, order=True)
class DualCell:
    a: int
    b: int
    scale: Scale

    def __post_init__(self):
        alo, ahi, blo, bhi = band_bounds(self.scale.m)
        if not (alo <= self.a < ahi and blo <= self.b < bhi):
            raise DomainError(f"dual cell ({self.a},{self.b}) outside admissible band")

    @property
    def slope(self) -> float:
        return self.a * self.scale.delta


@dataclass(frozen=True)
class Line:
    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("line coefficients must be finite")

    def __call__(self, x: float) -> float:
        return self.a * x + self.b


@dataclass(frozen=True)
class Rect:
    center: tuple[float, float]
    direction: tuple[float, float]
    length: float
    width: float

    def __post_init__(self):
        if not (self.length >= self.width > 0):
            raise ValueError("need length >= width > 0")

    @property
    def diameter(self) -> float:
        return math.hypot(self.length, self.width)

    def corners(self) -> np.ndarray:
        cx, cy = self.center
        ux, uy = self.direction
        nx, ny = -uy, ux
        hl, hw = self.length / 2, self.width / 2
        return np.array(
            [
                [cx + sl * hl * ux + sw * hw * nx, cy + sl * hl * uy + sw * hw * ny]
                for sl in (-1, 1)
                for sw in (-1, 1)
            ]
        )

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean mask of the (n, 2) points lying in the closed rectangle."""
        d = np.asarray(pts, dtype=float) - np.asarray(self.center)
        ux, uy = self.direction
        along = d[:, 0] * ux + d[:, 1] * uy
        across = -d[:, 0] * uy + d[:, 1] * ux
        eps = 1e-12
        return (np.abs(along) <= self.length / 2 + eps) & (np.abs(across) <= self.width / 2 + eps)


def _check_scales(p_scale: Scale, t_scale: Scale) -> None:
    if p_scale.m != t_scale.m:
        raise ScaleMismatch(f"scale mismatch: m={p_scale.m} vs m={t_scale.m}")


def cell_meets_tube(p: Cell, T: DualCell) -> bool:
    """Closed-interval test: some line of the tube passes through the cell."""
    _check_scales(p.scale, T.scale)
    n = p.scale.side
    prods = [a * x for a in (T.a, T.a + 1) for x in (p.x, p.x + 1)]
    lo = min(prods) + T.b * n
    hi = max(prods) + (T.b + 1) * n
    return lo <= (p.y + 1) * n and hi >= p.y * n


def meets_array(px, py, ta, tb, m: int) -> np.ndarray:
    """Vectorised :func:`cell_meets_tube` over broadcastable index arrays.

    int64 is enough for m <= 30: |a*x| <= 2^60 and |b*2^m| < 2^61.
    """
    if m > 30:
        raise ValueError("vectorised predicate supports m <= 30")
    n = np.int64(1) << np.int64(m)
    px = np.asarray(px, dtype=np.int64)
    py = np.asarray(py, dtype=np.int64)
    ta = np.asarray(ta, dtype=np.int64)
    tb = np.asarray(tb, dtype=np.int64)
    p00 = ta * px
    p01 = ta * (px + 1)
    p10 = (ta + 1) * px
    p11 = (ta + 1) * (px + 1)
    lo = np.minimum(np.minimum(p00, p01), np.minimum(p10, p11)) + tb * n
    hi = np.maximum(np.maximum(p00, p01), np.maximum(p10, p11)) + (tb + 1) * n
    return (lo <= (py + 1) * n) & (hi >= py * n)


def column_y_range(ta, tb, X, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive range of row indices Y met by tube (ta, tb) in column X.

    Cell (X, Y) meets the tube iff ``ylo <= Y <= yhi``; the interval may be empty.
    """
    n = np.int64(1) << np.int64(m)
    ta = np.asarray(ta, dtype=np.int64)
    tb = np.asarray(tb, dtype=np.int64)
    X = np.asarray(X, dtype=np.int64)
    p00 = ta * X
    p01 = ta * (X + 1)
    p10 = (ta + 1) * X
    p11 = (ta + 1) * (X + 1)
    lo = np.minimum(np.minimum(p00, p01), np.minimum(p10, p11)) + tb * n
    hi = np.maximum(np.maximum(p00, p01), np.maximum(p10, p11)) + (tb + 1) * n
    # (Y+1)*n >= lo  <=>  Y >= ceil(lo/n) - 1 ;  Y*n <= hi  <=>  Y <= floor(hi/n)
    ylo = -((-lo) // n) - 1
    yhi = hi // n
    return ylo, yhi


def slope_range_b(px, py, ta, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive range of intercept indices b for which (ta, b) meets cell (px, py).

    Dual-space counterpart of :func:`column_y_range`, used by the dual sweep.
    """
    n = np.int64(1) << np.int64(m)
    px = np.asarray(px, dtype=np.int64)
    py = np.asarray(py, dtype=np.int64)
    ta = np.asarray(ta, dtype=np.int64)
    p00 = ta * px
    p01 = ta * (px + 1)
    p10 = (ta + 1) * px
    p11 = (ta + 1) * (px + 1)
    pmin = np.minimum(np.minimum(p00, p01), np.minimum(p10, p11))
    pmax = np.maximum(np.maximum(p00, p01), np.maximum(p10, p11))
    # pmin + b*n <= (py+1)*n  and  pmax + (b+1)*n >= py*n
    bhi = ((py + 1) * n - pmin) // n
    blo = -((-(py * n - pmax - n)) // n)
    return blo, bhi


def dual_point(x: float, y: float) -> Line:
    return Line(x, y)


def dual_line(ell: Line) -> tuple[float, float]:
    return (-ell.a, ell.b)


def line_metric(l1: Line, l2: Line) -> float:
    """Distance between lines: |sin(angle difference)| + distance of perpendicular feet.

    Diagnostic only.  The translation representative is the foot of the
    perpendicular from the origin.
    """
    th1, th2 = math.atan(l1.a), math.atan(l2.a)
    f1 = _foot(l1)
    f2 = _foot(l2)
    return abs(math.sin(th1 - th2)) + math.hypot(f1[0] - f2[0], f1[1] - f2[1])


def _foot(ell: Line) -> tuple[float, float]:
    s = 1.0 + ell.a * ell.a
    return (-ell.a * ell.b / s, ell.b / s)


def dualize_config(P: CellFamily, T: DualCellFamily) -> tuple[CellFamily, DualCellFamily]:
    """Swap the roles of points and lines.

    Dual cell (a, b) becomes the cell (-a-1, b); cell (x, y) becomes the dual
    cell (x, y).  Incidence is preserved exactly under the closed convention.
    The returned cell family lives in the extended band, not in [0,1)^2.
    """
    from .sets import CellFamily, DualCellFamily

    _check_scales(P.scale, T.scale)
    tc = T.cells
    p_star = np.column_stack([-tc[:, 0] - 1, tc[:, 1]]) if len(tc) else np.empty((0, 2), np.int64)
    l_star = P.cells.copy()
    return (
        CellFamily(P.scale, p_star, domain="band", allow_empty=True),
        DualCellFamily(P.scale, l_star, allow_empty=True),
    )


def rescale(Q: Cell, P: CellFamily) -> CellFamily:
    """Blow the square ``Q`` (scale 2^-k) up to [0,1)^2; P moves to scale 2^-(m-k)."""
    return rescale_at(Q.x, Q.y, Q.scale.m, P)


def rescale_at(qx: int, qy: int, k: int, P: CellFamily) -> CellFamily:
    """Same as :func:`rescale` with Q given by indices at level ``k`` (k may be 0)."""
    from .sets import CellFamily

    m = P.scale.m
    if not 0 <= k <= m:
        raise ValueError(f"need 0 <= k <= m, got k={k}, m={m}")
    shift = m - k
    c = P.cells
    inside = ((c[:, 0] >> shift) == qx) & ((c[:, 1] >> shift) == qy)
    if not inside.all():
        raise DomainError("rescale: family not contained in Q")
    mask = (1 << shift) - 1
    out = np.column_stack([c[:, 0] & mask, c[:, 1] & mask])
    return CellFamily(Scale(shift), out, allow_empty=True)
