"""Exact dyadic incidence counting and the inequality evaluators built on it."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import ScaleMismatch, column_y_range, meets_array, slope_range_b
from .sets import CellFamily, DualCellFamily, katz_tao_constant

_CHUNK = 1 << 22  # elements per vectorised block


def _check(P, T) -> None:
    if P.m != T.m:
        raise ScaleMismatch(f"scale mismatch: m={P.m} vs m={T.m}")


def _packed(cells: np.ndarray, m: int) -> np.ndarray:
    off = np.int64(1) << np.int64(m)
    width = np.int64(3) << np.int64(m)
    return (cells[:, 0] + off) * width + (cells[:, 1] + off)


class IncidenceSet:
    """All incident (cell, tube) pairs of a configuration, as index arrays.

    ``p_idx[i]`` and ``t_idx[i]`` index rows of ``P.cells`` and ``T.cells``.
    Pairs are sorted by tube, then cell.
    """

    def __init__(self, P: CellFamily, T: DualCellFamily, p_idx, t_idx):
        self.P = P
        self.T = T
        p_idx = np.asarray(p_idx, dtype=np.int64)
        t_idx = np.asarray(t_idx, dtype=np.int64)
        order = np.lexsort((p_idx, t_idx))
        self.p_idx = p_idx[order]
        self.t_idx = t_idx[order]

    @property
    def count(self) -> int:
        return len(self.p_idx)

    def __len__(self) -> int:
        return self.count

    def per_tube(self) -> np.ndarray:
        """|P_T| for every tube row."""
        return np.bincount(self.t_idx, minlength=len(self.T)).astype(np.int64)

    def per_cell(self) -> np.ndarray:
        """|T_p| for every cell row."""
        return np.bincount(self.p_idx, minlength=len(self.P)).astype(np.int64)

    def cells_of_tube(self, j: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.t_idx, [j, j + 1])
        return self.p_idx[lo:hi]

    def tubes_of_cell(self, i: int) -> np.ndarray:
        return np.sort(self.t_idx[self.p_idx == i])

    def tube_fiber(self, j: int) -> CellFamily:
        return self.P.subset(self.cells_of_tube(j))

    def restrict(self, p_mask=None, t_mask=None) -> "IncidenceSet":
        """Incidences of the sub-configuration selected by boolean masks."""
        pm = np.ones(len(self.P), bool) if p_mask is None else np.asarray(p_mask, bool)
        tm = np.ones(len(self.T), bool) if t_mask is None else np.asarray(t_mask, bool)
        keep = pm[self.p_idx] & tm[self.t_idx]
        p_new = np.cumsum(pm) - 1
        t_new = np.cumsum(tm) - 1
        return IncidenceSet(
            self.P.subset(pm), self.T.subset(tm), p_new[self.p_idx[keep]], t_new[self.t_idx[keep]]
        )

    def pairs(self) -> np.ndarray:
        """(count, 4) array of rows x, y, a, b."""
        return np.column_stack([self.P.cells[self.p_idx], self.T.cells[self.t_idx]])

    def same_pairs(self, other: "IncidenceSet") -> bool:
        a = self.pairs()
        b = other.pairs()
        if a.shape != b.shape:
            return False
        return np.array_equal(a[np.lexsort(a.T[::-1])], b[np.lexsort(b.T[::-1])])

    def per_tube_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tube_a", "tube_b", "count"])
        for (a, b), c in zip(self.T.cells.tolist(), self.per_tube().tolist()):
            w.writerow([a, b, c])
        return buf.getvalue()


def merge(parts: list[IncidenceSet]) -> IncidenceSet:
    """Combine incidence sets computed on tube-slices of one configuration.

    Every part must share P; tube families are unioned.  The operation is
    associative, so per-slice results can be produced independently.
    """
    if not parts:
        raise ValueError("nothing to merge")
    P = parts[0].P
    T = parts[0].T
    for q in parts[1:]:
        if q.P != P:
            raise ValueError("merging incidence sets over different cell families")
        T = T.union(q.T)
    p_all, t_all = [], []
    for q in parts:
        p_all.append(q.p_idx)
        t_all.append(T.index_of(q.T.cells)[q.t_idx])
    pairs = np.unique(np.column_stack([np.concatenate(t_all), np.concatenate(p_all)]), axis=0)
    return IncidenceSet(P, T, pairs[:, 1], pairs[:, 0])


def _expand(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenate ranges start..start+count-1."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64)
    rep = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return rep + np.arange(total, dtype=np.int64)


def _sweep(P: CellFamily, T: DualCellFamily) -> tuple[np.ndarray, np.ndarray]:
    m = P.m
    n = 1 << m
    keys = _packed(P.cells, m)
    width = np.int64(3 * n)
    cols = np.unique(P.cells[:, 0])
    ta, tb = T.cells[:, 0], T.cells[:, 1]
    out_p, out_t = [], []
    step = max(1, _CHUNK // max(len(cols), 1))
    for s in range(0, len(T), step):
        a = ta[s : s + step, None]
        b = tb[s : s + step, None]
        ylo, yhi = column_y_range(a, b, cols[None, :], m)
        # the column's rows live in [-n, 2n); clipping keeps keys inside it
        ylo = np.clip(ylo, -n, 2 * n - 1)
        yhi = np.clip(yhi, -n, 2 * n - 1)
        base = (cols[None, :] + n) * width
        left = np.searchsorted(keys, base + ylo + n, side="left")
        right = np.searchsorted(keys, base + yhi + n, side="right")
        cnt = np.where(yhi >= ylo, right - left, 0)
        nz = cnt > 0
        if not nz.any():
            continue
        tubes = np.broadcast_to(np.arange(s, s + a.shape[0])[:, None], cnt.shape)[nz]
        c = cnt[nz]
        out_p.append(_expand(left[nz], c))
        out_t.append(np.repeat(tubes, c))
    if not out_p:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(out_p), np.concatenate(out_t)


def _dual_sweep(P: CellFamily, T: DualCellFamily) -> tuple[np.ndarray, np.ndarray]:
    m = P.m
    n = 1 << m
    keys = _packed(T.cells, m)
    width = np.int64(3 * n)
    slopes = np.unique(T.cells[:, 0])
    px, py = P.cells[:, 0], P.cells[:, 1]
    out_p, out_t = [], []
    step = max(1, _CHUNK // max(len(slopes), 1))
    for s in range(0, len(P), step):
        x = px[s : s + step, None]
        y = py[s : s + step, None]
        blo, bhi = slope_range_b(x, y, slopes[None, :], m)
        blo = np.clip(blo, -n, 2 * n - 1)
        bhi = np.clip(bhi, -n, 2 * n - 1)
        base = (slopes[None, :] + n) * width
        left = np.searchsorted(keys, base + blo + n, side="left")
        right = np.searchsorted(keys, base + bhi + n, side="right")
        cnt = np.where(bhi >= blo, right - left, 0)
        nz = cnt > 0
        if not nz.any():
            continue
        cells = np.broadcast_to(np.arange(s, s + x.shape[0])[:, None], cnt.shape)[nz]
        c = cnt[nz]
        out_t.append(_expand(left[nz], c))
        out_p.append(np.repeat(cells, c))
    if not out_p:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(out_p), np.concatenate(out_t)


def _brute(P: CellFamily, T: DualCellFamily) -> tuple[np.ndarray, np.ndarray]:
    out_p, out_t = [], []
    step = max(1, _CHUNK // max(len(P), 1))
    for s in range(0, len(T), step):
        blk = T.cells[s : s + step]
        hit = meets_array(
            P.cells[None, :, 0], P.cells[None, :, 1], blk[:, 0, None], blk[:, 1, None], P.m
        )
        t, p = np.nonzero(hit)
        out_p.append(p)
        out_t.append(t + s)
    if not out_p:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(out_p), np.concatenate(out_t)


_METHODS = {"sweep": _sweep, "dual": _dual_sweep, "brute": _brute}


def incidences(P: CellFamily, T: DualCellFamily, method: str = "sweep") -> IncidenceSet:
    """Every (cell, tube) pair satisfying :func:`grid.cell_meets_tube`.

    ``sweep`` walks the occupied columns of P and looks up the exact row
    range of each tube; ``dual`` does the same in the slope/intercept plane;
    ``brute`` evaluates the predicate on all pairs and serves as the oracle.
    """
    _check(P, T)
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}")
    if len(P) == 0 or len(T) == 0:
        z = np.empty(0, np.int64)
        return IncidenceSet(P, T, z, z)
    p, t = _METHODS[method](P, T)
    return IncidenceSet(P, T, p, t)


def count_incidences(P: CellFamily, T: DualCellFamily, method: str = "sweep") -> int:
    return incidences(P, T, method).count


# ---------------------------------------------------------------------------
# bounds


def fu_ren_exponent(s: float, t: float) -> float:
    return (s * s + s * t + t * t) / (s + t)


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    ratio: float
    params: dict = field(default_factory=dict)
    log2_lhs: float | None = None
    log2_rhs: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def fu_ren_check(
    P: CellFamily,
    T: DualCellFamily,
    s: float,
    t: float,
    eps: float = 0.05,
    K_P: float | None = None,
    K_L: float | None = None,
    count: int | None = None,
) -> BoundReport:
    """Evaluate both sides of the quantified Fu-Ren incidence inequality.

    lhs = |I|^(s+t),  rhs = delta^(-st(1+eps)) K_P^t K_L^s |P|^s |T|^t.
    Katz-Tao constants default to the measured ones.  Work is done in log2 so
    large configurations do not overflow.
    """
    _check(P, T)
    if not (0 < s <= 1 and 0 < t <= 1):
        raise ValueError("need s, t in (0, 1]")
    if len(P) == 0 or len(T) == 0:
        raise ValueError("zero covering number")
    if K_P is None:
        K_P = katz_tao_constant(P, s).best_constant
    if K_L is None:
        K_L = katz_tao_constant(T, t).best_constant
    n_inc = count_incidences(P, T) if count is None else count
    m = P.m
    log_rhs = (
        s * t * (1 + eps) * m
        + t * math.log2(K_P)
        + s * math.log2(K_L)
        + s * math.log2(len(P))
        + t * math.log2(len(T))
    )
    params = {"s": s, "t": t, "eps": eps, "K_P": K_P, "K_L": K_L, "m": m, "incidences": n_inc}
    if n_inc == 0:
        return BoundReport(0.0, 2.0**log_rhs, 0.0, params, None, log_rhs)
    log_lhs = (s + t) * math.log2(n_inc)
    return BoundReport(
        2.0**log_lhs, 2.0**log_rhs, 2.0 ** (log_lhs - log_rhs), params, log_lhs, log_rhs
    )


class TwoEndsViolation(ValueError):
    def __init__(self, tube, center, radius, count, M):
        self.tube = tube
        self.center = center
        self.radius = radius
        self.count = count
        super().__init__(
            f"2-ends condition fails for tube {tube}: ball at "
            f"({center[0]:.6g}, {center[1]:.6g}) of radius {radius:g} holds {count} > {M}/3 cells"
        )


def max_points_in_disk(pts: np.ndarray, r: float) -> tuple[int, tuple[float, float]]:
    """Largest number of points in a closed disk of radius r, with a centre achieving it.

    Every optimal disk can be moved until a point sits on its boundary, so an
    angular sweep around each point is exhaustive.
    """
    pts = np.asarray(pts, dtype=float)
    n = len(pts)
    if n == 0:
        return 0, (0.0, 0.0)
    best, where = 1, (float(pts[0, 0]), float(pts[0, 1]))
    tol = 1e-12
    for i in range(n):
        d = pts - pts[i]
        dist = np.hypot(d[:, 0], d[:, 1])
        near = (dist <= 2 * r + tol) & (np.arange(n) != i)
        if near.sum() + 1 <= best:
            continue
        ang = np.arctan2(d[near, 1], d[near, 0])
        half = np.arccos(np.clip(dist[near] / (2 * r), -1.0, 1.0))
        enter = ang - half
        leave = ang + half
        # arcs of admissible centres; wrapped arcs already contain angle 0
        ev_ang = np.concatenate([enter, leave])
        ev_typ = np.concatenate([np.full(len(enter), -1), np.full(len(leave), 1)])
        ev_ang = np.mod(ev_ang, 2 * np.pi)
        start = 1 + int(np.sum(np.mod(enter, 2 * np.pi) > np.mod(leave, 2 * np.pi)))
        order = np.lexsort((ev_typ, ev_ang))
        cur = start
        if cur > best:
            best, where = cur, _on_circle(pts[i], r, 0.0)
        for k in order:
            cur -= ev_typ[k]
            if cur > best:
                best, where = cur, _on_circle(pts[i], r, float(ev_ang[k]))
    return best, where


def _on_circle(p, r, ang):
    return (float(p[0] + r * math.cos(ang)), float(p[1] + r * math.sin(ang)))


def two_ends_check(
    tubes: DualCellFamily, per_tube_sets: dict, r: float
) -> BoundReport:
    """Double-counting bound |union P_T| vs |T|^(1/2) M r^(1/2).

    ``per_tube_sets`` maps (a, b) tube indices to the CellFamily of cells
    chosen on that tube.  A cell lies in a ball when its centre does.
    """
    if len(tubes) == 0:
        raise ValueError("no tubes")
    sizes = set()
    union = []
    for a, b in tubes.cells.tolist():
        F = per_tube_sets.get((a, b))
        if F is None:
            raise ValueError(f"no cell set for tube {(a, b)}")
        _check(F, tubes)
        if len(F) == 0:
            raise ValueError(f"empty cell set for tube {(a, b)}")
        sizes.add(len(F))
        if not meets_array(F.cells[:, 0], F.cells[:, 1], a, b, F.m).all():
            raise ValueError(f"tube {(a, b)} carries a cell it does not meet")
        union.append(F.cells)
    if len(sizes) != 1:
        raise ValueError(f"per-tube sets must share one size, got {sorted(sizes)}")
    M = sizes.pop()
    for a, b in tubes.cells.tolist():
        F = per_tube_sets[(a, b)]
        c, where = max_points_in_disk(F.centers(), r)
        if 3 * c > M:
            raise TwoEndsViolation((a, b), where, r, c, M)
    lhs = len(np.unique(np.concatenate(union), axis=0))
    rhs = math.sqrt(len(tubes)) * M * math.sqrt(r)
    return BoundReport(
        float(lhs), rhs, lhs / rhs, {"M": M, "r": r, "tubes": len(tubes), "m": tubes.m}
    )


def max_lines_per_cell(P: CellFamily, T: DualCellFamily, inc: IncidenceSet | None = None) -> int:
    """M = max_p |T_p|; also asserts |pairs| <= M |P|."""
    if inc is None:
        inc = incidences(P, T)
    if len(P) == 0:
        return 0
    M = int(inc.per_cell().max(initial=0))
    if inc.count > M * len(P):
        raise AssertionError("pair count exceeds M|P|")
    return M
