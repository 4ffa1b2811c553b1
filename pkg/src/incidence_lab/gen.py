"""Configuration generators with ground-truth labels."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .grid import band_bounds
from .sets import CellFamily, DualCellFamily, katz_tao_constant


@dataclass
class SheafConfig:
    P: CellFamily
    L: DualCellFamily
    cliques: list[tuple[CellFamily, DualCellFamily]]
    point_labels: np.ndarray  # clique index per row of P.cells
    tube_labels: np.ndarray  # clique index per row of L.cells
    s: float
    t: float
    m: int
    k: int  # Delta = 2^-k
    N: int
    K_P: float = 0.0
    K_L: float = 0.0
    anchors: list[dict] = field(default_factory=list)

    def labels_json(self) -> dict:
        return {
            "s": self.s,
            "t": self.t,
            "m": self.m,
            "k": self.k,
            "N": self.N,
            "K_P": self.K_P,
            "K_L": self.K_L,
            "point_labels": self.point_labels.tolist(),
            "tube_labels": self.tube_labels.tolist(),
            "anchors": self.anchors,
        }

    def dumps_labels(self) -> str:
        return json.dumps(self.labels_json(), sort_keys=True)


def _spread(L: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n of the indices 0..L-1, split as evenly as possible by recursive halving.

    When a block's quota is odd the extra index goes to a random half, so
    the selection is balanced at every dyadic scale.
    """
    n = min(n, L)
    out: list[int] = []

    def rec(lo: int, length: int, q: int) -> None:
        if q <= 0:
            return
        if q >= length:
            out.extend(range(lo, lo + length))
            return
        if length == 1:
            out.append(lo)
            return
        left = length // 2
        right = length - left
        ql = q // 2
        if q % 2:
            ql += int(rng.integers(0, 2))
        ql = min(max(ql, q - right), left)
        rec(lo, left, ql)
        rec(lo + left, right, q - ql)

    rec(0, L, n)
    return np.array(sorted(out), dtype=np.int64)


def sheaf_config(
    s: float, t: float, m: int, seed: int = 0, n_cliques: int | None = None
) -> SheafConfig:
    """Planted extremal configuration: N cliques, each a delta x Delta strip of
    points crossed by a packet of nearly parallel tubes."""
    if not (0 < s <= 1 and 0 < t <= 1):
        raise ValueError("need s, t in (0, 1]")
    k = math.ceil(m * t / (s + t))
    e_n = math.ceil(m * s * t / (s + t))
    if k < 1 or k >= m or e_n < 0:
        raise ValueError(f"m={m} too small for s={s}, t={t}")
    N = 2**e_n if n_cliques is None else int(n_cliques)
    if N < 1:
        raise ValueError("need at least one clique")
    rng = np.random.default_rng(seed)
    n = 1 << m
    side = 1 << k
    sub = 1 << (m - k)  # delta-columns per Delta-interval
    n_pts = math.ceil(sub**s - 1e-9)
    n_tubes = math.ceil(side**t - 1e-9)
    perm = rng.permutation(side)
    alo, ahi, blo, bhi = band_bounds(m)
    P_rows, L_rows, p_lab, t_lab, anchors = [], [], [], [], []
    cliques = []
    for j in range(N):
        a0 = Fraction(2 * j + 1, N) - 1  # slopes equispaced in [-1, 1)
        c = j % side
        r = (int(perm[c]) + j // side) % side
        xc = Fraction(2 * c + 1, 2 * side)
        yc = Fraction(2 * r + 1, 2 * side)
        b0 = yc - a0 * xc
        cols = c * sub + _spread(sub, n_pts, rng)
        # Y = floor(2^m * (a0 * (X + 1/2) delta + b0))
        pts = []
        for X in cols.tolist():
            val = a0 * (X + Fraction(1, 2)) + b0 * n
            pts.append((X, math.floor(val)))
        pts = [(x, y) for x, y in pts if 0 <= y < n]
        # slope indices A with |(A + 1/2) - a0 2^m| <= 2^k
        a_lo = math.ceil(a0 * n - side - Fraction(1, 2))
        a_hi = math.floor(a0 * n + side - Fraction(1, 2))
        a_lo, a_hi = max(a_lo, alo), min(a_hi, ahi - 1)
        choice = a_lo + _spread(a_hi - a_lo + 1, n_tubes, rng)
        tubes = []
        for A in choice.tolist():
            # intercept index whose centre line passes closest to (xc, yc)
            B = round((yc - Fraction(2 * A + 1, 2 * n) * xc) * n - Fraction(1, 2))
            if blo <= B < bhi:
                tubes.append((A, B))
        P_j = CellFamily(m, pts, allow_empty=True)
        L_j = DualCellFamily(m, tubes, allow_empty=True)
        cliques.append((P_j, L_j))
        P_rows.append(P_j.cells)
        L_rows.append(L_j.cells)
        p_lab.append(np.full(len(P_j), j))
        t_lab.append(np.full(len(L_j), j))
        anchors.append({"slope": str(a0), "x": str(xc), "y": str(yc), "square": [c, r]})
    P, pl = _dedup(np.concatenate(P_rows), np.concatenate(p_lab), m, CellFamily)
    L, tl = _dedup(np.concatenate(L_rows), np.concatenate(t_lab), m, DualCellFamily)
    cfg = SheafConfig(P, L, cliques, pl, tl, s, t, m, k, N, anchors=anchors)
    cfg.K_P = katz_tao_constant(P, s).best_constant
    cfg.K_L = katz_tao_constant(L, t).best_constant
    return cfg


def _dedup(rows: np.ndarray, labels: np.ndarray, m: int, cls):
    """Sorted unique rows; a row planted twice keeps its first label."""
    uniq, first = np.unique(rows, axis=0, return_index=True)
    return cls(m, uniq), labels[first]


def cantor_set(m: int, s: float, H: int = 1, seed: int | None = None) -> CellFamily:
    """Uniform Cantor family with 2^round(Hs) children per H-block."""
    if H < 1 or m % H:
        raise ValueError(f"block size H={H} does not divide m={m}")
    if not 0 <= s <= 2:
        raise ValueError("need s in [0, 2]")
    kids = 1 << round(H * s)
    block = 1 << H
    if kids > block * block:
        raise ValueError("too many children per block")
    rng = np.random.default_rng(seed) if seed is not None else None
    even = np.unique(np.linspace(0, block * block - 1, kids).round().astype(np.int64))
    cells = np.zeros((1, 2), dtype=np.int64)
    for _ in range(m // H):
        if rng is None:
            picks = np.broadcast_to(even, (len(cells), kids))
        else:
            picks = np.argsort(rng.random((len(cells), block * block)), axis=1)[:, :kids]
        dx, dy = picks // block, picks % block
        cells = np.column_stack(
            [
                (cells[:, 0, None] * block + dx).ravel(),
                (cells[:, 1, None] * block + dy).ravel(),
            ]
        )
    return CellFamily(m, cells)


def cantor_tubes(m: int, t: float, H: int = 1, seed: int | None = None) -> DualCellFamily:
    """Cantor family moved into the dual band: slope index a = x - 2^(m-1)."""
    F = cantor_set(m, t, H, seed)
    half = 1 << (m - 1)
    return DualCellFamily(m, np.column_stack([F.cells[:, 0] - half, F.cells[:, 1]]))


def random_family(m: int, count: int, seed: int | None = 0, kind: str = "cell"):
    """Uniform sample without replacement of ``count`` cells (or dual cells)."""
    rng = np.random.default_rng(seed)
    n = 1 << m
    if kind == "cell":
        total = n * n
        if not 0 < count <= total:
            raise ValueError(f"count must be in 1..{total}")
        idx = rng.choice(total, size=count, replace=False)
        return CellFamily(m, np.column_stack([idx // n, idx % n]))
    if kind == "dual":
        alo, ahi, blo, bhi = band_bounds(m)
        w = bhi - blo
        total = (ahi - alo) * w
        if not 0 < count <= total:
            raise ValueError(f"count must be in 1..{total}")
        idx = rng.choice(total, size=count, replace=False)
        return DualCellFamily(m, np.column_stack([idx // w + alo, idx % w + blo]))
    raise ValueError(f"unknown kind {kind!r}")
