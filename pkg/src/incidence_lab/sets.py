"""Cell families, dyadic covering numbers and non-concentration scans."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import Cell, DomainError, DualCell, Line, Scale, band_bounds

# A Euclidean r-ball meets at most four of the scanned 2r-boxes, and every
# scanned box sits inside a ball of radius sqrt(2)*r.
OVERLAP = 4


class FamilyFormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def _normalize(cells) -> np.ndarray:
    arr = np.asarray(cells, dtype=np.int64)
    if arr.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    arr = np.unique(arr, axis=0)  # lexicographic (x, then y) and deduplicated
    arr.setflags(write=False)
    return arr


class _Family:
    kind = "?"

    def __init__(self, scale: Scale | int, cells, *, allow_empty: bool = False):
        if isinstance(scale, int):
            scale = Scale(scale)
        self.scale = scale
        self.cells = _normalize(cells)
        if not allow_empty and len(self.cells) == 0:
            raise ValueError(f"empty {self.kind} family")
        self._check_domain()

    def _check_domain(self) -> None:
        raise NotImplementedError

    @property
    def m(self) -> int:
        return self.scale.m

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self):
        return iter(self.elements())

    def __eq__(self, other) -> bool:
        return (
            type(self) is type(other)
            and self.scale.m == other.scale.m
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.kind, self.scale.m, self.cells.tobytes()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(m={self.m}, n={len(self)})"

    def _like(self, cells):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.cells = _normalize(cells)
        return new

    def subset(self, mask_or_idx) -> "_Family":
        return self._like(self.cells[mask_or_idx])

    def union(self, other: "_Family") -> "_Family":
        _same_scale(self, other)
        return self._like(np.concatenate([self.cells, other.cells]))

    def difference(self, other: "_Family") -> "_Family":
        _same_scale(self, other)
        return self.subset(~self.contains_rows(other.cells))

    def contains_rows(self, rows: np.ndarray) -> np.ndarray:
        """Mask over ``self.cells`` of rows that also occur in ``rows``."""
        if len(rows) == 0 or len(self) == 0:
            return np.zeros(len(self), dtype=bool)
        a = _keys(self.cells, self.m)
        b = np.sort(_keys(np.asarray(rows, dtype=np.int64).reshape(-1, 2), self.m))
        pos = np.searchsorted(b, a)
        pos = np.minimum(pos, len(b) - 1)
        return b[pos] == a

    def index_of(self, rows: np.ndarray) -> np.ndarray:
        """Row indices into ``self.cells`` (-1 where absent)."""
        a = _keys(self.cells, self.m)  # sorted because cells are lexicographic
        b = _keys(np.asarray(rows, dtype=np.int64).reshape(-1, 2), self.m)
        pos = np.searchsorted(a, b)
        pos = np.minimum(pos, max(len(a) - 1, 0))
        ok = (len(a) > 0) & (a[pos] == b) if len(a) else np.zeros(len(b), bool)
        return np.where(ok, pos, -1)

    def ancestors(self, k: int) -> np.ndarray:
        if not 0 <= k <= self.m:
            raise ValueError(f"need 0 <= k <= m, got k={k}, m={self.m}")
        return self.cells >> (self.m - k)

    def to_text(self) -> str:
        lines = [f"scale m={self.m} kind={self.kind}"]
        lines += [f"{x} {y}" for x, y in self.cells.tolist()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "scale": {"m": self.m, "H": self.scale.H},
            "kind": self.kind,
            "cells": self.cells.tolist(),
        }


def _keys(cells: np.ndarray, m: int) -> np.ndarray:
    # Shift into the non-negative band before packing; preserves lexicographic order.
    off = np.int64(1) << np.int64(m)
    width = np.int64(3) << np.int64(m)
    return (cells[:, 0] + off) * width + (cells[:, 1] + off)


def _same_scale(a: _Family, b: _Family) -> None:
    if a.m != b.m:
        from .grid import ScaleMismatch

        raise ScaleMismatch(f"scale mismatch: m={a.m} vs m={b.m}")


class CellFamily(_Family):
    """Finite set of dyadic delta-cells.

    ``domain="unit"`` (default) keeps every cell inside [0,1)^2; ``domain="band"``
    admits the wider region used for dualised configurations.
    """

    kind = "cell"

    def __init__(self, scale, cells, *, domain: str = "unit", allow_empty: bool = False):
        if domain not in ("unit", "band"):
            raise ValueError(f"unknown domain {domain!r}")
        self.domain = domain
        super().__init__(scale, cells, allow_empty=allow_empty)

    def _check_domain(self) -> None:
        if len(self.cells) == 0:
            return
        if self.domain == "unit":
            lo, hi = 0, 1 << self.m
            bad = (self.cells < lo) | (self.cells >= hi)
        else:
            alo, ahi, blo, bhi = band_bounds(self.m)
            bad = np.column_stack(
                [
                    (self.cells[:, 0] < alo) | (self.cells[:, 0] >= ahi),
                    (self.cells[:, 1] < blo) | (self.cells[:, 1] >= bhi),
                ]
            )
        if bad.any():
            i = int(np.nonzero(bad.any(axis=1))[0][0])
            raise DomainError(f"cell {tuple(self.cells[i])} outside the {self.domain} domain")

    def elements(self) -> list[Cell]:
        return [Cell(int(x), int(y), self.scale) for x, y in self.cells]

    def centers(self) -> np.ndarray:
        return (self.cells + 0.5) * self.scale.delta


class DualCellFamily(_Family):
    kind = "dual"

    def _check_domain(self) -> None:
        if len(self.cells) == 0:
            return
        alo, ahi, blo, bhi = band_bounds(self.m)
        a, b = self.cells[:, 0], self.cells[:, 1]
        bad = (a < alo) | (a >= ahi) | (b < blo) | (b >= bhi)
        if bad.any():
            i = int(np.nonzero(bad)[0][0])
            raise DomainError(f"dual cell {tuple(self.cells[i])} outside admissible band")

    def elements(self) -> list[DualCell]:
        return [DualCell(int(a), int(b), self.scale) for a, b in self.cells]


def family_of(elements: Sequence[Cell] | Sequence[DualCell]) -> CellFamily | DualCellFamily:
    """Build a family from element objects (all at the same scale)."""
    if not elements:
        raise ValueError("cannot infer a family from no elements")
    scale = elements[0].scale
    if isinstance(elements[0], Cell):
        return CellFamily(scale, [(c.x, c.y) for c in elements])
    return DualCellFamily(scale, [(c.a, c.b) for c in elements])


# ---------------------------------------------------------------------------
# covering numbers and non-concentration


def covering_number(F: _Family, k: int) -> int:
    """Number of distinct dyadic ancestors of F at scale 2^-k."""
    if k > F.m:
        raise ValueError(f"coarser exponent k={k} exceeds m={F.m}")
    if len(F) == 0:
        return 0
    return len(np.unique(F.ancestors(k), axis=0))


@dataclass(frozen=True)
class KTReport:
    """Outcome of a non-concentration scan.

    The scanned balls are squares of side 2r with corners on the r-lattice,
    r = 2^-k dyadic.  The constant is exact for that box family; against
    Euclidean balls it is accurate up to the factor ``OVERLAP`` and, for
    non-dyadic radii, a further 2^s.
    """

    exponent: float
    best_constant: float
    witness_k: int
    witness_anchor: tuple[int, int]
    witness_count: int
    normalized: bool
    size: int
    m: int
    overlap_factor: int = OVERLAP
    per_scale: tuple[float, ...] = field(default=(), repr=False)

    @property
    def radius(self) -> float:
        return 2.0 ** -self.witness_k

    @property
    def witness_center(self) -> tuple[float, float]:
        r = self.radius
        return ((self.witness_anchor[0] + 1) * r, (self.witness_anchor[1] + 1) * r)

    def to_json(self) -> dict:
        return {
            "exponent": self.exponent,
            "best_constant": self.best_constant,
            "witness": {
                "center": list(self.witness_center),
                "radius": self.radius,
                "k": self.witness_k,
                "count": self.witness_count,
            },
            "normalized": self.normalized,
            "size": self.size,
            "m": self.m,
            "overlap_factor": self.overlap_factor,
        }


def box_counts(F: _Family, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts of F-cells in every nonempty 2r-box at r = 2^-k.

    Returns (anchors, counts); the box with anchor (i, j) is
    [i r, (i+2) r) x [j r, (j+2) r).
    """
    anc = F.ancestors(k)
    cells, cnt = np.unique(anc, axis=0, return_counts=True)
    shifts = np.array([[0, 0], [-1, 0], [0, -1], [-1, -1]], dtype=np.int64)
    anchors = (cells[None, :, :] + shifts[:, None, :]).reshape(-1, 2)
    weights = np.tile(cnt, 4)
    uniq, inv = np.unique(anchors, axis=0, return_inverse=True)
    totals = np.bincount(inv.ravel(), weights=weights).astype(np.int64)
    return uniq, totals


def _scan(F: _Family, s: float, normalized: bool) -> KTReport:
    if len(F) == 0:
        raise ValueError("non-concentration scan of an empty family")
    if not 0 <= s <= 2:
        raise ValueError(f"exponent s={s} outside [0, 2]")
    m = F.m
    size = len(F)
    best = -1.0
    wit = (0, (0, 0), 0)
    per_scale = []
    for k in range(m, -1, -1):
        anchors, totals = box_counts(F, k)
        i = int(np.argmax(totals))
        c = int(totals[i])
        if normalized:
            denom = (2.0 ** -k) ** s * size
        else:
            denom = (2.0 ** (m - k)) ** s
        ratio = c / denom
        per_scale.append(ratio)
        if ratio > best:
            best = ratio
            wit = (k, (int(anchors[i, 0]), int(anchors[i, 1])), c)
    return KTReport(
        exponent=s,
        best_constant=best,
        witness_k=wit[0],
        witness_anchor=wit[1],
        witness_count=wit[2],
        normalized=normalized,
        size=size,
        m=m,
        per_scale=tuple(per_scale),
    )


def katz_tao_constant(F: _Family, s: float) -> KTReport:
    """Smallest C with |F cap B(x,r)| <= C (r/delta)^s over the scanned boxes."""
    return _scan(F, s, normalized=False)


def delta_s_constant(F: _Family, s: float) -> KTReport:
    """Smallest C with |F cap B(x,r)| <= C r^s |F| over the scanned boxes."""
    return _scan(F, s, normalized=True)


def tube_family_from_lines(lines: Iterable[Line], m: int) -> DualCellFamily:
    """Dyadic tubes containing at least one of the lines."""
    n = 1 << m
    out = []
    alo, ahi, blo, bhi = band_bounds(m)
    for ell in lines:
        if not -1 <= ell.a < 1:
            raise DomainError(f"slope {ell.a} outside [-1, 1)")
        a = math.floor(ell.a * n)
        b = math.floor(ell.b * n)
        if not (blo <= b < bhi):
            raise DomainError(f"intercept {ell.b} outside [-1, 2)")
        out.append((a, b))
    return DualCellFamily(m, out)


# ---------------------------------------------------------------------------
# serialisation


def parse_family(text: str) -> CellFamily | DualCellFamily:
    rows = text.splitlines()
    header_line = None
    for i, raw in enumerate(rows):
        if raw.strip() and not raw.lstrip().startswith("#"):
            header_line = i
            break
    if header_line is None:
        raise FamilyFormatError("missing header", 1)
    fields = rows[header_line].split()
    if len(fields) != 3 or fields[0] != "scale":
        raise FamilyFormatError("expected 'scale m=<m> kind=<cell|dual>'", header_line + 1)
    try:
        kv = dict(f.split("=", 1) for f in fields[1:])
        m = int(kv["m"])
        kind = kv["kind"]
    except (KeyError, ValueError):
        raise FamilyFormatError("malformed header", header_line + 1) from None
    if kind not in ("cell", "dual"):
        raise FamilyFormatError(f"unknown kind {kind!r}", header_line + 1)
    cells = []
    for i in range(header_line + 1, len(rows)):
        raw = rows[i].strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split()
        if len(parts) != 2:
            raise FamilyFormatError("expected two integers", i + 1)
        try:
            cells.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise FamilyFormatError("expected two integers", i + 1) from None
    try:
        if kind == "cell":
            fam = CellFamily(m, cells, domain="band", allow_empty=True)
            if len(fam) and fam.cells.min() >= 0 and fam.cells.max() < (1 << m):
                fam.domain = "unit"
            return fam
        return DualCellFamily(m, cells, allow_empty=True)
    except DomainError as exc:
        raise FamilyFormatError(str(exc)) from None


def family_from_json(obj: dict) -> CellFamily | DualCellFamily:
    m = int(obj["scale"]["m"])
    H = obj["scale"].get("H")
    scale = Scale(m, H)
    if obj["kind"] == "cell":
        return CellFamily(scale, obj["cells"], domain=obj.get("domain", "band"), allow_empty=True)
    if obj["kind"] == "dual":
        return DualCellFamily(scale, obj["cells"], allow_empty=True)
    raise FamilyFormatError(f"unknown kind {obj['kind']!r}")


def load_family(path: str | Path) -> CellFamily | DualCellFamily:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            return family_from_json(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FamilyFormatError(f"bad JSON family: {exc}") from None
    return parse_family(text)


def save_family(F: _Family, path: str | Path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(F.to_json(), sort_keys=True) + "\n")
    else:
        path.write_text(F.to_text())
