"""Clique testing, clique extraction, sheaf rectangles and exhaustion."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .grid import Rect, ScaleMismatch, dualize_config
from .incidence import IncidenceSet, fu_ren_exponent, incidences
from .sets import CellFamily, DualCellFamily
from .structure import NonConcentrationError, decompose_uniform, extract_nonconcentrated

log = logging.getLogger(__name__)


class PipelineFailure(RuntimeError):
    def __init__(self, stage: str, msg: str, trace: list | None = None, iteration: int | None = None):
        self.stage = stage
        self.trace = trace or []
        self.iteration = iteration
        where = f" (iteration {iteration})" if iteration is not None else ""
        super().__init__(f"{stage}{where}: {msg}")


@dataclass
class CliqueParams:
    eps: float = 0.05
    H: int | None = None  # block size for the uniform decomposition; None = automatic
    H_nc: int = 1  # block size inside the per-tube extraction
    C: float | None = None  # None = 400/(su) or 160/(su(t-s))
    n_max: int = 1024
    floor: float | None = None  # incidence floor; None = delta^(0.1 - f(s,t))
    slope_tol: int = 2  # comparable slopes differ by <= slope_tol * delta/Delta
    intercept_tol: int = 2  # ... and heights at Q0's centre by <= intercept_tol * delta
    C_rect: float = 4.0

    def constant(self, s: float, t: float, u: float) -> float:
        if self.C is not None:
            return self.C
        if s == t:
            return 400.0 / (s * u)
        return 160.0 / (s * u * abs(t - s))

    def incidence_floor(self, s: float, t: float, m: int) -> float:
        if self.floor is not None:
            return self.floor
        return 2.0 ** (m * (fu_ren_exponent(s, t) - 0.1))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "CliqueParams":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown clique parameters: {sorted(unknown)}")
        return cls(**obj)


def _check_pair(P, L) -> None:
    if P.m != L.m:
        raise ScaleMismatch(f"scale mismatch: m={P.m} vs m={L.m}")


def is_clique(P: CellFamily, L: DualCellFamily, theta: float) -> tuple[bool, float]:
    _check_pair(P, L)
    if len(P) == 0 or len(L) == 0:
        raise ValueError("empty family")
    got = incidences(P, L).count / (len(P) * len(L))
    return got >= theta, got


@dataclass
class CliqueReport:
    Pprime: CellFamily
    Lprime: DualCellFamily
    theta: float
    k: int | None  # Delta = 2^-k
    Q0: tuple[int, int] | None
    eta: float
    s: float
    t: float
    u: float
    trace: list = field(default_factory=list)
    dual: bool = False
    dual_report: "CliqueReport | None" = None

    @property
    def packet(self) -> DualCellFamily:
        return self.Lprime

    @property
    def Delta(self) -> float | None:
        return None if self.k is None else 2.0 ** -self.k

    def replay_theta(self) -> float:
        n = incidences(self.Pprime, self.Lprime).count
        return n / (len(self.Pprime) * len(self.Lprime))

    def to_json(self) -> dict:
        out = {
            "theta": self.theta,
            "k": self.k,
            "Delta": self.Delta,
            "Q0": None if self.Q0 is None else list(self.Q0),
            "eta": self.eta,
            "s": self.s,
            "t": self.t,
            "u": self.u,
            "P_size": len(self.Pprime),
            "L_size": len(self.Lprime),
            "P_cells": self.Pprime.cells.tolist(),
            "L_cells": self.Lprime.cells.tolist(),
            "dual": self.dual,
            "trace": self.trace,
        }
        if self.dual_report is not None:
            out["dual_report"] = self.dual_report.to_json()
        return out


def _embed(P: CellFamily) -> tuple[CellFamily, int]:
    """Move a band-domain family into [0,1)^2 at scale m+2 (offset 2^m keeps dyadic alignment)."""
    if P.domain == "unit":
        return P, 0
    off = 1 << P.m
    return CellFamily(P.m + 2, P.cells + off), 2


def _floor_log2(x: Fraction) -> int:
    e = x.numerator.bit_length() - x.denominator.bit_length()
    if x < Fraction(2) ** e:
        e -= 1
    return e


def _comparable(tubes: np.ndarray, Q: tuple[int, int], k_emb: int, lift: int, p: CliqueParams) -> np.ndarray:
    """Pairwise packet test inside Q0 (level k_emb of the embedded grid), exact integers.

    Slopes: |a1 - a2| <= slope_tol * 2^k with k = k_emb - lift.
    Heights at the centre x_c of Q0: |(a1-a2) x_c + (b1-b2)| <= intercept_tol (in delta units).
    Both sides are multiplied by 2^(k_emb+1) so x_c becomes an integer.
    """
    a = tubes[:, 0].astype(object)
    b = tubes[:, 1].astype(object)
    scale = 1 << (k_emb + 1)
    xc = (2 * Q[0] + 1) * (1 << lift) - (scale if lift else 0)
    da = a[:, None] - a[None, :]
    db = b[:, None] - b[None, :]
    slope_ok = abs(da) * (1 << lift) <= p.slope_tol * (1 << k_emb)
    height = da * xc + db * scale
    height_ok = abs(height) <= p.intercept_tol * scale
    return np.asarray(slope_ok & height_ok, dtype=bool)


def _packets(comp: np.ndarray) -> list[np.ndarray]:
    """Greedy packets: repeatedly take the tube with the most comparable partners."""
    left = np.ones(len(comp), bool)
    out = []
    while left.any():
        deg = (comp & left[None, :] & left[:, None]).sum(1)
        deg[~left] = -1
        i = int(np.argmax(deg))
        members = np.nonzero(comp[i] & left)[0]
        out.append(members)
        left[members] = False
    return out


def extract_clique(
    P: CellFamily,
    L: DualCellFamily,
    s: float,
    t: float,
    u: float,
    params: CliqueParams | None = None,
    inc: IncidenceSet | None = None,
    cache: dict | None = None,
) -> CliqueReport:
    """Run the three-step extraction; s > t goes through the dual configuration."""
    params = params or CliqueParams()
    for name, v in (("s", s), ("t", t), ("u", u)):
        if not 0 < v <= 1:
            raise ValueError(f"{name}={v} outside (0, 1]")
    _check_pair(P, L)
    if s <= t:
        return _extract(P, L, s, t, u, params, inc, cache)
    Ps, Ls = dualize_config(P, L)
    rep = _extract(Ps, Ls, t, s, u, params, None, cache)
    Lp = DualCellFamily(P.m, np.column_stack([-rep.Pprime.cells[:, 0] - 1, rep.Pprime.cells[:, 1]]))
    Pp = CellFamily(P.m, rep.Lprime.cells)
    theta = incidences(Pp, Lp).count / (len(Pp) * len(Lp))
    trace = rep.trace + [{"stage": "dualize_back", "P": len(Pp), "L": len(Lp), "theta": theta}]
    return CliqueReport(Pp, Lp, theta, None, None, rep.eta, s, t, u, trace, True, rep)


def _extract(P, L, s, t, u, params: CliqueParams, inc, cache) -> CliqueReport:
    trace: list[dict] = []
    if len(P) == 0 or len(L) == 0:
        raise PipelineFailure("input", "empty family", trace)
    if inc is None:
        inc = incidences(P, L)
    if inc.count == 0:
        raise PipelineFailure("input", "no incidences", trace)
    if cache is None:
        cache = {}
    E, lift = _embed(P)

    # Step 1: uniform piece carrying the most incidences
    dec = decompose_uniform(E, math.sqrt(params.eps), params.H)
    if not dec.pieces:
        raise PipelineFailure("step1.decompose", "no uniform piece", trace)
    per_cell = inc.per_cell()
    best, best_w, best_mask = -1, -1, None
    for i, U in enumerate(dec.pieces):
        mask = E.contains_rows(U.family.cells)
        w = int(per_cell[mask].sum())
        if w > best_w:
            best, best_w, best_mask = i, w, mask
    trace.append(
        {
            "stage": "step1.piece",
            "pieces": len(dec.pieces),
            "H": dec.H,
            "H_capped": dec.capped,
            "stop": dec.stop,
            "chosen": best,
            "cells": int(best_mask.sum()),
            "incidences": best_w,
        }
    )
    sub = inc.restrict(p_mask=best_mask)
    counts = sub.per_tube()
    live = np.nonzero(counts > 0)[0]
    if len(live) == 0:
        raise PipelineFailure("step1.tubes", "piece meets no tube", trace)
    buckets = np.floor(np.log2(counts[live])).astype(int)
    weights = Counter()
    for bkt, c in zip(buckets.tolist(), counts[live].tolist()):
        weights[bkt] += c
    top = max(weights.values())
    bucket = min(b for b, w in weights.items() if w == top)
    kept = live[buckets == bucket]
    trace.append(
        {
            "stage": "step1.tube_bucket",
            "tubes_before": int(len(live)),
            "bucket": bucket,
            "tubes_after": int(len(kept)),
            "incidences": top,
        }
    )

    # Step 2: per-tube non-concentrated subsets, then a common scale and square
    C = params.constant(s, t, u)
    piece_rows = np.nonzero(best_mask)[0]  # rows of P in the piece
    Ecells = E.cells
    records = []
    failures = 0
    for j in kept.tolist():
        rows = piece_rows[sub.cells_of_tube(j)]
        F = E.subset(rows)
        key = (tuple(L.cells[j].tolist()), F.cells.tobytes(), C, params.H_nc)
        if key not in cache:
            try:
                cert = extract_nonconcentrated(F, C, None, params.H_nc)
                cache[key] = (cert.k, _floor_log2(cert.eta), float(cert.eta), cert.Q)
            except NonConcentrationError:
                cache[key] = None
        rec = cache[key]
        if rec is None:
            failures += 1
            continue
        records.append((j,) + rec)
    if not records:
        raise PipelineFailure("step2.certificates", "no tube admits a certificate", trace)
    by_scale = Counter((r[1], r[2]) for r in records)
    top = max(by_scale.values())
    k_emb, e_eta = min(key for key, c in by_scale.items() if c == top)
    records = [r for r in records if (r[1], r[2]) == (k_emb, e_eta)]
    trace.append(
        {
            "stage": "step2.scale",
            "certified": len(records) + sum(c for key, c in by_scale.items() if key != (k_emb, e_eta)),
            "failures": failures,
            "k": k_emb - lift,
            "log2_eta_bucket": e_eta,
            "tubes_after": len(records),
            "C": C,
        }
    )
    by_q = Counter(r[4] for r in records)
    top = max(by_q.values())
    Q0 = min(q for q, c in by_q.items() if c == top)
    T0 = np.array([r[0] for r in records if r[4] == Q0], dtype=np.int64)
    eta = max(r[3] for r in records if r[4] == Q0)
    trace.append({"stage": "step2.square", "Q0": list(Q0), "squares": len(by_q), "tubes_after": int(len(T0))})

    comp = _comparable(L.cells[T0], Q0, k_emb, lift, params)
    packs = _packets(comp)
    xi0 = T0[packs[0]]
    trace.append(
        {
            "stage": "step3.packet",
            "packets": len(packs),
            "largest": int(len(xi0)),
            "sizes": sorted((int(len(p)) for p in packs), reverse=True)[:16],
        }
    )

    # Step 3: P' = P cap Q0, L' = the largest packet
    in_q = np.all((Ecells >> (E.m - k_emb)) == np.array(Q0), axis=1)
    t_mask = np.zeros(len(L), bool)
    t_mask[xi0] = True
    clique = inc.restrict(p_mask=in_q, t_mask=t_mask)
    Pp, Lp = clique.P, clique.T
    if len(Pp) == 0:
        raise PipelineFailure("step3.clique", "empty square", trace)
    theta = clique.count / (len(Pp) * len(Lp))
    k = k_emb - lift
    if k >= 0:
        off = (1 << k) if lift else 0
        Q_orig = (int(Q0[0]) - off, int(Q0[1]) - off)
    else:
        Q_orig = None
    trace.append({"stage": "step3.clique", "P": len(Pp), "L": len(Lp), "theta": theta})
    log.info("clique: |P'|=%d |L'|=%d theta=%.3f k=%d", len(Pp), len(Lp), theta, k)
    return CliqueReport(Pp, Lp, theta, k, Q_orig, eta, s, t, u, trace)


# ---------------------------------------------------------------------------
# sheaf rectangle


@dataclass
class RectangleReport:
    R: Rect
    T0: tuple[int, int]
    alpha: float
    slope_class: int
    class_size: int
    points_in_R: int
    lines_through_R: int
    predicted_diam: float
    theta: float
    C_rect: float
    good: bool
    covered: int

    @property
    def diam(self) -> float:
        return self.R.diameter

    def to_json(self) -> dict:
        return {
            "R": {
                "center": list(self.R.center),
                "direction": list(self.R.direction),
                "length": self.R.length,
                "width": self.R.width,
                "diameter": self.R.diameter,
            },
            "T0": list(self.T0),
            "alpha": self.alpha,
            "slope_class": self.slope_class,
            "class_size": self.class_size,
            "points_in_R": self.points_in_R,
            "lines_through_R": self.lines_through_R,
            "predicted_diam": self.predicted_diam,
            "theta": self.theta,
            "C_rect": self.C_rect,
            "good": self.good,
            "covered": self.covered,
        }


def points_in_rect(P: CellFamily, R: Rect) -> int:
    return int(R.contains(P.centers()).sum())


def lines_through_rect(L: DualCellFamily, R: Rect, C_rect: float) -> int:
    """Tubes whose centre line passes within C_rect*delta of every corner of R."""
    d = L.scale.delta
    sig = (L.cells[:, 0] + 0.5) * d
    beta = (L.cells[:, 1] + 0.5) * d
    cs = R.corners()
    dist = np.abs(sig[:, None] * cs[None, :, 0] + beta[:, None] - cs[None, :, 1]) / np.sqrt(1 + sig[:, None] ** 2)
    return int(np.all(dist <= C_rect * d + 1e-12, axis=1).sum())


def find_sheaf_rectangle(
    P: CellFamily,
    L: DualCellFamily,
    theta: float,
    s: float = 1.0,
    t: float = 1.0,
    C_rect: float = 4.0,
) -> RectangleReport:
    """Locate a C'delta x C'delta/alpha rectangle holding >= theta^2|P|/2 cells."""
    ok, got = is_clique(P, L, theta)
    if not ok:
        raise ValueError(f"not a clique at theta={theta}: achieved {got:.4g}")
    inc = incidences(P, L)
    m = P.m
    d = P.scale.delta
    B = np.zeros((len(L), len(P)), dtype=np.float32)
    B[inc.t_idx, inc.p_idx] = 1.0
    overlap = B @ B.T
    thr = theta * theta * len(P) / 2
    score = (overlap >= thr).sum(1)
    i0 = int(np.argmax(score))
    a0, b0 = (int(v) for v in L.cells[i0])
    T0set = np.nonzero(overlap[i0] >= thr)[0]
    diff = np.abs(L.cells[T0set, 0] - a0)
    cls = np.where(diff <= 2, 0, np.ceil(np.log2(np.maximum(diff, 1))).astype(int) - 1)
    sizes = Counter(cls.tolist())
    top = max(sizes.values())
    c_star = min(c for c, n in sizes.items() if n == top)
    members = T0set[cls == c_star]
    alpha = d * (1 << c_star)
    sig0 = (a0 + 0.5) * d
    beta0 = (b0 + 0.5) * d
    norm = math.hypot(1.0, sig0)
    u = (1.0 / norm, sig0 / norm)
    length = C_rect * d / alpha
    width = C_rect * d
    length = max(length, width)
    step_x = (length / 2) * u[0]
    xs = np.arange(0.0, 1.0 + step_x, step_x) if step_x < 1 else np.array([0.5])
    centers = P.centers()
    common = [np.nonzero(B[j] * B[i0])[0] for j in members]
    best = None
    for x in xs.tolist():
        R = Rect((x, sig0 * x + beta0), u, length, width)
        inside = R.contains(centers)
        n_pts = int(inside.sum())
        good = n_pts >= thr
        covered = sum(1 for c in common if len(c) and inside[c].all())
        key = (good, covered if good else 0, n_pts)
        if best is None or key > best[0]:
            best = (key, R, n_pts, good, covered)
    _, R, n_pts, good, covered = best
    return RectangleReport(
        R=R,
        T0=(a0, b0),
        alpha=alpha,
        slope_class=c_star,
        class_size=int(len(members)),
        points_in_R=n_pts,
        lines_through_R=lines_through_rect(L, R, C_rect),
        predicted_diam=2.0 ** (-m * t / (s + t)),
        theta=got,
        C_rect=C_rect,
        good=bool(good),
        covered=int(covered),
    )


# ---------------------------------------------------------------------------
# exhaustion


@dataclass
class ExhaustionReport:
    cliques: list[CliqueReport]
    stop: str
    residual: int
    total_pairs: int
    target: float
    bucket: int | None
    iterations: int
    failure: str | None = None

    def __len__(self) -> int:
        return len(self.cliques)

    def __iter__(self):
        return iter(self.cliques)

    def to_json(self) -> dict:
        return {
            "stop": self.stop,
            "residual": self.residual,
            "total_pairs": self.total_pairs,
            "target": self.target,
            "bucket": self.bucket,
            "iterations": self.iterations,
            "failure": self.failure,
            "cliques": [
                {"P_size": len(c.Pprime), "L_size": len(c.Lprime), "theta": c.theta, "k": c.k,
                 "Q0": None if c.Q0 is None else list(c.Q0)}
                for c in self.cliques
            ],
        }


def exhaust_cliques(
    P: CellFamily,
    L: DualCellFamily,
    s: float,
    t: float,
    u: float,
    params: CliqueParams | None = None,
    progress=None,
) -> ExhaustionReport:
    """Extract cliques with disjoint point sets until the incidences run out."""
    params = params or CliqueParams()
    _check_pair(P, L)
    target = 2.0 ** (P.m * (fu_ren_exponent(s, t) - u))
    if len(L) == 0 or len(P) == 0:
        return ExhaustionReport([], "empty", 0, 0, target, None, 0)
    floor = params.incidence_floor(s, t, P.m)
    inc = incidences(P, L)
    M = inc.per_cell()
    live = M > 0
    if not live.any():
        return ExhaustionReport([], "no_incidences", 0, 0, target, None, 0)
    # cells grouped by dyadic M(p); the class carrying most incidences is kept
    bk = np.full(len(P), -1)
    bk[live] = np.floor(np.log2(M[live])).astype(int)
    w = Counter()
    for b, c in zip(bk[live].tolist(), M[live].tolist()):
        w[b] += c
    top = max(w.values())
    bucket = min(b for b, c in w.items() if c == top)
    working = bk == bucket
    cache: dict = {}
    out: list[CliqueReport] = []
    stop, failure = "n_max", None
    residual = int(M[working].sum())
    it = 0
    for it in range(params.n_max):
        residual = int(M[working].sum())
        if residual < floor / 2:
            stop = "floor"
            break
        if not working.any():
            stop = "empty"
            break
        sub = inc.restrict(p_mask=working)
        try:
            rep = extract_clique(sub.P, L, s, t, u, params, inc=sub, cache=cache)
        except PipelineFailure as exc:
            stop, failure = "failure", f"iteration {it}: {exc}"
            break
        removed = P.contains_rows(rep.Pprime.cells)
        if not (removed & working).any():
            stop, failure = "failure", f"iteration {it}: clique removes no cells"
            break
        working &= ~removed
        out.append(rep)
        if progress is not None:
            progress(it, rep, residual)
    else:
        it = params.n_max
    seen = set()
    for rep in out:
        for row in map(tuple, rep.Pprime.cells.tolist()):
            assert row not in seen, "clique point sets overlap"
            seen.add(row)
    total = sum(incidences(c.Pprime, c.Lprime).count for c in out)
    return ExhaustionReport(out, stop, residual, total, target, bucket, it, failure)
