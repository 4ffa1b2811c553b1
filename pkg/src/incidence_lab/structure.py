"""Multiscale structure: uniform subsets, branching functions, slope merging and
non-concentrated subset extraction."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .grid import Scale, rescale_at
from .sets import CellFamily, KTReport, covering_number, delta_s_constant

D = 2  # ambient dimension


# ---------------------------------------------------------------------------
# uniformization


@dataclass
class UniformFamily:
    family: CellFamily
    H: int
    counts: tuple[int, ...]  # N_1 .. N_m'
    source_size: int = 0

    @property
    def m_blocks(self) -> int:
        return len(self.counts)

    @property
    def retention(self) -> float:
        return len(self.family) / self.source_size if self.source_size else 1.0

    def profile(self) -> "BranchingProfile":
        return BranchingProfile.from_counts(self.H, self.counts)


def _level_keys(cells: np.ndarray, level: int, m: int) -> np.ndarray:
    anc = cells >> (m - level)
    off = np.int64(1) << np.int64(level)
    return (anc[:, 0] + off) * (np.int64(3) << np.int64(level)) + (anc[:, 1] + off)


def uniformize(P: CellFamily, H: int, check: bool = True) -> UniformFamily:
    """Greedy fine-to-coarse uniform subset.

    At every block level the children of each parent all carry the same mass
    (by induction from the finest level), so a common target N = 2^k keeps
    N * #{parents with >= N children} children.  The N maximising that is
    used; parents with fewer children are dropped and richer ones trimmed to
    their first N children (mass descending, then lexicographic).
    """
    m = P.m
    if H < 1 or m % H:
        raise ValueError(f"block size H={H} does not divide m={m}")
    mb = m // H
    cells = P.cells
    counts = [0] * mb
    for j in range(mb, 0, -1):
        if len(cells) == 0:
            break
        child = _level_keys(cells, j * H, m)
        parent = _level_keys(cells, (j - 1) * H, m)
        ukeys, first, inv, mass = np.unique(child, return_index=True, return_inverse=True, return_counts=True)
        upar = parent[first]
        # order children by parent, then mass descending, then cell order
        order = np.lexsort((ukeys, -mass, upar))
        upar_o = upar[order]
        starts = np.r_[0, np.nonzero(np.diff(upar_o))[0] + 1]
        nchild = np.diff(np.r_[starts, len(upar_o)])
        rank = np.arange(len(upar_o)) - np.repeat(starts, nchild)
        best_n, best_mass = 1, -1
        for k in range(D * H + 1):
            N = 1 << k
            keep_par = nchild >= N
            if not keep_par.any():
                break
            sel = np.repeat(keep_par, nchild) & (rank < N)
            retained = int(mass[order][sel].sum())
            if retained > best_mass or (retained == best_mass and N > best_n):
                best_n, best_mass = N, retained
        sel = np.repeat(nchild >= best_n, nchild) & (rank < best_n)
        keep_child = np.zeros(len(ukeys), bool)
        keep_child[order[sel]] = True
        cells = cells[keep_child[inv.ravel()]]
        counts[j - 1] = best_n
    U = UniformFamily(P._like(cells), H, tuple(counts), len(P))
    if check:
        assert is_uniform(U.family, H, U.counts)
        # provable per-level retention is 1/(dH+1); see uniformization_bound()
        assert len(U.family) * (D * H + 1) ** mb >= len(P)
    return U


def uniformization_bound(m: int, H: int, size: int, base: int | None = None) -> float:
    """Retention floor size * base^(-m/H); base defaults to 2H."""
    base = 2 * H if base is None else base
    return size * float(base) ** (-(m // H))


def is_uniform(F: CellFamily, H: int, counts: Sequence[int] | None = None) -> bool:
    """Full traversal: every block-level parent has the same power-of-two child count."""
    m = F.m
    if m % H:
        return False
    if len(F) == 0:
        return True
    got = []
    for j in range(1, m // H + 1):
        child = np.unique(_level_keys(F.cells, j * H, m))
        parent = _level_keys(F.cells, (j - 1) * H, m)
        par_of_child = np.unique(np.column_stack([parent, _level_keys(F.cells, j * H, m)]), axis=0)[:, 0]
        _, per = np.unique(par_of_child, return_counts=True)
        if len(child) != len(par_of_child) or per.min() != per.max():
            return False
        n = int(per[0])
        if n & (n - 1):
            return False
        got.append(n)
    return counts is None or tuple(got) == tuple(counts)


def choose_block_size(m: int, eps: float) -> tuple[int, bool]:
    """Smallest divisor H of m with log2(2H)/H <= eps; (m, True) when none exists."""
    h_min = 1
    while math.log2(2 * h_min) / h_min > eps:
        h_min += 1
    for H in range(h_min, m + 1):
        if m % H == 0:
            return H, False
    return m, True


@dataclass
class Decomposition:
    pieces: list[UniformFamily]
    remainder: CellFamily
    H: int
    capped: bool
    stop: str


def decompose_uniform(P: CellFamily, eps: float, H: int | None = None) -> Decomposition:
    """Disjoint uniform pieces, each >= delta^(2 eps)|P|, until the rest is small."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    capped = False
    if H is None:
        H, capped = choose_block_size(P.m, eps)
    total = len(P)
    rem_floor = total * 2.0 ** (-P.m * eps)
    piece_floor = total * 2.0 ** (-2 * P.m * eps)
    pieces: list[UniformFamily] = []
    rest = P
    stop = "empty"
    while len(rest):
        if len(rest) <= rem_floor:
            stop = "remainder_small"
            break
        U = uniformize(rest, H)
        if len(U.family) < piece_floor:
            stop = "piece_small"
            break
        pieces.append(U)
        rest = rest.difference(U.family)
    return Decomposition(pieces, rest, H, capped, stop)


# ---------------------------------------------------------------------------
# piecewise affine functions and slope merging


def _frac(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(v)


@dataclass(frozen=True)
class PiecewiseAffine:
    """Continuous piecewise affine function given by its breakpoints."""

    xs: tuple[Fraction, ...]
    ys: tuple[Fraction, ...]

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or len(self.xs) < 2:
            raise ValueError("need at least two breakpoints")
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    @classmethod
    def from_points(cls, pts) -> "PiecewiseAffine":
        xs, ys = zip(*[(_frac(x), _frac(y)) for x, y in pts])
        return cls(tuple(xs), tuple(ys))

    def slopes(self) -> list[Fraction]:
        return [(y1 - y0) / (x1 - x0) for x0, x1, y0, y1 in zip(self.xs, self.xs[1:], self.ys, self.ys[1:])]

    def __call__(self, x) -> Fraction:
        x = _frac(x)
        if not self.xs[0] <= x <= self.xs[-1]:
            raise ValueError(f"{x} outside the domain")
        for i in range(len(self.xs) - 1):
            if x <= self.xs[i + 1]:
                x0, x1 = self.xs[i], self.xs[i + 1]
                return self.ys[i] + (self.ys[i + 1] - self.ys[i]) * (x - x0) / (x1 - x0)
        return self.ys[-1]


@dataclass(frozen=True)
class SlopeDecomposition:
    breakpoints: tuple[Fraction, ...]  # a_0 < ... < a_n
    slopes: tuple[Fraction, ...]  # sigma_0 < ... < sigma_{n-1}

    def values(self, f: PiecewiseAffine) -> list[Fraction]:
        return [f(a) for a in self.breakpoints]

    def minorant(self, x) -> Fraction:
        """The convex function determined by the slopes with value 0 at a_0."""
        x = _frac(x)
        acc = Fraction(0)
        for a0, a1, s in zip(self.breakpoints, self.breakpoints[1:], self.slopes):
            if x <= a0:
                break
            acc += s * (min(x, a1) - a0)
        return acc


class MergeInputError(ValueError):
    pass


def merge_slopes(f: PiecewiseAffine, d: int = D) -> SlopeDecomposition:
    """Merge adjacent pieces until the slopes strictly increase.

    A stack holds (left, right, slope) pieces; whenever the top slope does not
    exceed the one below, the two are replaced by the chord, whose slope is the
    length-weighted average of the two.
    """
    if f.xs[0] != 0 or f.ys[0] != 0:
        raise MergeInputError("need f(0) = 0")
    sl = f.slopes()
    for i, s in enumerate(sl):
        if s < 0:
            raise MergeInputError(f"f decreases on piece {i}")
        if s > d:
            raise MergeInputError(f"slope {s} on piece {i} exceeds the Lipschitz bound {d}")
    stack: list[list[Fraction]] = []
    for x0, x1, s in zip(f.xs, f.xs[1:], sl):
        stack.append([x0, x1, s])
        while len(stack) >= 2 and stack[-1][2] <= stack[-2][2]:
            r = stack.pop()
            q = stack[-1]
            q[2] = (q[2] * (q[1] - q[0]) + r[2] * (r[1] - r[0])) / (r[1] - q[0])
            q[1] = r[1]
    return SlopeDecomposition(
        tuple([p[0] for p in stack] + [stack[-1][1]]), tuple(p[2] for p in stack)
    )


def superlinearity_check(f: PiecewiseAffine, a, b, sigma, eps=0) -> bool:
    """(f, a, b) is (sigma, eps)-superlinear; testing breakpoints suffices."""
    a, b, sigma, eps = map(_frac, (a, b, sigma, eps))
    if not a < b:
        raise ValueError("need a < b")
    fa = f(a)
    pts = [a, b] + [x for x in f.xs if a < x < b]
    return all(f(x) >= fa + sigma * (x - a) - eps * (b - a) for x in pts)


@dataclass
class BranchingProfile:
    H: int
    counts: tuple[int, ...]
    beta: tuple[Fraction, ...]
    decomposition: SlopeDecomposition

    @classmethod
    def from_counts(cls, H: int, counts: Sequence[int]) -> "BranchingProfile":
        beta = [Fraction(0)]
        for n in counts:
            if n < 1 or n & (n - 1):
                raise ValueError(f"branching count {n} is not a power of two")
            beta.append(beta[-1] + Fraction(n.bit_length() - 1, H))
        f = PiecewiseAffine(tuple(Fraction(j) for j in range(len(beta))), tuple(beta))
        return cls(H, tuple(counts), tuple(beta), merge_slopes(f))

    @property
    def m_blocks(self) -> int:
        return len(self.counts)

    def function(self) -> PiecewiseAffine:
        return PiecewiseAffine(tuple(Fraction(j) for j in range(len(self.beta))), self.beta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "beta"])
        for j, b in enumerate(self.beta):
            w.writerow([j, float(b)])
        return buf.getvalue()

    def decomposition_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a_left", "a_right", "sigma"])
        dec = self.decomposition
        for a0, a1, s in zip(dec.breakpoints, dec.breakpoints[1:], dec.slopes):
            w.writerow([str(a0), str(a1), str(s)])
        return buf.getvalue()

    def to_json(self) -> dict:
        dec = self.decomposition
        return {
            "H": self.H,
            "counts": list(self.counts),
            "beta": [str(b) for b in self.beta],
            "breakpoints": [str(a) for a in dec.breakpoints],
            "slopes": [str(s) for s in dec.slopes],
        }


# ---------------------------------------------------------------------------
# rescaled sets


def coarsen(F: CellFamily, k: int) -> CellFamily:
    return CellFamily(Scale(k), np.unique(F.ancestors(k), axis=0), allow_empty=True)


def rescaled_set_check(U: UniformFamily, a: int, b: int, s: float) -> tuple[KTReport, float]:
    """Worst (delta_s) constant of S_Q(P cap Q) at scale Delta^(b-a) over Q at level a.

    Returns the worst report and the bound 4 * 2^(H s) it must respect
    (the 4 accounts for a scanned box meeting four dyadic cells).
    """
    prof = U.profile()
    if not (0 <= a < b <= prof.m_blocks):
        raise ValueError("need 0 <= a < b <= m'")
    if not superlinearity_check(prof.function(), a, b, Fraction(s)):
        raise ValueError(f"(beta, {a}, {b}) is not {s}-superlinear")
    F = U.family
    H = U.H
    bound = 4.0 * 2.0 ** (H * s)
    qs = np.unique(F.ancestors(a * H), axis=0)
    worst = None
    for qx, qy in qs.tolist():
        inside = (F.cells[:, 0] >> (F.m - a * H) == qx) & (F.cells[:, 1] >> (F.m - a * H) == qy)
        S = rescale_at(qx, qy, a * H, F.subset(inside))
        rep = delta_s_constant(coarsen(S, (b - a) * H), s)
        if worst is None or rep.best_constant > worst.best_constant:
            worst = rep
    return worst, bound


# ---------------------------------------------------------------------------
# non-concentrated subsets


class NonConcentrationError(RuntimeError):
    def __init__(self, msg: str, profile: BranchingProfile | None = None):
        self.profile = profile
        super().__init__(msg)


@dataclass
class NonConcentrationCertificate:
    family: CellFamily  # the uniform family the certificate is relative to
    subset: CellFamily
    k: int  # Delta = 2^-k
    Q: tuple[int, int]
    eta: Fraction
    eta0: Fraction
    C: float
    t: float
    H: int
    profile: BranchingProfile
    source_size: int
    info: dict = field(default_factory=dict)

    @property
    def Delta(self) -> float:
        return 2.0 ** -self.k

    @property
    def bound(self) -> float:
        return 4.0 * 2.0 ** (self.H * self.C * float(self.eta))

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "Delta": self.Delta,
            "Q": list(self.Q),
            "eta": float(self.eta),
            "log2_eta0": -(self.eta0.denominator.bit_length() - 1),
            "C": self.C,
            "t": self.t,
            "H": self.H,
            "subset_size": len(self.subset),
            "family_size": len(self.family),
            "source_size": self.source_size,
            "bound": self.bound,
            "profile": self.profile.to_json(),
        }


def eta0_for(C: float, t: float) -> Fraction:
    """Largest 2^-i with 2^-i * exp(C^2/2) < t."""
    if t <= 0:
        raise ValueError("need t > 0")
    # 2^-i exp(C^2/2) < t  <=>  i > C^2 log2(e) / 2 - log2(t)
    x = (C * C / 2) * math.log2(math.e) - math.log2(t)
    i = max(0, math.floor(x) + 1)
    return Fraction(1, 1 << i)


def extract_nonconcentrated(
    P: CellFamily, C: float, t: float | None = None, H: int = 1
) -> NonConcentrationCertificate:
    """Large subset of one dyadic square whose blow-up is (C eta)-non-concentrated."""
    if C < 1:
        raise ValueError("need C >= 1")
    if len(P) == 0:
        raise ValueError("empty family")
    m = P.m
    if t is None:
        t = math.log2(len(P)) / m if m else 0.0
    U = uniformize(P, H)
    prof = U.profile()
    mb = prof.m_blocks
    f_end = prof.beta[-1]
    g1 = f_end / mb
    if t <= 0 or g1 <= 0:
        raise NonConcentrationError("family has dimension 0; no admissible eta0", prof)
    eta0 = eta0_for(C, min(t, float(g1)))
    Cf = Fraction(C)
    dec = prof.decomposition
    A, S = dec.breakpoints, dec.slopes
    fa = [Fraction(0)]
    for a0, a1, s in zip(A, A[1:], S):
        fa.append(fa[-1] + s * (a1 - a0))
    target = mb * eta0
    a_star = None
    for j, s in enumerate(S):
        if fa[j + 1] >= target and s > 0:
            a_star = A[j] + (target - fa[j]) / s
            break
    if a_star is None:
        raise NonConcentrationError("branching never reaches eta0", prof)
    chosen = None
    for j, s in enumerate(S):
        if A[j + 1] <= a_star:
            continue
        if s >= Cf * max(eta0, fa[j] / mb):
            chosen = j
            break
    if chosen is None:
        raise NonConcentrationError(
            f"no breakpoint with right slope >= C max(eta0, g) past a={float(a_star):.4g}", prof
        )
    y0 = A[chosen]
    assert y0.denominator == 1
    k = int(y0) * H
    eta = max(fa[chosen] / mb, eta0)
    F = U.family
    anc = F.ancestors(k)
    qs, inv = np.unique(anc, axis=0, return_inverse=True)
    inv = inv.ravel()
    # every Q carries the same mass in U; prefer the one heaviest in the input
    p_anc = P.ancestors(k)
    weight = np.array(
        [int(np.sum((p_anc[:, 0] == qx) & (p_anc[:, 1] == qy))) for qx, qy in qs.tolist()]
    )
    qi = int(np.argmax(weight))  # first maximum is lexicographically smallest
    subset = F.subset(inv == qi)
    return NonConcentrationCertificate(
        family=F,
        subset=subset,
        k=k,
        Q=(int(qs[qi, 0]), int(qs[qi, 1])),
        eta=eta,
        eta0=eta0,
        C=C,
        t=t,
        H=H,
        profile=prof,
        source_size=len(P),
        info={"a": float(a_star), "breakpoint_index": chosen, "slope": float(S[chosen])},
    )


@dataclass
class CertificateReplay:
    size_ok: bool
    log2_size_ratio: float
    size_limit: float
    spread_ok: bool
    spread_constant: float
    spread_bound: float

    @property
    def ok(self) -> bool:
        return self.size_ok and self.spread_ok


def verify_certificate(cert: NonConcentrationCertificate) -> CertificateReplay:
    """Recompute both certificate properties from the raw cells."""
    F, S = cert.family, cert.subset
    m = F.m
    # subset must sit inside Q and inside the family
    inside = np.all((S.cells >> (m - cert.k)) == np.array(cert.Q), axis=1)
    contained = bool(inside.all()) and bool(F.contains_rows(S.cells).sum() == len(S))
    n_f = covering_number(F, m)
    n_s = covering_number(S, m)
    lhs = math.log2(n_f / n_s) if n_s else math.inf
    limit = m * float(cert.eta)
    size_ok = contained and n_s > 0 and lhs <= limit + 1e-9
    rs = rescale_at(cert.Q[0], cert.Q[1], cert.k, S)
    rep = delta_s_constant(rs, min(2.0, cert.C * float(cert.eta)))
    return CertificateReplay(
        size_ok, lhs, limit, rep.best_constant <= cert.bound + 1e-9, rep.best_constant, cert.bound
    )
