import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incidence_lab.gen import cantor_set, random_family
from incidence_lab.sets import CellFamily, covering_number
from incidence_lab.structure import (
    BranchingProfile,
    MergeInputError,
    NonConcentrationError,
    PiecewiseAffine,
    choose_block_size,
    decompose_uniform,
    eta0_for,
    extract_nonconcentrated,
    is_uniform,
    merge_slopes,
    rescaled_set_check,
    superlinearity_check,
    uniformization_bound,
    uniformize,
    verify_certificate,
)

from corpus import certificate_families
from oracles import lower_hull, random_monotone


def test_merge_small_example():
    f = PiecewiseAffine.from_points([(0, 0), (1, 2), (2, 2), (3, 3)])
    dec = merge_slopes(f)
    assert dec.breakpoints == (0, 3) and dec.slopes == (1,)
    g = PiecewiseAffine.from_points([(0, 0), (1, 0), (2, 2)])
    assert merge_slopes(g).slopes == (0, 2)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9))
def test_merge_equals_lower_hull(seed, pieces):
    pts = random_monotone(np.random.default_rng(seed), pieces)
    f = PiecewiseAffine.from_points(pts)
    dec = merge_slopes(f)
    xs, slopes = lower_hull([p[0] for p in pts], [p[1] for p in pts])
    assert list(dec.breakpoints) == xs
    assert list(dec.slopes) == slopes
    # the minorant lies below f and touches it at breakpoints
    for x, y in pts:
        assert dec.minorant(x) <= y
    assert dec.values(f) == [dec.minorant(a) for a in dec.breakpoints]


def test_merge_rejects_bad_input():
    with pytest.raises(MergeInputError):
        merge_slopes(PiecewiseAffine.from_points([(0, 1), (1, 2)]))
    with pytest.raises(MergeInputError):
        merge_slopes(PiecewiseAffine.from_points([(0, 0), (1, -1)]))
    with pytest.raises(MergeInputError):
        merge_slopes(PiecewiseAffine.from_points([(0, 0), (1, 3)]))


def test_superlinearity():
    f = PiecewiseAffine.from_points([(0, 0), (1, 0), (3, 4)])
    assert superlinearity_check(f, 1, 3, 2)
    assert not superlinearity_check(f, 0, 3, 1)
    assert superlinearity_check(f, 0, 3, 1, eps=Fraction(1, 3))


def test_uniformize_keeps_uniform_sets():
    C = cantor_set(8, 1, 2, seed=3)
    U = uniformize(C, 2)
    assert U.family == C and U.retention == 1
    assert U.counts == (4, 4, 4, 4)


def test_uniformize_per_level_optimum():
    # parents with 1, 1, 3 and 4 children: keeping one child each or trimming to
    # two or four all retain 4 of 9, so no choice reaches half
    cells = [(0, 0), (2, 0), (0, 2), (1, 2), (0, 3), (2, 2), (3, 2), (2, 3), (3, 3)]
    U = uniformize(CellFamily(2, cells), 1)
    assert len(U.family) == 4 and U.counts == (1, 4)
    assert is_uniform(U.family, 1)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 600), st.sampled_from([1, 2]))
def test_uniformize_guarantees(seed, size, H):
    m = 8
    P = random_family(m, size, seed=seed)
    U = uniformize(P, H)
    assert is_uniform(U.family, H, U.counts)
    assert P.contains_rows(U.family.cells).sum() == len(U.family)
    assert len(U.family) >= uniformization_bound(m, H, len(P), base=2 * H + 1)
    assert len(U.family) == math.prod(U.counts)


def test_is_uniform_rejects():
    assert not is_uniform(CellFamily(2, [(0, 0), (0, 1), (2, 2)]), 1)
    assert is_uniform(CellFamily(2, [(0, 0), (2, 2)]), 1)


def test_block_size_choice():
    assert choose_block_size(12, 0.05) == (12, True)
    H, capped = choose_block_size(400, 0.05)
    assert not capped and math.log2(2 * H) / H <= 0.05 and 400 % H == 0


def test_decomposition_pieces():
    P = random_family(8, 2000, seed=4)
    dec = decompose_uniform(P, 0.1, H=2)
    seen = np.zeros(len(P), bool)
    for U in dec.pieces:
        rows = P.contains_rows(U.family.cells)
        assert not (seen & rows).any()
        seen |= rows
        assert is_uniform(U.family, 2)
        assert len(U.family) >= len(P) * 2.0 ** (-2 * 8 * 0.1)
    assert dec.stop in ("remainder_small", "piece_small", "empty")
    assert len(dec.remainder) + seen.sum() == len(P)


def test_branching_profile():
    prof = BranchingProfile.from_counts(2, (4, 1, 16, 2))
    assert prof.beta == (0, 1, 1, 3, Fraction(7, 2))
    assert prof.decomposition.breakpoints == (0, 2, 4)
    assert prof.decomposition.slopes == (Fraction(1, 2), Fraction(5, 4))
    assert prof.to_csv().splitlines()[0] == "j,beta"
    with pytest.raises(ValueError):
        BranchingProfile.from_counts(1, (3,))


def test_rescaled_set_bound_on_cantor():
    U = uniformize(cantor_set(8, 1, 2, seed=1), 2)
    rep, bound = rescaled_set_check(U, 1, 3, 1)
    assert rep.best_constant <= bound
    with pytest.raises(ValueError):
        rescaled_set_check(U, 1, 3, 1.5)


def test_eta0_closed_form():
    for C, t in [(1, 1), (3, 0.5), (20, 0.9), (400, 1)]:
        e = eta0_for(C, t)
        assert e.numerator == 1
        lg = C * C / 2 * math.log2(math.e)
        i = e.denominator.bit_length() - 1
        assert lg - i < math.log2(t)
        assert i == 0 or lg - (i - 1) >= math.log2(t)


def test_certificates_replay():
    for P, C in certificate_families(count=12, seed=7):
        cert = extract_nonconcentrated(P, C)
        rep = verify_certificate(cert)
        assert rep.ok, rep
        assert covering_number(cert.subset, P.m) == len(cert.subset)


def test_dimension_zero_is_rejected():
    with pytest.raises(NonConcentrationError):
        extract_nonconcentrated(CellFamily(6, [(3, 3)]), 2)
    with pytest.raises(ValueError):
        extract_nonconcentrated(CellFamily(6, [(3, 3), (4, 4)]), 0.5)
