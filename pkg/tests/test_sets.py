import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incidence_lab.gen import cantor_set, random_family
from incidence_lab.grid import DomainError, Line, ScaleMismatch
from incidence_lab.sets import (
    OVERLAP,
    CellFamily,
    FamilyFormatError,
    box_counts,
    covering_number,
    delta_s_constant,
    family_from_json,
    katz_tao_constant,
    load_family,
    parse_family,
    save_family,
    tube_family_from_lines,
)

from oracles import covering_brute, katz_tao_brute


@st.composite
def small_family(draw, m_max=5):
    m = draw(st.integers(1, m_max))
    n = 1 << m
    cells = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), min_size=1, max_size=40))
    return CellFamily(m, cells)


def test_normalisation_and_set_ops():
    F = CellFamily(3, [(2, 1), (0, 5), (2, 1)])
    assert F.cells.tolist() == [[0, 5], [2, 1]]
    G = CellFamily(3, [(2, 1), (7, 7)])
    assert F.union(G).cells.tolist() == [[0, 5], [2, 1], [7, 7]]
    assert F.difference(G).cells.tolist() == [[0, 5]]
    assert F.index_of(np.array([[2, 1], [3, 3]])).tolist() == [1, -1]
    with pytest.raises(ScaleMismatch):
        F.union(CellFamily(4, [(0, 0)]))
    with pytest.raises(ValueError):
        CellFamily(3, [])
    with pytest.raises(DomainError):
        CellFamily(3, [(8, 0)])


@settings(max_examples=100, deadline=None)
@given(small_family(), st.data())
def test_covering_number_matches_brute(F, data):
    k = data.draw(st.integers(0, F.m))
    assert covering_number(F, k) == covering_brute(F.cells, F.m, k)


@settings(max_examples=60, deadline=None)
@given(small_family(m_max=4), st.sampled_from([0.5, 1.0, 1.5, 2.0]))
def test_box_scan_matches_brute(F, s):
    assert katz_tao_constant(F, s).best_constant == pytest.approx(katz_tao_brute(F.cells, F.m, s))
    assert delta_s_constant(F, s).best_constant == pytest.approx(katz_tao_brute(F.cells, F.m, s, True))


@settings(max_examples=60, deadline=None)
@given(small_family(m_max=5), st.data())
def test_euclidean_balls_are_dominated_by_boxes(F, data):
    # a ball of dyadic radius r meets at most OVERLAP scanned 2r-boxes
    k = data.draw(st.integers(0, F.m))
    r = 2.0**-k
    cx = data.draw(st.floats(0, 1))
    cy = data.draw(st.floats(0, 1))
    c = F.centers()
    inside = int(np.sum(np.hypot(c[:, 0] - cx, c[:, 1] - cy) <= r))
    _, totals = box_counts(F, k)
    assert inside <= OVERLAP * totals.max()


def test_katz_tao_monotone_in_exponent():
    F = random_family(6, 200, seed=3)
    consts = [katz_tao_constant(F, s).best_constant for s in (0.25, 0.5, 1.0, 1.5, 2.0)]
    assert all(a >= b for a, b in zip(consts, consts[1:]))


def test_known_constants():
    full = CellFamily(4, [(x, y) for x in range(16) for y in range(16)])
    assert katz_tao_constant(full, 2).best_constant == 4
    row = CellFamily(4, [(x, 3) for x in range(16)])
    assert katz_tao_constant(row, 1).best_constant == 2
    C = cantor_set(8, 1)
    assert len(C) == 256
    assert katz_tao_constant(C, 1).best_constant <= 4
    assert [covering_number(C, k) for k in range(9)] == [2**k for k in range(9)]


def test_text_and_json_round_trip(tmp_path):
    F = random_family(5, 30, seed=1)
    T = random_family(5, 30, seed=2, kind="dual")
    for fam in (F, T):
        assert parse_family(fam.to_text()) == fam
        assert family_from_json(json.loads(json.dumps(fam.to_json()))) == fam
        for suffix in (".txt", ".json"):
            p = tmp_path / f"f{suffix}"
            save_family(fam, p)
            assert load_family(p) == fam


def test_parse_errors_carry_line_numbers():
    with pytest.raises(FamilyFormatError, match="line 1"):
        parse_family("scale m=x kind=cell\n")
    with pytest.raises(FamilyFormatError, match="line 3"):
        parse_family("# comment\nscale m=3 kind=cell\n1 two\n")
    with pytest.raises(FamilyFormatError, match="line 2"):
        parse_family("scale m=3 kind=cell\n1 2 3\n")
    with pytest.raises(FamilyFormatError):
        parse_family("scale m=3 kind=dual\n99 0\n")
    assert len(parse_family("scale m=2 kind=cell\n")) == 0


def test_tubes_from_lines():
    T = tube_family_from_lines([Line(0.25, 0.5), Line(0.25, 0.5), Line(-1.0, 1.9)], 3)
    assert T.cells.tolist() == [[-8, 15], [2, 4]]
    with pytest.raises(DomainError):
        tube_family_from_lines([Line(2.0, 0.0)], 3)
