import numpy as np
import pytest

from incidence_lab.gen import cantor_set, cantor_tubes, random_family, sheaf_config
from incidence_lab.incidence import incidences
from incidence_lab.sets import covering_number, katz_tao_constant


def test_sheaf_shape_and_labels():
    cfg = sheaf_config(1, 1, 10, seed=0)
    assert cfg.k == 5 and cfg.N == 32
    assert len(cfg.point_labels) == len(cfg.P) and len(cfg.tube_labels) == len(cfg.L)
    for j in range(cfg.N):
        Pj = cfg.P.subset(cfg.point_labels == j)
        Lj = cfg.L.subset(cfg.tube_labels == j)
        assert len(Pj) == len(Lj) == 32
        # every planted tube meets every planted point of its clique
        assert incidences(Pj, Lj).count == len(Pj) * len(Lj)


def test_sheaf_is_deterministic():
    a = sheaf_config(1, 1, 8, seed=5)
    b = sheaf_config(1, 1, 8, seed=5)
    assert a.P == b.P and a.L == b.L and a.dumps_labels() == b.dumps_labels()
    assert sheaf_config(1, 1, 8, seed=6).P != a.P


def test_sheaf_katz_tao_constants_are_measured():
    cfg = sheaf_config(1, 1, 10, seed=1)
    assert cfg.K_P == katz_tao_constant(cfg.P, 1).best_constant
    assert cfg.K_P <= 4 and cfg.K_L <= 4


def test_sheaf_unbalanced_dimensions():
    cfg = sheaf_config(0.5, 1, 12, seed=0)
    assert cfg.N == 16
    sizes = np.bincount(cfg.point_labels)
    assert sizes.max() == 4
    assert np.bincount(cfg.tube_labels).max() == 256


def test_sheaf_rejects_bad_parameters():
    with pytest.raises(ValueError):
        sheaf_config(1.2, 1, 8)
    with pytest.raises(ValueError):
        sheaf_config(1, 1, 1)


def test_cantor_families():
    C = cantor_set(10, 1)
    assert len(C) == 1024 and katz_tao_constant(C, 1).best_constant == 2
    assert [covering_number(C, k) for k in (0, 3, 7)] == [1, 8, 128]
    assert cantor_set(8, 1, 2, seed=3) == cantor_set(8, 1, 2, seed=3)
    T = cantor_tubes(8, 1)
    assert T.cells[:, 0].min() >= -128 and len(T) == 256
    with pytest.raises(ValueError):
        cantor_set(9, 1, 2)


def test_random_family():
    F = random_family(6, 100, seed=2)
    assert len(F) == 100 and F == random_family(6, 100, seed=2)
    D = random_family(4, 50, seed=0, kind="dual")
    assert D.cells[:, 0].min() >= -16 and D.cells[:, 1].max() < 32
    with pytest.raises(ValueError):
        random_family(2, 17)
    with pytest.raises(ValueError):
        random_family(2, 3, kind="other")
