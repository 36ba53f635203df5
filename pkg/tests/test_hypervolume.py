import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcmobo import hypervolume as hvm


def brute_front(P):
    return [i for i in range(len(P)) if not any(hvm.dominates(P[j], P[i]) for j in range(len(P)) if j != i)]


def grid_volume(P, ref, lo, n=60):
    """Dominated volume by midpoint counting on a regular grid; exact for points on grid nodes."""
    axes = [lo[m] + (np.arange(n) + 0.5) * (ref[m] - lo[m]) / n for m in range(len(ref))]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(ref))
    dom = np.zeros(len(G), dtype=bool)
    for p in P:
        dom |= np.all(G >= p, axis=1)
    return dom.mean() * np.prod(np.asarray(ref) - lo)


def test_dominance():
    assert hvm.dominates([1, 2], [1, 3])
    assert not hvm.dominates([1, 2], [1, 2])
    assert not hvm.dominates([1, 3], [2, 2])
    with pytest.raises(ValueError):
        hvm.dominates([1, 2], [1, 2, 3])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 5)] * 3), min_size=1, max_size=25))
def test_front_matches_brute_force(points):
    P = np.array(points, float)
    assert list(hvm.pareto_front(P)) == brute_front(P)


def test_two_point_example():
    P = [[1.0, 2.0], [2.0, 1.0]]
    for method in ("sweep", "slice"):
        assert hvm.hypervolume(P, [3.0, 3.0], method) == 3.0
    assert hvm.hypervolume_compiled(P, [3.0, 3.0]) == 3.0
    assert hvm.hvi([[1.5, 1.5]], P, [3.0, 3.0]) == 0.25


def test_single_point_box():
    assert hvm.hypervolume([[0.0, 0.0, 0.0]], [1.0, 2.0, 3.0]) == 6.0
    assert hvm.hypervolume([[0.0, 0.0, 0.0, 0.5]], [1.0, 2.0, 3.0, 1.0]) == 3.0


@pytest.mark.parametrize("M", [2, 3, 4])
def test_routines_agree(M):
    rng = np.random.default_rng(M)
    for _ in range(10):
        P = rng.uniform(size=(12, M))
        ref = np.full(M, 1.1)
        exact = hvm.hypervolume(P, ref, "slice")
        assert hvm.hypervolume_compiled(P, ref) == pytest.approx(exact, rel=1e-12)
        if M == 2:
            assert hvm.hypervolume(P, ref, "sweep") == pytest.approx(exact, rel=1e-12)


def test_lattice_front_by_counting():
    P = np.array(list(itertools.product(range(4), repeat=3)), float)
    P = P[P.sum(axis=1) == 4]
    ref = np.array([4.0, 4.0, 4.0])
    assert hvm.hypervolume(P, ref) == pytest.approx(grid_volume(P, ref, np.zeros(3), n=40), rel=1e-12)


def test_points_outside_reference_are_excluded(caplog):
    with caplog.at_level(logging.WARNING):
        hv = hvm.hypervolume([[1.0, 1.0], [3.0, 0.0]], [2.0, 2.0])
    assert hv == 1.0
    assert "1 point(s)" in caplog.text
    assert hvm.hypervolume(np.zeros((0, 2)), [1.0, 1.0]) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=10),
       st.tuples(st.floats(0, 1.2), st.floats(0, 1.2), st.floats(0, 1.2)))
def test_insertion_never_decreases(points, new):
    ref = [1.0, 1.0, 1.0]
    before = hvm.hypervolume(points, ref, warn=False)
    after = hvm.hypervolume(points + [new], ref, warn=False)
    assert after >= before - 1e-15
    assert hvm.hvi([new], points, ref) >= 0.0


@pytest.mark.parametrize("M", [2, 3, 4])
def test_boxes_partition_the_non_dominated_region(M):
    rng = np.random.default_rng(10 + M)
    F = rng.uniform(size=(8, M))
    ref = np.full(M, 1.2)
    L, U = hvm.nondominated_boxes(F, ref)
    lo = np.full(M, -0.5)
    vol = np.prod(U - np.maximum(L, lo), axis=1).sum()
    assert vol == pytest.approx(np.prod(ref - lo) - hvm.hypervolume(F, ref), rel=1e-10)
    # improvement of sampled points equals the exact routine
    Y = rng.uniform(-0.2, 1.3, size=(40, M))
    exact = np.array([hvm.hvi([y], F, ref) for y in Y])
    np.testing.assert_allclose(hvm.hvi_boxes(Y, L, U), exact, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(hvm.hvi_samples(Y, F[hvm.pareto_front(F)], ref), exact, rtol=1e-10, atol=1e-14)


def test_empty_front_boxes():
    L, U = hvm.nondominated_boxes(np.zeros((0, 2)), [1.0, 1.0])
    assert L.shape == (1, 2) and np.all(np.isneginf(L)) and np.all(U == 1.0)
