import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krmetric import DomainError, PreconditionError
from krmetric.metric_core import (
    LipFunction,
    MetricSpace,
    common_space,
    distance_function,
    envelope,
    lip_constant,
    lip_witness,
    mcshane_extend,
    space_from_json,
    space_to_json,
    validate_space,
)

coords = st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=2)


def test_euclidean_distances():
    sp = MetricSpace.euclidean([[0, 0], [3, 4], [6, 8]])
    assert sp.dist(0, 1) == 5
    assert sp.pairwise([0], [1, 2]).tolist() == [[5, 10]]
    assert sp.diameter() == 10
    assert validate_space(sp) == []


def test_one_dimensional_uses_abs():
    sp = MetricSpace.euclidean([[0.0], [2.5], [-1.0]])
    assert sp.dist(1, 2) == 3.5
    np.testing.assert_array_equal(sp.distances_from(0), [0, 2.5, 1])


def test_collinear_matrix_is_valid():
    sp = MetricSpace.from_matrix([[0, 1, 2], [1, 0, 1], [2, 1, 0]])
    assert validate_space(sp) == []


def test_triangle_violation_is_reported():
    bad = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], dtype=float)
    with pytest.raises(DomainError, match="triangle"):
        MetricSpace.from_matrix(bad)
    problems = validate_space(MetricSpace.from_matrix(bad, validate=False))
    assert problems and "triangle" in problems[0]


@pytest.mark.parametrize(
    "dist",
    [
        [[0, 1], [2, 0]],
        [[1, 1], [1, 0]],
        [[0, -1], [-1, 0]],
        [[0, 0], [0, 0]],
    ],
)
def test_matrix_axioms(dist):
    with pytest.raises(DomainError):
        MetricSpace.from_matrix(dist)


def test_index_errors():
    sp = MetricSpace.euclidean([[0.0], [1.0]])
    with pytest.raises(DomainError):
        sp.dist(0, 2)
    with pytest.raises(DomainError):
        sp.check_index(-1)


def test_extend_merges_and_keeps_lineage():
    sp = MetricSpace.euclidean([[0.0], [1.0]])
    big, idx = sp.extend([[1.0 + 1e-14], [2.0], [2.0]])
    assert idx.tolist() == [1, 2, 2]
    assert big.n == 3 and big.extends(sp) and not sp.extends(big)
    assert common_space(sp, big) is big
    # extending the old version again forks instead of clobbering
    other, idx2 = sp.extend([[5.0]])
    assert idx2.tolist() == [2]
    assert other.coords[2, 0] == 5.0 and big.coords[2, 0] == 2.0
    assert not other.extends(big) and not big.extends(other)
    with pytest.raises(DomainError):
        common_space(big, other)


def test_locate():
    sp = MetricSpace.euclidean([[0.0, 0.0], [1.0, 1.0]])
    assert sp.locate([1.0, 1.0]) == 1
    assert sp.locate([0.5, 0.5]) is None


def test_json_round_trip():
    for sp in (MetricSpace.euclidean([[0.0, 1.5], [2.0, -1.0]]), MetricSpace.from_matrix([[0, 2], [2, 0]])):
        back = space_from_json(space_to_json(sp))
        assert back.mode == sp.mode
        np.testing.assert_array_equal(back.pairwise(range(2), range(2)), sp.pairwise(range(2), range(2)))


@pytest.mark.parametrize(
    "obj",
    [
        {"mode": "euclidean"},
        {"mode": "euclidean", "points": []},
        {"mode": "euclidean", "points": [[0, 1], [2]]},
        {"mode": "matrix", "n": 3, "dist": [[0, 1], [1, 0]]},
        {"mode": "torus", "points": [[0]]},
    ],
)
def test_json_rejects_malformed(obj):
    with pytest.raises(DomainError):
        space_from_json(obj)


def test_lip_constant_and_witness():
    sp = MetricSpace.euclidean([[0.0], [1.0], [3.0]])
    f = LipFunction([0.0, 2.0, 3.0])
    alpha, i, j = lip_witness(f, sp)
    assert alpha == 2.0 and {i, j} == {0, 1}
    assert lip_constant(distance_function(sp, 1), sp) == 1.0


def test_partial_function_domain():
    f = LipFunction.from_mapping({0: 1.0, 2: -1.0}, 3)
    assert f.domain.tolist() == [0, 2]
    assert f(2) == -1.0
    with pytest.raises(DomainError):
        f(1)


def test_envelope_small_case():
    # hand computation on a 4-cycle: phi_1(x) = max_t f(t) - d(x, t)
    sp = MetricSpace.from_matrix([[0, 1, 2, 1], [1, 0, 1, 2], [2, 1, 0, 1], [1, 2, 1, 0]])
    f = LipFunction([0.0, 3.0, 1.0, 0.5])
    np.testing.assert_array_equal(envelope(f, 1, sp).values, [2.0, 3.0, 2.0, 1.0])
    np.testing.assert_array_equal(envelope(f, 3, sp).values, f.values)
    with pytest.raises(DomainError):
        envelope(f, 0, sp)


def test_envelope_needs_total_function():
    sp = MetricSpace.euclidean([[0.0], [1.0]])
    with pytest.raises(DomainError):
        envelope(LipFunction([0.0, np.nan]), 1, sp)


def test_mcshane_is_largest_extension():
    sp = MetricSpace.euclidean([[0.0], [1.0], [2.0], [3.0]])
    psi = mcshane_extend({0: 0.0, 3: 1.0}, sp)
    np.testing.assert_array_equal(psi.values, [0.0, 1.0, 2.0, 1.0])
    assert lip_constant(psi, sp) <= 1


def test_mcshane_reports_violating_pair():
    sp = MetricSpace.euclidean([[0.0], [1.0], [2.0]])
    with pytest.raises(PreconditionError, match="0.*2|2.*0"):
        mcshane_extend({0: 0.0, 2: 5.0}, sp)


@settings(max_examples=60, deadline=None)
@given(st.lists(coords, min_size=3, max_size=8), st.data())
def test_mcshane_properties(points, data):
    sp = MetricSpace.euclidean(points)
    n = sp.n
    keys = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=n, unique=True))
    # values of a 1-Lipschitz function restricted to the keys
    anchor = data.draw(st.integers(0, n - 1))
    base = distance_function(sp, anchor).values * data.draw(st.floats(-1, 1))
    psi = mcshane_extend({k: base[k] for k in keys}, sp)
    assert lip_constant(psi, sp) <= 1 + 1e-9
    np.testing.assert_array_equal(psi.values[keys], base[keys])
    # maximality: no 1-Lipschitz extension exceeds psi, in particular not base
    assert np.all(base <= psi.values + 1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(coords, min_size=3, max_size=6, unique_by=lambda p: tuple(p)))
def test_euclidean_axioms(points):
    sp = MetricSpace.euclidean(points)
    D = sp.pairwise(range(sp.n), range(sp.n))
    assert np.allclose(D, D.T, rtol=0, atol=0)
    assert np.all(D[:, :, None] <= D[:, None, :] + D.T[None, :, :] + 1e-9 * (1 + D[:, :, None]))
