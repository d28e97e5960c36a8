import math

import numpy as np
import pytest
from oracles import bernoulli_iterate, cantor_iterate, line_w1

from krmetric import DomainError, PreconditionError
from krmetric.hutchinson import (
    ContractionMap,
    ContractionSystem,
    bernoulli_system,
    cantor_system,
    basis_system,
    iterate_invariant,
    markov_step,
    operator_gap,
    system_from_json,
    truncate_countable,
)
from krmetric.measures import DiscreteMeasure, dirac, first_moment
from krmetric.metric_core import MetricSpace


def origin(dim=1):
    return dirac(0, MetricSpace.euclidean([np.zeros(dim)]))


def atoms_1d(mu):
    return mu.space.coords[mu.indices, 0], mu.weights


def test_map_constructors():
    S = ContractionMap.affine([[0.5, 0.0], [0.0, 0.25]], [1.0, 0.0])
    assert S.lip == pytest.approx(0.5)
    np.testing.assert_allclose(S(S.fixed_point), [S.fixed_point])
    R = ContractionMap.similarity(0.5, [1.0, 1.0], rotation=[[0, -1], [1, 0]])
    np.testing.assert_allclose(R([[1.0, 1.0]]), [[1.0, 1.0]])
    assert R.measured_lip(np.random.default_rng(0).normal(size=(20, 2))) == pytest.approx(0.5)
    F = ContractionMap.from_function(lambda x: np.sin(x) / 2, 0.5, dim=1)
    assert abs(F.fixed_point[0]) < 1e-9


@pytest.mark.parametrize("lip", [1.0, 1.5, -1.0])
def test_rejects_non_contractions(lip):
    with pytest.raises(DomainError):
        ContractionMap.similarity(lip, [0.0])


def test_system_validation():
    S = ContractionMap.similarity(0.5, [0.0])
    with pytest.raises(DomainError):
        ContractionSystem([S, S], [0.5, 0.6])
    with pytest.raises(DomainError):
        ContractionSystem([S, ContractionMap.similarity(0.5, [0.0, 0.0])], [0.5, 0.5])
    assert cantor_system().contraction_factor == pytest.approx(1 / 3)


def test_markov_step_matches_closed_form():
    nu = origin()
    for n in range(1, 6):
        nu = markov_step(nu, bernoulli_system())
        x, w = atoms_1d(nu)
        ex, ew = bernoulli_iterate(n)
        np.testing.assert_allclose(np.sort(x), ex, atol=1e-15)
        np.testing.assert_allclose(w, ew)


def test_markov_step_dimension_mismatch():
    with pytest.raises(DomainError):
        markov_step(origin(2), bernoulli_system())


def test_bernoulli_step_distances_against_oracle():
    rep = iterate_invariant(bernoulli_system(), origin(), tol=1e-300, max_steps=8)
    for n, h in enumerate(rep.step_distances):
        x0, w0 = bernoulli_iterate(n)
        x1, w1 = bernoulli_iterate(n + 1)
        assert h == pytest.approx(line_w1(x0, w0, x1, w1), abs=1e-14)
    assert not rep.converged


def test_cantor_iterate_against_oracle():
    rep = iterate_invariant(cantor_system(), origin(), tol=1e-300, max_steps=7)
    x, w = atoms_1d(rep.iterate)
    ex, ew = cantor_iterate(7)
    np.testing.assert_allclose(np.sort(x), ex, atol=1e-15)
    zero = rep.iterate.space.locate([0.0])
    # mean of the n-th iterate from 0 is (1 - 3^-n) / 2
    assert first_moment(rep.iterate, zero) == pytest.approx((1 - 3.0**-7) / 2, abs=1e-14)


def test_bound_really_bounds():
    # reference: a long uncoarsened run is within 3^-12 of the invariant measure
    sys = cantor_system()
    ref = iterate_invariant(sys, origin(), tol=1e-300, max_steps=12).iterate
    rep = iterate_invariant(sys, origin(), tol=1e-2)
    assert rep.converged and rep.a_posteriori_bound <= 1e-2
    xa, wa = atoms_1d(rep.iterate)
    xb, wb = atoms_1d(ref)
    assert line_w1(xa, wa, xb, wb) <= rep.a_posteriori_bound + 3.0**-12


def test_coarsened_iteration_is_certified():
    sys = bernoulli_system()
    # 16 atoms cannot get closer than 1/64 to Lebesgue measure, so ask for less
    rep = iterate_invariant(sys, origin(), tol=0.05, cap=16, min_steps=8)
    assert rep.converged and len(rep.iterate) <= 16 and rep.coarsening_bound > 0
    # invariant measure is Lebesgue on [0, 1]; compare with a fine grid
    grid = (np.arange(4096) + 0.5) / 4096
    x, w = atoms_1d(rep.iterate)
    true = line_w1(x, w, grid, np.full(4096, 1 / 4096))
    assert true <= rep.a_posteriori_bound + 1 / (4 * 4096)


def test_step_limit_env(monkeypatch):
    monkeypatch.setenv("KR_STEP_LIMIT", "3")
    rep = iterate_invariant(cantor_system(), origin(), tol=1e-12)
    assert rep.steps == 3 and not rep.converged
    monkeypatch.setenv("KR_STEP_LIMIT", "zero")
    with pytest.raises(DomainError):
        iterate_invariant(cantor_system(), origin(), tol=1e-12)


def test_truncate_countable():
    def family():
        i = 1
        while True:
            yield ContractionMap.similarity(0.5, [float(i)]), 2.0**-i
            i += 1

    sys, tail = truncate_countable(family(), 3)
    assert tail.tail_mass == pytest.approx(1 / 8) and not tail.exhausted
    np.testing.assert_allclose(sys.probs, np.array([4, 2, 1]) / 7)
    finite = [(ContractionMap.similarity(0.5, [0.0]), 0.5), (ContractionMap.similarity(0.5, [1.0]), 0.5)]
    _, tail = truncate_countable(finite, 5)
    assert tail.exhausted and tail.tail_mass == 0
    with pytest.raises(PreconditionError):
        truncate_countable(family(), 2, tail_mass=0.0)


def test_basis_truncation():
    sys, tail = basis_system(4, 6)
    assert tail.tail_mass == 2.0**-4
    assert tail.tail_moment == pytest.approx(math.sqrt(2) / 16)
    np.testing.assert_allclose(sys.probs, np.array([8, 4, 2, 1]) / 15)
    with pytest.raises(DomainError):
        basis_system(6, 4)


def test_operator_gap_zero_for_same_system():
    nu = iterate_invariant(cantor_system(), origin(), tol=1e-300, max_steps=3).iterate
    assert operator_gap(cantor_system(), cantor_system(), nu) == 0


def test_system_json_round_trip():
    sys = cantor_system()
    back = system_from_json(sys.to_json())
    assert back.contraction_factor == pytest.approx(sys.contraction_factor)
    for a, b in zip(sys.maps, back.maps):
        np.testing.assert_allclose(a(np.array([[0.3]])), b(np.array([[0.3]])))
    with pytest.raises(DomainError, match=r"maps\[0\]"):
        system_from_json({"maps": [{"ratio": 0.5}], "p": [1.0]})


def test_rejects_non_probability_start():
    sp = MetricSpace.euclidean([[0.0]])
    with pytest.raises(PreconditionError):
        iterate_invariant(cantor_system(), DiscreteMeasure(sp, [0], [0.5]))
