import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ifrvis.assignment import InfeasibleAssignmentError, assignment_cost, hungarian_assign
from oracles import brute_force_min


@st.composite
def cost_matrices(draw, max_m=5, max_n=6):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(0, n))
    return draw(arrays(np.float64, (m, n), elements=st.floats(-10, 10, allow_nan=False, width=64)))


def test_diagonal_dominant():
    cost = -np.eye(3)
    assert hungarian_assign(cost).tolist() == [0, 1, 2]


def test_anti_diagonal():
    cost = np.array([[0.0, -5.0], [-5.0, 0.0]])
    pi = hungarian_assign(cost)
    assert pi.tolist() == [1, 0]
    assert assignment_cost(cost, pi) == -10.0


def test_random_5x8_matches_enumeration(rng):
    cost = rng.normal(size=(5, 8))
    assert assignment_cost(cost, hungarian_assign(cost)) == pytest.approx(brute_force_min(cost), abs=1e-12)


def test_infeasible():
    with pytest.raises(InfeasibleAssignmentError):
        hungarian_assign(np.zeros((3, 2)))


def test_non_finite():
    with pytest.raises(InfeasibleAssignmentError):
        hungarian_assign(np.array([[0.0, np.inf]]))


def test_empty():
    assert hungarian_assign(np.zeros((0, 4))).tolist() == []


def test_ties_go_to_lowest_query():
    assert hungarian_assign(np.zeros((2, 4))).tolist() == [0, 1]
    assert hungarian_assign(np.zeros((1, 3))).tolist() == [0]


@given(cost_matrices())
@settings(max_examples=150, deadline=None)
def test_optimal_and_injective(cost):
    pi = hungarian_assign(cost)
    assert len(pi) == cost.shape[0]
    assert len(set(pi.tolist())) == len(pi)
    assert np.all((pi >= 0) & (pi < cost.shape[1]))
    if cost.shape[0]:
        assert assignment_cost(cost, pi) == pytest.approx(brute_force_min(cost), abs=1e-9)


@given(cost_matrices(), st.floats(-50, 50, allow_nan=False))
@settings(max_examples=60, deadline=None)
def test_uniform_shift(cost, c):
    pi = hungarian_assign(cost)
    shifted = hungarian_assign(cost + c)
    m = cost.shape[0]
    assert assignment_cost(cost + c, shifted) == pytest.approx(assignment_cost(cost, pi) + m * c, abs=1e-8)


def test_deterministic(rng):
    cost = rng.integers(0, 3, size=(6, 8)).astype(float)
    assert hungarian_assign(cost).tolist() == hungarian_assign(cost.copy()).tolist()
