import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmatch.matching import (
    UNASSIGNED,
    Assignment,
    DualSolution,
    InstanceTooLarge,
    ShapeError,
    brute_force_assignment,
    enumerate_optimal,
    instance_from_json,
    instance_to_json,
    is_feasible,
    objective_of,
    pad_to_balanced,
    solve_assignment,
    solve_dual,
    verify_duality,
)

from conftest import instances

W11 = np.array([[0.9, 0.1], [0.8, 0.2]])
W17 = np.array([[0.1, 0.9], [0.8, 0.2]])


def test_pad_already_balanced():
    b = pad_to_balanced(np.ones((2, 2)), [1, 1])
    assert b.weights.shape == (2, 2) and b.dummy_rows == 0 and b.dummy_cols == 0


def test_pad_adds_dummy_refugee():
    b = pad_to_balanced([[0.3, 0.4]], [2, 0])
    assert b.weights.shape == (2, 2)
    assert b.dummy_rows == 1 and np.all(b.weights[1] == 0)


def test_pad_single_location_two_slots():
    b = pad_to_balanced([[0.7]], [2])
    assert b.weights.shape == (2, 1) and b.weights[1, 0] == 0


def test_pad_adds_dummy_location():
    b = pad_to_balanced(np.ones((3, 2)), [1, 1])
    assert b.weights.shape == (3, 3)
    assert b.capacities.tolist() == [1, 1, 1]
    assert np.all(b.weights[:, 2] == 0)


@pytest.mark.parametrize("w,locs,obj", [
    (W11, (0, 1), 1.1),
    ([[0.5]], (0,), 0.5),
    (W17, (1, 0), 1.7),
])
def test_solve_examples(w, locs, obj):
    a = solve_assignment(w, [1] * np.shape(w)[1])
    assert a.locations == locs
    assert a.objective == pytest.approx(obj, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        solve_assignment(W11, [1, 1, 1])
    with pytest.raises(ShapeError):
        solve_dual(W11, [1])


def test_negative_weights_rejected():
    with pytest.raises((ShapeError, ValueError)):
        solve_assignment([[-0.1]], [1])


def test_dual_examples():
    d = solve_dual(W11, [1, 1])
    assert d.objective == pytest.approx(1.1, abs=1e-12)
    assert np.all(d.u[:, None] + d.v[None, :] >= W11 - 1e-12)
    d = solve_dual(W17, [1, 1])
    assert d.objective == pytest.approx(1.7, abs=1e-12)
    hand = DualSolution(np.zeros(2), np.array([0.8, 0.9]), 1.7)
    assert verify_duality(solve_assignment(W17, [1, 1]), hand, W17, [1, 1]).passed


def test_dual_zero_weights():
    d = solve_dual(np.zeros((3, 2)), [2, 1])
    assert np.all(d.u == 0) and np.all(d.v == 0) and d.objective == 0


def test_verify_passes_and_fails():
    c = [1, 1]
    a, d = solve_assignment(W11, c), solve_dual(W11, c)
    rep = verify_duality(a, d, W11, c)
    assert rep.passed and rep.gap <= 1e-12
    worse = Assignment((1, 0), objective_of(W11, (1, 0)))
    assert worse.objective == pytest.approx(0.9)
    rep = verify_duality(worse, d, W11, c)
    assert not rep.passed and rep.gap == pytest.approx(0.2, abs=1e-12)
    bad = DualSolution(d.u, d.v - np.array([1.0, 0.0]), d.objective)
    rep = verify_duality(a, bad, W11, c)
    assert rep.max_dual_infeasibility > 0 and not rep.passed


def test_brute_force_examples():
    assert brute_force_assignment(W11, [1, 1]).objective == pytest.approx(1.1)
    a = brute_force_assignment([[0.2, 0.7, 0.4]], [1, 1, 1])
    assert a.locations == (1,) and a.objective == pytest.approx(0.7)
    w = np.array([[0.3, 0.6], [0.5, 0.2], [0.9, 0.8]])
    a = brute_force_assignment(w, [1, 1])
    assert a.locations.count(UNASSIGNED) == 1
    assert a.locations == (1, UNASSIGNED, 0) and a.objective == pytest.approx(1.5)


def test_brute_force_refuses_large():
    with pytest.raises(InstanceTooLarge):
        brute_force_assignment(np.ones((20, 5)), [4] * 5)


@given(instances())
def test_matches_oracle(inst):
    w, c = inst
    a = solve_assignment(w, c)
    assert is_feasible(a.locations, c, w.shape[1])
    assert abs(a.objective - brute_force_assignment(w, c).objective) <= 1e-12
    assert a.locations in enumerate_optimal(w, c, tol=1e-12)


@given(instances(max_n=12, max_k=5, grid=False))
def test_strong_duality(inst):
    w, c = inst
    rep = verify_duality(solve_assignment(w, c), solve_dual(w, c), w, c, tol=1e-9)
    assert rep.passed, rep
    assert rep.min_u >= -1e-12 and rep.min_v >= -1e-12


@given(instances(max_n=8, max_k=4, grid=False), st.floats(0.1, 10))
def test_scaling_keeps_solution(inst, s):
    w, c = inst
    a, b = solve_assignment(w, c), solve_assignment(w * s, c)
    assert b.objective == pytest.approx(a.objective * s, abs=1e-9)


@given(instances())
def test_deterministic(inst):
    w, c = inst
    assert solve_assignment(w, c) == solve_assignment(w.copy(), c.copy())


def test_tie_break_is_lexicographic():
    a = solve_assignment(np.full((3, 3), 0.5), [1, 1, 1])
    assert a.locations == (0, 1, 2)


def test_zero_size_passes_through():
    a = solve_assignment(np.zeros((0, 2)), [1, 1])
    assert a.locations == () and a.objective == 0
    assert solve_assignment(np.ones((2, 1)), [0]).locations == (UNASSIGNED, UNASSIGNED)


@given(instances())
def test_json_roundtrip(inst):
    w, c = inst
    w2, c2 = instance_from_json(instance_to_json(w, c))
    assert np.array_equal(w, w2) and np.array_equal(c, c2)


def test_json_bad_length():
    with pytest.raises(ShapeError):
        instance_from_json(json.dumps({"n": 2, "k": 2, "weights": [0.1], "capacities": [1, 1]}))
