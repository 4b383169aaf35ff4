import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_cost_decision, random_probs

from segmeta.decision import (
    bayes_decide,
    class_counts,
    constant_costs,
    cost_decide,
    decide,
    estimate_priors,
    ml_costs,
    ml_decide,
    priors_from_counts,
    read_cost_csv,
    write_cost_csv,
)
from segmeta.errors import (
    EmptyInput,
    InvalidProbabilities,
    NonpositivePrior,
    ShapeMismatch,
    ValidationError,
    ZeroPrior,
)


def px(*values):
    return np.array(values, dtype=np.float64).reshape(1, 1, -1)


def test_bayes_examples():
    assert bayes_decide(px(0.2, 0.5, 0.3))[0, 0] == 1
    assert bayes_decide(px(0.5, 0.5))[0, 0] == 0
    assert bayes_decide(px(0.2, 0.4, 0.4))[0, 0] == 1


def test_bayes_rejects_bad_volume():
    with pytest.raises(InvalidProbabilities):
        bayes_decide(px(0.2, 0.2))


def test_cost_examples():
    assert cost_decide(px(0.6, 0.4), constant_costs(2))[0, 0] == 0
    c = np.array([[0.0, 10.0], [1.0, 0.0]])
    assert cost_decide(px(0.6, 0.4), c)[0, 0] == 1
    rng = np.random.default_rng(1)
    for _ in range(10):
        c = rng.uniform(0, 5, (3, 3))
        np.fill_diagonal(c, 0)
        assert cost_decide(px(1.0, 0.0, 0.0), c)[0, 0] == 0


def test_all_zero_costs_warn_and_return_zero(caplog):
    p = random_probs(np.random.default_rng(0), 3, 3, 3)
    with caplog.at_level(logging.WARNING):
        out = cost_decide(p, np.zeros((3, 3)))
    assert not out.any()
    assert "zero" in caplog.text


@pytest.mark.parametrize("costs", [
    [[0, 1], [1, 1]],
    [[0, -1], [1, 0]],
    [[0, 1, 1], [1, 0, 1]],
])
def test_invalid_costs(costs):
    with pytest.raises(ValidationError):
        cost_decide(px(0.5, 0.5), costs)


def test_cost_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(40):
        q = int(rng.integers(2, 6))
        p = random_probs(rng, 4, 5, q, sharp=2.0)
        c = rng.uniform(0, 3, (q, q)).round(1)
        np.fill_diagonal(c, 0)
        assert np.array_equal(cost_decide(p, c), brute_cost_decision(p, c))


def test_ml_examples():
    assert ml_decide(px(0.6, 0.4), np.array([0.9, 0.1]))[0, 0] == 1
    assert ml_decide(px(0.7, 0.3), np.array([0.5, 0.5]))[0, 0] == 0


def test_ml_equals_cost_rule_with_inverse_prior_costs():
    rng = np.random.default_rng(3)
    p = random_probs(rng, 6, 6, 4)
    pri = rng.dirichlet(np.ones(4))
    assert np.array_equal(ml_decide(p, pri), cost_decide(p, ml_costs(pri)))


def test_ml_errors():
    p = random_probs(np.random.default_rng(0), 2, 2, 3)
    with pytest.raises(ShapeMismatch):
        ml_decide(p, np.full((3, 2, 3), 1 / 3))
    with pytest.raises(NonpositivePrior):
        ml_decide(p, np.array([0.5, 0.5, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ml_argmax_invariances(seed):
    rng = np.random.default_rng(seed)
    q = int(rng.integers(2, 7))
    p = random_probs(rng, 5, 5, q)
    pri = rng.dirichlet(np.ones(q), size=(5, 5))
    base = ml_decide(p, pri)
    scale = rng.uniform(0.1, 10, (5, 5, 1))
    assert np.array_equal(ml_decide(p, pri * scale), base)
    assert np.array_equal(ml_decide(p, np.full((5, 5, q), 1 / q)), bayes_decide(p))


def test_decide_dispatch():
    p = px(0.6, 0.4)
    assert decide(p, "bayes")[0, 0] == 0
    assert decide(p, "ml", priors=np.array([0.9, 0.1]))[0, 0] == 1
    with pytest.raises(ValidationError):
        decide(p, "ml")
    with pytest.raises(ValidationError):
        decide(p, "nope")


def test_prior_examples():
    a, b = np.array([[0]], np.uint8), np.array([[1]], np.uint8)
    assert np.allclose(estimate_priors([a, b], 2)[0, 0], [0.5, 0.5])
    assert np.allclose(estimate_priors([a, a], 2)[0, 0], [0.75, 0.25])
    ign = np.array([[255]], np.uint8)
    assert np.allclose(estimate_priors([ign], 2)[0, 0], [0.5, 0.5])


def test_prior_errors():
    with pytest.raises(EmptyInput):
        estimate_priors([], 2)
    a = np.array([[0]], np.uint8)
    with pytest.raises(ZeroPrior):
        estimate_priors([a], 2, alpha=0.0)
    with pytest.raises(NonpositivePrior):
        estimate_priors([a], 2, alpha=0.0)
    with pytest.raises(ShapeMismatch):
        estimate_priors([a, np.zeros((2, 2), np.uint8)], 2)
    with pytest.raises(ValidationError):
        estimate_priors([np.array([[5]], np.uint8)], 2)


def test_priors_sum_to_one_and_are_positive():
    rng = np.random.default_rng(4)
    labels = [rng.integers(0, 4, (7, 9)).astype(np.uint8) for _ in range(5)]
    labels[0][2, 3] = 255
    pri = estimate_priors(labels, 4, alpha=0.5)
    assert np.all(np.abs(pri.sum(axis=2) - 1) < 1e-12)
    assert np.all(pri > 0)


def test_prior_counts_independent_of_order():
    rng = np.random.default_rng(5)
    labels = [rng.integers(0, 3, (4, 4)).astype(np.uint8) for _ in range(6)]
    assert np.array_equal(class_counts(labels, 3), class_counts(labels[::-1], 3))


def test_downscaled_priors():
    counts = np.zeros((4, 5, 2), np.int64)
    counts[:2, :2, 0] = 3
    counts[:2, :2, 1] = 1
    pri = priors_from_counts(counts, alpha=1.0, downscale=2)
    assert pri.shape == (4, 5, 2)
    assert np.allclose(pri[0, 0], [13 / 18, 5 / 18])
    assert np.allclose(pri[1, 1], pri[0, 0])
    assert np.allclose(pri[3, 4], [0.5, 0.5])


def test_cost_csv_round_trip(tmp_path):
    c = np.array([[0, 1.5, 2], [1, 0, 3], [0.25, 4, 0]])
    write_cost_csv(tmp_path / "c.csv", c)
    assert np.array_equal(read_cost_csv(tmp_path / "c.csv"), c)
    (tmp_path / "bad.csv").write_text("0,1\n1,x\n")
    with pytest.raises(ValidationError):
        read_cost_csv(tmp_path / "bad.csv")
