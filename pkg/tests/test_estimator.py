import numpy as np
import pytest

from estimator import detect_and_estimate, estimates_to_rows, existence_probabilities
from spa_engine import AugmentedBelief


def belief(particles, class_weights, nonexistence):
    return AugmentedBelief(np.asarray(particles, dtype=float), np.asarray(class_weights, dtype=float), nonexistence)


def test_unlikely_pt_is_not_reported():
    assert detect_and_estimate([belief([[0, 0, 0, 0]], [[0.2, 0.2]], 0.6)]) == []


def test_single_particle_estimate():
    estimates = detect_and_estimate([belief([[10, -5, 1, 2]], [[0.6, 0.2]], 0.2)], time=7)
    (estimate,) = estimates
    np.testing.assert_allclose(estimate.position, [10, -5])
    np.testing.assert_allclose(estimate.velocity, [1, 2])
    np.testing.assert_allclose(estimate.class_pmf, [0.75, 0.25])
    assert estimate.existence_prob == pytest.approx(0.8)
    assert estimate.map_class == 1
    assert estimate.label == 1
    assert estimate.time == 7


def test_equal_weight_particles_average():
    (estimate,) = detect_and_estimate([belief([[0, 0, 0, 0], [4, 2, 2, 0]], [[0.3], [0.3]], 0.4)])
    np.testing.assert_allclose(estimate.position, [2, 1])
    np.testing.assert_allclose(estimate.velocity, [1, 0])


def test_translation_moves_estimate():
    rng = np.random.default_rng(4)
    particles = rng.normal(size=(30, 4))
    weights = rng.uniform(size=(30, 2))
    weights *= 0.9 / weights.sum()
    shift = np.array([5.0, -3.0, 0.0, 0.0])
    (base,) = detect_and_estimate([belief(particles, weights, 0.1)])
    (moved,) = detect_and_estimate([belief(particles + shift, weights, 0.1)])
    np.testing.assert_allclose(moved.position, base.position + shift[:2], atol=1e-12)


def test_higher_threshold_reports_subset():
    beliefs = [
        belief([[0, 0, 0, 0]], [[p]], 1.0 - p)
        for p in (0.3, 0.55, 0.7, 0.95)
    ]
    labels = [{e.label for e in detect_and_estimate(beliefs, threshold)} for threshold in (0.2, 0.5, 0.6, 0.9)]
    assert labels == [{1, 2, 3, 4}, {2, 3, 4}, {3, 4}, {4}]
    assert all(later <= earlier for earlier, later in zip(labels, labels[1:]))


def test_existence_probabilities():
    beliefs = [belief([[0, 0, 0, 0]], [[0.1, 0.2]], 0.7), belief([[0, 0, 0, 0]], [[0.0, 0.0]], 1.0)]
    np.testing.assert_allclose(existence_probabilities(beliefs), [0.3, 0.0])


def test_rows_carry_class_columns():
    estimates = detect_and_estimate([belief([[1, 2, 3, 4]], [[0.1, 0.2, 0.6]], 0.1)], time=3)
    (row,) = estimates_to_rows(estimates, run=0, tracker="proposed")
    assert row["run"] == 0 and row["tracker"] == "proposed"
    assert row["n"] == 3 and row["map_class"] == 3
    assert row["p_class_3"] == pytest.approx(2 / 3)
