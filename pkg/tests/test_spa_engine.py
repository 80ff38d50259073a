import dataclasses
import logging

import numpy as np
import pytest

from config import BIRTH_PROB, DETECTION_THRESHOLD, SURVIVAL_PROB
from conftest import make_motion, make_sensor
from model import (
    AugmentedMeasurement,
    ClassTransitionMatrix,
    ClutterClassPmf,
    ConfusionMatrix,
    KinematicState,
    augmented_likelihood_ratio,
    reference_class_transition,
    uninformative_confusion,
)
from simulator import build_reference_scenario, generate_run_frames
from spa_engine import (
    AugmentedBelief,
    EngineError,
    PredictedMessage,
    SensorFactor,
    Tracker,
    TrackerConfig,
    fuse_and_normalize,
    measurement_evaluation,
    measurement_update,
    predict,
    systematic_resample,
)

TARGET = np.array([0.0, 0.0, 1.0, 0.0])
# what the sensor at (3000, 0) sees of a target at the origin
ON_TARGET = AugmentedMeasurement(3000.0, np.pi, 1)


def single_particle(class_weights, nonexistence, state=TARGET):
    return AugmentedBelief(np.array([state]), np.array([class_weights], dtype=float), nonexistence)


def random_belief(rng, num_particles=40, num_classes=3, existence=0.6):
    particles = np.column_stack([
        rng.uniform(-150, 150, size=(num_particles, 2)),
        rng.normal(0, 1, size=(num_particles, 2)),
    ])
    weights = rng.uniform(size=(num_particles, num_classes))
    return AugmentedBelief(particles, weights / weights.sum() * existence, 1.0 - existence)


def random_column_stochastic(rng, rows, cols):
    entries = rng.uniform(0.05, 1.0, size=(rows, cols))
    return entries / entries.sum(axis=0)


class TestBelief:
    def test_rejects_all_zero_belief(self):
        with pytest.raises(EngineError):
            AugmentedBelief(np.zeros((2, 4)), np.zeros((2, 3)), 0.0)

    def test_rejects_unnormalized_belief(self):
        with pytest.raises(EngineError):
            single_particle([0.5, 0.2, 0.2], 0.2)

    def test_class_marginal(self):
        belief = single_particle([0.3, 0.1, 0.0], 0.6)
        assert belief.existence_probability == pytest.approx(0.4)
        np.testing.assert_allclose(belief.class_marginal(), [0.75, 0.25, 0.0])


class TestPredict:
    def test_identity_dynamics_keep_class_marginals(self, rng):
        motion = make_motion(accel_std=0.0, survival_prob=1.0, birth_prob=0.0)
        identity = ClassTransitionMatrix(np.eye(3))
        belief = random_belief(rng)
        pred = predict(belief, motion, identity, rng)
        np.testing.assert_array_equal(pred.particles, belief.particles @ motion.transition_matrix.T)
        np.testing.assert_allclose(pred.class_weights.sum(axis=0), belief.class_weights.sum(axis=0), rtol=1e-12)

    def test_birth_from_nonexistence(self, rng):
        motion = make_motion(birth_prob=0.01)
        belief = AugmentedBelief(np.zeros((100, 4)), np.zeros((100, 3)), 1.0)
        pred = predict(belief, motion, reference_class_transition(3), rng)
        assert pred.num_particles == 110
        np.testing.assert_allclose(pred.class_weights.sum(axis=0), np.full(3, 0.01 / 3), rtol=1e-12)
        assert pred.nonexistence_mass == pytest.approx(0.99, rel=1e-12)

    def test_doubly_stochastic_transition_keeps_uniform_classes(self, rng):
        belief = random_belief(rng)
        belief.class_weights[:] = belief.class_weights.sum(axis=1, keepdims=True) / 3
        pred = predict(belief, make_motion(), reference_class_transition(3), rng)
        marginal = pred.class_weights.sum(axis=0)
        np.testing.assert_allclose(marginal, np.full(3, marginal.mean()), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_existence_mass_bookkeeping(self, seed):
        rng = np.random.default_rng(seed)
        motion = make_motion(survival_prob=0.9, birth_prob=0.2)
        transition = ClassTransitionMatrix(random_column_stochastic(rng, 3, 3))
        pred = predict(random_belief(rng, existence=0.6), motion, transition, rng)
        assert pred.existence_probability == pytest.approx(0.9 * 0.6 + 0.2 * 0.4, abs=1e-12)
        assert pred.existence_probability + pred.nonexistence_mass == pytest.approx(1.0, abs=1e-9)

    def test_class_count_mismatch(self, rng):
        with pytest.raises(EngineError):
            predict(random_belief(rng), make_motion(), reference_class_transition(2), rng)


class TestMeasurementEvaluation:
    def test_nonexistent_pt(self, sensor):
        pred = PredictedMessage(np.array([TARGET]), np.zeros((1, 3)), 1.0)
        np.testing.assert_allclose(measurement_evaluation(pred, [ON_TARGET], sensor), [1.0, 0.0])

    def test_existing_single_particle(self, sensor):
        pred = PredictedMessage(np.array([TARGET]), np.array([[1.0, 0.0, 0.0]]), 0.0)
        ratio = augmented_likelihood_ratio(ON_TARGET, KinematicState.from_vector(TARGET), 1, sensor)
        np.testing.assert_allclose(measurement_evaluation(pred, [ON_TARGET], sensor), [0.1, 0.9 * ratio], rtol=1e-9)

    def test_no_measurements(self, sensor):
        pred = PredictedMessage(np.array([TARGET]), np.zeros((1, 3)), 1.0)
        np.testing.assert_array_equal(measurement_evaluation(pred, [], sensor), [1.0])

    def test_non_finite_beta_names_measurement(self, sensor):
        pred = PredictedMessage(np.array([TARGET]), np.array([[1.0, 0.0, 0.0]]), 0.0)
        with pytest.raises(EngineError, match="index 1"):
            measurement_evaluation(pred, [ON_TARGET], sensor, ratios=np.full((1, 3, 1), np.inf))


class TestMeasurementUpdate:
    def pred(self):
        return PredictedMessage(np.array([TARGET]), np.array([[0.5, 0.25, 0.25]]), 0.0)

    def test_sure_miss(self, sensor):
        factor = measurement_update(self.pred(), [1.0, 0.0], [ON_TARGET], sensor)
        np.testing.assert_allclose(factor.gamma, [[0.1, 0.1, 0.1]])
        assert factor.absent == 1.0

    def test_even_odds_with_unit_ratio(self, sensor):
        factor = measurement_update(self.pred(), [0.5, 0.5], [ON_TARGET], sensor, ratios=np.ones((1, 3, 1)))
        np.testing.assert_allclose(factor.gamma, [[0.5, 0.5, 0.5]])
        assert factor.absent == 0.5

    def test_certain_association_rules_out_absence(self, sensor):
        factor = measurement_update(self.pred(), [0.0, 1.0], [ON_TARGET], sensor)
        assert factor.absent == 0.0

    def test_eta_length_must_match(self, sensor):
        with pytest.raises(EngineError):
            measurement_update(self.pred(), [1.0], [ON_TARGET], sensor)


class TestFusion:
    def test_unit_factor_preserves_belief(self, rng):
        pred = PredictedMessage(*dataclasses.astuple(random_belief(rng, num_particles=2000)))
        unit = SensorFactor(np.ones_like(pred.class_weights), 1.0)
        exact = fuse_and_normalize(pred, [unit], rng, resample=False)
        np.testing.assert_allclose(exact.class_weights, pred.class_weights, rtol=1e-12)
        resampled = fuse_and_normalize(pred, [unit], rng)
        assert resampled.existence_probability == pytest.approx(pred.existence_probability, abs=1e-12)
        np.testing.assert_allclose(resampled.class_marginal(), pred.class_marginal(), atol=0.05)

    def test_second_identical_sensor_doubles_log_odds_shift(self, rng):
        pred = PredictedMessage(np.array([TARGET]), np.array([[0.1, 0.1, 0.1]]), 0.7)
        factor = SensorFactor(np.array([[1.5, 1.5, 1.5]]), 0.8)

        def log_odds(belief):
            return np.log(belief.existence_probability / belief.nonexistence_mass)

        prior = log_odds(pred)
        once = log_odds(fuse_and_normalize(pred, [factor], rng, resample=False)) - prior
        twice = log_odds(fuse_and_normalize(pred, [factor, factor], rng, resample=False)) - prior
        assert twice == pytest.approx(2 * once, rel=1e-12)

    def test_class_evidence_shifts_marginal(self, rng):
        pred = PredictedMessage(np.array([TARGET]), np.array([[0.2, 0.2, 0.2]]), 0.4)
        factor = SensorFactor(np.array([[2.0, 1.0, 1.0]]), 1.0)
        posterior = fuse_and_normalize(pred, [factor], rng, resample=False)
        np.testing.assert_allclose(posterior.class_marginal(), [0.5, 0.25, 0.25])

    def test_degenerate_evidence_resets_to_nonexistence(self, rng, caplog):
        pred = PredictedMessage(np.array([TARGET, TARGET]), np.full((2, 3), 1 / 6), 0.0)
        with caplog.at_level(logging.WARNING):
            posterior = fuse_and_normalize(pred, [SensorFactor(np.zeros((2, 3)), 1.0)], rng)
        assert posterior.nonexistence_mass == 1.0
        assert posterior.existence_probability == 0.0
        assert "resetting" in caplog.text

    def test_resampling_gives_one_hot_rows(self, rng):
        pred = PredictedMessage(*dataclasses.astuple(random_belief(rng, num_particles=50)))
        posterior = fuse_and_normalize(pred, [SensorFactor(np.ones((50, 3)), 1.0)], rng, num_particles=30)
        assert posterior.num_particles == 30
        assert np.all(np.count_nonzero(posterior.class_weights, axis=1) == 1)

    def test_shape_mismatch(self, rng):
        pred = PredictedMessage(np.array([TARGET]), np.array([[0.2, 0.2, 0.2]]), 0.4)
        with pytest.raises(EngineError):
            fuse_and_normalize(pred, [SensorFactor(np.ones((2, 3)), 1.0)], rng)


class TestSystematicResampling:
    def test_counts_follow_weights(self, rng):
        indices = systematic_resample([0.5, 0.0, 0.5], 4, rng)
        np.testing.assert_array_equal(np.bincount(indices, minlength=3), [2, 0, 2])

    def test_zero_weights_are_an_error(self, rng):
        with pytest.raises(EngineError):
            systematic_resample([0.0, 0.0], 3, rng)


def static_tracker(sensors, num_particles=50, num_pts=1, initial_existence=0.5, bp_iterations=20, seed=0):
    motion = make_motion(accel_std=0.0, survival_prob=1.0, birth_prob=0.0)
    config = TrackerConfig(
        num_pts=num_pts,
        num_particles=num_particles,
        bp_iterations=bp_iterations,
        initial_existence=initial_existence,
    )
    return Tracker(sensors, motion, reference_class_transition(3), config, np.random.default_rng(seed))


class TestTrackerStep:
    def test_missed_detection_lowers_existence(self, sensor):
        tracker = static_tracker([sensor])
        existence = tracker.step([[]])
        # 0.5 * 0.1 / (0.5 * 0.1 + 0.5)
        np.testing.assert_allclose(existence, [1 / 11], rtol=1e-12)

    def test_single_pt_single_measurement_is_exact(self, sensor):
        tracker = static_tracker([sensor], num_particles=1, bp_iterations=1)
        tracker.beliefs = [single_particle([0.25, 0.15, 0.1], 0.5)]
        pred = predict(tracker.beliefs[0], tracker.motion, tracker.transition, np.random.default_rng(1))
        beta = measurement_evaluation(pred, [ON_TARGET], sensor)
        expected = 1.0 - pred.nonexistence_mass / beta.sum()

        existence = tracker.step([[ON_TARGET]])
        assert existence[0] == pytest.approx(expected, rel=1e-9)
        np.testing.assert_allclose(tracker.last_association_marginals[0], [beta / beta.sum()], rtol=1e-9)

    def test_identical_sensors_give_identical_association(self, sensor):
        tracker = static_tracker([sensor, sensor], num_pts=3, initial_existence=0.3)
        tracker.beliefs[0] = single_particle([0.5, 0.2, 0.1], 0.2)
        frame = [ON_TARGET, AugmentedMeasurement(3100.0, np.pi - 0.01, 0)]
        tracker.step([frame, list(frame)])
        first, second = tracker.last_association_marginals
        np.testing.assert_array_equal(first, second)

    def test_confirmed_track_fades_after_two_misses_at_default_dynamics(self, sensor):
        motion = make_motion(survival_prob=SURVIVAL_PROB, birth_prob=BIRTH_PROB)
        config = TrackerConfig(num_pts=1, num_particles=50, initial_existence=1.0 - 1e-6)

        single = Tracker([sensor], motion, reference_class_transition(3), config, np.random.default_rng(0))
        assert single.step([[]])[0] > DETECTION_THRESHOLD
        assert single.step([[]])[0] < DETECTION_THRESHOLD

        pair = Tracker([sensor, sensor], motion, reference_class_transition(3), config, np.random.default_rng(0))
        assert pair.step([[], []])[0] < DETECTION_THRESHOLD

    def test_measurement_set_per_sensor(self, sensor):
        with pytest.raises(EngineError):
            static_tracker([sensor]).step([[], []])

    @pytest.mark.parametrize("seed", range(20))
    def test_beliefs_stay_normalized(self, seed):
        scenario = build_reference_scenario(3, 1, 5.0, seed=seed)
        frames = generate_run_frames(scenario, np.random.default_rng(seed))
        tracker = Tracker(
            scenario.sensors,
            make_motion(),
            scenario.class_transition,
            TrackerConfig(num_pts=6, num_particles=60),
            np.random.default_rng(seed),
        )
        for per_sensor in frames[:5]:
            tracker.step([frame.measurements for frame in per_sensor])
        for belief in tracker.beliefs:
            assert belief.class_weights.sum() + belief.nonexistence_mass == pytest.approx(1.0, abs=1e-9)
            assert belief.num_particles == 60


def relabel(inverse, confusion, clutter_pmf, transition):
    """Class relabeling: new class i is old class inverse[i]"""
    g = confusion.entries
    new_g = np.vstack([g[0, inverse], g[1:][np.ix_(inverse, inverse)]])
    new_p0 = np.concatenate([[clutter_pmf.probabilities[0]], clutter_pmf.probabilities[1:][inverse]])
    new_d = transition.entries[np.ix_(inverse, inverse)]
    return ConfusionMatrix(new_g), ClutterClassPmf(new_p0), ClassTransitionMatrix(new_d)


@pytest.mark.parametrize("seed", range(20))
def test_class_relabeling_permutes_posterior(seed):
    rng = np.random.default_rng(seed)
    inverse = np.array([2, 0, 1])
    forward = np.argsort(inverse)
    confusion = ConfusionMatrix(random_column_stochastic(rng, 4, 3))
    clutter_pmf = ClutterClassPmf(random_column_stochastic(rng, 4, 1)[:, 0])
    transition = ClassTransitionMatrix(random_column_stochastic(rng, 3, 3))
    new_confusion, new_pmf, new_transition = relabel(inverse, confusion, clutter_pmf, transition)

    sensor = make_sensor(confusion=confusion, clutter_class_pmf=clutter_pmf)
    new_sensor = make_sensor(confusion=new_confusion, clutter_class_pmf=new_pmf)
    belief = random_belief(rng)
    new_belief = AugmentedBelief(belief.particles, belief.class_weights[:, inverse], belief.nonexistence_mass)

    verdicts = rng.integers(0, 4, size=3)
    offsets = rng.normal(0, [5.0, 1e-3], size=(3, 2))
    measurements = [AugmentedMeasurement(3000.0 + dr, np.pi + db, v) for (dr, db), v in zip(offsets, verdicts)]
    new_measurements = [
        AugmentedMeasurement(z.range_m, z.bearing_rad, 0 if z.class_estimate == 0 else forward[z.class_estimate - 1] + 1)
        for z in measurements
    ]

    motion = make_motion()
    pred = predict(belief, motion, transition, np.random.default_rng(seed))
    new_pred = predict(new_belief, motion, new_transition, np.random.default_rng(seed))
    np.testing.assert_allclose(new_pred.class_weights, pred.class_weights[:, inverse], rtol=1e-12)

    eta = np.full(4, 0.25)
    factor = measurement_update(pred, eta, measurements, sensor)
    new_factor = measurement_update(new_pred, eta, new_measurements, new_sensor)
    posterior = fuse_and_normalize(pred, [factor], rng, resample=False)
    new_posterior = fuse_and_normalize(new_pred, [new_factor], rng, resample=False)
    np.testing.assert_allclose(new_posterior.class_marginal(), posterior.class_marginal()[inverse], rtol=1e-9)
    assert new_posterior.existence_probability == pytest.approx(posterior.existence_probability, rel=1e-9)


@pytest.mark.parametrize("num_classes", [1, 3])
def test_uninformative_classifier_reduces_to_baseline(num_classes):
    scenario = build_reference_scenario(num_classes, 1, 20.0, seed=11)
    frames = generate_run_frames(scenario, np.random.default_rng(11))
    sensor = scenario.sensors[0]
    flat_sensor = dataclasses.replace(sensor, confusion=uninformative_confusion(sensor.clutter_class_pmf))

    def run(sensors, classifier_enabled):
        tracker = Tracker(
            sensors,
            make_motion(),
            scenario.class_transition,
            TrackerConfig(num_pts=8, num_particles=200, classifier_enabled=classifier_enabled),
            np.random.default_rng(99),
        )
        for per_sensor in frames[:15]:
            tracker.step([frame.measurements for frame in per_sensor])
        return tracker.beliefs

    for flat, baseline in zip(run([flat_sensor], True), run([sensor], False)):
        np.testing.assert_array_equal(flat.particles, baseline.particles)
        np.testing.assert_array_equal(flat.class_weights, baseline.class_weights)
        assert flat.nonexistence_mass == baseline.nonexistence_mass


class TestMixedClassifierSensors:
    """Sensors with and without a classifier in the same tracker"""

    def run(self, sensors, num_particles=2000):
        tracker = static_tracker(sensors, num_particles=num_particles, seed=3)
        weights = np.full((num_particles, 3), 0.5 / (3 * num_particles))
        tracker.beliefs = [AugmentedBelief(np.tile(TARGET, (num_particles, 1)), weights, 0.5)]
        tracker.step([[ON_TARGET] for _ in sensors])
        return tracker.beliefs[0]

    def test_disabled_sensor_acts_like_uninformative_one(self, sensor):
        silent = dataclasses.replace(sensor, classifier_enabled=False)
        flat = dataclasses.replace(sensor, confusion=uninformative_confusion(sensor.clutter_class_pmf))
        for mixed, reference in (([sensor, silent], [sensor, flat]), ([silent, sensor], [flat, sensor])):
            a, b = self.run(mixed), self.run(reference)
            np.testing.assert_array_equal(a.particles, b.particles)
            np.testing.assert_array_equal(a.class_weights, b.class_weights)
            assert a.nonexistence_mass == b.nonexistence_mass

    def test_only_enabled_sensor_moves_class_marginal(self, sensor):
        silent = dataclasses.replace(sensor, classifier_enabled=False)
        # verdict 1 on both sensors; G/p0 is 17 for class 1 and 1 otherwise
        assert self.run([sensor, silent]).class_marginal()[0] > 0.8
        np.testing.assert_allclose(self.run([silent, silent]).class_marginal(), 1 / 3, atol=0.05)
