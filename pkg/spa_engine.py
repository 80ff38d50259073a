"""
Particle-based sum-product filter over class-augmented PT states.

Each PT keeps J kinematic particles shared by all classes, a (J, C)
table of weights for "exists with class c" and a scalar mass for
"does not exist". One call to step() runs prediction, the per-sensor
measurement evaluation / association / measurement update pipeline and
the fusion of all sensor factors into new beliefs.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from association import association_marginals, run_bp
from config import (
    BP_ITERATIONS,
    BP_TOLERANCE,
    DETECTION_THRESHOLD,
    NUM_PARTICLES,
    NUM_PTS,
)
from model import (
    AugmentedMeasurement,
    ClassTransitionMatrix,
    MotionModel,
    SensorModel,
    classifier_likelihood_ratio,
    detection_probability,
    log_kinematic_likelihood_ratio,
    sample_birth,
)

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-9


class EngineError(Exception):
    """Raised when filter tables are inconsistent, non-finite or degenerate"""
    pass


@dataclass(eq=False)
class AugmentedBelief:
    """Particle representation of one PT: r = 1 weights per (particle, class) plus the r = 0 mass"""
    particles: np.ndarray
    class_weights: np.ndarray
    nonexistence_mass: float

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=float)
        weights = np.asarray(self.class_weights, dtype=float)
        nonexistence = float(self.nonexistence_mass)
        if particles.ndim != 2 or particles.shape[1] != 4 or particles.shape[0] < 1:
            raise EngineError(f"Particles must be a non-empty (J, 4) array, got {particles.shape}")
        if weights.ndim != 2 or weights.shape[0] != particles.shape[0] or weights.shape[1] < 1:
            raise EngineError(f"Class weights must be (J, C) with J = {particles.shape[0]}, got {weights.shape}")
        if not (np.all(np.isfinite(weights)) and np.isfinite(nonexistence)):
            raise EngineError("Belief weights must be finite")
        if np.any(weights < 0) or nonexistence < 0:
            raise EngineError("Belief weights must be non-negative")
        total = weights.sum() + nonexistence
        if abs(total - 1.0) > MASS_TOLERANCE:
            raise EngineError(f"Belief mass must be 1, got {total:.12g}")
        self.particles = particles
        self.class_weights = weights
        self.nonexistence_mass = nonexistence

    @property
    def num_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[1]

    @property
    def existence_probability(self) -> float:
        return float(self.class_weights.sum())

    def class_marginal(self) -> np.ndarray:
        """Class pmf given existence (uniform when the PT surely does not exist)"""
        existence = self.existence_probability
        if existence <= 0:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return self.class_weights.sum(axis=0) / existence


@dataclass(eq=False)
class PredictedMessage(AugmentedBelief):
    """Normalized prediction message, holding the J propagated and J_b newborn particles"""
    pass


@dataclass(eq=False)
class SensorFactor:
    """Measurement update of one sensor for one PT; both branches share the scale exp(-log_scale)"""
    gamma: np.ndarray
    absent: float
    log_scale: float = 0.0

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if not (np.all(np.isfinite(self.gamma)) and np.isfinite(self.absent)):
            raise EngineError("Sensor factor entries must be finite")
        if np.any(self.gamma < 0) or self.absent < 0:
            raise EngineError("Sensor factor entries must be non-negative")


@dataclass(frozen=True)
class TrackerConfig:
    num_pts: int = NUM_PTS
    num_particles: int = NUM_PARTICLES
    num_birth_particles: Optional[int] = None
    bp_iterations: int = BP_ITERATIONS
    bp_tolerance: float = BP_TOLERANCE
    detection_threshold: float = DETECTION_THRESHOLD
    classifier_enabled: bool = True
    initial_existence: float = 0.0
    initial_class_pmf: Optional[Tuple[float, ...]] = None

    @property
    def birth_particles(self) -> int:
        if self.num_birth_particles is not None:
            return self.num_birth_particles
        return max(1, self.num_particles // 10)


def initial_beliefs(
    config: TrackerConfig,
    motion: MotionModel,
    num_classes: int,
    rng: np.random.Generator,
) -> List[AugmentedBelief]:
    if config.initial_class_pmf is None:
        class_pmf = np.full(num_classes, 1.0 / num_classes)
    else:
        class_pmf = np.asarray(config.initial_class_pmf, dtype=float)
        if class_pmf.shape != (num_classes,) or np.any(class_pmf < 0) or abs(class_pmf.sum() - 1.0) > 1e-9:
            raise EngineError(f"Initial class pmf must be a pmf over {num_classes} classes")

    existence = config.initial_existence
    beliefs = []
    for _ in range(config.num_pts):
        particles = sample_birth(config.num_particles, motion, rng)
        weights = np.outer(np.full(config.num_particles, existence / config.num_particles), class_pmf)
        beliefs.append(AugmentedBelief(particles, weights, 1.0 - existence))
    return beliefs


def systematic_resample(weights, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by systematic resampling with a single uniform offset"""
    weights = np.asarray(weights, dtype=float).ravel()
    total = weights.sum()
    if not total > 0 or not np.isfinite(total):
        raise EngineError("Cannot resample from zero or non-finite weights")
    cumulative = np.cumsum(weights / total)
    cumulative[-1] = 1.0
    positions = (rng.random() + np.arange(num_samples)) / num_samples
    return np.searchsorted(cumulative, positions, side="right")


def predict(
    prev_belief: AugmentedBelief,
    motion: MotionModel,
    transition: ClassTransitionMatrix,
    rng: np.random.Generator,
    num_birth_particles: Optional[int] = None,
) -> PredictedMessage:
    weights = prev_belief.class_weights
    nonexistence = prev_belief.nonexistence_mass
    existing = weights.sum()
    if not existing + nonexistence > 0:
        raise EngineError("Cannot predict from an all-zero belief")
    num_classes = prev_belief.num_classes
    if transition.num_classes != num_classes:
        raise EngineError(f"Class transition covers {transition.num_classes} classes, belief has {num_classes}")
    if num_birth_particles is None:
        num_birth_particles = max(1, prev_belief.num_particles // 10)

    particles = motion.propagate(prev_belief.particles, rng)
    # rows become D w_row
    survived = motion.survival_prob * (weights @ transition.at().T)
    died = (1.0 - motion.survival_prob) * existing
    born = motion.birth_prob * nonexistence
    stayed = (1.0 - motion.birth_prob) * nonexistence

    if born > 0:
        newborn = sample_birth(num_birth_particles, motion, rng)
        particles = np.vstack([particles, newborn])
        survived = np.vstack([
            survived,
            np.full((num_birth_particles, num_classes), born / (num_classes * num_birth_particles)),
        ])

    total = survived.sum() + died + stayed
    return PredictedMessage(particles, survived / total, (died + stayed) / total)


def _measurement_arrays(measurements: Sequence[AugmentedMeasurement]):
    ranges = np.array([z.range_m for z in measurements], dtype=float)
    bearings = np.array([z.bearing_rad for z in measurements], dtype=float)
    verdicts = np.array([z.class_estimate for z in measurements], dtype=int)
    return ranges, bearings, verdicts


def likelihood_ratios(
    pred: PredictedMessage,
    measurements: Sequence[AugmentedMeasurement],
    sensor: SensorModel,
    classifier_enabled: bool = True,
    scaled: bool = True,
) -> Tuple[np.ndarray, float]:
    """
    (N, C, M) table of likelihood ratios for every particle, class and
    measurement, and the log scale L already divided out of it.

    With scaled=True, L is the largest log ratio of the table (or 0 if
    that is negative), so every entry is at most 1.
    """
    ranges, bearings, verdicts = _measurement_arrays(measurements)
    kinematic = log_kinematic_likelihood_ratio(ranges, bearings, pred.particles, sensor)
    classifier = classifier_likelihood_ratio(verdicts, sensor, classifier_enabled and sensor.classifier_enabled)
    if len(measurements) == 0:
        return np.zeros((pred.num_particles, pred.num_classes, 0)), 0.0

    log_scale = 0.0
    if scaled:
        with np.errstate(divide="ignore"):
            peak = float(np.max(kinematic.max(axis=0) + np.log(classifier.max(axis=0))))
        if np.isfinite(peak):
            log_scale = max(0.0, peak)
    ratios = np.exp(kinematic - log_scale)[:, None, :] * classifier[None, :, :]
    return ratios, log_scale


def measurement_evaluation(
    pred: PredictedMessage,
    measurements: Sequence[AugmentedMeasurement],
    sensor: SensorModel,
    *,
    classifier_enabled: bool = True,
    ratios: Optional[np.ndarray] = None,
    log_scale: float = 0.0,
) -> np.ndarray:
    """beta[0] for "no measurement", beta[m] for measurement m"""
    if ratios is None:
        ratios, log_scale = likelihood_ratios(pred, measurements, sensor, classifier_enabled, scaled=False)
    detection = detection_probability(pred.particles, sensor)
    weights = pred.class_weights
    scale = np.exp(-log_scale)

    beta = np.empty(len(measurements) + 1)
    beta[0] = (np.sum((1.0 - detection) * weights) + pred.nonexistence_mass) * scale
    beta[1:] = np.einsum('jc,jcm->m', detection * weights, ratios)
    bad = np.flatnonzero(~np.isfinite(beta))
    if bad.size:
        raise EngineError(f"Non-finite beta at measurement index {int(bad[0])}")
    return beta


def measurement_update(
    pred: PredictedMessage,
    eta,
    measurements: Sequence[AugmentedMeasurement],
    sensor: SensorModel,
    *,
    classifier_enabled: bool = True,
    ratios: Optional[np.ndarray] = None,
    log_scale: float = 0.0,
) -> SensorFactor:
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (len(measurements) + 1,):
        raise EngineError(f"eta must have length {len(measurements) + 1}, got shape {eta.shape}")
    if not np.all(np.isfinite(eta)) or np.any(eta < 0):
        raise EngineError("eta entries must be finite and non-negative")
    if ratios is None:
        ratios, log_scale = likelihood_ratios(pred, measurements, sensor, classifier_enabled, scaled=False)
    detection = detection_probability(pred.particles, sensor)
    scale = np.exp(-log_scale)

    gamma = (1.0 - detection) * (eta[0] * scale) + detection * np.einsum('jcm,m->jc', ratios, eta[1:])
    return SensorFactor(gamma, float(eta[0] * scale), log_scale)


def _nonexistent(pred: PredictedMessage, num_particles: int) -> AugmentedBelief:
    particles = pred.particles[:num_particles].copy()
    return AugmentedBelief(particles, np.zeros((particles.shape[0], pred.num_classes)), 1.0)


def fuse_and_normalize(
    pred: PredictedMessage,
    factors: Sequence[SensorFactor],
    rng: np.random.Generator,
    num_particles: Optional[int] = None,
    resample: bool = True,
) -> AugmentedBelief:
    if not factors:
        raise EngineError("At least one sensor factor is required")
    num_particles = pred.num_particles if num_particles is None else num_particles
    num_classes = pred.num_classes

    weights = pred.class_weights.copy()
    nonexistence = pred.nonexistence_mass
    for factor in factors:
        if factor.gamma.shape != weights.shape:
            raise EngineError(f"Sensor factor shape {factor.gamma.shape} does not match belief {weights.shape}")
        weights *= factor.gamma
        nonexistence *= factor.absent

    total = weights.sum() + nonexistence
    if not (total > 0 and np.isfinite(total)):
        logger.warning(f"Degenerate evidence (fused mass {total}); resetting PT to nonexistence")
        return _nonexistent(pred, num_particles)
    weights /= total
    nonexistence /= total
    if not resample:
        return AugmentedBelief(pred.particles.copy(), weights, nonexistence)

    existence = weights.sum()
    if existence <= 0:
        return _nonexistent(pred, num_particles)

    # resample (particle, class) atoms jointly, then reattach classes as one-hot rows
    rows, classes = np.divmod(systematic_resample(weights.ravel(), num_particles, rng), num_classes)
    resampled = np.zeros((num_particles, num_classes))
    resampled[np.arange(num_particles), classes] = existence / num_particles
    return AugmentedBelief(pred.particles[rows], resampled, nonexistence)


def _in_support(measurements: Sequence[AugmentedMeasurement], sensor: SensorModel, sensor_index: int):
    if not measurements:
        return []
    ranges, bearings, _ = _measurement_arrays(measurements)
    keep = sensor.in_region(ranges, bearings)
    if not np.all(keep):
        logger.debug(f"Sensor {sensor_index}: dropped {int((~keep).sum())} measurements outside the ROI")
    return [z for z, inside in zip(measurements, keep) if inside]


def _step(
    beliefs: Sequence[AugmentedBelief],
    measurement_sets: Sequence[Sequence[AugmentedMeasurement]],
    sensors: Sequence[SensorModel],
    motion: MotionModel,
    transition: ClassTransitionMatrix,
    config: TrackerConfig,
    rng: np.random.Generator,
) -> Tuple[List[AugmentedBelief], List[np.ndarray]]:
    if len(measurement_sets) != len(sensors):
        raise EngineError(f"Got {len(measurement_sets)} measurement sets for {len(sensors)} sensors")
    num_pts = len(beliefs)

    preds = [predict(belief, motion, transition, rng, config.birth_particles) for belief in beliefs]
    factors: List[List[SensorFactor]] = [[] for _ in range(num_pts)]
    marginals = []
    for s, (sensor, measurements) in enumerate(zip(sensors, measurement_sets)):
        measurements = _in_support(measurements, sensor, s)
        num_measurements = len(measurements)
        enabled = config.classifier_enabled and sensor.classifier_enabled
        tables = [likelihood_ratios(pred, measurements, sensor, enabled) for pred in preds]
        beta = np.array([
            measurement_evaluation(pred, measurements, sensor, classifier_enabled=enabled, ratios=r, log_scale=scale)
            for pred, (r, scale) in zip(preds, tables)
        ]).reshape(num_pts, num_measurements + 1)
        eta = run_bp(beta, num_pts, num_measurements, config.bp_iterations, config.bp_tolerance)
        marginals.append(association_marginals(beta, eta))
        for k, (pred, (r, scale)) in enumerate(zip(preds, tables)):
            factors[k].append(
                measurement_update(pred, eta[k], measurements, sensor, classifier_enabled=enabled, ratios=r, log_scale=scale)
            )
        logger.debug(f"Sensor {s}: {num_measurements} measurements processed for {num_pts} PTs")

    posterior = [fuse_and_normalize(pred, factors[k], rng, config.num_particles) for k, pred in enumerate(preds)]
    return posterior, marginals


def step(
    beliefs: Sequence[AugmentedBelief],
    measurement_sets: Sequence[Sequence[AugmentedMeasurement]],
    sensors: Sequence[SensorModel],
    motion: MotionModel,
    transition: ClassTransitionMatrix,
    config: TrackerConfig,
    rng: np.random.Generator,
) -> List[AugmentedBelief]:
    """Advance all K beliefs by one time step"""
    return _step(beliefs, measurement_sets, sensors, motion, transition, config, rng)[0]


class Tracker:
    """Filter state of one tracker instance; only step() mutates it"""

    def __init__(
        self,
        sensors: Sequence[SensorModel],
        motion: MotionModel,
        transition: ClassTransitionMatrix,
        config: TrackerConfig,
        rng: np.random.Generator,
    ):
        self.sensors = list(sensors)
        if not self.sensors:
            raise EngineError("A tracker needs at least one sensor")
        for sensor in self.sensors:
            if sensor.num_classes != transition.num_classes:
                raise EngineError(
                    f"Sensor models {sensor.num_classes} classes, class transition {transition.num_classes}"
                )
        self.motion = motion
        self.transition = transition
        self.config = config
        self.rng = rng
        self.beliefs = initial_beliefs(config, motion, transition.num_classes, rng)
        self.last_association_marginals: List[np.ndarray] = []
        self.time = 0

    def step(self, measurement_sets: Sequence[Sequence[AugmentedMeasurement]]) -> np.ndarray:
        self.beliefs, self.last_association_marginals = _step(
            self.beliefs, measurement_sets, self.sensors, self.motion, self.transition, self.config, self.rng
        )
        self.time += 1
        return np.array([belief.existence_probability for belief in self.beliefs])
