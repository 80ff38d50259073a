"""
Generative and statistical models of the class-augmented tracker.

Classes are numbered 1..C at the public interface and stored in columns
0..C-1. Classifier verdicts use 0 for "clutter" and 1..C for the classes,
so a verdict indexes the rows of a ConfusionMatrix directly.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import multivariate_normal, norm

from cache import get_clutter_cache
from config import CLASS_PERSISTENCE, CLUTTER_MC_SAMPLES, CLUTTER_MC_SEED, SENSOR_CIRCLE_RADIUS

logger = logging.getLogger(__name__)

# Stochastic matrices are rejected beyond this deviation and renormalized below it
STOCHASTIC_TOLERANCE = 1e-6
RENORMALIZE_TOLERANCE = 1e-12

# mu = 0 is evaluated as this value so that every measurement must be target-originated
MIN_CLUTTER_MEAN = 1e-9


class ModelError(Exception):
    """Raised when a model is constructed or evaluated with invalid parameters"""
    pass


def wrap_angle(angle):
    """Wrap angles to (-pi, pi]"""
    angle = np.asarray(angle, dtype=float)
    wrapped = angle - 2.0 * np.pi * np.ceil((angle - np.pi) / (2.0 * np.pi))
    return wrapped if wrapped.ndim else float(wrapped)


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _stochastic_columns(entries, name: str) -> np.ndarray:
    matrix = np.array(entries, dtype=float)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ModelError(f"{name} must be a non-empty 2D matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)) or matrix.min() < 0.0 or matrix.max() > 1.0:
        raise ModelError(f"{name} entries must lie in [0, 1]")

    deviation = np.abs(matrix.sum(axis=0) - 1.0)
    if np.any(deviation > STOCHASTIC_TOLERANCE):
        raise ModelError(f"{name} columns must sum to 1 (max deviation {deviation.max():.3g})")
    if np.any(deviation > RENORMALIZE_TOLERANCE):
        matrix = matrix / matrix.sum(axis=0)
    return _readonly(matrix)


@dataclass(frozen=True, eq=False)
class KinematicState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        for name in ("position", "velocity"):
            value = np.array(getattr(self, name), dtype=float).reshape(-1)
            if value.shape != (2,) or not np.all(np.isfinite(value)):
                raise ModelError(f"{name} must be a finite 2-vector")
            object.__setattr__(self, name, _readonly(value))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, vector) -> "KinematicState":
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if vector.shape != (4,):
            raise ModelError(f"Kinematic state vector must have 4 entries, got {vector.shape}")
        return cls(position=vector[:2], velocity=vector[2:])


@dataclass(frozen=True, eq=False)
class AugmentedState:
    kinematics: KinematicState
    exists: bool
    class_index: int
    num_classes: int

    def __post_init__(self):
        if not 1 <= self.class_index <= self.num_classes:
            raise ModelError(f"class_index {self.class_index} outside 1..{self.num_classes}")


@dataclass(frozen=True, eq=False)
class ClassTransitionMatrix:
    """D[i][j] = p(class i now | target existed with class j)"""
    entries: np.ndarray

    def __post_init__(self):
        matrix = _stochastic_columns(self.entries, "Class transition matrix")
        if matrix.shape[0] != matrix.shape[1]:
            raise ModelError(f"Class transition matrix must be square, got {matrix.shape}")
        object.__setattr__(self, "entries", matrix)

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]

    def at(self, x_prev: Optional[KinematicState] = None) -> np.ndarray:
        # state-independent
        return self.entries


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """G[i][j] = p(verdict i | target of class j), verdict 0 meaning clutter"""
    entries: np.ndarray

    def __post_init__(self):
        matrix = _stochastic_columns(self.entries, "Confusion matrix")
        if matrix.shape[0] != matrix.shape[1] + 1:
            raise ModelError(f"Confusion matrix must be (C+1)xC, got {matrix.shape}")
        object.__setattr__(self, "entries", matrix)

    @property
    def num_classes(self) -> int:
        return self.entries.shape[1]

    def at(self, x: Optional[KinematicState] = None) -> np.ndarray:
        return self.entries


@dataclass(frozen=True, eq=False)
class ClutterClassPmf:
    """p0[i] = p(verdict i | clutter)"""
    probabilities: np.ndarray

    def __post_init__(self):
        vector = np.array(self.probabilities, dtype=float).reshape(-1)
        pmf = _stochastic_columns(vector[:, None], "Clutter class pmf")[:, 0]
        object.__setattr__(self, "probabilities", _readonly(np.array(pmf)))

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[0] - 1


@dataclass(frozen=True, eq=False)
class AugmentedMeasurement:
    range_m: float
    bearing_rad: float
    class_estimate: int

    def __post_init__(self):
        if not math.isfinite(self.range_m) or self.range_m < 0:
            raise ModelError(f"Measurement range must be finite and >= 0, got {self.range_m}")
        if not math.isfinite(self.bearing_rad):
            raise ModelError("Measurement bearing must be finite")
        if int(self.class_estimate) != self.class_estimate or self.class_estimate < 0:
            raise ModelError(f"Classifier verdict must be a non-negative integer, got {self.class_estimate}")
        object.__setattr__(self, "range_m", float(self.range_m))
        object.__setattr__(self, "bearing_rad", wrap_angle(self.bearing_rad))
        object.__setattr__(self, "class_estimate", int(self.class_estimate))


@dataclass(frozen=True)
class RegionOfInterest:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ModelError(f"ROI must have positive area: {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def area_km2(self) -> float:
        return self.area / 1e6

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0])

    def corners(self) -> np.ndarray:
        return np.array([
            [self.x_min, self.y_min],
            [self.x_max, self.y_min],
            [self.x_max, self.y_max],
            [self.x_min, self.y_max],
        ])

    def contains(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return (
            (points[:, 0] >= self.x_min) & (points[:, 0] <= self.x_max)
            & (points[:, 1] >= self.y_min) & (points[:, 1] <= self.y_max)
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform([self.x_min, self.y_min], [self.x_max, self.y_max], size=(n, 2))


def _integrate_range_profile(position: np.ndarray, roi: RegionOfInterest, num_samples: int, seed: int) -> float:
    """Monte Carlo estimate of the integral of r over the ROI image in (range, bearing)"""
    rng = np.random.default_rng(seed)
    offsets = roi.corners() - position
    r_max = float(np.hypot(offsets[:, 0], offsets[:, 1]).max())

    if roi.contains(position)[0]:
        r_min, center_bearing, lo, hi = 0.0, 0.0, -np.pi, np.pi
    else:
        nearest = np.clip(position, [roi.x_min, roi.y_min], [roi.x_max, roi.y_max])
        r_min = float(np.hypot(*(nearest - position)))
        to_center = roi.center - position
        center_bearing = math.atan2(to_center[1], to_center[0])
        # bearings relative to the ROI center so the span never straddles +-pi
        deltas = wrap_angle(np.arctan2(offsets[:, 1], offsets[:, 0]) - center_bearing)
        lo, hi = float(deltas.min()), float(deltas.max())

    ranges = rng.uniform(r_min, r_max, num_samples)
    bearings = center_bearing + rng.uniform(lo, hi, num_samples)
    points = position + ranges[:, None] * np.column_stack([np.cos(bearings), np.sin(bearings)])
    inside = roi.contains(points)
    integral = (r_max - r_min) * (hi - lo) * float(np.mean(ranges * inside))
    if integral <= 0.0:
        raise ModelError("Clutter pdf normalization is zero; ROI not visible from sensor")
    return integral


@dataclass(frozen=True, eq=False)
class SensorModel:
    position: np.ndarray
    sigma_range: float
    sigma_bearing: float
    detection_prob: float
    clutter_mean: float
    roi: RegionOfInterest
    confusion: ConfusionMatrix
    clutter_class_pmf: ClutterClassPmf
    classifier_enabled: bool = True
    clutter_mc_samples: int = CLUTTER_MC_SAMPLES
    clutter_mc_seed: int = CLUTTER_MC_SEED

    def __post_init__(self):
        position = np.array(self.position, dtype=float).reshape(-1)
        if position.shape != (2,) or not np.all(np.isfinite(position)):
            raise ModelError("Sensor position must be a finite 2-vector")
        object.__setattr__(self, "position", _readonly(position))
        if not self.sigma_range > 0 or not self.sigma_bearing > 0:
            raise ModelError("Sensor noise standard deviations must be positive")
        if not 0.0 <= self.detection_prob <= 1.0:
            raise ModelError(f"Detection probability must lie in [0, 1], got {self.detection_prob}")
        if not self.clutter_mean >= 0:
            raise ModelError(f"Clutter mean must be >= 0, got {self.clutter_mean}")
        if self.confusion.num_classes != self.clutter_class_pmf.num_classes:
            raise ModelError(
                f"Confusion matrix has {self.confusion.num_classes} classes, "
                f"clutter class pmf has {self.clutter_class_pmf.num_classes}"
            )
        if self.clutter_mc_samples < 1:
            raise ModelError("Clutter normalization needs at least one sample")

    @property
    def num_classes(self) -> int:
        return self.confusion.num_classes

    @cached_property
    def clutter_normalization(self) -> float:
        """Integral of the unnormalized range profile over the ROI, shared across sensors with equal geometry"""
        roi = self.roi
        key = (
            f"{self.position[0]:.9g},{self.position[1]:.9g}|"
            f"{roi.x_min:.9g},{roi.x_max:.9g},{roi.y_min:.9g},{roi.y_max:.9g}|"
            f"{self.clutter_mc_samples}|{self.clutter_mc_seed}"
        )

        def compute():
            value = _integrate_range_profile(self.position, roi, self.clutter_mc_samples, self.clutter_mc_seed)
            logger.info(f"Computed clutter normalization {value:.6g} for sensor at {self.position.tolist()}")
            return value

        return get_clutter_cache().get_or_compute(key, compute)

    def to_cartesian(self, ranges, bearings) -> np.ndarray:
        ranges = np.atleast_1d(np.asarray(ranges, dtype=float))
        bearings = np.atleast_1d(np.asarray(bearings, dtype=float))
        return self.position + ranges[:, None] * np.column_stack([np.cos(bearings), np.sin(bearings)])

    def in_region(self, ranges, bearings) -> np.ndarray:
        """True where a (range, bearing) pair maps into the ROI"""
        return self.roi.contains(self.to_cartesian(ranges, bearings))


@dataclass(frozen=True, eq=False)
class MotionModel:
    transition_matrix: np.ndarray
    noise_gain: np.ndarray
    accel_std: float
    step: float
    survival_prob: float
    birth_prob: float
    birth_region: RegionOfInterest
    birth_velocity_std: float

    def __post_init__(self):
        a = np.array(self.transition_matrix, dtype=float)
        w = np.array(self.noise_gain, dtype=float)
        if a.shape != (4, 4) or w.shape != (4, 2):
            raise ModelError(f"Motion model needs a 4x4 A and a 4x2 W, got {a.shape} and {w.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
            raise ModelError("Motion model matrices must be finite")
        object.__setattr__(self, "transition_matrix", _readonly(a))
        object.__setattr__(self, "noise_gain", _readonly(w))
        for name in ("survival_prob", "birth_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ModelError(f"{name} must lie in [0, 1]")
        if self.accel_std < 0 or self.birth_velocity_std < 0:
            raise ModelError("Noise standard deviations must be >= 0")

    @classmethod
    def constant_velocity(
        cls,
        step: float,
        accel_std: float,
        survival_prob: float,
        birth_prob: float,
        birth_region: RegionOfInterest,
        birth_velocity_std: float,
    ) -> "MotionModel":
        """Discrete white-noise-acceleration model for [x, y, vx, vy]"""
        a = np.eye(4)
        a[0, 2] = a[1, 3] = step
        w = np.array([
            [step ** 2 / 2.0, 0.0],
            [0.0, step ** 2 / 2.0],
            [step, 0.0],
            [0.0, step],
        ])
        return cls(a, w, accel_std, step, survival_prob, birth_prob, birth_region, birth_velocity_std)

    def propagate(self, particles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal((particles.shape[0], 2)) * self.accel_std
        return particles @ self.transition_matrix.T + noise @ self.noise_gain.T


def _as_particles(x) -> np.ndarray:
    if isinstance(x, KinematicState):
        return x.as_vector()[None, :]
    particles = np.atleast_2d(np.asarray(x, dtype=float))
    if particles.shape[1] != 4:
        raise ModelError(f"Kinematic particles must have 4 columns, got {particles.shape}")
    return particles


def _as_measurement_arrays(q) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(q, AugmentedMeasurement):
        return np.array([q.range_m]), np.array([q.bearing_rad])
    ranges, bearings = q
    return np.atleast_1d(np.asarray(ranges, dtype=float)), np.atleast_1d(np.asarray(bearings, dtype=float))


def kinematic_transition_density(
    x_next: KinematicState,
    x_prev: KinematicState,
    model: MotionModel,
    class_index: Optional[int] = None,
) -> float:
    """
    Density of x_next = A x_prev + W u, u ~ N(0, accel_std^2 I).

    The noise only spans the range of W, so the density is taken with
    respect to area on that plane and is zero off it. Zero process noise
    leaves a Dirac at A x_prev: inf there, 0 elsewhere.
    """
    a, w = model.transition_matrix, model.noise_gain
    mean = a @ x_prev.as_vector()
    offset = x_next.as_vector() - mean
    if model.accel_std == 0:
        return math.inf if np.array_equal(x_next.as_vector(), mean) else 0.0
    u = np.linalg.lstsq(w, offset, rcond=None)[0]
    residual = np.linalg.norm(offset - w @ u)
    if residual > 1e-9 * max(1.0, np.linalg.norm(mean), np.linalg.norm(offset)):
        return 0.0
    jacobian = math.sqrt(np.linalg.det(w.T @ w))
    noise = multivariate_normal(mean=np.zeros(2), cov=model.accel_std ** 2 * np.eye(2))
    return float(noise.pdf(u)) / jacobian


def class_transition_pmf(
    prev_exists: bool,
    prev_class: int,
    x_prev: Optional[KinematicState],
    transition: ClassTransitionMatrix,
) -> np.ndarray:
    num_classes = transition.num_classes
    if not 1 <= prev_class <= num_classes:
        raise ModelError(f"prev_class {prev_class} outside 1..{num_classes}")
    if not prev_exists:
        return np.full(num_classes, 1.0 / num_classes)
    return transition.at(x_prev)[:, prev_class - 1].copy()


def log_measurement_likelihood(ranges, bearings, particles, sensor: SensorModel) -> np.ndarray:
    """(N, M) table of log f(q_m | x_j)"""
    ranges = np.atleast_1d(np.asarray(ranges, dtype=float))
    bearings = np.atleast_1d(np.asarray(bearings, dtype=float))
    offsets = np.asarray(particles, dtype=float)[:, :2] - sensor.position
    predicted_range = np.hypot(offsets[:, 0], offsets[:, 1])
    predicted_bearing = np.arctan2(offsets[:, 1], offsets[:, 0])

    range_residual = ranges[None, :] - predicted_range[:, None]
    bearing_residual = wrap_angle(bearings[None, :] - predicted_bearing[:, None])
    log_likelihood = (
        norm.logpdf(range_residual, scale=sensor.sigma_range)
        + norm.logpdf(bearing_residual, scale=sensor.sigma_bearing)
    )
    # bearing undefined at the sensor position
    log_likelihood[predicted_range == 0.0, :] = -np.inf
    return log_likelihood


def measurement_likelihood(q, x, sensor: SensorModel):
    ranges, bearings = _as_measurement_arrays(q)
    density = np.exp(log_measurement_likelihood(ranges, bearings, _as_particles(x), sensor))
    return float(density[0, 0]) if density.size == 1 else density


def log_clutter_density(ranges, bearings, sensor: SensorModel) -> np.ndarray:
    ranges = np.atleast_1d(np.asarray(ranges, dtype=float))
    inside = sensor.in_region(ranges, bearings)
    log_density = np.full(ranges.shape, -np.inf)
    with np.errstate(divide="ignore"):
        log_density[inside] = np.log(ranges[inside]) - math.log(sensor.clutter_normalization)
    return log_density


def clutter_density(q, sensor: SensorModel):
    ranges, bearings = _as_measurement_arrays(q)
    density = np.exp(log_clutter_density(ranges, bearings, sensor))
    return float(density[0]) if density.size == 1 else density


def detection_probability(particles, sensor: SensorModel, class_index: Optional[int] = None) -> np.ndarray:
    """P_d(x, class), (N, C) for all classes or (N,) for one"""
    n = _as_particles(particles).shape[0]
    if class_index is None:
        return np.full((n, sensor.num_classes), sensor.detection_prob)
    return np.full(n, sensor.detection_prob)


def log_kinematic_likelihood_ratio(ranges, bearings, particles, sensor: SensorModel) -> np.ndarray:
    """(N, M) table of log f(q_m | x_j) - log(mu f0(q_m))"""
    log_clutter = log_clutter_density(ranges, bearings, sensor)
    outside = np.flatnonzero(~np.isfinite(log_clutter))
    if outside.size:
        raise ModelError(f"Measurements {outside.tolist()} fall outside the clutter support (ROI)")
    log_mu = math.log(max(sensor.clutter_mean, MIN_CLUTTER_MEAN))
    return log_measurement_likelihood(ranges, bearings, particles, sensor) - (log_mu + log_clutter)[None, :]


def classifier_likelihood_ratio(verdicts, sensor: SensorModel, classifier_enabled: Optional[bool] = None) -> np.ndarray:
    """(C, M) table of G[zeta_m][c] / p0[zeta_m]; exactly 1 with the classifier disabled"""
    verdicts = np.atleast_1d(np.asarray(verdicts, dtype=int))
    enabled = sensor.classifier_enabled if classifier_enabled is None else classifier_enabled
    num_classes = sensor.num_classes
    if not enabled:
        return np.ones((num_classes, verdicts.size))
    if verdicts.size and (verdicts.min() < 0 or verdicts.max() > num_classes):
        raise ModelError(f"Classifier verdicts must lie in 0..{num_classes}")

    g = sensor.confusion.at()[verdicts, :].T
    p0 = sensor.clutter_class_pmf.probabilities[verdicts][None, :]
    degenerate = (p0 == 0.0) & (g > 0.0)
    if np.any(degenerate):
        bad = sorted(set(verdicts[np.nonzero(degenerate)[1]].tolist()))
        raise ModelError(f"Infinite likelihood ratio: p0 is zero for verdicts {bad} that targets can produce")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(g > 0.0, g / np.where(p0 > 0.0, p0, 1.0), 0.0)
    # C order, matching the disabled table
    return np.ascontiguousarray(ratios)


def log_augmented_likelihood_ratio(
    measurements: Sequence[AugmentedMeasurement],
    particles,
    sensor: SensorModel,
    classifier_enabled: Optional[bool] = None,
) -> np.ndarray:
    """(N, C, M) table of log ratios for every particle, class and measurement"""
    ranges = np.array([z.range_m for z in measurements], dtype=float)
    bearings = np.array([z.bearing_rad for z in measurements], dtype=float)
    verdicts = np.array([z.class_estimate for z in measurements], dtype=int)
    kinematic = log_kinematic_likelihood_ratio(ranges, bearings, _as_particles(particles), sensor)
    with np.errstate(divide="ignore"):
        classifier = np.log(classifier_likelihood_ratio(verdicts, sensor, classifier_enabled))
    return kinematic[:, None, :] + classifier[None, :, :]


def augmented_likelihood_ratio(
    z: AugmentedMeasurement,
    x: KinematicState,
    class_index: int,
    sensor: SensorModel,
    classifier_enabled: Optional[bool] = None,
) -> float:
    """G[zeta][class] f(q|x) / (mu p0[zeta] f0(q))"""
    if not 1 <= class_index <= sensor.num_classes:
        raise ModelError(f"class_index {class_index} outside 1..{sensor.num_classes}")
    log_ratio = log_augmented_likelihood_ratio([z], x, sensor, classifier_enabled)
    return float(np.exp(log_ratio[0, class_index - 1, 0]))


def sample_birth(
    n: int,
    motion: MotionModel,
    rng: np.random.Generator,
    roi: Optional[RegionOfInterest] = None,
) -> np.ndarray:
    """Uniform positions over the birth region, zero-mean Gaussian velocities"""
    region = motion.birth_region if roi is None else roi
    positions = region.sample(n, rng)
    velocities = rng.normal(0.0, motion.birth_velocity_std, size=(n, 2))
    return np.hstack([positions, velocities])


def sensor_positions(num_sensors: int, radius: float = SENSOR_CIRCLE_RADIUS) -> np.ndarray:
    """Sensors equally spaced on a circle about the origin, first one on the +x axis"""
    if num_sensors < 1:
        raise ModelError("At least one sensor is required")
    angles = 2.0 * np.pi * np.arange(num_sensors) / num_sensors
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def reference_class_transition(num_classes: int, persistence: float = CLASS_PERSISTENCE) -> ClassTransitionMatrix:
    """persistence on the diagonal, the rest spread evenly over the other classes"""
    if num_classes == 1:
        return ClassTransitionMatrix(np.ones((1, 1)))
    off = (1.0 - persistence) / (num_classes - 1)
    entries = np.full((num_classes, num_classes), off)
    np.fill_diagonal(entries, persistence)
    return ClassTransitionMatrix(entries)


def uninformative_confusion(clutter_pmf: ClutterClassPmf, num_classes: Optional[int] = None) -> ConfusionMatrix:
    """Confusion matrix whose every column equals p0, so verdicts carry no class information"""
    num_classes = clutter_pmf.num_classes if num_classes is None else num_classes
    if num_classes != clutter_pmf.num_classes:
        raise ModelError(f"p0 covers {clutter_pmf.num_classes} classes, asked for {num_classes}")
    return ConfusionMatrix(np.tile(clutter_pmf.probabilities[:, None], (1, num_classes)))
