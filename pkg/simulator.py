"""
Scripted six-target scenario and synthetic range/bearing/classifier
measurements.

Targets A..F start on a circle around the origin, head straight for the
center at constant speed and turn right by a fixed angle once they come
within one step length of it. Target j (0-based) carries truth label j+1.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    CLUTTER_MC_SAMPLES,
    CLUTTER_MC_SEED,
    CONFUSION_DIAGONAL,
    DETECTION_PROB,
    NUM_STEPS,
    ROI_BOUNDS,
    SENSOR_CIRCLE_RADIUS,
    SIGMA_BEARING_DEG,
    SIGMA_RANGE_M,
    START_RADIUS,
    STEP_SECONDS,
    SUPPLEMENT_NUM_STEPS,
    SUPPORTED_CLASS_COUNTS,
    SUPPORTED_SENSOR_COUNTS,
    TARGET_NAMES,
    TARGET_SPEED,
    TURN_ANGLE_DEG,
    ExperimentConfig,
)
from metrics import PointSet
from model import (
    AugmentedMeasurement,
    ClassTransitionMatrix,
    ClutterClassPmf,
    ConfusionMatrix,
    ModelError,
    RegionOfInterest,
    SensorModel,
    reference_class_transition,
    sensor_positions,
    wrap_angle,
)

logger = logging.getLogger(__name__)

CLASS_ASSIGNMENTS = {
    1: {"A": 1, "B": 1, "C": 1, "D": 1, "E": 1, "F": 1},
    2: {"A": 1, "B": 2, "C": 1, "D": 2, "E": 1, "F": 2},
    3: {"A": 1, "B": 2, "C": 3, "D": 1, "E": 2, "F": 3},
    6: {"A": 1, "B": 2, "C": 3, "D": 4, "E": 5, "F": 6},
}

# (birth, death): present for birth <= n < death
LETTER_LIFETIMES = {"A": (10, 130), "B": (1, 120), "C": (10, 130), "D": (1, 120), "E": (10, 130), "F": (1, 120)}
SUPPLEMENT_LIFETIMES = {"A": (10, 150), "B": (1, 140), "C": (10, 150), "D": (1, 140), "E": (10, 150), "F": (1, 140)}

REGIMES = ("fixed_diag", "fixed_offdiag")
OFFDIAG_PROB = 0.10


class ScenarioError(Exception):
    """Raised when a scenario cannot be built or queried"""
    pass


@dataclass(frozen=True, eq=False)
class TargetSpec:
    name: str
    birth: int
    death: int
    initial_position: np.ndarray
    class_label: int

    def alive(self, n: int) -> bool:
        return self.birth <= n < self.death


@dataclass(eq=False)
class MeasurementFrame:
    time: int
    sensor: int
    measurements: List[AugmentedMeasurement]
    origins: np.ndarray  # target index per measurement, -1 for clutter


@dataclass(frozen=True, eq=False)
class Scenario:
    targets: Tuple[TargetSpec, ...]
    roi: RegionOfInterest
    num_steps: int
    step: float
    speed: float
    turn_angle_deg: float
    turn_step: Optional[int]
    sensors: Tuple[SensorModel, ...]
    num_classes: int
    class_transition: ClassTransitionMatrix
    seed: int = 0
    regime: str = "fixed_diag"

    def __post_init__(self):
        if self.num_steps < 1 or self.step <= 0 or self.speed <= 0:
            raise ScenarioError("Scenario needs a positive step count, step duration and speed")
        for target in self.targets:
            if not 0 <= target.birth < target.death <= self.num_steps:
                raise ScenarioError(
                    f"Target {target.name}: need 0 <= birth < death <= {self.num_steps}, "
                    f"got ({target.birth}, {target.death})"
                )
            if not 1 <= target.class_label <= self.num_classes:
                raise ScenarioError(f"Target {target.name}: class {target.class_label} outside 1..{self.num_classes}")
        if not self.sensors:
            raise ScenarioError("Scenario needs at least one sensor")
        if self.class_transition.num_classes != self.num_classes:
            raise ScenarioError("Class transition matrix does not match the class count")
        for sensor in self.sensors:
            if sensor.num_classes != self.num_classes:
                raise ScenarioError("Sensor classifier model does not match the class count")

    @property
    def duration_s(self) -> float:
        return self.num_steps * self.step

    def turn_onset(self, target: TargetSpec) -> Optional[int]:
        """Step of the heading change: fixed, or first step within one step length of the center"""
        if self.turn_step is not None:
            return self.turn_step
        heading = math.atan2(-target.initial_position[1], -target.initial_position[0])
        velocity = self.speed * np.array([math.cos(heading), math.sin(heading)])
        times = np.arange(self.num_steps + 1) * self.step
        distances = np.hypot(*(target.initial_position[None, :] + times[:, None] * velocity).T)
        within = np.flatnonzero(distances <= self.speed * self.step + 1e-9)
        return int(within[0]) if within.size else None

    @cached_property
    def truth_states(self) -> np.ndarray:
        """(targets, num_steps + 1, 4) states; velocity at n is the one flown from n to n+1"""
        states = np.zeros((len(self.targets), self.num_steps + 1, 4))
        steps = np.arange(self.num_steps + 1)
        for i, target in enumerate(self.targets):
            heading = math.atan2(-target.initial_position[1], -target.initial_position[0])
            inbound = self.speed * np.array([math.cos(heading), math.sin(heading)])
            onset = self.turn_onset(target)
            if onset is None:
                onset = self.num_steps + 1
            turned = heading - math.radians(self.turn_angle_deg)
            outbound = self.speed * np.array([math.cos(turned), math.sin(turned)])

            before = steps <= onset
            turn_point = target.initial_position + onset * self.step * inbound
            positions = np.where(
                before[:, None],
                target.initial_position + (steps * self.step)[:, None] * inbound,
                turn_point + ((steps - onset) * self.step)[:, None] * outbound,
            )
            velocities = np.where((steps < onset)[:, None], inbound, outbound)
            states[i] = np.hstack([positions, velocities])
        return states

    @cached_property
    def alive_mask(self) -> np.ndarray:
        steps = np.arange(self.num_steps + 1)
        return np.array([(target.birth <= steps) & (steps < target.death) for target in self.targets])


def build_supplementary_confusions(num_classes: int, regime: str) -> Tuple[ConfusionMatrix, ClutterClassPmf]:
    """
    fixed_diag keeps the correct-verdict probability at 0.85 and spreads
    0.15 evenly over the other verdicts; fixed_offdiag keeps every wrong
    verdict at 0.10 and gives the rest to the correct one.
    Row 0 is the "clutter" verdict in both.
    """
    if num_classes not in SUPPORTED_CLASS_COUNTS:
        raise ScenarioError(f"Unsupported class count {num_classes}; choose from {SUPPORTED_CLASS_COUNTS}")
    if regime == "fixed_diag":
        diagonal, off = CONFUSION_DIAGONAL, (1.0 - CONFUSION_DIAGONAL) / num_classes
    elif regime == "fixed_offdiag":
        diagonal, off = 1.0 - OFFDIAG_PROB * num_classes, OFFDIAG_PROB
    else:
        raise ScenarioError(f"Unknown confusion regime '{regime}'; choose from {REGIMES}")
    if diagonal < 0:
        raise ScenarioError(f"Regime {regime} gives a negative diagonal for C = {num_classes}")

    entries = np.full((num_classes + 1, num_classes), off)
    entries[np.arange(1, num_classes + 1), np.arange(num_classes)] = diagonal
    pmf = np.full(num_classes + 1, off)
    pmf[0] = diagonal
    return ConfusionMatrix(entries), ClutterClassPmf(pmf)


def build_reference_scenario(
    num_classes: int,
    num_sensors: int,
    clutter_mean: float,
    seed: int = 0,
    regime: str = "fixed_diag",
    supplementary_timing: bool = False,
    *,
    detection_prob: float = DETECTION_PROB,
    sigma_range: float = SIGMA_RANGE_M,
    sigma_bearing_deg: float = SIGMA_BEARING_DEG,
    sensor_radius: float = SENSOR_CIRCLE_RADIUS,
    roi: Optional[RegionOfInterest] = None,
    step: float = STEP_SECONDS,
    speed: float = TARGET_SPEED,
    start_radius: float = START_RADIUS,
    turn_angle_deg: float = TURN_ANGLE_DEG,
    turn_step: Optional[int] = None,
    classifier_enabled: bool = True,
    clutter_mc_samples: int = CLUTTER_MC_SAMPLES,
) -> Scenario:
    if num_classes not in SUPPORTED_CLASS_COUNTS:
        raise ScenarioError(f"Unsupported class count {num_classes}; choose from {SUPPORTED_CLASS_COUNTS}")
    if num_sensors not in SUPPORTED_SENSOR_COUNTS:
        raise ScenarioError(f"Unsupported sensor count {num_sensors}; choose from {SUPPORTED_SENSOR_COUNTS}")
    roi = roi or RegionOfInterest(*ROI_BOUNDS)

    lifetimes = SUPPLEMENT_LIFETIMES if supplementary_timing else LETTER_LIFETIMES
    num_steps = SUPPLEMENT_NUM_STEPS if supplementary_timing else NUM_STEPS
    angles = np.radians(60.0 * np.arange(len(TARGET_NAMES)))
    targets = tuple(
        TargetSpec(
            name=name,
            birth=lifetimes[name][0],
            death=lifetimes[name][1],
            initial_position=start_radius * np.array([math.cos(angle), math.sin(angle)]),
            class_label=CLASS_ASSIGNMENTS[num_classes][name],
        )
        for name, angle in zip(TARGET_NAMES, angles)
    )

    confusion, clutter_pmf = build_supplementary_confusions(num_classes, regime)
    try:
        sensors = tuple(
            SensorModel(
                position=position,
                sigma_range=sigma_range,
                sigma_bearing=math.radians(sigma_bearing_deg),
                detection_prob=detection_prob,
                clutter_mean=clutter_mean,
                roi=roi,
                confusion=confusion,
                clutter_class_pmf=clutter_pmf,
                classifier_enabled=classifier_enabled,
                clutter_mc_samples=clutter_mc_samples,
            )
            for position in sensor_positions(num_sensors, sensor_radius)
        )
    except ModelError as e:
        raise ScenarioError(f"Invalid sensor parameters: {e}") from e

    return Scenario(
        targets=targets,
        roi=roi,
        num_steps=num_steps,
        step=step,
        speed=speed,
        turn_angle_deg=turn_angle_deg,
        turn_step=turn_step,
        sensors=sensors,
        num_classes=num_classes,
        class_transition=reference_class_transition(num_classes),
        seed=seed,
        regime=regime,
    )


def scenario_from_config(config: ExperimentConfig, seed: int = 0) -> Scenario:
    sc, se = config.scenario, config.sensor
    return build_reference_scenario(
        sc.classes,
        sc.sensors,
        se.clutter_mean,
        seed=seed,
        regime=sc.regime,
        supplementary_timing=sc.supplementary_timing,
        detection_prob=se.detection_prob,
        sigma_range=se.sigma_range_m,
        sigma_bearing_deg=se.sigma_bearing_deg,
        sensor_radius=se.circle_radius_m,
        roi=RegionOfInterest(sc.roi_x_min_m, sc.roi_x_max_m, sc.roi_y_min_m, sc.roi_y_max_m),
        step=sc.step_s,
        speed=sc.speed_mps,
        start_radius=sc.start_radius_m,
        turn_angle_deg=sc.turn_angle_deg,
        turn_step=sc.turn_step,
        classifier_enabled=se.classifier_enabled,
    )


def truth_at(scenario: Scenario, n: int) -> PointSet:
    if not 0 <= n <= scenario.num_steps:
        raise ScenarioError(f"Step {n} outside 0..{scenario.num_steps}")
    alive = np.flatnonzero(scenario.alive_mask[:, n])
    return PointSet(scenario.truth_states[alive, n, :2], labels=alive + 1)


def _range_bearing(points: np.ndarray, sensor: SensorModel) -> Tuple[np.ndarray, np.ndarray]:
    offsets = points - sensor.position
    return np.hypot(offsets[:, 0], offsets[:, 1]), np.arctan2(offsets[:, 1], offsets[:, 0])


def generate_frame(scenario: Scenario, n: int, s: int, rng: np.random.Generator) -> MeasurementFrame:
    if not 0 <= n <= scenario.num_steps:
        raise ScenarioError(f"Step {n} outside 0..{scenario.num_steps}")
    if not 0 <= s < len(scenario.sensors):
        raise ScenarioError(f"Sensor {s} outside 0..{len(scenario.sensors) - 1}")
    sensor = scenario.sensors[s]
    verdicts = np.arange(scenario.num_classes + 1)

    alive = np.flatnonzero(scenario.alive_mask[:, n])
    detected = alive[rng.random(alive.size) < sensor.detection_prob]
    ranges, bearings = _range_bearing(scenario.truth_states[detected, n, :2], sensor)
    ranges = np.maximum(ranges + sensor.sigma_range * rng.standard_normal(detected.size), 0.0)
    bearings = bearings + sensor.sigma_bearing * rng.standard_normal(detected.size)
    target_verdicts = [
        rng.choice(verdicts, p=sensor.confusion.entries[:, scenario.targets[i].class_label - 1])
        for i in detected
    ]

    num_clutter = rng.poisson(sensor.clutter_mean)
    clutter_ranges, clutter_bearings = _range_bearing(scenario.roi.sample(num_clutter, rng), sensor)
    clutter_verdicts = rng.choice(verdicts, size=num_clutter, p=sensor.clutter_class_pmf.probabilities)

    all_ranges = np.concatenate([ranges, clutter_ranges])
    all_bearings = np.concatenate([bearings, clutter_bearings])
    all_verdicts = np.concatenate([np.asarray(target_verdicts, dtype=int), clutter_verdicts.astype(int)])
    origins = np.concatenate([detected, np.full(num_clutter, -1)]).astype(int)

    order = rng.permutation(all_ranges.size)
    measurements = [
        AugmentedMeasurement(float(all_ranges[i]), float(all_bearings[i]), int(all_verdicts[i]))
        for i in order
    ]
    return MeasurementFrame(time=n, sensor=s, measurements=measurements, origins=origins[order])


def generate_run_frames(scenario: Scenario, rng: np.random.Generator) -> List[List[MeasurementFrame]]:
    """frames[n - 1][s] for n = 1..num_steps"""
    return [
        [generate_frame(scenario, n, s, rng) for s in range(len(scenario.sensors))]
        for n in range(1, scenario.num_steps + 1)
    ]


def frames_to_rows(frames: Sequence[Sequence[MeasurementFrame]], run: int, scenario: Scenario) -> List[Dict[str, Any]]:
    rows = []
    for per_sensor in frames:
        for frame in per_sensor:
            for z, origin in zip(frame.measurements, frame.origins):
                rows.append({
                    "run": run,
                    "n": frame.time,
                    "s": frame.sensor,
                    "range_m": z.range_m,
                    "bearing_rad": z.bearing_rad,
                    "zeta": z.class_estimate,
                    "origin": scenario.targets[origin].name if origin >= 0 else "clutter",
                })
    return rows


def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    return {
        "num_classes": scenario.num_classes,
        "num_steps": scenario.num_steps,
        "step": scenario.step,
        "speed": scenario.speed,
        "turn_angle_deg": scenario.turn_angle_deg,
        "turn_step": scenario.turn_step,
        "seed": scenario.seed,
        "regime": scenario.regime,
        "roi": [scenario.roi.x_min, scenario.roi.x_max, scenario.roi.y_min, scenario.roi.y_max],
        "class_transition": scenario.class_transition.entries.tolist(),
        "targets": [
            {
                "name": t.name,
                "birth": t.birth,
                "death": t.death,
                "initial_position": t.initial_position.tolist(),
                "class_label": t.class_label,
            }
            for t in scenario.targets
        ],
        "sensors": [
            {
                "position": s.position.tolist(),
                "sigma_range": s.sigma_range,
                "sigma_bearing": s.sigma_bearing,
                "detection_prob": s.detection_prob,
                "clutter_mean": s.clutter_mean,
                "confusion": s.confusion.entries.tolist(),
                "clutter_class_pmf": s.clutter_class_pmf.probabilities.tolist(),
                "classifier_enabled": s.classifier_enabled,
                "clutter_mc_samples": s.clutter_mc_samples,
                "clutter_mc_seed": s.clutter_mc_seed,
            }
            for s in scenario.sensors
        ],
    }


def scenario_from_dict(data: Dict[str, Any]) -> Scenario:
    try:
        roi = RegionOfInterest(*data["roi"])
        targets = tuple(
            TargetSpec(
                name=t["name"],
                birth=int(t["birth"]),
                death=int(t["death"]),
                initial_position=np.asarray(t["initial_position"], dtype=float),
                class_label=int(t["class_label"]),
            )
            for t in data["targets"]
        )
        sensors = tuple(
            SensorModel(
                position=s["position"],
                sigma_range=s["sigma_range"],
                sigma_bearing=s["sigma_bearing"],
                detection_prob=s["detection_prob"],
                clutter_mean=s["clutter_mean"],
                roi=roi,
                confusion=ConfusionMatrix(s["confusion"]),
                clutter_class_pmf=ClutterClassPmf(s["clutter_class_pmf"]),
                classifier_enabled=s.get("classifier_enabled", True),
                clutter_mc_samples=s.get("clutter_mc_samples", CLUTTER_MC_SAMPLES),
                clutter_mc_seed=s.get("clutter_mc_seed", CLUTTER_MC_SEED),
            )
            for s in data["sensors"]
        )
        return Scenario(
            targets=targets,
            roi=roi,
            num_steps=int(data["num_steps"]),
            step=float(data["step"]),
            speed=float(data["speed"]),
            turn_angle_deg=float(data["turn_angle_deg"]),
            turn_step=data.get("turn_step"),
            sensors=sensors,
            num_classes=int(data["num_classes"]),
            class_transition=ClassTransitionMatrix(data["class_transition"]),
            seed=int(data.get("seed", 0)),
            regime=data.get("regime", "fixed_diag"),
        )
    except (KeyError, TypeError, ModelError) as e:
        raise ScenarioError(f"Invalid scenario description: {e}") from e
