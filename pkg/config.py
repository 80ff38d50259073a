import os
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv, dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

load_dotenv()

# Logging Settings
LOG_FILE = os.getenv("TRACKER_LOG_FILE", "tracking.log")
LOG_LEVEL = os.getenv("TRACKER_LOG_LEVEL", "INFO")

_logging_configured = False


# Configure logging
def setup_logging(log_file: Optional[str] = None, level: Optional[str] = None):
    """Configure logging with file and console handlers"""
    global _logging_configured
    logger = logging.getLogger()
    if _logging_configured:
        return logger

    log_file = LOG_FILE if log_file is None else log_file
    level = getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO)
    logger.setLevel(level)

    # Create formatters
    file_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    console_formatter = logging.Formatter(
        '%(levelname)s - %(name)s - %(message)s'
    )

    # File handler (an empty TRACKER_LOG_FILE disables it)
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.WARNING)  # Only warnings and errors to console
    console_handler.setFormatter(console_formatter)
    logger.addHandler(console_handler)

    _logging_configured = True
    return logger


# Initialize logging
logger = setup_logging()

# Scenario Settings
NUM_STEPS = 140
SUPPLEMENT_NUM_STEPS = 150
STEP_SECONDS = 2.0
TARGET_SPEED = 1.0  # m/s
START_RADIUS = 150.0  # m
TURN_ANGLE_DEG = 60.0  # right turn
ROI_BOUNDS = (-200.0, 200.0, -150.0, 150.0)  # x_min, x_max, y_min, y_max (m)
NUM_CLASSES = 3
NUM_SENSORS = 1

# Sensor Settings
SENSOR_CIRCLE_RADIUS = 3000.0  # m
SIGMA_RANGE_M = 5.0
SIGMA_BEARING_DEG = 0.1
DETECTION_PROB = 0.9
CLUTTER_MEAN = 20.0
CLUTTER_MC_SAMPLES = int(os.getenv("TRACKER_CLUTTER_MC_SAMPLES", "1000000"))
CLUTTER_MC_SEED = 20170615

# Classifier Settings
CONFUSION_DIAGONAL = 0.85
CLASS_PERSISTENCE = 0.95  # diagonal of D

# Motion Settings
ACCEL_STD = 0.1  # m/s^2 per component
SURVIVAL_PROB = 0.99
BIRTH_PROB = 0.075
BIRTH_VELOCITY_STD = 1.0  # m/s

# Tracker Settings
NUM_PTS = 20
NUM_PARTICLES = 3000
BP_ITERATIONS = 20
BP_TOLERANCE = 1e-6
DETECTION_THRESHOLD = 0.5

# Metric Settings
METRIC_ORDER = 1.0
METRIC_CUTOFF = 20.0  # m
LABEL_PENALTY = 20.0  # m
GOSPA_ALPHA = 2.0
FAR_GATE = 20.0  # m

# Run Settings
NUM_RUNS = 200
BASE_SEED = 0
WORKERS = int(os.getenv("TRACKER_WORKERS", "1"))
OUTPUT_DIR = os.getenv("TRACKER_OUTPUT_DIR", "results")

# Cache Settings
CACHE_MAX_SIZE = int(os.getenv("TRACKER_CACHE_MAX_SIZE", "64"))

# Six targets A..F, one per 60 degrees on the start circle
TARGET_NAMES = ("A", "B", "C", "D", "E", "F")
SUPPORTED_CLASS_COUNTS = (1, 2, 3, 6)
SUPPORTED_SENSOR_COUNTS = (1, 2)


class ConfigError(Exception):
    """Raised when an experiment configuration is invalid"""
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioSection(_Section):
    classes: int = NUM_CLASSES
    sensors: int = NUM_SENSORS
    regime: Literal["fixed_diag", "fixed_offdiag"] = "fixed_diag"
    supplementary_timing: bool = False
    step_s: float = Field(STEP_SECONDS, gt=0)
    speed_mps: float = Field(TARGET_SPEED, gt=0)
    start_radius_m: float = Field(START_RADIUS, gt=0)
    turn_angle_deg: float = TURN_ANGLE_DEG
    turn_step: Optional[int] = Field(None, ge=0)
    roi_x_min_m: float = ROI_BOUNDS[0]
    roi_x_max_m: float = ROI_BOUNDS[1]
    roi_y_min_m: float = ROI_BOUNDS[2]
    roi_y_max_m: float = ROI_BOUNDS[3]

    @field_validator("classes")
    @classmethod
    def _supported_classes(cls, value: int) -> int:
        if value not in SUPPORTED_CLASS_COUNTS:
            raise ValueError(f"classes must be one of {SUPPORTED_CLASS_COUNTS}")
        return value

    @field_validator("sensors")
    @classmethod
    def _supported_sensors(cls, value: int) -> int:
        if value not in SUPPORTED_SENSOR_COUNTS:
            raise ValueError(f"sensors must be one of {SUPPORTED_SENSOR_COUNTS}")
        return value

    @model_validator(mode="after")
    def _roi_has_area(self):
        if self.roi_x_max_m <= self.roi_x_min_m or self.roi_y_max_m <= self.roi_y_min_m:
            raise ValueError("ROI must have positive area")
        return self


class SensorSection(_Section):
    sigma_range_m: float = Field(SIGMA_RANGE_M, gt=0)
    sigma_bearing_deg: float = Field(SIGMA_BEARING_DEG, gt=0)
    detection_prob: float = Field(DETECTION_PROB, ge=0, le=1)
    clutter_mean: float = Field(CLUTTER_MEAN, ge=0)
    circle_radius_m: float = Field(SENSOR_CIRCLE_RADIUS, gt=0)
    classifier_enabled: bool = True


class TrackerSection(_Section):
    num_pts: int = Field(NUM_PTS, ge=1)
    num_particles: int = Field(NUM_PARTICLES, ge=1)
    num_birth_particles: Optional[int] = Field(None, ge=1)
    bp_iterations: int = Field(BP_ITERATIONS, ge=1)
    bp_tolerance: float = Field(BP_TOLERANCE, ge=0)
    detection_threshold: float = Field(DETECTION_THRESHOLD, ge=0, le=1)
    survival_prob: float = Field(SURVIVAL_PROB, ge=0, le=1)
    birth_prob: float = Field(BIRTH_PROB, ge=0, le=1)
    accel_std: float = Field(ACCEL_STD, ge=0)
    birth_velocity_std: float = Field(BIRTH_VELOCITY_STD, ge=0)
    initial_existence: float = Field(0.0, ge=0, le=1)
    classifier_enabled: bool = True


class RunSection(_Section):
    num_runs: int = Field(NUM_RUNS, ge=1)
    base_seed: int = Field(BASE_SEED, ge=0)
    workers: int = Field(WORKERS, ge=1)
    output_dir: str = OUTPUT_DIR

    @field_validator("output_dir")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("output directory must not be empty")
        return value


class ExperimentConfig(_Section):
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    sensor: SensorSection = Field(default_factory=SensorSection)
    tracker: TrackerSection = Field(default_factory=TrackerSection)
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _enough_pts(self):
        # six targets at most are alive at once in the scripted scenario
        if self.tracker.num_pts < len(TARGET_NAMES):
            raise ValueError(
                f"tracker.num_pts must be at least {len(TARGET_NAMES)} (max simultaneous targets)"
            )
        return self

    @property
    def num_steps(self) -> int:
        return SUPPLEMENT_NUM_STEPS if self.scenario.supplementary_timing else NUM_STEPS

    def to_flat_dict(self) -> Dict[str, Any]:
        """Flatten back to dotted keys, the config file layout"""
        flat = {}
        for section, values in self.model_dump().items():
            for key, value in values.items():
                flat[f"{section}.{key}"] = value
        return flat


def _nest(flat: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    nested: Dict[str, Dict[str, Any]] = {}
    bad_keys: List[str] = []
    for dotted, value in flat.items():
        section, sep, key = dotted.partition(".")
        if not sep or not key:
            bad_keys.append(dotted)
            continue
        nested.setdefault(section.strip(), {})[key.strip()] = value
    if bad_keys:
        raise ConfigError(f"Config keys must look like 'section.field': {', '.join(sorted(bad_keys))}")
    return nested


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        field = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{field}: {item['msg']}")
    return "; ".join(lines)


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    Build an ExperimentConfig from defaults, an optional dotted key-value
    file and dotted overrides (CLI flags), in increasing precedence.
    """
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        values = dotenv_values(path, interpolate=False)
        flat.update({k: v for k, v in values.items() if v is not None and v != ""})
        logger.info(f"Loaded {len(flat)} config values from {path}")

    if overrides:
        flat.update({k: v for k, v in overrides.items() if v is not None})

    try:
        return ExperimentConfig.model_validate(_nest(flat))
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {_format_validation_error(e)}") from e
