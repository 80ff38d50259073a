import os

# keep test runs from writing a log file into the working tree
os.environ.setdefault("TRACKER_LOG_FILE", "")

import numpy as np
import pytest

from model import MotionModel, RegionOfInterest, SensorModel
from simulator import build_supplementary_confusions

SENSOR_POSITION = (3000.0, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def roi():
    return RegionOfInterest(-200.0, 200.0, -150.0, 150.0)


def make_sensor(num_classes=3, regime="fixed_diag", **overrides):
    confusion, clutter_pmf = build_supplementary_confusions(num_classes, regime)
    params = dict(
        position=SENSOR_POSITION,
        sigma_range=5.0,
        sigma_bearing=np.radians(0.1),
        detection_prob=0.9,
        clutter_mean=20.0,
        roi=RegionOfInterest(-200.0, 200.0, -150.0, 150.0),
        confusion=confusion,
        clutter_class_pmf=clutter_pmf,
    )
    params.update(overrides)
    return SensorModel(**params)


def make_motion(accel_std=0.1, survival_prob=0.999, birth_prob=0.01, birth_velocity_std=1.0):
    return MotionModel.constant_velocity(
        step=2.0,
        accel_std=accel_std,
        survival_prob=survival_prob,
        birth_prob=birth_prob,
        birth_region=RegionOfInterest(-200.0, 200.0, -150.0, 150.0),
        birth_velocity_std=birth_velocity_std,
    )


@pytest.fixture
def sensor():
    return make_sensor()


@pytest.fixture
def motion():
    return make_motion()
