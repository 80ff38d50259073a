import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from config import DETECTION_THRESHOLD

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class TrackEstimate:
    pt_index: int
    time: int
    position: np.ndarray
    velocity: np.ndarray
    existence_prob: float
    class_pmf: np.ndarray
    label: int

    @property
    def map_class(self) -> int:
        """Most probable class, 1-based"""
        return int(np.argmax(self.class_pmf)) + 1


def existence_probabilities(beliefs: Sequence) -> np.ndarray:
    return np.array([float(belief.class_weights.sum()) for belief in beliefs])


def detect_and_estimate(beliefs: Sequence, threshold: float = DETECTION_THRESHOLD, time: int = 0) -> List[TrackEstimate]:
    """
    Declare PT k present when its existence probability exceeds the
    threshold and report the MMSE kinematics and class pmf given existence.
    PT indices (1-based) double as persistent track labels.
    """
    estimates = []
    for k, belief in enumerate(beliefs, start=1):
        weights = belief.class_weights
        existence = float(weights.sum())
        if existence <= threshold:
            continue
        particle_weights = weights.sum(axis=1) / existence
        state = particle_weights @ belief.particles
        estimates.append(TrackEstimate(
            pt_index=k,
            time=time,
            position=state[:2],
            velocity=state[2:],
            existence_prob=existence,
            class_pmf=weights.sum(axis=0) / existence,
            label=k,
        ))
    logger.debug(f"Step {time}: {len(estimates)} of {len(beliefs)} PTs declared present")
    return estimates


def estimates_to_rows(estimates: Sequence[TrackEstimate], **extra) -> List[Dict]:
    """Flatten estimates into CSV rows; extra columns (run, tracker) are prepended"""
    rows = []
    for estimate in estimates:
        row = dict(extra)
        row.update({
            "n": estimate.time,
            "label": estimate.label,
            "x_m": float(estimate.position[0]),
            "y_m": float(estimate.position[1]),
            "vx_mps": float(estimate.velocity[0]),
            "vy_mps": float(estimate.velocity[1]),
            "existence_prob": estimate.existence_prob,
            "map_class": estimate.map_class,
        })
        for c, p in enumerate(estimate.class_pmf, start=1):
            row[f"p_class_{c}"] = float(p)
        rows.append(row)
    return rows
