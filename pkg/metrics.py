"""
Set-based tracking error metrics: OSPA, GOSPA, OSPA-T and the false
alarm rate, all built on a minimum-cost assignment.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from config import FAR_GATE, GOSPA_ALPHA, LABEL_PENALTY, METRIC_CUTOFF, METRIC_ORDER

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class PointSet:
    """2D positions with optional integer track labels"""
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(positions)):
            raise ValueError("PointSet coordinates must be finite")
        self.positions = positions
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=int).reshape(-1)
            if labels.shape[0] != positions.shape[0]:
                raise ValueError(f"Got {labels.shape[0]} labels for {positions.shape[0]} points")
            if np.unique(labels).size != labels.size:
                raise ValueError("Labels must be unique within a PointSet")
            self.labels = labels

    def __len__(self) -> int:
        return self.positions.shape[0]


PointsLike = Union[PointSet, np.ndarray, Sequence]


def _positions(points: PointsLike) -> np.ndarray:
    if isinstance(points, PointSet):
        return points.positions
    return PointSet(points).positions


def optimal_assignment(cost) -> Tuple[np.ndarray, np.ndarray, float]:
    """Minimum-cost matching of min(rows, cols) pairs; returns (rows, cols, total)"""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"Cost matrix must be 2D, got shape {cost.shape}")
    if cost.size == 0:
        empty = np.zeros(0, dtype=int)
        return empty, empty, 0.0
    if not np.all(np.isfinite(cost)):
        raise ValueError("Cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return rows, cols, float(cost[rows, cols].sum())


def ospa(truth: PointsLike, est: PointsLike, p: float = METRIC_ORDER, c: float = METRIC_CUTOFF) -> float:
    x, y = _positions(truth), _positions(est)
    n, m = len(x), len(y)
    if n == 0 and m == 0:
        return 0.0
    if n == 0 or m == 0:
        return float(c)
    costs = np.minimum(cdist(x, y), c) ** p
    _, _, total = optimal_assignment(costs)
    return float(((total + c ** p * abs(n - m)) / max(n, m)) ** (1.0 / p))


def gospa(
    truth: PointsLike,
    est: PointsLike,
    p: float = METRIC_ORDER,
    c: float = METRIC_CUTOFF,
    alpha: float = GOSPA_ALPHA,
) -> float:
    x, y = _positions(truth), _positions(est)
    n, m = len(x), len(y)
    total = 0.0
    if n and m:
        _, _, total = optimal_assignment(np.minimum(cdist(x, y), c) ** p)
    return float((total + c ** p / alpha * abs(n - m)) ** (1.0 / p))


def _labels(points: PointSet, role: str) -> np.ndarray:
    if points.labels is None:
        raise ValueError(f"OSPA-T needs labeled {role} point sets")
    return points.labels


def track_correspondence(
    truth_seq: Sequence[PointSet],
    est_seq: Sequence[PointSet],
    p: float = METRIC_ORDER,
    c: float = METRIC_CUTOFF,
) -> Dict[int, int]:
    """
    Global truth label -> estimate label map minimizing the time-summed
    track distance (cutoff distance where both exist, c where only one does).
    """
    truth_labels = sorted({int(l) for points in truth_seq for l in _labels(points, "truth")})
    est_labels = sorted({int(l) for points in est_seq for l in _labels(points, "estimate")})
    if not truth_labels or not est_labels:
        return {}
    truth_index = {label: i for i, label in enumerate(truth_labels)}
    est_index = {label: j for j, label in enumerate(est_labels)}

    cost = np.zeros((len(truth_labels), len(est_labels)))
    for truth, est in zip(truth_seq, est_seq):
        ti = np.array([truth_index[int(l)] for l in truth.labels], dtype=int)
        ej = np.array([est_index[int(l)] for l in est.labels], dtype=int)
        truth_absent = np.setdiff1d(np.arange(len(truth_labels)), ti)
        est_absent = np.setdiff1d(np.arange(len(est_labels)), ej)
        if ti.size and ej.size:
            cost[np.ix_(ti, ej)] += np.minimum(cdist(truth.positions, est.positions), c) ** p
        cost[np.ix_(ti, est_absent)] += c ** p
        cost[np.ix_(truth_absent, ej)] += c ** p

    rows, cols, _ = optimal_assignment(cost)
    return {truth_labels[r]: est_labels[col] for r, col in zip(rows, cols)}


def ospa_t(
    truth_seq: Sequence[PointSet],
    est_seq: Sequence[PointSet],
    p: float = METRIC_ORDER,
    c: float = METRIC_CUTOFF,
    label_penalty: float = LABEL_PENALTY,
) -> np.ndarray:
    """Per-step OSPA with a label penalty for pairs that break the global track correspondence"""
    if len(truth_seq) != len(est_seq):
        raise ValueError("Truth and estimate sequences must share the time axis")
    correspondence = track_correspondence(truth_seq, est_seq, p, c)

    series = np.zeros(len(truth_seq))
    for n, (truth, est) in enumerate(zip(truth_seq, est_seq)):
        nx, ny = len(truth), len(est)
        if nx == 0 and ny == 0:
            continue
        if nx == 0 or ny == 0:
            series[n] = c
            continue
        mapped = np.array([correspondence.get(int(l), -1) for l in truth.labels])
        mismatch = mapped[:, None] != est.labels[None, :]
        label_cost = np.where(mismatch, label_penalty ** p, 0.0)
        distances = np.minimum((cdist(truth.positions, est.positions) ** p + label_cost) ** (1.0 / p), c)
        _, _, total = optimal_assignment(distances ** p)
        series[n] = ((total + c ** p * abs(nx - ny)) / max(nx, ny)) ** (1.0 / p)
    return series


def false_track_counts(
    est_seq: Sequence[PointsLike],
    truth_seq: Sequence[PointsLike],
    gate: float = FAR_GATE,
) -> np.ndarray:
    """Per step, estimates left without a truth within gate under the optimal assignment"""
    counts = np.zeros(len(est_seq), dtype=int)
    for n, (est, truth) in enumerate(zip(est_seq, truth_seq)):
        y, x = _positions(est), _positions(truth)
        if len(y) == 0:
            continue
        if len(x) == 0:
            counts[n] = len(y)
            continue
        distances = cdist(y, x)
        rows, cols, _ = optimal_assignment(np.minimum(distances, gate))
        counts[n] = len(y) - int(np.sum(distances[rows, cols] <= gate))
    return counts


def far(
    est_seq: Sequence[PointsLike],
    truth_seq: Sequence[PointsLike],
    roi_area_km2: float,
    duration_s: float,
    gate: float = FAR_GATE,
) -> float:
    """False track-steps per km^2 per second"""
    if roi_area_km2 <= 0 or duration_s <= 0:
        raise ValueError("ROI area and duration must be positive")
    return float(false_track_counts(est_seq, truth_seq, gate).sum() / (roi_area_km2 * duration_s))


@dataclass(eq=False)
class MetricReport:
    mgospa: float
    mospa: float
    mospa_t: float
    far: float
    gospa_series: np.ndarray
    ospa_series: np.ndarray
    ospa_t_series: np.ndarray
    false_track_series: np.ndarray

    def summary(self) -> Dict[str, float]:
        return {
            "mgospa_m": self.mgospa,
            "mospa_m": self.mospa,
            "mospa_t_m": self.mospa_t,
            "far_per_km2_s": self.far,
        }


def score_run(
    truth_seq: Sequence[PointSet],
    est_seq: Sequence[PointSet],
    roi_area_km2: float,
    step_s: float,
    p: float = METRIC_ORDER,
    c: float = METRIC_CUTOFF,
    alpha: float = GOSPA_ALPHA,
    label_penalty: float = LABEL_PENALTY,
    gate: float = FAR_GATE,
) -> MetricReport:
    """All four metrics of one run, time-averaged over the sequence"""
    gospa_series = np.array([gospa(x, y, p, c, alpha) for x, y in zip(truth_seq, est_seq)])
    ospa_series = np.array([ospa(x, y, p, c) for x, y in zip(truth_seq, est_seq)])
    ospa_t_series = ospa_t(truth_seq, est_seq, p, c, label_penalty)
    false_tracks = false_track_counts(est_seq, truth_seq, gate)
    return MetricReport(
        mgospa=float(gospa_series.mean()),
        mospa=float(ospa_series.mean()),
        mospa_t=float(ospa_t_series.mean()),
        far=far(est_seq, truth_seq, roi_area_km2, len(truth_seq) * step_s, gate),
        gospa_series=gospa_series,
        ospa_series=ospa_series,
        ospa_t_series=ospa_t_series,
        false_track_series=false_tracks,
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Run-average of time-averaged reports; series are averaged step by step"""
    if not reports:
        raise ValueError("Cannot aggregate an empty list of reports")

    def mean_series(name: str) -> np.ndarray:
        return np.mean(np.stack([getattr(report, name) for report in reports]), axis=0)

    return MetricReport(
        mgospa=float(np.mean([r.mgospa for r in reports])),
        mospa=float(np.mean([r.mospa for r in reports])),
        mospa_t=float(np.mean([r.mospa_t for r in reports])),
        far=float(np.mean([r.far for r in reports])),
        gospa_series=mean_series("gospa_series"),
        ospa_series=mean_series("ospa_series"),
        ospa_t_series=mean_series("ospa_t_series"),
        false_track_series=mean_series("false_track_series"),
    )
