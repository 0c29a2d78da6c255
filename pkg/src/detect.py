"""
PRADA-style query-distribution detector.

Each query is compared with the queries already accepted for its predicted
class. The minimum L2 distance always joins the global history; the query
itself joins the class set only when that distance exceeds the class's
accepted-distance mean minus one standard deviation. A benign client's
distances look Gaussian; the detector flags the client when a
Shapiro-Francia correlation between the sorted history and Gaussian
quantiles drops below the threshold.

This is a reconstruction: the warm-up length, the statistic and the
default threshold are our choices, not published constants.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy import stats

from src.data import LabeledDataset

logger = logging.getLogger(__name__)

WARMUP = 30
DEFAULT_THRESHOLD = 0.9


class _Rows:
    """Append-only row buffer with amortized growth."""

    def __init__(self, width: int):
        self._data = np.empty((16, width))
        self.size = 0

    def append(self, row: np.ndarray) -> None:
        if self.size == len(self._data):
            self._data = np.concatenate([self._data, np.empty_like(self._data)])
        self._data[self.size] = row
        self.size += 1

    def view(self) -> np.ndarray:
        return self._data[:self.size]


@dataclass
class DetectorState:
    threshold: float = DEFAULT_THRESHOLD
    history: List[float] = field(default_factory=list)
    accepted: Dict[int, _Rows] = field(default_factory=dict)
    accepted_distances: Dict[int, List[float]] = field(default_factory=dict)
    ingested: int = 0
    flagged: bool = False


def ingest(state: DetectorState, x: np.ndarray, predicted_class: int) -> DetectorState:
    x = np.asarray(x, dtype=np.float64).ravel()
    state.ingested += 1
    rows = state.accepted.get(predicted_class)
    if rows is None:
        rows = state.accepted[predicted_class] = _Rows(x.size)
        state.accepted_distances[predicted_class] = []
        rows.append(x)
        return state

    distance = float(np.sqrt(((rows.view() - x) ** 2).sum(axis=1)).min())
    state.history.append(distance)
    previous = state.accepted_distances[predicted_class]
    if not previous or distance > np.mean(previous) - np.std(previous):
        rows.append(x)
        previous.append(distance)
    return state


def normality(distances: np.ndarray) -> float:
    """Squared correlation of the sorted sample with Blom-position normal quantiles."""
    d = np.sort(np.asarray(distances, dtype=np.float64))
    n = d.size
    quantiles = stats.norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    centered = d - d.mean()
    denom = (centered ** 2).sum() * (quantiles ** 2).sum()
    if denom <= 0.0:
        return 0.0
    return float((centered @ quantiles) ** 2 / denom)


def evaluate(state: DetectorState) -> Dict[str, Any]:
    if len(state.history) < WARMUP:
        return {"flagged": state.flagged, "normality": None, "indeterminate": True}
    score = normality(np.asarray(state.history))
    if score < state.threshold and not state.flagged:
        logger.warning("Query stream flagged: normality %.4f < %.2f after %d queries",
                       score, state.threshold, state.ingested)
        state.flagged = True
    return {"flagged": state.flagged, "normality": score, "indeterminate": False}


class PradaDetector:
    """Stateful wrapper used by the oracle session."""

    def __init__(self, threshold: float = DEFAULT_THRESHOLD):
        self.state = DetectorState(threshold=threshold)

    def ingest(self, x: np.ndarray, predicted_class: int) -> None:
        ingest(self.state, x, predicted_class)

    def evaluate(self) -> Dict[str, Any]:
        return evaluate(self.state)

    def reset(self) -> None:
        self.state = DetectorState(threshold=self.state.threshold)


@dataclass
class DetectionReport:
    total_queries: int
    flagged: bool
    indeterminate: bool
    flag_index: Optional[int]
    flag_epoch: Optional[int]
    final_normality: Optional[float]
    normality_series: List[Dict[str, Any]]
    seconds: float
    throughput_qps: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total_queries": self.total_queries,
            "flagged": self.flagged,
            "indeterminate": self.indeterminate,
            "flag_index": self.flag_index,
            "flag_epoch": self.flag_epoch,
            "final_normality": self.final_normality,
            "normality_series": self.normality_series,
            "seconds": self.seconds,
            "throughput_qps": self.throughput_qps,
        }


def replay_attack_stream(
    detector: PradaDetector,
    stream: Optional[LabeledDataset],
    report_every: int = 10_000,
    check_every: int = 100,
) -> DetectionReport:
    """Feed a recorded stream through the detector in arrival order."""
    started = time.perf_counter()
    series: List[Dict[str, Any]] = []
    flag_index: Optional[int] = None
    flag_epoch: Optional[int] = None
    total = 0 if stream is None else len(stream)

    for i in range(total):
        detector.ingest(stream.inputs[i], int(stream.labels[i]))
        count = i + 1
        if count % check_every == 0 or count % report_every == 0 or count == total:
            result = detector.evaluate()
            if result["flagged"] and flag_index is None:
                flag_index = count
                flag_epoch = int(stream.tags[i]) if stream.tags is not None else None
            if count % report_every == 0:
                series.append({"queries": count, "normality": result["normality"]})

    seconds = time.perf_counter() - started
    final = detector.evaluate()
    if total and total % report_every:
        series.append({"queries": total, "normality": final["normality"]})
    report = DetectionReport(
        total_queries=total,
        flagged=final["flagged"],
        indeterminate=final["indeterminate"],
        flag_index=flag_index,
        flag_epoch=flag_epoch,
        final_normality=final["normality"],
        normality_series=series,
        seconds=seconds,
        throughput_qps=total / seconds if seconds > 0 else 0.0,
    )
    logger.info("Replayed %d queries in %.2fs: flagged=%s normality=%s",
                total, seconds, report.flagged, report.final_normality)
    return report
