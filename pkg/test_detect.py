import numpy as np
import pytest

from src.data import LabeledDataset
from src.detect import WARMUP, DetectorState, PradaDetector, evaluate, ingest, normality, replay_attack_stream


def _near_duplicate_stream(seed: int = 0) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    base = 10.0 * np.eye(20)
    picks = rng.integers(0, 20, size=280)
    copies = base[picks] + rng.normal(0.0, 1e-3, size=(280, 20))
    inputs = np.concatenate([base, copies])
    return LabeledDataset(inputs, np.zeros(len(inputs), dtype=int), 2, name="near-duplicates")


def test_gaussian_history_is_not_flagged():
    state = DetectorState(history=list(np.random.default_rng(0).normal(5.0, 1.0, size=500)))
    result = evaluate(state)
    assert not result["flagged"]
    assert result["normality"] > 0.95


def test_near_duplicate_stream_is_flagged():
    report = replay_attack_stream(PradaDetector(), _near_duplicate_stream(), report_every=100, check_every=50)
    assert report.flagged and not report.indeterminate
    assert report.flag_index is not None and report.flag_index <= 300
    assert report.final_normality < 0.9


def test_warmup_is_indeterminate():
    state = DetectorState(history=[1.0] * (WARMUP - 1))
    assert evaluate(state) == {"flagged": False, "normality": None, "indeterminate": True}


def test_constant_history_has_zero_normality():
    assert normality(np.full(50, 3.0)) == 0.0


def test_first_query_per_class_has_no_distance():
    state = DetectorState()
    ingest(state, np.zeros(3), 0)
    ingest(state, np.ones(3), 1)
    assert state.history == []
    ingest(state, np.array([3.0, 4.0, 0.0]), 0)
    assert state.history == [pytest.approx(5.0)]


def test_close_query_is_not_accepted():
    state = DetectorState()
    for x in ([0.0, 0.0], [4.0, 0.0], [0.0, 8.0]):
        ingest(state, np.array(x), 0)
    accepted = state.accepted[0].size
    ingest(state, np.array([0.1, 0.0]), 0)
    assert state.accepted[0].size == accepted
    assert state.history[-1] == pytest.approx(0.1)


def test_missing_stream_is_indeterminate():
    report = replay_attack_stream(PradaDetector(), None)
    assert report.total_queries == 0 and report.indeterminate
    assert report.to_dict()["flag_index"] is None


def test_reset_keeps_threshold():
    detector = PradaDetector(threshold=0.8)
    detector.ingest(np.zeros(2), 0)
    detector.reset()
    assert detector.state.ingested == 0 and detector.state.threshold == 0.8
