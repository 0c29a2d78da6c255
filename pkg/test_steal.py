import numpy as np
import pytest

from src.data import SoftDataset
from src.errors import DimensionError, DomainError, UsageError
from src.models import build_zoo_network, predict_classes, predict_proba
from src.oracle import DefenseConfig, OracleSession, apply_defenses
from src.steal import StealConfig, baseline_steal, e_step, kd_loss, label_with_oracle, run_es_attack, s_step
from src.synthesis import SynthesisConfig
from src.tensor_autograd import one_hot


def _tiny_config(**overrides) -> StealConfig:
    synthesis = SynthesisConfig(samples_per_epoch=16, opt_iterations=2, chunk_size=8, max_workers=2)
    values = dict(N=3, M=1, synthesis=synthesis, kd_lr=0.001, seed=0, batch_size=16)
    values.update(overrides)
    return StealConfig(**values)


class TestEStep:
    def test_self_distillation_is_a_fixed_point(self, trained_victim, blobs_split):
        f_s = trained_victim.copy()
        x = blobs_split[1].inputs
        before = {k: p.data.copy() for k, p in f_s.params.items()}
        loss = e_step(f_s, SoftDataset(x, predict_proba(trained_victim, x)), M=3, lr=0.001, batch_size=32)
        for k, p in f_s.params.items():
            np.testing.assert_allclose(p.data, before[k], atol=1e-6)
        probs = predict_proba(trained_victim, x)
        entropy = -(probs * np.log(np.maximum(probs, 1e-300))).sum(axis=1).mean()
        assert loss == pytest.approx(entropy, abs=1e-6)

    def test_overfits_a_handful_of_samples(self, rng):
        f_s = build_zoo_network("mlp-small", (8,), 4, seed=0)
        x = rng.normal(size=(8, 8))
        labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        loss = e_step(f_s, SoftDataset(x, one_hot(labels, 4)), M=200, lr=0.01)
        assert loss < 0.05
        np.testing.assert_array_equal(predict_classes(f_s, x), labels)

    def test_kd_loss_does_not_rise(self, trained_victim, rng):
        f_s = build_zoo_network("mlp-small", (8,), 4, seed=3)
        x = rng.normal(size=(64, 8))
        targets = predict_proba(trained_victim, x)
        before = kd_loss(f_s, x, targets)
        after = e_step(f_s, SoftDataset(x, targets), M=10, lr=0.001, batch_size=16)
        assert after <= 1.1 * before

    def test_needs_labels(self):
        f_s = build_zoo_network("linear", (2,), 2, seed=0)
        with pytest.raises(UsageError):
            e_step(f_s, SoftDataset(np.zeros((3, 2))), M=1, lr=0.01)

    def test_kd_loss_of_uniform_targets(self):
        f_s = build_zoo_network("linear", (2,), 4, seed=0)
        for p in f_s.parameters():
            p.data[...] = 0.0
        assert kd_loss(f_s, np.ones((3, 2)), np.full((3, 4), 0.25)) == pytest.approx(np.log(4))


class TestSStep:
    def test_generator_state_required(self):
        f_s = build_zoo_network("linear", (2,), 2, seed=0)
        with pytest.raises(UsageError):
            s_step(f_s, SynthesisConfig(mode="dnn_syn"), seed=0)

    def test_random_mode(self):
        f_s = build_zoo_network("linear", (3,), 2, seed=0)
        d_syn = s_step(f_s, SynthesisConfig(samples_per_epoch=5, mode="random"), seed=0, epoch_tag=4)
        assert d_syn.inputs.shape == (5, 3) and d_syn.epoch_tag == 4


class _FixedOracle:
    def __init__(self, answers: np.ndarray):
        self.answers = answers

    def query(self, x: np.ndarray) -> np.ndarray:
        return self.answers


class TestLabeling:
    def test_topk_then_rounding_is_renormalized(self):
        raw = np.array([
            [0.15, 0.15, 0.15, 0.15, 0.15, 0.15, 0.1],
            [0.5, 0.3, 0.1, 0.04, 0.03, 0.02, 0.01],
        ])
        defended = apply_defenses(raw, DefenseConfig(topk=6, rounding_decimals=1))
        np.testing.assert_allclose(defended.sum(axis=1), [1.2, 0.9])

        labels = label_with_oracle(_FixedOracle(defended), np.zeros((2, 3)), fillup_k=6)
        np.testing.assert_allclose(labels[0], [1 / 6] * 6 + [0.0])
        np.testing.assert_allclose(labels[1], [0.5, 0.3, 0.1, 0.0, 0.0, 0.0, 0.1])

    def test_fillup_of_plain_topk(self):
        defended = apply_defenses(np.array([[0.7, 0.2, 0.1]]), DefenseConfig(topk=1))
        labels = label_with_oracle(_FixedOracle(defended), np.zeros((1, 2)), fillup_k=1)
        np.testing.assert_allclose(labels, [[0.7, 0.15, 0.15]])


def test_config_rejects_zero_epochs():
    with pytest.raises(DomainError):
        StealConfig(N=0)


class TestEsAttack:
    def test_queries_equal_epochs_times_samples(self, trained_victim, blobs_split):
        oracle = OracleSession(trained_victim, record_queries=True)
        f_s, trace = run_es_attack(oracle, "mlp-small", _tiny_config(), test_set=blobs_split[1])
        assert oracle.query_count == 3 * 16
        assert [r.query_count for r in trace.records] == [16, 32, 48]
        assert len(trace) == 3 and trace.error is None
        np.testing.assert_array_equal(oracle.recorded_stream().tags, np.repeat([1, 2, 3], 16))
        assert trace.best_accuracy == max(r.accuracy for r in trace.records)
        assert trace.initial_inputs.shape == trace.final_inputs.shape == (16, 8)

    def test_budget_exhaustion_returns_partial_trace(self, trained_victim):
        oracle = OracleSession(trained_victim, budget=40)
        _, trace = run_es_attack(oracle, "mlp-small", _tiny_config(N=5))
        assert len(trace) == 2
        assert trace.error == "budget_exhausted"
        assert oracle.query_count == 32

    def test_random_single_epoch_matches_baseline(self, trained_victim, blobs_split):
        config = _tiny_config(N=1, M=4, augment=False, synthesis=SynthesisConfig(samples_per_epoch=32, mode="random"))
        es_sub, es_trace = run_es_attack(OracleSession(trained_victim), "mlp-small", config, blobs_split[1])
        base_sub, base_trace = baseline_steal(
            OracleSession(trained_victim), "mlp-small", "random", epochs=4, lr=0.001, n_queries=32,
            seed=0, batch_size=16, record_every=4, test_set=blobs_split[1],
        )
        for name in es_sub.params:
            np.testing.assert_array_equal(es_sub.params[name].data, base_sub.params[name].data)
        assert es_trace.records[0].kd_loss == base_trace.records[0].kd_loss

    def test_substitute_must_fit_oracle(self, trained_victim):
        with pytest.raises(DimensionError):
            run_es_attack(OracleSession(trained_victim), "mlp-small", _tiny_config(),
                          initial_substitute=build_zoo_network("mlp-small", (5,), 4, seed=0))

    def test_topk_fillup_run(self, trained_victim):
        oracle = OracleSession(trained_victim, DefenseConfig(topk=1))
        _, trace = run_es_attack(oracle, "linear", _tiny_config(N=2, fillup_topk=1))
        assert len(trace) == 2 and all(np.isfinite(r.kd_loss) for r in trace.records)

    def test_topk_with_rounding_run(self, trained_victim):
        oracle = OracleSession(trained_victim, DefenseConfig(topk=3, rounding_decimals=0))
        _, trace = run_es_attack(oracle, "linear", _tiny_config(N=2, fillup_topk=3))
        assert trace.error is None and len(trace) == 2
        assert all(np.isfinite(r.kd_loss) for r in trace.records)

    def test_dnn_syn_run(self, trained_victim):
        synthesis = SynthesisConfig(samples_per_epoch=8, mode="dnn_syn", generator_steps=2,
                                    generator_batch=8, latent_dim=4, generator_hidden=8)
        oracle = OracleSession(trained_victim)
        _, trace = run_es_attack(oracle, "mlp-small", _tiny_config(N=2, synthesis=synthesis, replay_all=True))
        assert oracle.query_count == 16 and len(trace) == 2

    def test_trace_files(self, trained_victim, tmp_path):
        _, trace = run_es_attack(OracleSession(trained_victim), "linear", _tiny_config(N=2))
        csv_path, json_path = trace.save(tmp_path)
        assert list(trace.to_frame().columns) == ["epoch", "kd_loss", "accuracy", "queries", "seconds"]
        assert csv_path.exists() and json_path.exists()
        assert trace.summary()["queries"] == 32


class TestBaselines:
    def test_auxiliary_needs_data(self, trained_victim):
        with pytest.raises(UsageError):
            baseline_steal(OracleSession(trained_victim), "linear", "auxiliary", epochs=1, lr=0.01)

    def test_unknown_source(self, trained_victim):
        with pytest.raises(DomainError):
            baseline_steal(OracleSession(trained_victim), "linear", "imagenet", epochs=1, lr=0.01)

    def test_zero_epochs_records_once(self, trained_victim):
        oracle = OracleSession(trained_victim)
        _, trace = baseline_steal(oracle, "linear", "random", epochs=0, lr=0.01, n_queries=10)
        assert len(trace) == 1 and trace.records[0].epoch == 0
        assert oracle.query_count == 10

    def test_auxiliary_queries_once(self, trained_victim, blobs_split):
        oracle = OracleSession(trained_victim)
        _, trace = baseline_steal(oracle, "linear", "auxiliary", epochs=6, lr=0.01,
                                  auxiliary=blobs_split[0], record_every=2, test_set=blobs_split[1])
        assert oracle.query_count == len(blobs_split[0])
        assert len(trace) == 3
