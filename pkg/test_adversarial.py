import numpy as np
import pytest

from src.adversarial import PGD_PRESETS, PgdConfig, attack_success_rate, pgd_attack, transfer_eval
from src.data import LabeledDataset
from src.errors import DimensionError, DomainError
from src.models import LayerSpec, build_network, predict_classes
from src.oracle import OracleSession


def _linear(w: np.ndarray, second: np.ndarray):
    net = build_network([LayerSpec.dense(len(w), 2)], seed=0, input_shape=(len(w),))
    net.params["layer0.weight"].data[:, 0] = w
    net.params["layer0.weight"].data[:, 1] = second
    return net


def test_presets():
    assert PGD_PRESETS["mnist-like"].epsilon == 0.3
    assert PGD_PRESETS["mnist-like"].iterations == 40
    assert PGD_PRESETS["cifar-like"].epsilon == pytest.approx(8 / 255)
    assert PGD_PRESETS["cifar-like"].step_size == pytest.approx(2 / 255)


def test_single_step_moves_against_the_true_class_weights():
    w = np.array([0.5, -2.0, 1.0])
    net = _linear(w, np.zeros(3))
    adv = pgd_attack(net, np.zeros((1, 3)), np.array([0]), PgdConfig(epsilon=0.3, step_size=0.1, iterations=1))
    np.testing.assert_allclose(adv[0], -0.1 * np.sign(w))


def test_success_is_monotone_in_epsilon(rng):
    w = np.array([1.0, 1.0])
    net = _linear(w, -w)
    x = rng.uniform(0.05, 0.6, size=(200, 2))
    labels = predict_classes(net, x)
    rates = [
        attack_success_rate(net, pgd_attack(net, x, labels, PgdConfig(epsilon=eps, step_size=eps / 4, iterations=10)), labels)
        for eps in (0.0, 0.1, 0.2, 0.4, 0.8)
    ]
    assert rates[0] == 0.0
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] == 1.0


def test_perturbation_respects_ball_and_box(trained_victim, blobs_split):
    x, labels = blobs_split[1].inputs, blobs_split[1].labels
    cfg = PgdConfig(epsilon=0.3, step_size=0.05, iterations=10, random_start=True, seed=1)
    adv = pgd_attack(trained_victim, x, labels, cfg)
    assert np.abs(adv - x).max() <= 0.3 + 1e-12
    assert adv.min() >= -1.0 and adv.max() <= 1.0


def test_zero_epsilon_changes_nothing(trained_victim, blobs_split):
    x, labels = blobs_split[1].inputs, blobs_split[1].labels
    adv = pgd_attack(trained_victim, x, labels, PgdConfig(epsilon=0.0))
    np.testing.assert_array_equal(adv, x)
    assert attack_success_rate(trained_victim, adv, labels, clean_x=x) == 0.0


def test_inputs_outside_the_box():
    net = _linear(np.ones(2), np.zeros(2))
    with pytest.raises(DomainError):
        pgd_attack(net, np.array([[1.5, 0.0]]), np.array([0]), PgdConfig())


def test_label_shape_mismatch():
    net = _linear(np.ones(2), np.zeros(2))
    with pytest.raises(DimensionError):
        pgd_attack(net, np.zeros((2, 2)), np.array([0]), PgdConfig())


def test_success_counts_only_originally_correct():
    net = _linear(np.array([1.0]), np.array([-1.0]))
    clean = np.array([[0.5], [-0.5]])
    labels = np.array([0, 0])
    assert attack_success_rate(net, clean, labels) == 0.5
    assert attack_success_rate(net, clean, labels, clean_x=clean) == 0.0


def test_transfer_with_a_perfect_copy(trained_victim, blobs_split):
    test = LabeledDataset(blobs_split[1].inputs[:40], blobs_split[1].labels[:40], 4)
    cfg = PgdConfig(epsilon=0.3, step_size=0.02, iterations=20)
    report = transfer_eval(trained_victim.copy(), OracleSession(trained_victim), test, cfg, victim=trained_victim)
    assert report["black_victim"] == report["white_sub"] == report["white_victim"]
    assert report["samples"] == 40 and report["pgd"]["epsilon"] == 0.3
