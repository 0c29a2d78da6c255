"""Shared fixtures: seeded toy datasets, a trained tiny victim, finite differences."""

import sys
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.data import gen_blobs, gen_digits_like, train_test_split  # noqa: E402
from src.models import build_zoo_network  # noqa: E402
from src.training import TrainingConfig, fit_classifier  # noqa: E402


def numeric_grad(loss: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss()`` with respect to ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + h
        plus = loss()
        array[idx] = original - h
        minus = loss()
        array[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7) -> None:
    assert analytic is not None
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture(scope="session")
def blobs_split():
    """Four well separated clusters in 8 dimensions."""
    return train_test_split(gen_blobs(4, 8, 400, 0.1, seed=0), 0.25, seed=0)


@pytest.fixture(scope="session")
def trained_victim(blobs_split):
    train, test = blobs_split
    victim = build_zoo_network("mlp-small", train.input_shape, train.class_count, seed=0)
    fit_classifier(victim, train, TrainingConfig(epochs=20, lr=0.1, batch_size=32, seed=0), test)
    return victim


@pytest.fixture(scope="session")
def digits_set():
    return gen_digits_like(200, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
