"""
Synthetic-data quality and model-quality metrics.

IS and FID are computed through the victim itself rather than an Inception
network: IS from its class probabilities, FID from the activations feeding
its last dense layer.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from src.data import LabeledDataset
from src.errors import DimensionError, DomainError
from src.models import Network, predict_classes, predict_proba
from src.tensor_autograd import no_grad

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class GaussianSummary:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class FeatureExtract:
    network: Network
    tap_point: int

    @classmethod
    def for_network(cls, network: Network) -> "FeatureExtract":
        return cls(network=network, tap_point=network.feature_tap())

    def __call__(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        with no_grad():
            chunks = [
                self.network.forward(x[start:start + batch_size], upto=self.tap_point).data
                for start in range(0, len(x), batch_size)
            ]
        return np.concatenate(chunks, axis=0).reshape(len(x), -1)


# ---------------------------------------------------------------------------
# inception score


def inception_score_from_probs(probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise DomainError(f"inception score needs at least 2 prediction rows, got {probs.shape}")
    marginal = probs.mean(axis=0, keepdims=True)
    log_ratio = np.log(np.maximum(probs, PROB_FLOOR)) - np.log(np.maximum(marginal, PROB_FLOOR))
    kl = (probs * log_ratio).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_score(model: Network, samples: np.ndarray) -> float:
    if len(samples) == 0:
        raise DomainError("inception score on an empty sample set")
    return inception_score_from_probs(predict_proba(model, samples))


# ---------------------------------------------------------------------------
# frechet distance


def gaussian_summary(features: np.ndarray) -> GaussianSummary:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise DomainError(f"gaussian summary needs an n x d matrix with n >= 2, got {features.shape}")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (features.shape[0] - 1)
    return GaussianSummary(mu=mu, sigma=(sigma + sigma.T) / 2.0)


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations on a symmetric matrix; returns (eigenvalues, eigenvectors)."""
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix must be square, got {a.shape}")
    if not np.allclose(a, a.T, atol=1e-9, rtol=0.0):
        raise DomainError("matrix must be symmetric")
    a = (a + a.T) / 2.0
    n = a.shape[0]
    v = np.eye(n)
    scale = max(float(np.abs(a).max(initial=0.0)), np.finfo(float).tiny)

    for sweep in range(max_sweeps):
        off = math.sqrt(float((a ** 2).sum() - (np.diag(a) ** 2).sum()))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= np.finfo(float).tiny:
                    continue
                phi = 0.5 * math.atan2(2.0 * apq, a[q, q] - a[p, p])
                c, s = math.cos(phi), math.sin(phi)
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning("Jacobi did not converge in %d sweeps (n=%d)", max_sweeps, n)
    return np.diag(a).copy(), v


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = jacobi_eigh(matrix)
    return (vectors * np.sqrt(np.maximum(values, 0.0))) @ vectors.T


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b) - 2 Tr((sqrt(S_a) S_b sqrt(S_a))^(1/2))."""
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError(f"FID dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    values, _ = jacobi_eigh((inner + inner.T) / 2.0)
    trace_sqrt = float(np.sqrt(np.maximum(values, 0.0)).sum())
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt)


# ---------------------------------------------------------------------------
# model quality

Predictor = Union[Network, Callable[[np.ndarray], np.ndarray]]


def _classes(model: Predictor, inputs: np.ndarray) -> np.ndarray:
    if isinstance(model, Network):
        return predict_classes(model, inputs)
    return np.asarray(model(inputs)).argmax(axis=1)


def accuracy(model: Predictor, dataset: LabeledDataset) -> float:
    return float((_classes(model, dataset.inputs) == dataset.labels).mean())


def agreement(f_a: Predictor, f_b: Predictor, inputs: np.ndarray) -> float:
    return float((_classes(f_a, inputs) == _classes(f_b, inputs)).mean())


def metrics_report(
    victim: Network,
    tagged_inputs: Dict[str, np.ndarray],
    reference: np.ndarray,
    substitute: Optional[Network] = None,
    test_set: Optional[LabeledDataset] = None,
) -> Dict[str, Dict[str, Optional[float]]]:
    """{tag: {is, fid, accuracy, agreement}} with a fixed key order per tag."""
    extract = FeatureExtract.for_network(victim)
    reference_summary = gaussian_summary(extract(reference))
    report: Dict[str, Dict[str, Optional[float]]] = {}
    for tag, inputs in tagged_inputs.items():
        report[tag] = {
            "is": inception_score(victim, inputs),
            "fid": fid(gaussian_summary(extract(inputs)), reference_summary),
            "accuracy": accuracy(substitute, test_set) if substitute is not None and test_set is not None else None,
            "agreement": agreement(victim, substitute, inputs) if substitute is not None else None,
        }
        logger.info("Metrics [%s]: IS=%.4f FID=%.4f", tag, report[tag]["is"], report[tag]["fid"])
    return report
