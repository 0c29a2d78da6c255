"""
L-infinity PGD against a network we hold, and transfer of the resulting
examples to the victim through its oracle.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

import numpy as np

from src.data import LabeledDataset
from src.errors import DimensionError, DomainError
from src.models import Network, predict_classes
from src.tensor_autograd import Tensor, backward, one_hot, softmax_cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class PgdConfig:
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int = 40
    clip_min: float = -1.0
    clip_max: float = 1.0
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.iterations < 0 or self.step_size < 0:
            raise DomainError("PGD needs epsilon >= 0, iterations >= 0 and step_size >= 0")
        if not self.clip_min < self.clip_max:
            raise DomainError(f"empty input box [{self.clip_min}, {self.clip_max}]")


PGD_PRESETS = {
    "mnist-like": PgdConfig(epsilon=0.3, step_size=0.01, iterations=40),
    "cifar-like": PgdConfig(epsilon=8 / 255, step_size=2 / 255, iterations=20),
}


def pgd_attack(model: Network, x: np.ndarray, true_labels: np.ndarray, cfg: PgdConfig) -> np.ndarray:
    """Untargeted: step along sign(grad CE) then project onto the eps-ball and the box."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if labels.shape != (len(x),):
        raise DimensionError(f"{len(x)} inputs but labels of shape {labels.shape}")
    if (x < cfg.clip_min).any() or (x > cfg.clip_max).any():
        raise DomainError(f"inputs must lie in [{cfg.clip_min}, {cfg.clip_max}]")

    lower = np.maximum(x - cfg.epsilon, cfg.clip_min)
    upper = np.minimum(x + cfg.epsilon, cfg.clip_max)
    adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.seed)
        adv = np.clip(adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), lower, upper)

    frozen = model.frozen()
    targets = one_hot(labels, model.class_count)
    for _ in range(cfg.iterations):
        xt = Tensor(adv, requires_grad=True)
        backward(softmax_cross_entropy(frozen.forward(xt), targets, reduction="sum"))
        adv = np.clip(adv + cfg.step_size * np.sign(xt.grad), lower, upper)
    return adv


def _predict(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, Network):
        return predict_classes(model, x)
    if hasattr(model, "query"):
        return np.asarray(model.query(x)).argmax(axis=1)
    return np.asarray(model(x)).argmax(axis=1)


def attack_success_rate(
    model,
    adv_x: np.ndarray,
    true_labels: np.ndarray,
    clean_x: Optional[np.ndarray] = None,
) -> float:
    """
    Fraction of adversarial inputs not classified as their true label. With
    ``clean_x`` only samples the model got right before the attack count.
    ``model`` is a Network, anything with ``query`` (an oracle) or a callable
    returning scores.
    """
    labels = np.asarray(true_labels, dtype=np.int64)
    base = np.ones(len(labels), dtype=bool)
    if clean_x is not None:
        base = _predict(model, clean_x) == labels
    if not base.any():
        return 0.0
    fooled = _predict(model, adv_x) != labels
    return float(fooled[base].mean())


def transfer_eval(
    substitute: Network,
    victim_oracle,
    test_set: LabeledDataset,
    cfg: PgdConfig,
    victim: Optional[Network] = None,
) -> Dict[str, Any]:
    """
    Examples crafted on the substitute, scored on the substitute (white-box)
    and on the victim through its oracle (black-box). With the victim's own
    network at hand, a white-box attack on it fills the third column.
    """
    x, labels = test_set.inputs, test_set.labels
    adv = pgd_attack(substitute, x, labels, cfg)
    report: Dict[str, Any] = {
        "white_victim": None,
        "white_sub": attack_success_rate(substitute, adv, labels, clean_x=x),
        "black_victim": attack_success_rate(victim_oracle, adv, labels, clean_x=x),
    }
    if victim is not None:
        report["white_victim"] = attack_success_rate(victim, pgd_attack(victim, x, labels, cfg), labels, clean_x=x)
        if report["black_victim"] > report["white_victim"]:
            logger.info("Black-box transfer (%.4f) beats white-box on the victim (%.4f)",
                        report["black_victim"], report["white_victim"])
    report["samples"] = len(x)
    report["pgd"] = asdict(cfg)
    logger.info("PGD eps=%g: white_sub=%.4f black_victim=%.4f", cfg.epsilon,
                report["white_sub"], report["black_victim"])
    return report
