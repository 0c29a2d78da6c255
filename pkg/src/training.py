"""
Mini-batch training loops shared by victim fitting and distillation.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.data import LabeledDataset
from src.errors import TrainingError, UsageError
from src.metrics import accuracy
from src.models import Network
from src.tensor_autograd import (
    AdamState,
    SgdState,
    Tensor,
    adam_step,
    backward,
    one_hot,
    sgd_step,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

OptimizerState = Union[AdamState, SgdState]


@dataclass
class TrainingConfig:
    epochs: int = 30
    lr: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.0
    milestones: Tuple[int, ...] = ()
    batch_size: int = 64
    seed: int = 0


@dataclass
class TrainingReport:
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: Optional[float] = None


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def make_optimizer(
    name: str, params: Sequence[Tensor], lr: float, momentum: float = 0.0
) -> Tuple[OptimizerState, Callable[[OptimizerState, Sequence[Tensor]], None]]:
    if name == "adam":
        return AdamState.for_params(params, lr), adam_step
    if name == "sgd":
        return SgdState(lr=lr, momentum=momentum), sgd_step
    raise UsageError(f"unknown optimizer {name!r}")


def distill_epoch(
    net: Network,
    inputs: np.ndarray,
    targets: np.ndarray,
    state: OptimizerState,
    step: Callable[[OptimizerState, Sequence[Tensor]], None],
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """One pass of mean soft-target cross entropy; returns the sample-weighted mean loss."""
    params = net.parameters()
    total = 0.0
    for idx in iterate_minibatches(len(inputs), batch_size, rng):
        loss = softmax_cross_entropy(net.forward(inputs[idx]), targets[idx])
        value = loss.item()
        if not np.isfinite(value):
            logger.error("Non-finite loss %s while training %s", value, net.name or "network")
            raise TrainingError(f"non-finite training loss ({value})")
        backward(loss)
        step(state, params)
        total += value * len(idx)
    return total / max(len(inputs), 1)


def fit_classifier(
    net: Network,
    train: LabeledDataset,
    config: TrainingConfig,
    test: Optional[LabeledDataset] = None,
) -> TrainingReport:
    """
    Hard-label training. With SGD the learning rate drops 10x at every
    milestone epoch. When a test set is given the parameters of the most
    accurate epoch are restored at the end.
    """
    rng = np.random.default_rng(config.seed)
    targets = one_hot(train.labels, train.class_count)
    state, step = make_optimizer(config.optimizer, net.parameters(), config.lr, config.momentum)
    report = TrainingReport()
    best_params: Optional[Dict[str, np.ndarray]] = None

    for epoch in range(1, config.epochs + 1):
        if epoch in config.milestones:
            state.lr /= 10.0
            logger.info("Epoch %d: learning rate decayed to %g", epoch, state.lr)
        loss = distill_epoch(net, train.inputs, targets, state, step, config.batch_size, rng)
        row: Dict[str, float] = {"epoch": epoch, "loss": loss}
        if test is not None:
            acc = accuracy(net, test)
            row["test_accuracy"] = acc
            if report.best_accuracy is None or acc > report.best_accuracy:
                report.best_accuracy = acc
                report.best_epoch = epoch
                best_params = {k: p.data.copy() for k, p in net.params.items()}
        report.history.append(row)
        logger.info("Epoch %d/%d: loss=%.5f%s", epoch, config.epochs, loss,
                    f" test_acc={row['test_accuracy']:.4f}" if test is not None else "")

    if best_params is not None:
        for name, p in net.params.items():
            p.data[...] = best_params[name]
        logger.info("Restored best epoch %d (test accuracy %.4f)", report.best_epoch, report.best_accuracy)
    return report
