"""
The stealing loop and the two baseline attacks.

Each stealing epoch labels the current synthetic set through the oracle,
distills the substitute on it (E-step) and synthesizes the next set
against the updated substitute (S-step). Augmented copies inherit the
label of the sample they came from, so a run of N epochs costs exactly
N * S queries.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.data import LabeledDataset, SoftDataset
from src.errors import BudgetExhaustedError, DimensionError, DomainError, UsageError
from src.metrics import accuracy
from src.models import LayerSpec, Network, build_network, zoo_layers
from src.oracle import fillup_topk, to_simplex
from src.synthesis import (
    DnnSynState,
    SynthesisConfig,
    augment,
    dnn_syn_epoch,
    opt_syn_epoch,
    random_epoch,
)
from src.tensor_autograd import AdamState, adam_step, cross_entropy_rows, no_grad
from src.training import distill_epoch

logger = logging.getLogger(__name__)

SubstituteSpec = Union[str, Sequence[LayerSpec]]

# independent seed streams derived from one run seed
_INIT, _QUERY, _ESTEP, _SSTEP, _AUG = range(5)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class StealConfig:
    N: int = 50
    M: int = 10
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    kd_lr: float = 0.001
    seed: int = 0
    batch_size: int = 64
    augment: bool = True
    augment_copies: int = 1
    replay_all: bool = False
    fillup_topk: Optional[int] = None

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise DomainError(f"stealing needs N >= 1 and M >= 1, got N={self.N} M={self.M}")
        if self.kd_lr <= 0 or self.batch_size < 1 or self.augment_copies < 0:
            raise DomainError("invalid distillation settings")


@dataclass
class EpochRecord:
    epoch: int
    kd_loss: float
    accuracy: Optional[float]
    query_count: int
    seconds: float


@dataclass
class StealTrace:
    attack: str
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_accuracy: Optional[float] = None
    best_network: Optional[Network] = None
    error: Optional[str] = None
    initial_inputs: Optional[np.ndarray] = None
    final_inputs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.records[-1].accuracy if self.records else None

    def record(self, entry: EpochRecord, network: Network) -> None:
        self.records.append(entry)
        if entry.accuracy is not None and (self.best_accuracy is None or entry.accuracy > self.best_accuracy):
            self.best_accuracy = entry.accuracy
            self.best_epoch = entry.epoch
            self.best_network = network.copy()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(r) for r in self.records],
                             columns=["epoch", "kd_loss", "accuracy", "query_count", "seconds"])
        return frame.rename(columns={"query_count": "queries"})

    def summary(self) -> Dict[str, Any]:
        return {
            "attack": self.attack,
            "epochs": len(self.records),
            "final_kd_loss": self.records[-1].kd_loss if self.records else None,
            "final_accuracy": self.final_accuracy,
            "best_epoch": self.best_epoch,
            "best_accuracy": self.best_accuracy,
            "queries": self.records[-1].query_count if self.records else 0,
            "error": self.error,
        }

    def save(self, output_dir: Union[str, Path], prefix: str = "trace") -> Tuple[Path, Path]:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        csv_path = output_dir / f"{prefix}.csv"
        json_path = output_dir / f"{prefix}_summary.json"
        self.to_frame().to_csv(csv_path, index=False)
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        logger.info("Trace written to %s and %s", csv_path, json_path)
        return csv_path, json_path


# ---------------------------------------------------------------------------
# steps


def kd_loss(f_s: Network, inputs: np.ndarray, targets: np.ndarray) -> float:
    with no_grad():
        logits = f_s.forward(inputs).data
    return float(cross_entropy_rows(logits, targets).mean())


def label_with_oracle(oracle, inputs: np.ndarray, fillup_k: Optional[int] = None) -> np.ndarray:
    """
    Query, undo a known top-K by fill-up, then repair rows onto the simplex.
    Rows whose kept mass already exceeds 1 (top-K followed by rounding up)
    have nothing to fill and are only renormalized.
    """
    y = oracle.query(inputs)
    if fillup_k is not None:
        over = y.sum(axis=-1) > 1.0 + 1e-6
        if over.any():
            logger.debug("%d of %d answers carry more than unit mass; renormalizing instead of fill-up",
                         int(over.sum()), len(y))
        if not over.all():
            y = y.copy()
            y[~over] = fillup_topk(y[~over], fillup_k)
    return to_simplex(y)


def e_step(
    f_s: Network,
    d_syn: SoftDataset,
    M: int,
    lr: float,
    adam: Optional[AdamState] = None,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """M epochs of Adam on mean CE against the oracle's soft labels; returns the final KD loss."""
    if d_syn.soft_labels is None:
        raise UsageError("E-step needs a labeled synthetic set")
    if M < 0:
        raise DomainError(f"M must be >= 0, got {M}")
    adam = adam or AdamState.for_params(f_s.parameters(), lr)
    rng = np.random.default_rng(seed)
    for _ in range(M):
        distill_epoch(f_s, d_syn.inputs, d_syn.soft_labels, adam, adam_step, batch_size, rng)
    return kd_loss(f_s, d_syn.inputs, d_syn.soft_labels)


def s_step(
    f_s: Network,
    config: SynthesisConfig,
    seed: int,
    epoch_tag: int = 0,
    dnn_state: Optional[DnnSynState] = None,
) -> SoftDataset:
    if config.mode == "opt_syn":
        return opt_syn_epoch(
            f_s,
            config.samples_per_epoch,
            config.opt_iterations,
            config.synth_lr,
            seed,
            epoch_tag=epoch_tag,
            chunk_size=config.chunk_size,
            max_workers=config.max_workers,
        )
    if config.mode == "dnn_syn":
        if dnn_state is None:
            raise UsageError("DNN-SYN needs a generator state")
        return dnn_syn_epoch(f_s, dnn_state, config, seed, epoch_tag)
    return random_epoch(f_s.input_shape, config.samples_per_epoch, seed, epoch_tag)


def _substitute(oracle, spec: SubstituteSpec, seed: int, initial: Optional[Network]) -> Network:
    if initial is not None:
        f_s = initial
    else:
        layers = zoo_layers(spec, oracle.input_shape, oracle.class_count) if isinstance(spec, str) else spec
        f_s = build_network(layers, seed, oracle.input_shape, name=spec if isinstance(spec, str) else "substitute")
    if f_s.class_count != oracle.class_count or tuple(f_s.input_shape) != tuple(oracle.input_shape):
        raise DimensionError(
            f"substitute {f_s.input_shape}->{f_s.class_count} does not fit oracle "
            f"{oracle.input_shape}->{oracle.class_count}"
        )
    return f_s


def _training_set(
    labeled: SoftDataset, use_augment: bool, copies: int, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    inputs, targets = [labeled.inputs], [labeled.soft_labels]
    if use_augment:
        for index in range(copies):
            inputs.append(augment(labeled.inputs, derive_seed(seed, index)))
            targets.append(labeled.soft_labels)
    return np.concatenate(inputs), np.concatenate(targets)


def _evaluate(f_s: Network, test_set: Optional[LabeledDataset]) -> Optional[float]:
    return accuracy(f_s, test_set) if test_set is not None else None


# ---------------------------------------------------------------------------
# attacks


def run_es_attack(
    oracle,
    substitute_spec: SubstituteSpec,
    config: StealConfig,
    test_set: Optional[LabeledDataset] = None,
    initial_substitute: Optional[Network] = None,
) -> Tuple[Network, StealTrace]:
    """
    Algorithm loop: D0 ~ N(0, 1) of size S; for t = 1..N label D(t-1),
    E-step, S-step. Budget exhaustion stops the loop and returns the partial
    trace with ``error == "budget_exhausted"``.
    """
    synth = config.synthesis
    f_s = _substitute(oracle, substitute_spec, derive_seed(config.seed, _INIT), initial_substitute)
    adam = AdamState.for_params(f_s.parameters(), config.kd_lr)
    dnn_state = None
    if synth.mode == "dnn_syn":
        dnn_state = DnnSynState.create(synth, oracle.class_count, oracle.input_shape, derive_seed(config.seed, _SSTEP))

    d_syn = random_epoch(oracle.input_shape, synth.samples_per_epoch, derive_seed(config.seed, _QUERY), epoch_tag=0)
    trace = StealTrace(attack=synth.mode, initial_inputs=d_syn.inputs.copy())
    seen_inputs: List[np.ndarray] = []
    seen_targets: List[np.ndarray] = []
    query_count = 0
    logger.info("ES attack: mode=%s N=%d M=%d S=%d", synth.mode, config.N, config.M, synth.samples_per_epoch)

    for t in range(1, config.N + 1):
        started = time.perf_counter()
        oracle.set_epoch(t)
        try:
            labeled = d_syn.with_labels(label_with_oracle(oracle, d_syn.inputs, config.fillup_topk))
        except BudgetExhaustedError as e:
            logger.warning("Stopping at epoch %d: %s", t, e)
            trace.error = "budget_exhausted"
            break
        query_count += len(labeled)

        inputs, targets = _training_set(labeled, config.augment, config.augment_copies, derive_seed(config.seed, _AUG, t))
        if config.replay_all:
            seen_inputs.append(inputs)
            seen_targets.append(targets)
            inputs, targets = np.concatenate(seen_inputs), np.concatenate(seen_targets)
        loss = e_step(
            f_s,
            SoftDataset(inputs, targets, epoch_tag=t),
            config.M,
            config.kd_lr,
            adam,
            config.batch_size,
            derive_seed(config.seed, _ESTEP, t),
        )

        if synth.mode == "dnn_syn" and synth.reinit_generator:
            dnn_state = DnnSynState.create(synth, oracle.class_count, oracle.input_shape,
                                           derive_seed(config.seed, _SSTEP, t))
        d_syn = s_step(f_s, synth, derive_seed(config.seed, _SSTEP, t), epoch_tag=t, dnn_state=dnn_state)

        entry = EpochRecord(t, loss, _evaluate(f_s, test_set), query_count, time.perf_counter() - started)
        trace.record(entry, f_s)
        logger.info("Epoch %d/%d: kd_loss=%.5f acc=%s queries=%d", t, config.N, loss,
                    "n/a" if entry.accuracy is None else f"{entry.accuracy:.4f}", query_count)

    trace.final_inputs = d_syn.inputs.copy()
    if trace.best_epoch is not None:
        logger.info("Best epoch %d (accuracy %.4f), last %s", trace.best_epoch, trace.best_accuracy,
                    trace.final_accuracy)
    return f_s, trace


def baseline_steal(
    oracle,
    substitute_spec: SubstituteSpec,
    source: str,
    epochs: int,
    lr: float,
    auxiliary: Optional[LabeledDataset] = None,
    n_queries: int = 256,
    seed: int = 0,
    batch_size: int = 64,
    use_augment: bool = False,
    record_every: Optional[int] = None,
    test_set: Optional[LabeledDataset] = None,
) -> Tuple[Network, StealTrace]:
    """
    Label one fixed query set once (N(0, 1) noise or an auxiliary dataset),
    then distill for ``epochs`` epochs, recording every ``record_every``.
    With record_every == epochs this matches a one-epoch ES run with the
    random S-step and the same seed.
    """
    if source not in ("random", "auxiliary"):
        raise DomainError(f"unknown baseline source {source!r}")
    if epochs < 0:
        raise DomainError(f"epochs must be >= 0, got {epochs}")
    f_s = _substitute(oracle, substitute_spec, derive_seed(seed, _INIT), None)
    adam = AdamState.for_params(f_s.parameters(), lr)

    if source == "auxiliary":
        if auxiliary is None:
            raise UsageError("auxiliary baseline needs an auxiliary dataset")
        query_set = SoftDataset(auxiliary.inputs, name="auxiliary")
    else:
        query_set = random_epoch(oracle.input_shape, n_queries, derive_seed(seed, _QUERY))
    trace = StealTrace(attack=source, initial_inputs=query_set.inputs.copy(), final_inputs=query_set.inputs.copy())

    oracle.set_epoch(1)
    try:
        labeled = query_set.with_labels(label_with_oracle(oracle, query_set.inputs))
    except BudgetExhaustedError as e:
        logger.warning("Baseline could not label its query set: %s", e)
        trace.error = "budget_exhausted"
        return f_s, trace
    queries = len(labeled)

    step = record_every or max(epochs, 1)
    done, t = 0, 0
    if epochs == 0:
        trace.record(EpochRecord(0, kd_loss(f_s, labeled.inputs, labeled.soft_labels),
                                 _evaluate(f_s, test_set), queries, 0.0), f_s)
    while done < epochs:
        t += 1
        started = time.perf_counter()
        rounds = min(step, epochs - done)
        inputs, targets = _training_set(labeled, use_augment, 1, derive_seed(seed, _AUG, t))
        loss = e_step(f_s, SoftDataset(inputs, targets), rounds, lr, adam, batch_size,
                      derive_seed(seed, _ESTEP, t))
        done += rounds
        trace.record(EpochRecord(t, loss, _evaluate(f_s, test_set), queries, time.perf_counter() - started), f_s)
    logger.info("Baseline %s: %d epochs on %d queries, final accuracy %s", source, epochs, queries,
                trace.final_accuracy)
    return f_s, trace
