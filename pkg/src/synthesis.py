"""
S-step data synthesis.

OPT-SYN optimizes each input directly so the frozen substitute predicts a
freshly sampled Dirichlet target. DNN-SYN trains a conditional generator so
the substitute classifies its samples as their assigned labels, with a
mode-seeking term that keeps different latents apart in image space.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from src.config import Config
from src.data import SoftDataset
from src.errors import DomainError, SynthesisError, TrainingError
from src.models import GeneratorNetwork, Network, build_generator, generate
from src.tensor_autograd import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    clamp_min,
    cross_entropy_rows,
    div,
    no_grad,
    one_hot,
    reduce_sum,
    reshape,
    softmax_cross_entropy,
    sqrt,
    sub,
)

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.Generator]

ALPHA_FLOOR = 1e-3
DENOMINATOR_FLOOR = 1e-8
MAX_SYNTHESIS_RETRIES = 3
SYNTHESIS_MODES = ("opt_syn", "dnn_syn", "random")


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class DirichletSpec:
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or self.alpha.size == 0 or not (self.alpha > 0).all():
            raise DomainError("Dirichlet concentrations must be a non-empty positive vector")

    @property
    def K(self) -> int:
        return self.alpha.size


@dataclass
class SynthesisConfig:
    samples_per_epoch: int = 256
    opt_iterations: int = 30
    synth_lr: float = 0.01
    lambda_ms: float = 1.0
    mode: str = "opt_syn"
    generator_steps: int = 1
    generator_lr: float = 0.001
    generator_batch: int = 64
    latent_dim: int = 16
    generator_hidden: int = 128
    reinit_generator: bool = False
    chunk_size: int = Config.SYNTHESIS_CHUNK_SIZE
    max_workers: int = Config.MAX_WORKERS

    def __post_init__(self):
        if self.mode not in SYNTHESIS_MODES:
            raise DomainError(f"unknown synthesis mode {self.mode!r}; choose from {SYNTHESIS_MODES}")
        if self.samples_per_epoch <= 0 or self.opt_iterations < 0 or self.synth_lr <= 0:
            raise DomainError("synthesis needs S > 0, m >= 0 and a positive learning rate")
        if self.lambda_ms < 0:
            raise DomainError(f"lambda_ms must be >= 0, got {self.lambda_ms}")
        if self.chunk_size <= 0 or self.max_workers <= 0:
            raise DomainError("chunk_size and max_workers must be positive")


# ---------------------------------------------------------------------------
# Dirichlet targets


def sample_dirichlet(spec: DirichletSpec, seed: Seed) -> np.ndarray:
    """
    Normalized Gamma(alpha_i, 1) variates, drawn in log space as
    Gamma(alpha + 1) * U^(1/alpha) so tiny concentrations do not underflow
    before normalization. Entries are floored at the smallest normal float.
    """
    rng = _rng(seed)
    if spec.K == 1:
        return np.ones(1)
    log_gamma = np.log(rng.standard_gamma(spec.alpha + 1.0)) + np.log(rng.random(spec.K)) / spec.alpha
    shifted = np.exp(log_gamma - log_gamma.max())
    y = np.maximum(shifted / shifted.sum(), np.finfo(np.float64).tiny)
    return y / y.sum()


def draw_alpha(K: int, seed: Seed) -> np.ndarray:
    """|N(0,1)| floored at 1e-3: Dirichlet concentrations must be positive."""
    return np.maximum(np.abs(_rng(seed).standard_normal(K)), ALPHA_FLOOR)


# ---------------------------------------------------------------------------
# OPT-SYN


def _optimize_inputs(
    f_s: Network, targets: np.ndarray, x0: np.ndarray, m: int, lr: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Adam on a batch of inputs against sum-reduced cross entropy. Each row's
    gradient depends on that row only and Adam is element-wise, so this is
    the same as optimizing every sample on its own. Returns the best iterate
    per row with its loss, plus the initial losses.
    """
    x = Tensor(x0.copy(), requires_grad=True)
    state = AdamState.for_params([x], lr)
    best = x0.copy()
    best_loss = np.full(len(x0), np.inf)
    initial_loss = None
    for iteration in range(m + 1):
        logits = f_s.forward(x)
        rows = cross_entropy_rows(logits.data, targets)
        if not np.isfinite(rows).all():
            raise SynthesisError(f"non-finite synthesis loss at iteration {iteration}")
        if initial_loss is None:
            initial_loss = rows.copy()
        improved = rows < best_loss
        best[improved] = x.data[improved]
        best_loss[improved] = rows[improved]
        if iteration == m:
            break
        backward(softmax_cross_entropy(logits, targets, reduction="sum"))
        adam_step(state, [x])
    return best, best_loss, initial_loss


def opt_syn_sample(f_s: Network, y: np.ndarray, m: int, lr: float, seed: int) -> np.ndarray:
    """One input whose substitute prediction approaches ``y``; N(0,1) start."""
    frozen = f_s.frozen()
    targets = np.asarray(y, dtype=np.float64).reshape(1, -1)
    for attempt in range(MAX_SYNTHESIS_RETRIES + 1):
        rng = np.random.default_rng([seed, attempt])
        x0 = rng.standard_normal((1,) + tuple(f_s.input_shape))
        try:
            best, _, _ = _optimize_inputs(frozen, targets, x0, m, lr)
            return best[0]
        except SynthesisError as e:
            logger.warning("Synthesis attempt %d failed (%s); restarting with a new start point", attempt + 1, e)
    raise SynthesisError(f"synthesis failed after {MAX_SYNTHESIS_RETRIES + 1} attempts")


def _sample_rng(child: np.random.SeedSequence, attempt: int) -> np.random.Generator:
    if attempt == 0:
        return np.random.default_rng(child)
    return np.random.default_rng(
        np.random.SeedSequence(child.entropy, spawn_key=child.spawn_key + (attempt,))
    )


def _opt_syn_chunk(
    f_s: Network,
    children: List[np.random.SeedSequence],
    m: int,
    lr: float,
) -> np.ndarray:
    K = f_s.class_count
    shape = tuple(f_s.input_shape)
    for attempt in range(MAX_SYNTHESIS_RETRIES + 1):
        targets = np.empty((len(children), K))
        x0 = np.empty((len(children),) + shape)
        for i, child in enumerate(children):
            rng = _sample_rng(child, attempt)
            targets[i] = sample_dirichlet(DirichletSpec(draw_alpha(K, rng)), rng)
            x0[i] = rng.standard_normal(shape)
        try:
            best, _, _ = _optimize_inputs(f_s, targets, x0, m, lr)
            return best
        except SynthesisError as e:
            logger.warning("Synthesis chunk attempt %d failed (%s); redrawing", attempt + 1, e)
    raise SynthesisError(f"synthesis chunk failed after {MAX_SYNTHESIS_RETRIES + 1} attempts")


def opt_syn_epoch(
    f_s: Network,
    S: int,
    m: int,
    lr: float,
    seed: int,
    epoch_tag: int = 0,
    chunk_size: int = Config.SYNTHESIS_CHUNK_SIZE,
    max_workers: int = Config.MAX_WORKERS,
) -> SoftDataset:
    """
    S samples, each with its own alpha, target and start point drawn from a
    per-sample SeedSequence child. Chunks run on a thread pool against a
    frozen view of ``f_s`` and are reassembled in index order.
    """
    if S <= 0:
        raise DomainError(f"S must be positive, got {S}")
    frozen = f_s.frozen()
    children = np.random.SeedSequence(seed).spawn(S)
    chunks = [(start, children[start:start + chunk_size]) for start in range(0, S, chunk_size)]
    out = np.empty((S,) + tuple(f_s.input_shape))

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_start = {
            executor.submit(_opt_syn_chunk, frozen, chunk, m, lr): start
            for start, chunk in chunks
        }
        for future in as_completed(future_to_start):
            start = future_to_start[future]
            try:
                result = future.result()
            except SynthesisError:
                logger.error("OPT-SYN chunk starting at sample %d failed", start)
                raise
            out[start:start + len(result)] = result

    logger.info("OPT-SYN epoch %d: %d samples (m=%d, lr=%g)", epoch_tag, S, m, lr)
    return SoftDataset(out, epoch_tag=epoch_tag, name="opt_syn")


def random_epoch(input_shape: Tuple[int, ...], S: int, seed: int, epoch_tag: int = 0) -> SoftDataset:
    rng = np.random.default_rng(seed)
    return SoftDataset(rng.standard_normal((S,) + tuple(input_shape)), epoch_tag=epoch_tag, name="random")


# ---------------------------------------------------------------------------
# DNN-SYN


@dataclass
class DnnSynState:
    """Generator and its optimizer, carried across stealing epochs."""

    generator: GeneratorNetwork
    adam: AdamState
    history: List[float] = field(default_factory=list)

    @classmethod
    def create(cls, config: SynthesisConfig, class_count: int, input_shape: Tuple[int, ...], seed: int) -> "DnnSynState":
        g = build_generator(config.latent_dim, class_count, input_shape, config.generator_hidden, seed)
        return cls(generator=g, adam=AdamState.for_params(g.parameters(), config.generator_lr))


def mode_seeking_loss(g: GeneratorNetwork, z1: np.ndarray, z2: np.ndarray, labels: np.ndarray) -> Tensor:
    """Sum over the batch of ||z1 - z2|| / ||G(z1, l) - G(z2, l)||, denominator floored at 1e-8."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n = len(labels)
    numerator = np.sqrt(((z1 - z2) ** 2).sum(axis=1))
    diff = reshape(sub(generate(g, z1, labels), generate(g, z2, labels)), (n, -1))
    squared = reduce_sum(diff * diff, axis=1)
    if (squared.data < DENOMINATOR_FLOOR ** 2).any():
        logger.warning("Mode-seeking denominator clamped for %d of %d pairs (generator collapse)",
                       int((squared.data < DENOMINATOR_FLOOR ** 2).sum()), n)
    denominator = sqrt(clamp_min(squared, DENOMINATOR_FLOOR ** 2))
    return reduce_sum(div(Tensor(numerator), denominator))


def dnn_syn_loss(
    g: GeneratorNetwork,
    f_s: Network,
    z: np.ndarray,
    labels: np.ndarray,
    lambda_ms: float,
    z2: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean CE of f_s(G(z, l)) against l, plus lambda times the batch-mean mode-seeking term."""
    loss = softmax_cross_entropy(f_s.forward(generate(g, z, labels)), labels)
    if lambda_ms > 0:
        if z2 is None:
            raise DomainError("mode-seeking term needs a second latent batch")
        loss = loss + lambda_ms * mode_seeking_loss(g, z, z2, labels) * (1.0 / len(labels))
    return loss


def dnn_syn_step(
    g: GeneratorNetwork,
    f_s: Network,
    z: np.ndarray,
    labels: np.ndarray,
    lambda_ms: float,
    adam: AdamState,
    z2: Optional[np.ndarray] = None,
) -> float:
    """One Adam step on the generator only; returns the pre-step loss."""
    loss = dnn_syn_loss(g, f_s.frozen(), z, labels, lambda_ms, z2)
    value = loss.item()
    if not np.isfinite(value):
        logger.error("Non-finite DNN-SYN loss %s", value)
        raise TrainingError(f"non-finite generator loss ({value})")
    backward(loss)
    adam_step(adam, g.parameters())
    return value


def _latent_batch(rng: np.random.Generator, n: int, latent_dim: int, class_count: int):
    labels = one_hot(rng.integers(0, class_count, size=n), class_count)
    return rng.standard_normal((n, latent_dim)), rng.standard_normal((n, latent_dim)), labels


def dnn_syn_epoch(
    f_s: Network,
    state: DnnSynState,
    config: SynthesisConfig,
    seed: int,
    epoch_tag: int = 0,
) -> SoftDataset:
    """Train G for ``generator_steps`` batches, then draw S samples with uniform labels."""
    rng = np.random.default_rng(seed)
    g = state.generator
    frozen = f_s.frozen()
    for _ in range(config.generator_steps):
        z, z2, labels = _latent_batch(rng, config.generator_batch, g.latent_dim, g.class_count)
        state.history.append(dnn_syn_step(g, frozen, z, labels, config.lambda_ms, state.adam, z2))
    z, _, labels = _latent_batch(rng, config.samples_per_epoch, g.latent_dim, g.class_count)
    with no_grad():
        samples = generate(g, z, labels).data.copy()
    if state.history:
        logger.info("DNN-SYN epoch %d: generator loss %.5f", epoch_tag, state.history[-1])
    return SoftDataset(samples, epoch_tag=epoch_tag, name="dnn_syn")


# ---------------------------------------------------------------------------
# augmentation


def augment(
    x: np.ndarray,
    seed: Seed,
    flip_prob: float = 0.5,
    max_shift: int = 2,
    noise_std: float = 0.05,
) -> np.ndarray:
    """
    Image batches [n, c, h, w]: per-sample horizontal flip, column shift in
    [-max_shift, max_shift] with zero fill, then Gaussian noise.
    Any other batch gets the noise only.
    """
    rng = _rng(seed)
    out = np.array(x, dtype=np.float64, copy=True)
    if out.ndim == 4:
        n, width = out.shape[0], out.shape[-1]
        flips = rng.random(n) < flip_prob
        out[flips] = out[flips][..., ::-1]
        shifts = rng.integers(-max_shift, max_shift + 1, size=n) if max_shift > 0 else np.zeros(n, dtype=int)
        for i, s in enumerate(shifts):
            if s == 0:
                continue
            shifted = np.zeros_like(out[i])
            if s > 0:
                shifted[..., s:] = out[i][..., :width - s]
            else:
                shifted[..., :width + s] = out[i][..., -s:]
            out[i] = shifted
    if noise_std > 0:
        out += rng.normal(0.0, noise_std, size=out.shape)
    return out
