"""
The prediction-API boundary: a victim behind defenses, a query counter and a budget.

Defenses run top-K first, then rounding. Responses are never renormalized
on the oracle side; the attacker repairs rows with ``to_simplex``.
"""

import json
import logging
import threading
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.config import Config
from src.data import LabeledDataset
from src.detect import PradaDetector
from src.errors import BudgetExhaustedError, DimensionError, DomainError, OracleProtocolError
from src.models import Network, predict_proba

logger = logging.getLogger(__name__)


@dataclass
class DefenseConfig:
    rounding_decimals: Optional[int] = None
    topk: Optional[int] = None
    detection_enabled: bool = False
    detection_threshold: float = 0.9

    def __post_init__(self):
        if self.rounding_decimals is not None and self.rounding_decimals < 0:
            raise DomainError(f"rounding decimals must be >= 0, got {self.rounding_decimals}")
        if self.topk is not None and self.topk < 1:
            raise DomainError(f"top-K must be >= 1, got {self.topk}")
        if not 0.0 < self.detection_threshold < 1.0:
            raise DomainError(f"detection threshold must be in (0, 1), got {self.detection_threshold}")

    def describe(self) -> str:
        parts = []
        if self.topk is not None:
            parts.append(f"top{self.topk}")
        if self.rounding_decimals is not None:
            parts.append(f"round{self.rounding_decimals}")
        if self.detection_enabled:
            parts.append("prada")
        return "+".join(parts) or "none"


# ---------------------------------------------------------------------------
# defenses


def round_prediction(y: np.ndarray, r: int) -> np.ndarray:
    """Entry-wise half-away-from-zero rounding to r decimals."""
    if r < 0:
        raise DomainError(f"rounding decimals must be >= 0, got {r}")
    quantum = Decimal(1).scaleb(-r)
    y = np.asarray(y, dtype=np.float64)
    flat = [float(Decimal(repr(float(v))).quantize(quantum, rounding=ROUND_HALF_UP)) for v in y.ravel()]
    return np.array(flat, dtype=np.float64).reshape(y.shape)


def _topk_mask(y: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-y, axis=-1, kind="stable")
    mask = np.zeros(y.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def topk_prediction(y: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest entries per row, ties to the lower class index."""
    y = np.asarray(y, dtype=np.float64)
    if not 1 <= k <= y.shape[-1]:
        raise DomainError(f"top-K must be in [1, {y.shape[-1]}], got {k}")
    return np.where(_topk_mask(y, k), y, 0.0)


def fillup_topk(y_defended: np.ndarray, k: int) -> np.ndarray:
    """Spread the hidden mass equally over the K - k classes the oracle zeroed."""
    y = np.asarray(y_defended, dtype=np.float64)
    K = y.shape[-1]
    if not 1 <= k <= K:
        raise DomainError(f"top-K must be in [1, {K}], got {k}")
    kept = y.sum(axis=-1, keepdims=True)
    if (kept > 1.0 + 1e-6).any():
        raise DomainError(f"kept probability mass {kept.max():.6f} exceeds 1")
    if k == K:
        return y.copy()
    mask = _topk_mask(y, k)
    share = np.maximum(1.0 - kept, 0.0) / (K - k)
    out = np.where(mask, y, np.broadcast_to(share, y.shape))
    over = kept > 1.0
    if over.any():
        out = np.where(over, out / out.sum(axis=-1, keepdims=True), out)
    return out


def to_simplex(y: np.ndarray) -> np.ndarray:
    """Clamp negatives and renormalize each row; an all-zero row becomes uniform."""
    y = np.maximum(np.asarray(y, dtype=np.float64), 0.0)
    total = y.sum(axis=-1, keepdims=True)
    uniform = np.full_like(y, 1.0 / y.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, y / np.where(total > 0, total, 1.0), uniform)


def apply_defenses(probs: np.ndarray, defense: DefenseConfig) -> np.ndarray:
    out = probs
    if defense.topk is not None:
        out = topk_prediction(out, defense.topk)
    if defense.rounding_decimals is not None:
        out = round_prediction(out, defense.rounding_decimals)
    return out


def cost_for(query_count: int, price_per_1k: float) -> float:
    return query_count / 1000.0 * price_per_1k


# ---------------------------------------------------------------------------
# session


class OracleSession:
    """
    Victim + defense stack + counter. Counting, the budget check and detector
    ingestion happen under one lock, so concurrent callers are serialized.
    """

    def __init__(
        self,
        victim: Network,
        defense: Optional[DefenseConfig] = None,
        budget: Optional[int] = None,
        price_per_1k: float = Config.PRICE_PER_1K,
        detector: Optional[PradaDetector] = None,
        record_queries: bool = False,
    ):
        self.victim = victim.frozen()
        self.defense = defense or DefenseConfig()
        if self.defense.topk is not None and self.defense.topk > victim.class_count:
            raise DomainError(f"top-K {self.defense.topk} exceeds class count {victim.class_count}")
        if budget is not None and budget < 0:
            raise DomainError(f"budget must be >= 0, got {budget}")
        self.budget = budget
        self.price_per_1k = price_per_1k
        if detector is None and self.defense.detection_enabled:
            detector = PradaDetector(threshold=self.defense.detection_threshold)
        self.detector = detector
        self.record_queries = record_queries
        self.query_count = 0
        self.epoch_tag = 0
        self._recorded: List[Tuple[np.ndarray, np.ndarray, int]] = []
        self._lock = threading.Lock()

    @property
    def class_count(self) -> int:
        return self.victim.class_count

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.victim.input_shape)

    def set_epoch(self, tag: int) -> None:
        self.epoch_tag = tag

    def answer(self, x: np.ndarray) -> Tuple[np.ndarray, int]:
        """Defended predictions plus the counter value right after this batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or x.shape[1:] != self.input_shape:
            raise DimensionError(f"query batch {x.shape} does not match input shape {self.input_shape}")
        n = len(x)
        with self._lock:
            if self.budget is not None and self.query_count + n > self.budget:
                logger.warning(
                    "Refusing %d queries: %d of %d already used", n, self.query_count, self.budget
                )
                raise BudgetExhaustedError(n, self.query_count, self.budget)
            y = apply_defenses(predict_proba(self.victim, x), self.defense)
            self.query_count += n
            classes = y.argmax(axis=1)
            if self.detector is not None:
                for row, cls in zip(x, classes):
                    self.detector.ingest(row.ravel(), int(cls))
            if self.record_queries:
                self._recorded.append((x.copy(), classes, self.epoch_tag))
            return y, self.query_count

    def query(self, x: np.ndarray) -> np.ndarray:
        return self.answer(x)[0]

    def estimate_cost(self) -> float:
        return cost_for(self.query_count, self.price_per_1k)

    def recorded_stream(self) -> Optional[LabeledDataset]:
        """Every recorded query in arrival order, labeled with its answered class."""
        with self._lock:
            if not self._recorded:
                return None
            inputs = np.concatenate([x for x, _, _ in self._recorded])
            labels = np.concatenate([c for _, c, _ in self._recorded])
            tags = np.concatenate([np.full(len(c), t) for _, c, t in self._recorded])
        return LabeledDataset(inputs, labels, self.class_count, name="query-stream", tags=tags)

    def stats(self) -> Dict[str, Any]:
        with self._lock:
            stats: Dict[str, Any] = {
                "queries_used": self.query_count,
                "budget": self.budget,
                "estimated_cost": self.estimate_cost(),
                "defense": self.defense.describe(),
            }
            if self.detector is not None:
                stats["detector"] = self.detector.evaluate()
        return stats


def estimate_cost(session: OracleSession) -> float:
    return session.estimate_cost()


# ---------------------------------------------------------------------------
# wire frames: one JSON document per frame, newline terminated, floats at 17
# significant digits so a decoded array is bit-identical to the encoded one


def _dump_array(a: np.ndarray) -> str:
    if a.ndim == 0:
        return format(float(a), ".17g")
    if a.ndim == 1:
        return "[" + ",".join(format(float(v), ".17g") for v in a) + "]"
    return "[" + ",".join(_dump_array(row) for row in a) + "]"


def _checked(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise DomainError("wire frames carry finite numbers only")
    return a


def encode_request(x: np.ndarray) -> bytes:
    return ('{"x":' + _dump_array(_checked(x)) + "}\n").encode("ascii")


def encode_response(y: np.ndarray, queries_used: int) -> bytes:
    return ('{"y":' + _dump_array(_checked(y)) + ',"queries_used":' + str(int(queries_used)) + "}\n").encode("ascii")


def encode_error(code: str) -> bytes:
    return (json.dumps({"error": code}, separators=(",", ":")) + "\n").encode("ascii")


def decode_frame(body: bytes) -> Dict[str, Any]:
    try:
        text = body.decode("utf-8")
        if not text.endswith("\n") or "\n" in text[:-1]:
            raise ValueError("frame must be a single newline-terminated line")
        payload = json.loads(text)
    except (UnicodeDecodeError, ValueError) as e:
        raise OracleProtocolError("bad_request") from e
    if not isinstance(payload, dict):
        raise OracleProtocolError("bad_request")
    return payload


def decode_request(body: bytes) -> np.ndarray:
    payload = decode_frame(body)
    if set(payload) != {"x"} or not isinstance(payload["x"], list):
        raise OracleProtocolError("bad_request")
    try:
        x = np.asarray(payload["x"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise OracleProtocolError("bad_request") from e
    if not np.isfinite(x).all():
        raise OracleProtocolError("bad_request")
    return x


def decode_response(body: bytes, status: Optional[int] = None) -> Tuple[np.ndarray, int]:
    payload = decode_frame(body)
    if "error" in payload:
        raise OracleProtocolError(str(payload["error"]), status)
    try:
        return np.asarray(payload["y"], dtype=np.float64), int(payload["queries_used"])
    except (KeyError, TypeError, ValueError) as e:
        raise OracleProtocolError("bad_response", status) from e
