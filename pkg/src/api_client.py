import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np
import requests

from src.config import Config
from src.errors import BudgetExhaustedError, OracleProtocolError
from src.oracle import decode_response, encode_request
from src.utils.http_client import get_http_session

logger = logging.getLogger(__name__)


class OracleAPIClient:
    def __init__(self, base_url: Optional[str] = None):
        self.session = get_http_session()
        self.base_url = (base_url or f"http://{Config.ORACLE_HOST}:{Config.ORACLE_PORT}").rstrip("/")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.session.close()

    def get(self, endpoint: str) -> Dict[str, Any]:
        url = f"{self.base_url}/{endpoint}"
        try:
            response = self.session.get(url, timeout=Config.TIMEOUT)
            response.raise_for_status()
            return response.json()
        except requests.RequestException as e:
            logger.error("API request failed: %s", e)
            raise

    def health(self) -> Dict[str, Any]:
        return self.get(Config.HEALTH_ENDPOINT)

    def stats(self) -> Dict[str, Any]:
        return self.get(Config.STATS_ENDPOINT)

    def query(self, x: np.ndarray) -> Tuple[np.ndarray, int]:
        """POST one frame; error frames raise OracleProtocolError with their code."""
        url = f"{self.base_url}/{Config.QUERY_ENDPOINT}"
        try:
            response = self.session.post(
                url,
                data=encode_request(x),
                headers={"Content-Type": "application/json"},
                timeout=Config.TIMEOUT,
            )
        except requests.RequestException as e:
            logger.error("Oracle request to %s failed: %s", url, e)
            raise
        try:
            return decode_response(response.content, response.status_code)
        except OracleProtocolError as e:
            logger.warning("Oracle answered %s (HTTP %d)", e.code, response.status_code)
            raise


class RemoteOracle:
    """Attacker-side view of a served oracle with the same query surface as OracleSession."""

    def __init__(self, client: OracleAPIClient):
        self.client = client
        health = client.health()
        self._input_shape = tuple(health["input_shape"])
        self._class_count = int(health["class_count"])
        self.query_count = 0

    @property
    def class_count(self) -> int:
        return self._class_count

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self._input_shape

    def set_epoch(self, tag: int) -> None:
        pass

    def query(self, x: np.ndarray) -> np.ndarray:
        try:
            y, self.query_count = self.client.query(x)
        except OracleProtocolError as e:
            if e.code != "budget_exhausted":
                raise
            stats = self.client.stats()
            raise BudgetExhaustedError(len(x), stats["queries_used"], stats["budget"]) from e
        return y


def remote_query(endpoint: str, x: np.ndarray) -> np.ndarray:
    with OracleAPIClient(endpoint) as client:
        return client.query(x)[0]
