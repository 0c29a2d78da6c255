import json
import logging
from pathlib import Path
from typing import Any, Union

import numpy as np

logger = logging.getLogger(__name__)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(path: Union[str, Path], payload: Any) -> Path:
    """Insertion-ordered, indented JSON with numpy scalars unwrapped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(payload), indent=2) + "\n")
    logger.info("✅ Report written to %s", path)
    return path
