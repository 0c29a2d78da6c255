import requests
from requests.adapters import HTTPAdapter, Retry
from src.config import Config

# 4xx frames (bad_shape, budget_exhausted) are answers and are never retried
RETRY_STATUSES = (500, 502, 503, 504)


def get_http_session(retries: int = Config.RETRIES, backoff: float = 0.5) -> requests.Session:
    """Session for the oracle client; the last 5xx response is returned so its error frame can be decoded."""
    session = requests.Session()
    # no read retries: a frame whose answer was lost may already be counted
    retry = Retry(
        total=retries,
        connect=retries,
        read=0,
        status=retries,
        backoff_factor=backoff,
        status_forcelist=RETRY_STATUSES,
        allowed_methods=frozenset({"GET", "POST"}),
        raise_on_status=False,
    )
    adapter = HTTPAdapter(max_retries=retry, pool_maxsize=Config.MAX_WORKERS)
    session.mount("http://", adapter)
    session.mount("https://", adapter)

    session.headers.update(Config.get_api_headers())
    return session
