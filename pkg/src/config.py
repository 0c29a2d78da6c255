import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Logging / output
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "./runs")

    # Oracle service
    ORACLE_HOST = os.getenv("ORACLE_HOST", "127.0.0.1")
    ORACLE_PORT = int(os.getenv("ORACLE_PORT", 5055))

    # Oracle API Endpoints
    QUERY_ENDPOINT = 'query'
    STATS_ENDPOINT = 'stats'
    HEALTH_ENDPOINT = 'health'

    # Request settings
    TIMEOUT = int(os.getenv("REQUEST_TIMEOUT", 30))
    RETRIES = int(os.getenv("REQUEST_RETRIES", 3))

    # Pricing, in currency units per 1000 answered queries
    PRICE_PER_1K = float(os.getenv("PRICE_PER_1K", 0.25))

    # Workers
    MAX_WORKERS = int(os.getenv("MAX_WORKERS", 4))
    SYNTHESIS_CHUNK_SIZE = int(os.getenv("SYNTHESIS_CHUNK_SIZE", 64))

    # File formats
    CHECKPOINT_MAGIC = b"ESL1"
    DATASET_MAGIC = b"ESD1"

    # Adam defaults
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPSILON = 1e-8

    @classmethod
    def get_api_headers(cls) -> dict:
        """Get standard API headers."""
        return {
            'Accept': 'application/json'
        }
