import os
import logging
from dotenv import load_dotenv

# --- SETUP ---
load_dotenv()

# --- CONFIG ---
CACHE_DIR = os.getenv("HARPER_CACHE_DIR", ".harper_cache")
OUTPUT_DIR = os.getenv("HARPER_OUTPUT_DIR", "results")
LOG_DIR = os.getenv("HARPER_LOG_DIR", "logs")
LOG_FILE = os.path.join(LOG_DIR, "build.log")
WORKERS_DEFAULT = int(os.getenv("HARPER_WORKERS", 1))
RENORM_EVERY = int(os.getenv("HARPER_RENORM_EVERY", 32))
BISECTION_TOL = float(os.getenv("HARPER_BISECTION_TOL", 1e-10))
REGION_TOL = 1e-12
SCHEMA_VERSION = "v1"


class HarperError(ValueError):
    """Base class for every error raised by the toolkit."""


class ConfigError(HarperError):
    """Invalid input or violated precondition (CLI exit code 2)."""


class NumericGuardError(HarperError):
    """A numerical guard tripped (CLI exit code 3)."""


# --- LOGGING SETUP ---
def setup_logging(level: int = logging.INFO) -> None:
    os.makedirs(LOG_DIR, exist_ok=True)
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=[logging.FileHandler(LOG_FILE, mode="a"), logging.StreamHandler()]
    )


def cache_dir() -> str:
    # read at call time
    return os.getenv("HARPER_CACHE_DIR", CACHE_DIR)
