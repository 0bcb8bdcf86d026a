import os
import csv
import hashlib
import logging
from datetime import datetime, timezone
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import orjson

from app.models import RunConfig
from harper.config import BISECTION_TOL, SCHEMA_VERSION, cache_dir
from harper.spectrum import SpectrumCloud, build_cloud

logger = logging.getLogger(__name__)

# --- CONFIG ---
JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
CLOUD_CSV = "cloud.csv"
CLOUD_META = "cloud.json"


# --- JSON DOCUMENTS ---
def content_hash(body: dict) -> str:
    """SHA-256 over the sorted-key orjson encoding."""
    return hashlib.sha256(orjson.dumps(body, option=JSON_OPTIONS)).hexdigest()


def make_envelope(kind: str, config: RunConfig, result: dict) -> dict:
    body = {"schema": SCHEMA_VERSION, "kind": kind, "config": config.identity(), "result": result}
    # "created" stays outside the hashed body
    return dict(body, content_hash=content_hash(body), created=datetime.now(timezone.utc).isoformat())


def write_json(path: str, doc: dict) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(orjson.dumps(doc, option=JSON_OPTIONS | orjson.OPT_INDENT_2))
    logger.info(f"Wrote {path}")
    return path


def read_json(path: str) -> dict:
    with open(path, "rb") as f:
        return orjson.loads(f.read())


# --- CSV ---
def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# schema: {SCHEMA_VERSION}\n")
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"Wrote {path}")
    return path


def read_csv(path: str) -> Tuple[List[str], List[List[str]]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(line for line in f if not line.startswith("#"))
        header = next(reader)
        return header, [row for row in reader]


# --- CLOUD CACHE ---
def cloud_key(config: RunConfig) -> str:
    return content_hash({
        "coupling": list(config.coupling),
        "frequency": config.frequency.model_dump(mode="json"),
        "n": config.n,
        "phase_count": config.phase_count,
        "bisection_tol": BISECTION_TOL,
    })


def save_cloud(cloud: SpectrumCloud, folder: str, key: str) -> None:
    write_csv(os.path.join(folder, CLOUD_CSV), ["phase_index", "eigenvalue"],
              zip(cloud.phase_index.tolist(), cloud.samples.tolist()))
    write_json(os.path.join(folder, CLOUD_META), {
        "schema": SCHEMA_VERSION,
        "key": key,
        "coupling": list(cloud.coupling.as_tuple()),
        "alpha": cloud.frequency.value,
        "n": cloud.n,
        "phase_count": cloud.phase_count,
    })


def load_or_build_cloud(config: RunConfig, progress: bool = False) -> SpectrumCloud:
    """Cached cloud when HARPER_CACHE_DIR holds a matching entry, else build and store it."""
    lam, freq = config.coupling_model(), config.frequency_model()
    key = cloud_key(config)
    folder = os.path.join(cache_dir(), key)
    csv_path, meta_path = os.path.join(folder, CLOUD_CSV), os.path.join(folder, CLOUD_META)

    if config.cache and os.path.exists(csv_path) and os.path.exists(meta_path):
        meta = read_json(meta_path)
        if meta.get("schema") == SCHEMA_VERSION and meta.get("key") == key:
            _, rows = read_csv(csv_path)
            logger.info(f"Cloud cache hit {key[:12]} ({len(rows)} samples)")
            return SpectrumCloud(coupling=lam, frequency=freq, n=config.n, phase_count=config.phase_count,
                                 samples=np.array([float(r[1]) for r in rows]),
                                 phase_index=np.array([int(r[0]) for r in rows]))
        logger.warning(f"Cloud cache entry {key[:12]} is stale, rebuilding")

    cloud = build_cloud(lam, freq, config.n, config.phase_count, config.workers, progress)
    if config.cache:
        save_cloud(cloud, folder, key)
    return cloud
