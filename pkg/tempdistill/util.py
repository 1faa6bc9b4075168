"""
Auxiliary functions
"""

import csv
import hashlib
import json
import re
from pathlib import Path
from typing import Any, Collection, Union

import numpy as np

from .errors import InvalidArgument


def unique_name(name:str, collection:Collection[str]) -> str:
    """The name itself when it is free, otherwise the name with the lowest free suffix: name-2, name-3, ..."""
    if not name:
        raise InvalidArgument("empty name")
    candidate, n = name, 1
    while candidate in collection:
        n += 1
        candidate = f"{name}-{n}"
    return candidate


def safe_filename(name:str) -> str:
    """Replace everything that is not portable in a file name"""
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", name).strip("._") or "unnamed"


def sha256_bytes(data:bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path:Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_json(obj:Any) -> str:
    """Digest of a JSON-able object, independent of key order"""
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


# wall-clock measurements, which differ between otherwise identical runs
TIMING_FIELDS = ("latency_ms",)


def sha256_output(path:Union[str, Path]) -> str:
    """Digest of a run output. JSON objects and CSV tables with timing fields are digested without them,
    so that a replay compares equal; every other file is digested byte for byte"""
    path = Path(path)
    if path.suffix == ".json":
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return sha256_file(path)
        if isinstance(obj, dict) and any(f in obj for f in TIMING_FIELDS):
            return digest_json({k: v for k, v in obj.items() if k not in TIMING_FIELDS})
    elif path.suffix == ".csv":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if rows and any(f in rows[0] for f in TIMING_FIELDS):
            keep = [i for i, name in enumerate(rows[0]) if name not in TIMING_FIELDS]
            return digest_json([[row[i] for i in keep if i < len(row)] for row in rows])
    return sha256_file(path)


def document_rng(seed:int, doc_id:str) -> np.random.Generator:
    """Per-document generator derived from (run seed, doc id), so results don't depend on processing order"""
    doc_key = int.from_bytes(hashlib.sha256(doc_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed, doc_key])
