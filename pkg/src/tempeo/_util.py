"""Seed derivation, deterministic parallel map and JSON line helpers."""
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def derive_seed(seed, *parts) -> int:
    key = ":".join([str(seed)] + [str(p) for p in parts]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(seed, *parts) -> np.random.Generator:
    """Independent generator for ``(seed, *parts)``; never touches global RNG state."""
    return np.random.default_rng(derive_seed(seed, *parts))


def parallel_map(fn, items, workers: int = 1, chunksize: int = 4):
    """``map`` that keeps input order; worker count never changes the result."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))


def dumps_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"
