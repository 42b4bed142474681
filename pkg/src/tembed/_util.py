"""Shared helpers: deterministic RNG construction, canonical JSON, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from typing import Sequence

import numpy as np

RNG_ALGORITHM = "philox-4x64"


def make_rng(entropy: Sequence[int]) -> np.random.Generator:
    """Build a counter-based generator keyed by a list of integers.

    Philox is counter-based: streams keyed by distinct entropy lists are
    statistically independent, so ``[seed, episode]`` or ``[seed, fold, run]``
    give reproducible per-unit streams with no cross-talk. List keying avoids
    the collisions that XOR-combining components would produce (0^1 == 1^0).
    """
    ss = np.random.SeedSequence(list(entropy))
    return np.random.Generator(np.random.Philox(ss))


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no float truncation, for stable hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """Write a file via temp-and-rename so readers never observe a torn file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def float_repr(x: float) -> str:
    """Shortest decimal string that round-trips the exact float64 value."""
    return repr(float(x))
