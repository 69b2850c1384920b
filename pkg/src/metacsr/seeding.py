"""Deterministic seed fan-out.

One global seed is split into per-component seeds by hashing
``"{seed}/{name}"`` with SHA-256 and taking the first 8 bytes. Every random
stream in the pipeline is created through :func:`component_rng`, so a single
knob reproduces an entire run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, name))
