"""Deterministic seed derivation.

Every random choice in the toolkit flows from one master seed. Child seeds
are split off by hashing (master, label) so that adding a new consumer never
perturbs the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master: int, label: str) -> int:
    """Derive a 32-bit seed for the consumer named by ``label``."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def spawn_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, label))


def seed_sequence(master: int, label: str, count: int) -> list[int]:
    """A reproducible list of distinct consumer seeds (e.g. one per CV run)."""
    return [child_seed(master, f"{label}:{i}") for i in range(count)]
