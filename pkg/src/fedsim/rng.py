"""Labeled random streams.

Every stochastic choice in an experiment (partitioning, weight init,
batch shuffling, bucket permutations, aggregator noise, attack
randomness, smoothing noise) draws from a generator derived from the
master seed and a string label, e.g. ``stream(seed, "round3/client7")``.
Two runs with the same master seed therefore replay identically, and a
run can be resumed mid-way without serializing generator state: the
label scheme alone pins every draw.
"""

import hashlib

import numpy as np


def child_seed(master_seed: int, label: str) -> int:
    """Derive a 64-bit seed from (master_seed, label)."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def stream(master_seed: int, label: str) -> np.random.Generator:
    """Independent generator for one labeled purpose."""
    return np.random.Generator(np.random.PCG64(child_seed(master_seed, label)))
