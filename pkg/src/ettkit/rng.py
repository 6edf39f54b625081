"""Deterministic random streams derived from one top-level seed.

Every stochastic component takes a named stream so that results do not depend
on evaluation order or worker count.  Stream identity is (root seed, label
path); labels are hashed with a keyed, platform-stable digest.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label: str | int) -> int:
    digest = hashlib.blake2s(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def seed_sequence(root: int, *labels: str | int) -> np.random.SeedSequence:
    """SeedSequence for the stream named by `labels` under `root`."""
    entropy = [int(root)] + [_label_entropy(lab) for lab in labels]
    return np.random.SeedSequence(entropy)


def stream(root: int, *labels: str | int) -> np.random.Generator:
    """Generator for the named stream; same arguments always give the same draws."""
    return np.random.default_rng(seed_sequence(root, *labels))


def replicate_stream(root: int, label: str, index: int) -> np.random.Generator:
    """Per-replicate generator: independent of every other index, order-free."""
    return stream(root, label, index)
