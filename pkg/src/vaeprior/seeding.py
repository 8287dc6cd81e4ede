"""Labeled seed derivation.

Every random stream is derived from one master seed and a text label
(``"chain:3"``, ``"reference"``, ...) so re-running one stage never shifts the
streams of another. Streams use the counter-based Philox bit generator.
"""

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(master: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(master, label)))
