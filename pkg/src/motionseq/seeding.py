"""Reproducible random streams.

All randomness flows from :class:`numpy.random.Generator` over the Philox
counter-based bit generator (4x64 counter, 2x64 key, 10 rounds). A single
64-bit master seed determines every stream; sub-streams are derived by hashing
a label into the key so that adding a new consumer never shifts existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    if label is not None:
        digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
        seed = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    """Pack a Philox generator state into a flat uint64 vector."""
    st = rng.bit_generator.state
    inner = st["state"]
    return np.concatenate(
        [
            np.asarray(inner["counter"], dtype=np.uint64),
            np.asarray(inner["key"], dtype=np.uint64),
            np.asarray(st["buffer"], dtype=np.uint64),
            np.array([st["buffer_pos"], st["has_uint32"], st["uinteger"]], dtype=np.uint64),
        ]
    )


def rng_from_state_array(packed: np.ndarray) -> np.random.Generator:
    packed = np.asarray(packed, dtype=np.uint64)
    bg = np.random.Philox(0)
    bg.state = {
        "bit_generator": "Philox",
        "state": {"counter": packed[0:4].copy(), "key": packed[4:6].copy()},
        "buffer": packed[6:10].copy(),
        "buffer_pos": int(packed[10]),
        "has_uint32": int(packed[11]),
        "uinteger": int(packed[12]),
    }
    return np.random.Generator(bg)
