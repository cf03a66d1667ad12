"""Seeded random substreams.

Every random draw in a run comes from a generator derived from one master
seed plus a tag such as ``("select", round)`` or ``("client", round, "05554")``.
Derivation goes through :class:`numpy.random.SeedSequence` spawn keys, so the
stream a client sees does not depend on which other clients were trained
before it or in the same batch.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part: object) -> int:
    if isinstance(part, (int, np.integer)) and not isinstance(part, bool):
        if part < 0:
            raise ValueError(f"negative stream key component: {part}")
        return int(part)
    # stable across processes, unlike hash()
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *tag: object) -> np.random.Generator:
    """Return an independent generator for ``tag`` under master ``seed``."""
    key = tuple(_key_part(p) for p in tag)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def derive_seed(seed: int, *tag: object) -> int:
    """Derive a 63-bit integer seed, e.g. for the ``runs`` repetitions of a sweep."""
    key = tuple(_key_part(p) for p in tag)
    state = np.random.SeedSequence(entropy=int(seed), spawn_key=key).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
