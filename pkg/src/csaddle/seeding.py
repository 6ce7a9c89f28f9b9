"""Seed splitting.

Every random component draws from a stream derived from ``(master_seed, label)``.
The label is hashed with BLAKE2b into a 64-bit stream id that becomes the
``spawn_key`` of a :class:`numpy.random.SeedSequence`, so streams for distinct
labels are independent and adding a new label never shifts existing ones.
"""
import hashlib

import numpy as np


def stream_id(label):
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master_seed, label):
    return np.random.SeedSequence(int(master_seed), spawn_key=(stream_id(label),))


def rng_for(master_seed, label):
    """Independent ``Generator`` for one labelled component."""
    return np.random.default_rng(seed_sequence(master_seed, label))


def philox_key(master_seed, label):
    """128-bit Philox key for counter-based streams (one draw block per round)."""
    words = seed_sequence(master_seed, label).generate_state(2, dtype=np.uint64)
    return int(words[0]) | (int(words[1]) << 64)
