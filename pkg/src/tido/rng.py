"""Deterministic seeding helpers.

Every sampling routine in the package takes an explicit 64-bit seed.
Sub-streams are derived by composing the base seed with integer tags
through numpy's SeedSequence, so two call sites that need independent
randomness from the same run seed never collide and reruns are
bit-reproducible.
"""

from __future__ import annotations

import numpy as np

_TAG_SALT = 0x9E3779B97F4A7C15  # fixed odd constant, splits tag streams


def _encode_tag(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        h = 0
        for ch in tag.encode("utf-8"):
            h = (h * 1099511628211 + ch) & 0xFFFFFFFFFFFFFFFF  # FNV-1a style
        return h
    raise TypeError(f"rng tag must be int or str, got {type(tag).__name__}")


def child_seed(base_seed: int, *tags) -> int:
    """A 64-bit seed derived deterministically from a base seed and tags."""
    entropy = [int(base_seed) & 0xFFFFFFFFFFFFFFFF, _TAG_SALT]
    entropy.extend(_encode_tag(t) for t in tags)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def generator(base_seed: int, *tags) -> np.random.Generator:
    """PCG64 generator for (base_seed, tags); same arguments, same stream."""
    entropy = [int(base_seed) & 0xFFFFFFFFFFFFFFFF, _TAG_SALT]
    entropy.extend(_encode_tag(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy))
