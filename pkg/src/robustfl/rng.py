"""Seed derivation shared by every module.

All randomness goes through :func:`stream`, which turns ``(seed, *tags)`` into an
independent PCG64 generator. Tags name the purpose of a draw ("inputs",
"noise", "phase2-init", ...) so that adding a new consumer never shifts the
numbers seen by an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

GENERATOR_ID = "numpy.random.PCG64 via SeedSequence(seed, sha256(tag))"


def _tag_word(tag: object) -> int:
    digest = hashlib.sha256(str(tag).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(seed: int, *tags: object) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence([int(seed), *(_tag_word(t) for t in tags)])


def stream(seed: int, *tags: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *tags)))


def uniform_sphere(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)
