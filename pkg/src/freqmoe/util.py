"""Small shared helpers: keyed RNG streams and image array conversions."""

import hashlib

import numpy as np


def seed_from(seed, *keys):
    """Stable 64-bit seed derived from a base seed and string keys."""
    text = str(int(seed)) + "".join("/" + str(k) for k in keys)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed, *keys):
    """Independent PCG64 generator for the given (seed, keys) stream."""
    return np.random.Generator(np.random.PCG64(seed_from(seed, *keys)))


def to_uint8(img):
    """[0,1] float image -> 8-bit, round-half-up via rint."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(raw):
    """8-bit image -> float32 in [0,1]."""
    return raw.astype(np.float32) / np.float32(255.0)
