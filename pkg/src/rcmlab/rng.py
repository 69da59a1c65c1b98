"""Counter-based randomness.

Every random quantity in the package is a pure function of a run seed, a
replica index, a stream tag and one or two integer keys.  Bulk draws use
numpy's Philox generator with the replica and stream packed into the high
words of the counter; lazily revealed variates (edge and site states) use a
splitmix64 style mixer over the key tuple so they can be evaluated in any
order and any batch shape.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
SEED_BITS = 128

# stream tags; distinct purposes never share variates
STREAM_POINTS = 1
STREAM_EDGES = 2
STREAM_SITES = 3
STREAM_GHOST = 4
STREAM_RESAMPLE = 5
STREAM_BOOTSTRAP = 6
STREAM_FIXTURE = 7
STREAM_SECOND = 8

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / float(1 << 53)


def check_seed(seed: int) -> int:
    """Validate a run seed (non-negative integer below 2**128)."""
    seed = int(seed)
    if seed < 0 or seed >= (1 << SEED_BITS):
        raise ValueError(f"seed must lie in [0, 2**128), got {seed}")
    return seed


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, replica: int = 0, stream: int = 0) -> np.uint64:
    """Fold (seed, replica, stream) into a single 64-bit key."""
    seed = check_seed(seed)
    words = [seed & MASK64, seed >> 64, int(replica) & MASK64, int(stream) & MASK64]
    h = 0
    for w in words:
        h = _mix_int(h ^ _mix_int((w + 0x9E3779B97F4A7C15) & MASK64))
    return np.uint64(h)


def hash_keys(key: np.uint64, *words) -> np.ndarray:
    """Mix integer arrays into the key; returns uint64 of the broadcast shape."""
    arrays = np.broadcast_arrays(*[np.asarray(w, dtype=np.int64) for w in words])
    with np.errstate(over="ignore"):
        h = np.full(arrays[0].shape, key, dtype=np.uint64)
        for w in arrays:
            h = _mix(h ^ _mix(w.astype(np.uint64) + _GOLDEN))
    return h


def uniforms(key: np.uint64, *words) -> np.ndarray:
    """Uniform [0, 1) variates addressed by integer words (53-bit resolution)."""
    h = hash_keys(key, *words)
    return (h >> np.uint64(11)).astype(np.float64) * _INV53


def pair_uniforms(key: np.uint64, i, j) -> np.ndarray:
    """Variates for unordered pairs {i, j}; symmetric in the two arguments."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    return uniforms(key, np.minimum(i, j), np.maximum(i, j))


def generator(seed: int, replica: int = 0, stream: int = 0) -> np.random.Generator:
    """Philox generator for one (seed, replica, stream) triple.

    The 128-bit seed is the Philox key; replica and stream occupy the top two
    counter words, so streams never overlap for fewer than 2**128 draws.
    """
    seed = check_seed(seed)
    counter = ((int(replica) & MASK64) << 192) | ((int(stream) & MASK64) << 128)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))
