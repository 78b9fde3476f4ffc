"""Counter-based deterministic random numbers.

Every draw is a pure function of ``(seed, stream, index)``: there is no hidden
generator state, so an operator regenerated during a backward replay sees exactly
the noise it saw the first time, in any access order.

The word generator is the SplitMix64 finalizer applied twice to a Weyl-sequence
counter keyed by the seed and a stream key:

    key  = mix64((seed mod 2^64) XOR mix64(stream_key + GOLDEN_GAMMA))
    z    = key + (index + 1) * GOLDEN_GAMMA          (mod 2^64)
    word = mix64(mix64(z) XOR key)

with ``mix64(z)``:

    z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z XOR (z >> 27)) * 0x94D049BB133111EB
    z =  z XOR (z >> 31)

String stream identifiers are hashed to 64 bits with BLAKE2b (digest size 8,
little-endian). Derived variates:

    unit(word)     = ((word >> 12) + 0.5) * 2^-52              in (0, 1)
    gaussian(i)    = sqrt(-2 ln unit(w[2i])) * cos(2 pi unit(w[2i + 1]))
    rademacher(i)  = +1 if the top bit of w[i] is set, else -1
    randbelow(i,n) = (w[i] * n) >> 64

Scalar helpers use Python integers; the ``*_array`` helpers compute identical
values with numpy ``uint64`` arithmetic for bulk draws.
"""
import hashlib
import math
from functools import lru_cache
from typing import Iterable

import numpy as np
import numpy.typing as npt

MASK64 = 0xFFFF_FFFF_FFFF_FFFF
GOLDEN_GAMMA = 0x9E37_79B9_7F4A_7C15
MIX_MULT_1 = 0xBF58_476D_1CE4_E5B9
MIX_MULT_2 = 0x94D0_49BB_1331_11EB
UNIT_SCALE = 2.0 ** -52

Stream = str | int


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z = ((z ^ (z >> 30)) * MIX_MULT_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MULT_2) & MASK64
    return z ^ (z >> 31)


def stream_key(stream: Stream) -> int:
    """
    Map a stream identifier to a 64-bit key.

    Args:
        stream (str | int): Stream name or raw integer id.

    Returns:
        int: 64-bit stream key.
    """
    if isinstance(stream, int):
        return stream & MASK64
    digest = hashlib.blake2b(stream.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@lru_cache(maxsize=4096)
def _key(seed: int, stream: Stream) -> int:
    return mix64((seed & MASK64) ^ mix64((stream_key(stream) + GOLDEN_GAMMA) & MASK64))


def seeded_rng(seed: int, stream: Stream, index: int) -> int:
    """
    Return the 64-bit word at position `index` of stream `stream` under `seed`.

    Args:
        seed (int): Run seed (reduced modulo 2^64).
        stream (str | int): Stream identifier, e.g. "noise" or "batch".
        index (int): Non-negative counter.

    Returns:
        int: Word in [0, 2^64).
    """
    key = _key(seed, stream)
    z = (key + ((index + 1) * GOLDEN_GAMMA)) & MASK64
    return mix64(mix64(z) ^ key)


def unit(word: int) -> float:
    """Map a word to a double in the open interval (0, 1)."""
    return ((word >> 12) + 0.5) * UNIT_SCALE


def uniform(seed: int, stream: Stream, index: int) -> float:
    """Uniform variate on (0, 1)."""
    return unit(seeded_rng(seed, stream, index))


def gaussian(seed: int, stream: Stream, index: int) -> float:
    """Standard normal variate (Box-Muller on counters 2*index and 2*index + 1)."""
    u1 = unit(seeded_rng(seed, stream, 2 * index))
    u2 = unit(seeded_rng(seed, stream, 2 * index + 1))
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def rademacher(seed: int, stream: Stream, index: int) -> float:
    """Symmetric sign variate, +1.0 or -1.0."""
    return 1.0 if seeded_rng(seed, stream, index) >> 63 else -1.0


def randbelow(seed: int, stream: Stream, index: int, n: int) -> int:
    """Integer in [0, n) by multiply-shift reduction."""
    if n <= 0:
        raise ValueError("n must be positive")
    return (seeded_rng(seed, stream, index) * n) >> 64


def _mix64_array(z: npt.NDArray[np.uint64]) -> npt.NDArray[np.uint64]:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_MULT_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_MULT_2)
    return z ^ (z >> np.uint64(31))


def words_array(seed: int, stream: Stream, indices: Iterable[int] | npt.ArrayLike) -> npt.NDArray[np.uint64]:
    """
    Vectorized `seeded_rng` over many counters.

    Args:
        seed (int): Run seed.
        stream (str | int): Stream identifier.
        indices: Non-negative counters.

    Returns:
        numpy.ndarray: uint64 words, elementwise equal to `seeded_rng`.
    """
    idx = np.asarray(indices, dtype=np.uint64)
    key = np.uint64(_key(seed, stream))
    with np.errstate(over="ignore"):
        z = key + (idx + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
        return _mix64_array(_mix64_array(z) ^ key)


def uniform_array(seed: int, stream: Stream, indices) -> npt.NDArray[np.float64]:
    """Vectorized `uniform`."""
    w = words_array(seed, stream, indices)
    return ((w >> np.uint64(12)).astype(np.float64) + 0.5) * UNIT_SCALE


def gaussian_array(seed: int, stream: Stream, indices) -> npt.NDArray[np.float64]:
    """Vectorized `gaussian`."""
    idx = np.asarray(indices, dtype=np.uint64)
    u1 = uniform_array(seed, stream, np.uint64(2) * idx)
    u2 = uniform_array(seed, stream, np.uint64(2) * idx + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
