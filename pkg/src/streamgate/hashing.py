"""64-bit FNV-1a hashing over token id sequences.

Token ids are folded into the hash as 8-byte little-endian unsigned
integers, one token at a time.  The same byte convention is used for
context fingerprints, cache payload checksums, and seed derivation, and
is mirrored by the out-of-process scorer bridge, so it must not change.
"""

from __future__ import annotations

from typing import Iterable

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, seed: int = FNV64_OFFSET) -> int:
    h = seed
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


def fingerprint_step(fingerprint: int, token_id: int) -> int:
    """Fold one token id (8 bytes, little-endian) into a running fingerprint."""
    h = fingerprint
    for shift in range(0, 64, 8):
        h = ((h ^ ((token_id >> shift) & 0xFF)) * FNV64_PRIME) & _MASK64
    return h


def fingerprint_tokens(token_ids: Iterable[int], seed: int = FNV64_OFFSET) -> int:
    h = seed
    for t in token_ids:
        h = fingerprint_step(h, t)
    return h


def block_checksum(token_ids: Iterable[int], start_position: int) -> int:
    """Checksum standing in for a cached attention state: position-sensitive."""
    return fingerprint_tokens(token_ids, seed=fingerprint_step(FNV64_OFFSET, start_position))


def derive_substream_seed(seed: int, name: str) -> int:
    """Stable child seed for a named randomness sub-stream.

    Built on FNV rather than hash() so results do not depend on
    PYTHONHASHSEED.
    """
    h = fingerprint_step(FNV64_OFFSET, seed & _MASK64)
    return fnv1a64(name.encode("utf-8"), seed=h)
