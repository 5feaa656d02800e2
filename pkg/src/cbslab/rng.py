"""Splittable deterministic random streams.

Every stochastic component draws from an :class:`RngStream`. A stream is
identified by a key (a tuple of 64-bit ints); child streams derive their key
from the parent key plus a hashed label, so independent branches of an
experiment get independent, reproducible generators no matter what order they
run in. The underlying bit generator is PCG64, whose full state can be
serialized, which is what makes bitwise checkpoint resume possible.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_STATE_STRUCT = struct.Struct("<16s16sBI")  # pcg state, inc, has_uint32, uinteger


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


class RngStream:
    """A named, splittable PCG64 stream with serializable state."""

    def __init__(self, key: tuple[int, ...], generator: np.random.Generator | None = None):
        if not key:
            raise ValueError("stream key must be nonempty")
        for part in key:
            if not 0 <= part < 2**64:
                raise ValueError(f"stream key parts must fit in uint64, got {part}")
        self.key = tuple(int(p) for p in key)
        if generator is None:
            generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.key)))
        self.generator = generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStream":
        return cls((int(seed),))

    def child(self, label: str) -> "RngStream":
        """Fresh independent stream keyed by this stream's key plus ``label``.

        Children depend only on the key, not on how much of the parent stream
        has been consumed.
        """
        return RngStream(self.key + (_label_hash(label),))

    def clone(self) -> "RngStream":
        """Copy with identical key and bit-generator position."""
        fresh = RngStream(self.key)
        fresh.generator.bit_generator.state = self.generator.bit_generator.state
        return fresh

    # Draw helpers (thin delegation keeps call sites short).
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    # Serialization -------------------------------------------------------

    def state_bytes(self) -> bytes:
        """Key plus full PCG64 position, fixed-width little-endian."""
        st = self.generator.bit_generator.state
        inner = st["state"]
        blob = _STATE_STRUCT.pack(
            int(inner["state"]).to_bytes(16, "little"),
            int(inner["inc"]).to_bytes(16, "little"),
            int(st["has_uint32"]),
            int(st["uinteger"]),
        )
        parts = [struct.pack("<I", len(self.key))]
        parts.extend(struct.pack("<Q", p) for p in self.key)
        parts.append(blob)
        return b"".join(parts)

    @classmethod
    def from_state_bytes(cls, data: bytes) -> "RngStream":
        if len(data) < 4:
            raise ValueError("rng state blob too short")
        (n_key,) = struct.unpack_from("<I", data, 0)
        expected = 4 + 8 * n_key + _STATE_STRUCT.size
        if len(data) != expected:
            raise ValueError(f"rng state blob has {len(data)} bytes, expected {expected}")
        key = tuple(struct.unpack_from("<Q", data, 4 + 8 * i)[0] for i in range(n_key))
        raw_state, raw_inc, has_uint32, uinteger = _STATE_STRUCT.unpack_from(data, 4 + 8 * n_key)
        stream = cls(key)
        stream.generator.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {
                "state": int.from_bytes(raw_state, "little"),
                "inc": int.from_bytes(raw_inc, "little"),
            },
            "has_uint32": int(has_uint32),
            "uinteger": int(uinteger),
        }
        return stream

    def state_size(self) -> int:
        return 4 + 8 * len(self.key) + _STATE_STRUCT.size

    def __repr__(self) -> str:
        return f"RngStream(key={self.key})"
