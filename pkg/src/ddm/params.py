"""Flat parameter vectors with a per-layer segment table, and their on-disk format.

Checkpoint layout (all integers little-endian)::

    b"DDMCKPT1"                 magic
    uint32 n                    length of the JSON header in bytes
    n bytes                     JSON: {"spec_hash", "segments": [[name, offset, shape], ...], ...}
    float64[size] ('<f8')       parameter payload
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DDMError

CKPT_MAGIC = b"DDMCKPT1"


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return math.prod(self.shape)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """All model parameters as one float64 vector.

    ``segments`` tile ``data`` exactly, in order. Instances are treated as
    immutable values; every operation returns a new vector.
    """

    data: np.ndarray
    segments: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "segments", tuple(self.segments))
        pos = 0
        for s in self.segments:
            if s.offset != pos:
                raise ConfigError(f"segment {s.name!r} starts at {s.offset}, expected {pos}")
            pos += s.size
        if pos != data.size:
            raise ConfigError(f"segments cover {pos} entries but vector has {data.size}")

    @classmethod
    def from_arrays(cls, named_arrays, meta=None):
        segs, chunks, off = [], [], 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            segs.append(Segment(name, off, tuple(arr.shape)))
            chunks.append(arr.reshape(-1))
            off += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, tuple(segs), dict(meta or {}))

    @property
    def size(self):
        return self.data.size

    @property
    def names(self):
        return [s.name for s in self.segments]

    def arrays(self):
        """Per-segment read-only views shaped like the layer parameters."""
        out = []
        for s in self.segments:
            v = self.data[s.offset:s.offset + s.size].reshape(s.shape)
            v.flags.writeable = False
            out.append(v)
        return out

    def segment(self, name):
        for s, a in zip(self.segments, self.arrays()):
            if s.name == name:
                return a
        raise KeyError(name)

    def with_data(self, data):
        return ParamVector(np.array(data, dtype=np.float64), self.segments, dict(self.meta))

    def same_layout(self, other):
        return self.segments == other.segments

    def _check(self, other):
        if not self.same_layout(other):
            raise ConfigError("parameter vectors have different segment maps")

    def __add__(self, other):
        self._check(other)
        return self.with_data(self.data + other.data)

    def __sub__(self, other):
        self._check(other)
        return self.with_data(self.data - other.data)

    def __neg__(self):
        return self.with_data(-self.data)

    def scale(self, c):
        return self.with_data(c * self.data)

    def norm(self):
        return float(np.linalg.norm(self.data))

    def distance(self, other):
        self._check(other)
        return float(np.linalg.norm(self.data - other.data))

    def allclose(self, other, **kw):
        return self.same_layout(other) and np.allclose(self.data, other.data, **kw)

    def identical(self, other):
        return self.same_layout(other) and np.array_equal(self.data, other.data)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        segs = ", ".join(f"{s.name}{list(s.shape)}" for s in self.segments)
        return f"ParamVector(size={self.size}, segments=[{segs}])"


def save_checkpoint(path, params, spec_hash="", extra=None):
    header = {
        "spec_hash": spec_hash,
        "segments": [[s.name, s.offset, list(s.shape)] for s in params.segments],
        "size": int(params.size),
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path, expect_spec_hash=None):
    """Read a checkpoint; returns ``(ParamVector, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DDMError(f"{path}: not a parameter checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode())
    if expect_spec_hash is not None and header["spec_hash"] != expect_spec_hash:
        raise ConfigError(
            f"{path}: checkpoint spec hash {header['spec_hash']} != expected {expect_spec_hash}")
    payload = raw[12 + n:]
    if len(payload) != 8 * header["size"]:
        raise DDMError(f"{path}: truncated payload ({len(payload)} bytes, "
                       f"expected {8 * header['size']})")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    segs = tuple(Segment(name, off, tuple(shape)) for name, off, shape in header["segments"])
    return ParamVector(data, segs), header
