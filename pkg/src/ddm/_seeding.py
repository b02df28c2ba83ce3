"""Named random substreams and stable hashing."""

import hashlib
import json

import numpy as np


def _name_key(name):
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def substream(seed, name, *extra):
    """Generator for the substream ``name`` of a global ``seed``.

    Extra integers (epoch, class index, ...) select independent children,
    so e.g. the shuffle order for epoch 3 depends only on (seed, 3).
    """
    entropy = [int(seed), _name_key(name), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)!r}")


def stable_hash(obj, n=16):
    if isinstance(obj, (bytes, bytearray)):
        raw = bytes(obj)
    else:
        raw = canonical_json(obj).encode()
    return hashlib.sha256(raw).hexdigest()[:n]


def array_hash(*arrays, n=16):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:n]
