import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddm import ParamVector, Segment, load_checkpoint, save_checkpoint
from ddm._seeding import array_hash, canonical_json, stable_hash, substream
from ddm.errors import ConfigError, DDMError


def test_substream_is_reproducible_and_name_sensitive():
    a = substream(3, "shuffle", 1).random(5)
    assert np.array_equal(a, substream(3, "shuffle", 1).random(5))
    assert not np.array_equal(a, substream(3, "shuffle", 2).random(5))
    assert not np.array_equal(a, substream(3, "masks", 1).random(5))
    assert not np.array_equal(a, substream(4, "shuffle", 1).random(5))


def test_stable_hash_ignores_key_order():
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
    assert canonical_json({"b": 1, "a": (1, 2)}) == '{"a":[1,2],"b":1}'


def test_array_hash_sees_dtype_and_shape():
    x = np.arange(6.0)
    assert array_hash(x) != array_hash(x.reshape(2, 3))
    assert array_hash(x) != array_hash(x.astype(np.float32))


def _pv(rng):
    return ParamVector.from_arrays([("w", rng.normal(size=(3, 2))), ("b", rng.normal(size=2))])


def test_paramvector_views_and_arithmetic(rng):
    p = _pv(rng)
    assert p.names == ["w", "b"] and p.size == 8
    w, b = p.arrays()
    assert w.shape == (3, 2) and not w.flags.writeable
    q = p + p
    assert np.allclose(q.data, 2 * p.data)
    assert np.isclose((q - p).distance(p), 0.0)
    assert np.isclose(p.norm(), np.linalg.norm(p.data))


def test_paramvector_rejects_bad_tiling():
    with pytest.raises(ConfigError):
        ParamVector(np.zeros(5), (Segment("a", 0, (2,)), Segment("b", 3, (2,))))


def test_checkpoint_roundtrip(tmp_path, rng):
    p = _pv(rng)
    save_checkpoint(tmp_path / "x.ckpt", p, "abc", {"epoch": 3})
    q, header = load_checkpoint(tmp_path / "x.ckpt", "abc")
    assert q.identical(p) and header["extra"]["epoch"] == 3
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.ckpt", "other")
    raw = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-4])
    with pytest.raises(DDMError):
        load_checkpoint(tmp_path / "t.ckpt")


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_checkpoint_is_bit_exact(tmp_path_factory, values):
    p = ParamVector.from_arrays([("v", np.array(values))])
    path = tmp_path_factory.mktemp("c") / "p.ckpt"
    save_checkpoint(path, p)
    assert load_checkpoint(path)[0].identical(p)
