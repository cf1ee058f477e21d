import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from suma_lab import checkpoint
from suma_lab.checkpoint import CheckpointError

tensors = st.dictionaries(
    st.text(min_size=1, max_size=12),
    arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
           elements=st.floats(allow_nan=False, width=64)),
    max_size=5)


@given(tensors)
def test_roundtrip_bit_exact(d):
    out = checkpoint.loads(checkpoint.dumps(d))
    assert list(out) == list(d)
    for k in d:
        assert out[k].shape == d[k].shape
        assert out[k].tobytes() == d[k].tobytes()


def test_layout():
    buf = checkpoint.dumps({"w": np.array([[1.0, 2.0]])})
    assert buf[:4] == b"SUMA"
    assert int.from_bytes(buf[4:8], "little") == checkpoint.FORMAT_VERSION
    assert len(buf) == 8 + 4 + 1 + 4 + 2 * 8 + 2 * 8


def test_errors():
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"SUMA\x09\x00\x00\x00")
    buf = checkpoint.dumps({"w": np.arange(4.0)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(buf[:-3])


def test_save_load_and_hash(tmp_path):
    d = {"a": np.eye(2), "b": np.arange(3.0)}
    h = checkpoint.save(tmp_path / "x.suma", d)
    assert len(h) == 64
    back = checkpoint.load(tmp_path / "x.suma")
    assert all(np.array_equal(back[k], d[k]) for k in d)
    assert checkpoint.fingerprint(d) == checkpoint.fingerprint({"b": d["b"], "a": d["a"]})
