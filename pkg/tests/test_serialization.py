import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from cosam import checkpoint, ctf


@settings(max_examples=40, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=4)))
def test_ctf_round_trip(a):
    b = ctf.decode(ctf.encode(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_ctf_layout():
    blob = ctf.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == b"CTF1" and blob[4] == 0 and blob[5] == 2
    assert int.from_bytes(blob[6:14], "little") == 2 and int.from_bytes(blob[14:22], "little") == 3
    assert np.array_equal(np.frombuffer(blob[22:], "<f4"), np.arange(6))
    assert ctf.encode(np.zeros(1))[4] == 1


def test_ctf_stream_decoding_reads_consecutive_records():
    stream = io.BytesIO(ctf.encode(np.ones(2)) + ctf.encode(np.zeros((1, 1), np.float32)))
    assert np.array_equal(ctf.decode_from(stream), np.ones(2))
    assert ctf.decode_from(stream).shape == (1, 1)


def test_ctf_errors():
    with pytest.raises(ctf.CTFError):
        ctf.decode(b"XXXX")
    with pytest.raises(ctf.CTFError):
        ctf.decode(ctf.encode(np.ones(4))[:-3])
    # non-float input is stored as f64
    assert ctf.decode(ctf.encode(np.arange(3))).dtype == np.float64


def test_ctf_files(tmp_path, rng):
    a = rng.normal(size=(2, 3, 4))
    ctf.save(tmp_path / "a.ctf", a)
    assert np.array_equal(ctf.load(tmp_path / "a.ctf"), a)


def test_checkpoint_round_trip(tmp_path, rng):
    state = {"w": rng.normal(size=(3, 2)), "b": np.zeros(3), "s": np.array(2.0), "f": np.ones(2, np.float32)}
    meta = {"config": {"seed": 3}, "note": "x"}
    checkpoint.save(tmp_path / "m.ckpt", state, meta)
    loaded, m = checkpoint.load(tmp_path / "m.ckpt")
    assert list(loaded) == list(state) and m == meta
    for k in state:
        assert loaded[k].dtype == state[k].dtype and np.array_equal(loaded[k], state[k])


def test_checkpoint_is_byte_deterministic(rng):
    state = {"a": rng.normal(size=4)}
    assert checkpoint.dumps(state, {"k": 1}) == checkpoint.dumps(dict(state), {"k": 1})


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"not a checkpoint")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.dumps({"bad\tname": np.zeros(1)})
