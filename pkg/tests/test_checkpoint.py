import struct

import numpy as np
import pytest

from samovar import checkpoint as ck
from samovar.errors import CheckpointError

from conftest import make_model


def _tensors():
    rng = np.random.default_rng(0)
    return {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": np.float32([1.5]),
            "s": np.array(2.0, dtype=np.float32)}


def test_round_trip_bit_exact(tmp_path):
    t = _tensors()
    p = tmp_path / "w.smvw"
    ck.save(p, t, {"d": 8})
    back = ck.load(p)
    assert list(back) == list(t)
    for k in t:
        assert back[k].shape == t[k].shape
        assert back[k].tobytes() == t[k].tobytes()
    assert ck.load_config(p) == {"d": 8}


def test_layout():
    buf = ck.encode({"ab": np.float32([[1.0, 2.0]])})
    assert buf[:5] == b"SMVW1"
    assert struct.unpack_from("<I", buf, 5) == (1,)
    assert struct.unpack_from("<H", buf, 9) == (2,) and buf[11:13] == b"ab"
    assert buf[13] == 2 and struct.unpack_from("<2I", buf, 14) == (1, 2)
    assert np.frombuffer(buf[22:30], "<f4").tolist() == [1.0, 2.0]
    assert len(buf) == 34


def test_truncated_is_crc_error():
    buf = ck.encode(_tensors())
    with pytest.raises(CheckpointError, match="CRC"):
        ck.decode(buf[:-7])
    with pytest.raises(CheckpointError):
        ck.decode(buf[:6])


def test_bad_magic_and_flipped_bit():
    buf = bytearray(ck.encode(_tensors()))
    with pytest.raises(CheckpointError, match="magic"):
        ck.decode(b"XXXXX" + bytes(buf[5:]))
    buf[20] ^= 1
    with pytest.raises(CheckpointError, match="CRC"):
        ck.decode(bytes(buf))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        ck.load(tmp_path / "nope.smvw")


def test_model_round_trip_and_shape_mismatch(tmp_path):
    m = make_model(d=8)
    p = tmp_path / "m.smvw"
    ck.save(p, {k: v.data for k, v in m.w.items()})
    m2 = make_model(d=8, seed=5)
    ck.assign(m2.w, ck.load(p))
    for k in m.w:
        np.testing.assert_array_equal(m2.w[k].data, m.w[k].data.astype(np.float32))
    other = make_model(d=4)
    with pytest.raises(CheckpointError, match="shape mismatch for tensor 'tok.W_tok'"):
        ck.assign(other.w, ck.load(p))
