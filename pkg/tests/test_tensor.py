import struct

import numpy as np
import pytest

from blurnet.tensor import (Tensor, TensorError, dump_tensor, load_tensor,
                            read_tensor, save_tensor)


def test_shape_data_consistency():
    t = Tensor([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], shape=(2, 3))
    assert t.shape == (2, 3)
    assert len(t.data) == 6
    assert int(np.prod(t.shape)) == len(t.data)


def test_rejects_nonfinite():
    with pytest.raises(TensorError):
        Tensor([1.0, np.nan])
    with pytest.raises(TensorError):
        Tensor([np.inf, 0.0])


def test_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(AttributeError):
        t.array = np.zeros(2)
    with pytest.raises(ValueError):
        t.array[0] = 5.0


def test_bnt1_layout():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    buf = dump_tensor(t)
    assert buf[:4] == b"BNT1"
    rank, = struct.unpack_from("<I", buf, 4)
    assert rank == 2
    assert struct.unpack_from("<2I", buf, 8) == (2, 3)
    payload = np.frombuffer(buf, dtype="<f8", offset=16)
    assert np.array_equal(payload, np.arange(6.0))


def test_roundtrip_exact():
    rng = np.random.default_rng(7)
    t = Tensor(rng.normal(size=(3, 4, 5)))
    back = load_tensor(dump_tensor(t))
    assert back == t


def test_file_roundtrip(tmp_path):
    t = Tensor(np.linspace(-1, 1, 12).reshape(3, 4))
    p = tmp_path / "x.bnt"
    save_tensor(t, p)
    assert read_tensor(p) == t


def test_bad_magic():
    with pytest.raises(TensorError):
        load_tensor(b"NOPE" + b"\x00" * 16)


def test_truncated_payload():
    buf = dump_tensor(Tensor(np.ones(4)))
    with pytest.raises(TensorError):
        load_tensor(buf[:-8])


def test_scalar_rank_zero():
    t = Tensor(3.5)
    assert t.shape == ()
    assert load_tensor(dump_tensor(t)) == t
