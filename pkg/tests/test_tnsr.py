import struct

import numpy as np
import pytest

from acconv.errors import FormatError
from acconv.numcore import read_bundle, read_tensor, write_bundle, write_tensor


def test_roundtrip_matrix(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 5))
    p = tmp_path / "a.tnsr"
    write_tensor(p, arr)
    assert np.array_equal(read_tensor(p), arr)


def test_roundtrip_scalar_and_3d(tmp_path):
    for arr in (np.array(4.25), np.arange(24.0).reshape(2, 3, 4)):
        p = tmp_path / "x.tnsr"
        write_tensor(p, arr)
        back = read_tensor(p)
        assert back.shape == arr.shape and np.array_equal(back, arr)


def test_header_layout_is_pinned(tmp_path):
    p = tmp_path / "h.tnsr"
    write_tensor(p, np.array([[1.0, 2.0]]))
    raw = p.read_bytes()
    assert raw[:4] == b"TNSR"
    version, rank = struct.unpack_from("<HH", raw, 4)
    assert (version, rank) == (1, 2)
    assert struct.unpack_from("<2Q", raw, 8) == (1, 2)
    assert struct.unpack_from("<2d", raw, 24) == (1.0, 2.0)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.tnsr"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        read_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.tnsr"
    write_tensor(p, np.ones(4))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_tensor(p)


def test_bundle_roundtrip_preserves_order(tmp_path):
    rng = np.random.default_rng(1)
    named = {"enc.w": rng.standard_normal((2, 2)),
             "dec.b": rng.standard_normal(3),
             "step": np.array(7.0)}
    p = tmp_path / "ckpt.bundle"
    write_bundle(p, named)
    back = read_bundle(p)
    assert list(back) == list(named)
    for k in named:
        assert np.array_equal(back[k], named[k])


def test_bundle_rejects_duplicates(tmp_path):
    p = tmp_path / "dup.bundle"
    write_bundle(p, {"a": np.ones(1)})
    p.write_bytes(p.read_bytes() * 2)
    with pytest.raises(FormatError):
        read_bundle(p)
