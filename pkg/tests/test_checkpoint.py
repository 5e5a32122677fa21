import numpy as np
import pytest

from koopmanflow import checkpoint as ckpt
from koopmanflow.errors import FormatError


def test_roundtrip_bit_exact(tmp_path, rng):
    arrays = {
        "a.weight": rng.normal(size=(4, 7)),
        "scalar": np.array(2.5),
        "long.name.with.dots": rng.normal(size=(2, 3, 5)),
        "vec": rng.normal(size=9),
    }
    path = tmp_path / "model.kflow"
    ckpt.save_container(path, arrays)
    loaded = ckpt.load_container(path)
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert loaded[name].shape == np.asarray(arr).shape
        np.testing.assert_array_equal(loaded[name], arr)


def test_empty_container(tmp_path):
    path = tmp_path / "empty.kflow"
    ckpt.save_container(path, {})
    assert ckpt.load_container(path) == {}


def test_magic_header(tmp_path):
    path = tmp_path / "model.kflow"
    ckpt.save_container(path, {"x": np.ones(3)})
    assert path.read_bytes()[:6] == b"KFLOW1"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.kflow"
    path.write_bytes(b"NOTKFL" + b"\0" * 16)
    with pytest.raises(FormatError):
        ckpt.load_container(path)


def test_truncation_rejected(tmp_path, rng):
    path = tmp_path / "model.kflow"
    ckpt.save_container(path, {"x": rng.normal(size=16)})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(FormatError):
        ckpt.load_container(path)


def test_trailing_bytes_rejected(tmp_path, rng):
    path = tmp_path / "model.kflow"
    ckpt.save_container(path, {"x": rng.normal(size=4)})
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(FormatError):
        ckpt.load_container(path)


def test_payload_is_little_endian_float64(tmp_path):
    path = tmp_path / "model.kflow"
    ckpt.save_container(path, {"x": np.array([1.0])})
    raw = path.read_bytes()
    assert raw[-8:] == np.array([1.0], dtype="<f8").tobytes()


def test_text_coding_roundtrip():
    text = "T=16\nalpha=0.85\n# comment\n"
    assert ckpt.decode_text(ckpt.encode_text(text)) == text
