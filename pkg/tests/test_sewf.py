import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from percept.sewf import (SewfError, config_to_tensor, load_tensors, save_tensors,
                          tensor_to_config)


def test_round_trip_bit_exact(tmp_path, rng):
    tensors = {
        "a.weight": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "a.bias": rng.standard_normal(4).astype(np.float64),
        "scalar": np.float64(2.5) * np.ones(()),  # 0-d
        "empty_name_ok": np.zeros((2, 0, 3), dtype=np.float32),
    }
    path = tmp_path / "m.sewf"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)  # insertion order preserved
    for name, arr in tensors.items():
        assert back[name].dtype == arr.dtype
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name], arr)


def test_resave_byte_identical(tmp_path, rng):
    tensors = {"w": rng.standard_normal((2, 3)).astype(np.float32)}
    a, b = tmp_path / "a.sewf", tmp_path / "b.sewf"
    save_tensors(a, tensors)
    save_tensors(b, load_tensors(a))
    assert a.read_bytes() == b.read_bytes()


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(SewfError):
        save_tensors(tmp_path / "x.sewf", {"w": np.zeros(3, dtype=np.int32)})


def test_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.sewf"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(SewfError):
        load_tensors(p)


def test_truncation_names_tensor(tmp_path, rng):
    p = tmp_path / "x.sewf"
    save_tensors(p, {"first": np.zeros(2, dtype=np.float32),
                     "second": rng.standard_normal(100).astype(np.float32)})
    blob = p.read_bytes()
    p.write_bytes(blob[:-50])
    with pytest.raises(SewfError, match="second"):
        load_tensors(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "x.sewf"
    save_tensors(p, {"w": np.zeros(2, dtype=np.float32)})
    p.write_bytes(p.read_bytes() + b"junk")
    with pytest.raises(SewfError):
        load_tensors(p)


def test_config_embedding_round_trip():
    cfg = {"layers": [[8, 6, 3]], "rate": 16000, "name": "x"}
    assert tensor_to_config(config_to_tensor(cfg)) == cfg


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.text(alphabet="abcdef_.0123456789", min_size=1, max_size=12),
                          st.lists(st.integers(0, 5), min_size=0, max_size=3),
                          st.booleans()),
                min_size=1, max_size=5, unique_by=lambda t: t[0]),
       st.integers(0, 2 ** 31 - 1))
def test_round_trip_property(tmp_path_factory, specs, seed):
    r = np.random.default_rng(seed)
    tensors = {}
    for name, shape, f64 in specs:
        dtype = np.float64 if f64 else np.float32
        tensors[name] = r.standard_normal(shape).astype(dtype)
    path = tmp_path_factory.mktemp("sewf") / "t.sewf"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype
        assert np.array_equal(back[name], tensors[name])
