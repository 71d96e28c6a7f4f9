import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occanykit.tensorio import (
    DTYPE_CODES,
    ManifestError,
    TensorFormatError,
    dump_json,
    load_scene_manifest,
    read_tensor,
    write_tensor,
)


def test_f32_vector_byte_count(tmp_path):
    path = tmp_path / "v.tens"
    n = write_tensor(np.array([1, 2, 3], dtype=np.float32), path)
    assert n == 26  # 8 magic + 1 dtype + 1 rank + 4 extent + 12 payload
    assert path.stat().st_size == 26


def test_f64_2x2_payload_length(tmp_path):
    path = tmp_path / "m.tens"
    n = write_tensor(np.zeros((2, 2), dtype=np.float64), path)
    header = 8 + 1 + 1 + 2 * 4
    assert n - header == 32  # 4 elements x 8 bytes


def test_round_trip_identity(tmp_path):
    arr = np.arange(24, dtype=np.int32).reshape(2, 3, 4)
    write_tensor(arr, tmp_path / "a.tens")
    back = read_tensor(tmp_path / "a.tens")
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


@settings(max_examples=40, deadline=None)
@given(
    dtype_code=st.sampled_from(sorted(DTYPE_CODES)),
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_round_trip_property(tmp_path_factory, dtype_code, shape, seed):
    rng = np.random.default_rng(seed)
    dtype = DTYPE_CODES[dtype_code]
    if dtype.kind == "f":
        arr = rng.standard_normal(shape).astype(dtype)
    else:
        arr = rng.integers(0, np.iinfo(dtype).max, size=shape).astype(dtype)
    path = tmp_path_factory.mktemp("rt") / "t.tens"
    write_tensor(arr, path)
    back = read_tensor(path)
    assert back.dtype == np.dtype(dtype)
    assert back.shape == tuple(shape)
    np.testing.assert_array_equal(back, arr)


def test_byte_identical_across_runs(tmp_path):
    arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
    write_tensor(arr, tmp_path / "a.tens")
    write_tensor(arr, tmp_path / "b.tens")
    assert (tmp_path / "a.tens").read_bytes() == (tmp_path / "b.tens").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.tens"
    path.write_bytes(b"BADMAGIC" + b"\x01\x01" + b"\x03\x00\x00\x00" + b"\x00" * 12)
    with pytest.raises(TensorFormatError, match="bad magic"):
        read_tensor(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "bad.tens"
    path.write_bytes(b"OAKTENS1" + bytes([99, 1]) + b"\x01\x00\x00\x00" + b"\x00" * 4)
    with pytest.raises(TensorFormatError, match="unknown dtype"):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    # header claims 2x2 f32 (16 bytes) but only 12 present
    path = tmp_path / "trunc.tens"
    path.write_bytes(
        b"OAKTENS1" + bytes([1, 2]) + np.array([2, 2], "<u4").tobytes() + b"\x00" * 12
    )
    with pytest.raises(TensorFormatError, match="truncated payload"):
        read_tensor(path)


def test_rank_limit(tmp_path):
    with pytest.raises(TensorFormatError, match="rank"):
        write_tensor(np.zeros((1,) * 9, dtype=np.float32), tmp_path / "r9.tens")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(TensorFormatError, match="unsupported dtype"):
        write_tensor(np.zeros(3, dtype=np.int64), tmp_path / "i64.tens")


def _write_minimal_manifest(tmp_path, h=64, w=128, n_frames=2, extra=None):
    for i in range(n_frames):
        write_tensor(np.zeros((h, w, 3), dtype=np.float32), tmp_path / f"f{i}.tens")
    manifest = {
        "frames": [{"image": f"f{i}.tens"} for i in range(n_frames)],
        "resolution": {"H": h, "W": w},
    }
    if extra:
        manifest.update(extra)
    dump_json(manifest, tmp_path / "manifest.json")
    return tmp_path / "manifest.json"


def test_minimal_manifest_loads(tmp_path):
    path = _write_minimal_manifest(tmp_path)
    m = load_scene_manifest(path, patch=8)
    assert len(m.frames) == 2
    assert m.resolution == (64, 128)
    assert m.intrinsics is None and m.grid is None


def test_manifest_divisibility(tmp_path):
    path = _write_minimal_manifest(tmp_path, h=60, w=128)
    with pytest.raises(ManifestError, match="not divisible"):
        load_scene_manifest(path, patch=8)


def test_manifest_empty_frames(tmp_path):
    dump_json({"frames": [], "resolution": {"H": 64, "W": 64}}, tmp_path / "m.json")
    with pytest.raises(ManifestError, match="empty"):
        load_scene_manifest(tmp_path / "m.json")


def test_manifest_missing_field(tmp_path):
    dump_json({"frames": [{"image": "x.tens"}]}, tmp_path / "m.json")
    with pytest.raises(ManifestError, match="resolution"):
        load_scene_manifest(tmp_path / "m.json")


def test_manifest_dangling_path(tmp_path):
    dump_json(
        {"frames": [{"image": "missing.tens"}], "resolution": {"H": 64, "W": 64}},
        tmp_path / "m.json",
    )
    with pytest.raises(ManifestError, match="does not resolve"):
        load_scene_manifest(tmp_path / "m.json")


def test_manifest_with_grid_and_intrinsics(tmp_path):
    path = _write_minimal_manifest(
        tmp_path,
        extra={
            "intrinsics": {"fx": 50.0, "fy": 50.0, "cx": 64.0, "cy": 32.0},
            "grid": {"origin": [0, 0, 0], "voxel": 0.5, "dims": [4, 4, 4]},
        },
    )
    m = load_scene_manifest(path)
    assert m.intrinsics["fx"] == 50.0
    assert m.grid.dims == (4, 4, 4)
