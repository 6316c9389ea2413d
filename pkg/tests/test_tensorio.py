import json
import struct

import numpy as np
import pytest

from tffa.tensorio import (DatasetError, DatasetManifest, ScanTensor, SpatialGrid, TensorFormatError,
                           load_dataset, load_manifest, read_tensor, write_dataset, write_tensor)


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_roundtrip(tmp_path, rng, dtype):
    a = rng.standard_normal((3, 4, 5))
    write_tensor(tmp_path / "a.tft", a, dtype)
    b = read_tensor(tmp_path / "a.tft")
    assert b.dtype == np.float64 and b.shape == a.shape
    tol = 1e-6 if dtype == "f32" else 0.0
    assert np.max(np.abs(a - b)) <= tol * np.max(np.abs(a))


def test_header_layout(tmp_path):
    write_tensor(tmp_path / "a.tft", np.arange(6.0).reshape(2, 3))
    raw = (tmp_path / "a.tft").read_bytes()
    assert raw[:4] == b"TFT1"
    assert raw[4] == 2 and raw[5] == 2
    assert struct.unpack_from("<2Q", raw, 6) == (2, 3)
    assert np.frombuffer(raw[22:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_bad_magic(tmp_path):
    (tmp_path / "x.tft").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(tmp_path / "x.tft")


def test_unknown_dtype(tmp_path):
    (tmp_path / "x.tft").write_bytes(b"TFT1" + bytes([7, 1]) + struct.pack("<Q", 1) + bytes(8))
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(tmp_path / "x.tft")


def test_truncated_payload(tmp_path):
    write_tensor(tmp_path / "a.tft", np.ones((4, 4)))
    raw = (tmp_path / "a.tft").read_bytes()
    (tmp_path / "b.tft").write_bytes(raw[:-8])
    with pytest.raises(TensorFormatError, match="truncated"):
        read_tensor(tmp_path / "b.tft")


def test_non_finite_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "a.tft", np.array([1.0, np.nan]))


def test_grid_indexing():
    g = SpatialGrid((4, 5))
    assert g.n_active == 20
    assert g.linearize((2, 3)) == 13
    assert g.unlinearize(13) == (2, 3)
    assert np.allclose(g.centers()[0], [0.125, 0.1])


def test_masked_grid_roundtrip(rng):
    mask = np.zeros((6, 6), bool)
    mask[1:4, 2:6] = True
    g = SpatialGrid((6, 6), mask)
    v = rng.standard_normal(g.n_active)
    vol = g.to_volume(v)
    assert np.all(vol[~mask] == 0)
    assert np.array_equal(g.from_volume(vol), v)
    with pytest.raises(KeyError):
        g.linearize((0, 0))


def test_scan_validation():
    g = SpatialGrid((3, 3))
    with pytest.raises(ValueError):
        ScanTensor(g, np.zeros((8, 4)))
    with pytest.raises(ValueError):
        ScanTensor(g, np.full((9, 4), np.inf))


def test_dataset_roundtrip(tmp_path, rng):
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    g = SpatialGrid((4, 4), mask)
    scans = [ScanTensor(g, rng.standard_normal((15, 7))) for _ in range(3)]
    write_dataset(scans, tmp_path)
    man = load_manifest(tmp_path / "manifest.json")
    assert man.n_subjects == 3 and man.n_time == 7
    back = load_dataset(man, tmp_path)
    assert back[0].grid.same_as(g)
    for a, b in zip(scans, back):
        assert np.array_equal(a.values, b.values)
    obj = json.loads((tmp_path / "manifest.json").read_text())
    assert set(obj) == {"version", "grid", "n_time", "scans"}


def test_dataset_errors(tmp_path, rng):
    g = SpatialGrid((3, 3))
    write_dataset([ScanTensor(g, rng.standard_normal((9, 5)))], tmp_path)
    man = load_manifest(tmp_path / "manifest.json")
    bad = DatasetManifest(man.scan_paths, man.dims, 6)
    with pytest.raises(DatasetError, match="J mismatch"):
        load_dataset(bad, tmp_path)
    with pytest.raises(DatasetError):
        load_dataset(DatasetManifest([], (3, 3), 5), tmp_path)
