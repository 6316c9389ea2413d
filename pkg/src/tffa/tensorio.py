"""On-disk tensor format (TFT1), spatial grids and dataset manifests.

A TFT1 file is laid out as::

    b"TFT1" | dtype code (u8: 1=f32, 2=f64) | ndim (u8) | ndim x u64 LE dims | payload

The payload is the row-major little-endian array. Everything read back is
widened to float64, which is the working precision of the package.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"TFT1"
FORMAT_VERSION = "1"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {"f32": 1, "f64": 2}


class TensorFormatError(ValueError):
    """Raised for malformed TFT1 files."""


class DatasetError(ValueError):
    """Raised when a manifest or the scans it points to are inconsistent."""


def write_tensor(path, tensor, dtype="f64"):
    arr = np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite values")
    if dtype not in _CODES:
        raise ValueError(f"dtype must be one of {sorted(_CODES)}, got {dtype!r}")
    code = _CODES[dtype]
    if arr.ndim > 255:
        raise ValueError("too many dimensions for TFT1")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    off = 6 + 8 * ndim
    if len(raw) < off:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 6)
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    need = off + count * dt.itemsize
    if len(raw) < need:
        raise TensorFormatError(
            f"{path}: truncated payload ({len(raw) - off} of {need - off} bytes)"
        )
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(np.float64)


@dataclass(frozen=True)
class SpatialGrid:
    """Regular partition of the unit cube, optionally restricted by a mask.

    Cell ``m`` (zero-based multi-index) along axis ``d`` has centre
    ``(m_d + 0.5) / M_d``. Active voxels are ordered lexicographically.
    """

    dims: tuple
    mask: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 1:
            raise ValueError("grid needs at least one dimension")
        if any(d < 2 for d in dims):
            raise ValueError(f"every grid dimension must be >= 2, got {dims}")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != dims:
                raise ValueError(f"mask shape {mask.shape} does not match dims {dims}")
            if not mask.any():
                raise ValueError("mask has no active voxels")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_active(self) -> int:
        return self.n_voxels if self.mask is None else int(self.mask.sum())

    def active_flat(self) -> np.ndarray:
        """Flat (C-order) indices of the active voxels, ascending."""
        if self.mask is None:
            return np.arange(self.n_voxels)
        return np.flatnonzero(self.mask.ravel())

    def active_indices(self) -> np.ndarray:
        """(M_active, D) integer multi-indices of the active voxels."""
        return np.stack(np.unravel_index(self.active_flat(), self.dims), axis=1)

    def centers(self) -> np.ndarray:
        """(M_active, D) cell centres in the unit cube."""
        return (self.active_indices() + 0.5) / np.asarray(self.dims, dtype=float)

    def linearize(self, multi_index) -> int:
        flat = int(np.ravel_multi_index(tuple(int(i) for i in multi_index), self.dims))
        pos = np.searchsorted(self.active_flat(), flat)
        act = self.active_flat()
        if pos >= act.size or act[pos] != flat:
            raise KeyError(f"{tuple(multi_index)} is not an active voxel")
        return int(pos)

    def unlinearize(self, row: int) -> tuple:
        flat = self.active_flat()[row]
        return tuple(int(i) for i in np.unravel_index(flat, self.dims))

    def to_volume(self, values, fill=0.0) -> np.ndarray:
        """Scatter a vector (or trailing-axis stack) of active values onto the full grid."""
        values = np.asarray(values, dtype=float)
        out = np.full((self.n_voxels,) + values.shape[1:], fill, dtype=float)
        out[self.active_flat()] = values
        return out.reshape(self.dims + values.shape[1:])

    def from_volume(self, volume) -> np.ndarray:
        volume = np.asarray(volume, dtype=float)
        flat = volume.reshape((self.n_voxels,) + volume.shape[self.ndim:])
        return flat[self.active_flat()]

    def with_mask(self, mask) -> "SpatialGrid":
        return SpatialGrid(self.dims, mask)

    def same_as(self, other: "SpatialGrid") -> bool:
        if self.dims != other.dims:
            return False
        if self.mask is None or other.mask is None:
            return self.mask is None and other.mask is None
        return bool(np.array_equal(self.mask, other.mask))


@dataclass(frozen=True)
class ScanTensor:
    """One subject's observation: active voxels by time points."""

    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("scan values must be (M_active, J)")
        if vals.shape[0] != self.grid.n_active:
            raise ValueError(
                f"scan has {vals.shape[0]} rows but grid has {self.grid.n_active} active voxels"
            )
        if vals.shape[1] < 1:
            raise ValueError("scan needs at least one time point")
        if not np.all(np.isfinite(vals)):
            raise ValueError("scan contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_time(self) -> int:
        return self.values.shape[1]


@dataclass
class DatasetManifest:
    scan_paths: list
    dims: tuple
    n_time: int
    mask_path: Optional[str] = None
    format_version: str = FORMAT_VERSION

    @property
    def n_subjects(self) -> int:
        return len(self.scan_paths)

    def grid(self, base_dir=None) -> SpatialGrid:
        mask = None
        if self.mask_path is not None:
            mask = read_tensor(_resolve(self.mask_path, base_dir)) > 0.5
        return SpatialGrid(tuple(self.dims), mask)

    def to_json(self) -> dict:
        grid = {"dims": list(self.dims)}
        if self.mask_path is not None:
            grid["mask_path"] = self.mask_path
        return {
            "version": self.format_version,
            "grid": grid,
            "n_time": int(self.n_time),
            "scans": list(self.scan_paths),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            grid = obj["grid"]
            return cls(
                scan_paths=list(obj["scans"]),
                dims=tuple(int(d) for d in grid["dims"]),
                n_time=int(obj["n_time"]),
                mask_path=grid.get("mask_path"),
                format_version=str(obj.get("version", FORMAT_VERSION)),
            )
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed manifest: {exc}") from exc


def _resolve(path, base_dir):
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    return p


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2)


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        return DatasetManifest.from_json(json.load(fh))


def load_dataset(manifest: DatasetManifest, base_dir=None) -> list:
    """Read and validate every scan listed in ``manifest``.

    Relative paths resolve against ``base_dir``. No centering is applied.
    """
    if manifest.n_subjects < 1:
        raise DatasetError("manifest lists no scans (n >= 1 required)")
    grid = manifest.grid(base_dir)
    scans = []
    for path in manifest.scan_paths:
        vals = read_tensor(_resolve(path, base_dir))
        if vals.ndim != 2 or vals.shape[0] != grid.n_active:
            raise DatasetError(
                f"{path}: shape {vals.shape} does not match grid with {grid.n_active} active voxels"
            )
        if vals.shape[1] != manifest.n_time:
            raise DatasetError(
                f"{path}: J mismatch ({vals.shape[1]} vs manifest {manifest.n_time})"
            )
        scans.append(ScanTensor(grid, vals))
    return scans


def write_dataset(scans: Sequence[ScanTensor], out_dir, dtype="f64", prefix="scan") -> DatasetManifest:
    """Write scans (and the grid mask, if any) plus ``manifest.json`` into ``out_dir``."""
    if not scans:
        raise DatasetError("no scans to write")
    os.makedirs(out_dir, exist_ok=True)
    grid = scans[0].grid
    paths = []
    for i, scan in enumerate(scans):
        if not scan.grid.same_as(grid) or scan.n_time != scans[0].n_time:
            raise DatasetError(f"scan {i} does not share the grid / J of scan 0")
        name = f"{prefix}_{i:04d}.tft"
        write_tensor(Path(out_dir) / name, scan.values, dtype)
        paths.append(name)
    mask_path = None
    if grid.mask is not None:
        mask_path = "mask.tft"
        write_tensor(Path(out_dir) / mask_path, grid.mask.astype(float), "f32")
    manifest = DatasetManifest(paths, grid.dims, scans[0].n_time, mask_path)
    save_manifest(manifest, Path(out_dir) / "manifest.json")
    return manifest
