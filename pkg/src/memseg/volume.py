"""Core volumetric data types and bit-exact VOL3 file I/O.

Volumes are 3D grids in (z, y, x) axis order with x fastest (C order), so
z-slices are contiguous.  Spacing is micrometers per voxel along each axis
and may be anisotropic.  Instances are treated as immutable after
construction and can be shared freely between pipeline stages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VOL3"
VERSION = 1

# on-disk dtype codes
_DTYPE_CODES = {1: np.float32, 2: np.uint32, 3: np.uint8, 4: np.uint16}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}

_HEADER = struct.Struct("<4sIB3Q3d")  # magic, version, dtype, dims zyx, spacing zyx

# refuse dims whose payload would not be addressable
_MAX_VOXELS = 2**62


class DataError(ValueError):
    """Invalid input data (bad file, bad volume, inconsistent arguments)."""


class VolumeFormatError(DataError):
    """VOL3 file violates the format specification."""


def linear_index(z, y, x, dims):
    """Row-major linear index for dims (Z, Y, X): i = (z*Y + y)*X + x."""
    _, Y, X = dims
    return (z * Y + y) * X + x


def _check_geometry(dims, spacing, data):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise DataError(f"dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise DataError(f"spacing must be three positive finite reals, got {spacing}")
    if data.size != dims[0] * dims[1] * dims[2]:
        raise DataError(
            f"data length {data.size} does not match dims {dims} "
            f"(expected {dims[0] * dims[1] * dims[2]})"
        )
    return dims, spacing


@dataclass(frozen=True)
class ScalarVolume:
    """3D grid of real-valued voxels (raw intensity or probability map).

    data is stored as a C-contiguous (Z, Y, X) array.  float64 data is
    accepted in memory (e.g. distance maps) but is written to disk as
    float32, the only floating VOL3 payload type.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing, self.data)
        if self.data.dtype not in (np.float32, np.float64, np.uint8, np.uint16):
            raise DataError(f"unsupported scalar dtype {self.data.dtype}")
        arr = np.ascontiguousarray(self.data.reshape(dims))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", arr)

    def as_float(self) -> "ScalarVolume":
        """Float view of this volume; integer payloads are rescaled to [0, 1]."""
        if self.data.dtype in (np.float32, np.float64):
            return self
        scale = np.float32(np.iinfo(self.data.dtype).max)
        return ScalarVolume(self.dims, self.spacing, self.data.astype(np.float32) / scale)

    def is_probability_map(self) -> bool:
        d = self.data
        if d.dtype not in (np.float32, np.float64):
            return False
        return bool(np.all(np.isfinite(d)) and d.min() >= 0.0 and d.max() <= 1.0)


@dataclass(frozen=True)
class LabelVolume:
    """3D grid of non-negative integer cell labels; 0 means unassigned."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    num_labels: int = field(default=-1)  # -1: derive from data

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing, self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise DataError(f"label data must be integer, got {self.data.dtype}")
        if self.data.size and int(self.data.min()) < 0:
            raise DataError("label data must be non-negative")
        arr = np.ascontiguousarray(self.data.reshape(dims).astype(np.uint32, copy=False))
        L = int(arr.max()) if self.num_labels < 0 else int(self.num_labels)
        if int(arr.max()) > L:
            raise DataError(f"label data exceeds declared num_labels={L}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "num_labels", L)

    def label_set(self) -> np.ndarray:
        """Sorted labels present in the volume, excluding background 0."""
        u = np.unique(self.data)
        return u[u != 0]


@dataclass(frozen=True)
class VoxelCoord:
    """Voxel index (z, y, x) into an owning volume."""

    z: int
    y: int
    x: int

    def physical(self, spacing) -> tuple[float, float, float]:
        sz, sy, sx = spacing
        return (self.z * sz, self.y * sy, self.x * sx)

    def in_bounds(self, dims) -> bool:
        return 0 <= self.z < dims[0] and 0 <= self.y < dims[1] and 0 <= self.x < dims[2]


Volume = ScalarVolume | LabelVolume


def write_volume(v: Volume, path) -> None:
    """Write a volume to a VOL3 file; read_volume(path) restores it bit-exactly.

    Exception: float64 scalar data is downcast to float32 on disk.
    """
    if isinstance(v, LabelVolume):
        payload = v.data
    elif v.data.dtype == np.float64:
        payload = v.data.astype(np.float32)
    else:
        payload = v.data
    code = _CODE_FOR_DTYPE[payload.dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, *v.dims, *v.spacing)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(payload, dtype=payload.dtype.newbyteorder("<")).tobytes())


def read_volume(path) -> Volume:
    """Read a VOL3 file; dtype code selects ScalarVolume vs LabelVolume."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, dz, dy, dx, sz, sy, sx = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    dims = (dz, dy, dx)
    if any(d < 1 for d in dims) or dz * dy * dx > _MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims {dims} out of addressable range")
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    n = dz * dy * dx
    expect = _HEADER.size + n * dtype.itemsize
    if len(raw) != expect:
        raise VolumeFormatError(
            f"{path}: payload size mismatch (file {len(raw)} bytes, expected {expect})"
        )
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=_HEADER.size)
    data = data.astype(dtype.newbyteorder("="))
    spacing = (sz, sy, sx)
    if code == 2:
        return LabelVolume(dims, spacing, data)
    if code == 1 and np.isnan(data).any():
        raise VolumeFormatError(f"{path}: NaN values in float payload")
    return ScalarVolume(dims, spacing, data)


def import_raw(path, dims, dtype, spacing) -> ScalarVolume:
    """Import a headerless u8/u16 microscope export, rescaled to [0, 1].

    dims is (z, y, x) and must match the file length exactly; dtype is
    "u8" or "u16" (little-endian).
    """
    codes = {"u8": np.uint8, "u16": np.uint16}
    if dtype not in codes:
        raise DataError(f"raw dtype must be u8 or u16, got {dtype!r}")
    dt = np.dtype(codes[dtype]).newbyteorder("<")
    dims = tuple(int(d) for d in dims)
    n = dims[0] * dims[1] * dims[2]
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != n * dt.itemsize:
        raise DataError(
            f"{path}: raw file is {len(raw)} bytes, dims {dims} with {dtype} "
            f"require {n * dt.itemsize}"
        )
    data = np.frombuffer(raw, dtype=dt, count=n).astype(np.float32)
    data /= np.float32(np.iinfo(codes[dtype]).max)
    return ScalarVolume(dims, spacing, data)
