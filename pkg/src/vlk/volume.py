"""Volume grids and the JSON + raw on-disk format.

Arrays are indexed ``data[x, y, z]``. On disk the samples are stored x-fastest,
i.e. the flat index of voxel (x, y, z) is ``x + nx * (y + ny * z)``, which is
numpy's Fortran order for an array of shape (nx, ny, nz).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import numpy as np

CLASS_NAMES = (
    "background",
    "BA",
    "RICA",
    "LICA",
    "RMCA",
    "LMCA",
    "RACA",
    "LACA",
    "RPCA",
    "LPCA",
    "non-annotated",
)
NUM_CLASSES = len(CLASS_NAMES)
BACKGROUND = 0
NON_ANNOTATED = 10
VESSEL_LABELS = tuple(range(1, 10))

_DTYPES = {"uint8": np.dtype("<u1"), "float32": np.dtype("<f4")}
HEADER_KEYS = ("dims", "spacing", "dtype", "order", "endianness")


class VolumeError(ValueError):
    """A volume violates one of its invariants."""


class VolumeFormatError(VolumeError):
    """An on-disk volume is missing, malformed or inconsistent."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class Volume:
    """Immutable 3D scalar grid with physical spacing in millimetres."""

    __slots__ = ("data", "spacing")

    def __init__(self, data, spacing: Sequence[float] = (1.0, 1.0, 1.0)):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {arr.shape}")
        if any(n < 1 for n in arr.shape):
            raise VolumeError(f"volume dims must be positive, got {arr.shape}")
        if arr.dtype == np.uint8 or arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        elif arr.dtype == np.float32:
            pass
        else:
            raise VolumeError(f"unsupported dtype {arr.dtype}; expected uint8 or float32")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive reals, got {spacing}")
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    def __setattr__(self, name, value):
        raise AttributeError("Volume is immutable")

    @classmethod
    def from_flat(cls, dims, flat, spacing=(1.0, 1.0, 1.0), dtype=None) -> "Volume":
        """Build a volume from x-fastest flat samples."""
        dims = tuple(int(n) for n in dims)
        flat = np.asarray(flat, dtype=dtype)
        if len(dims) != 3 or any(n < 1 for n in dims):
            raise VolumeError(f"dims must be a positive integer triple, got {dims}")
        expected = dims[0] * dims[1] * dims[2]
        if flat.ndim != 1 or flat.size != expected:
            raise VolumeError(f"data length {flat.size} does not match dims {dims} (expected {expected})")
        return cls(flat.reshape(dims, order="F"), spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def dtype(self) -> str:
        return "uint8" if self.data.dtype == np.uint8 else "float32"

    def flat(self) -> np.ndarray:
        """Samples in x-fastest order."""
        return self.data.ravel(order="F")

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self):
        return hash((self.dims, self.spacing, self.dtype, self.data.tobytes()))

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing}, dtype={self.dtype})"


def linear_index(x, y, z, dims):
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


def _base(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def header_path(path) -> Path:
    b = _base(path)
    return b.with_name(b.name + ".json")


def raw_path(path) -> Path:
    b = _base(path)
    return b.with_name(b.name + ".raw")


def write_volume(v: Volume, path) -> None:
    """Write ``<path>.json`` and ``<path>.raw``."""
    if not isinstance(v, Volume):
        raise VolumeError(f"expected a Volume, got {type(v).__name__}")
    hdr = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": v.dtype,
        "order": "x-fastest",
        "endianness": "little",
    }
    payload = v.flat().astype(_DTYPES[v.dtype], copy=False).tobytes()
    hp, rp = header_path(path), raw_path(path)
    try:
        with open(rp, "wb") as fh:
            fh.write(payload)
        with open(hp, "w", encoding="utf-8") as fh:
            json.dump(hdr, fh)
    except OSError as exc:
        raise VolumeFormatError(path, f"cannot write volume: {exc}") from exc


def read_volume(path) -> Volume:
    hp, rp = header_path(path), raw_path(path)
    try:
        with open(hp, encoding="utf-8") as fh:
            hdr = json.load(fh)
    except FileNotFoundError as exc:
        raise VolumeFormatError(hp, "header file not found") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(hp, f"malformed JSON header: {exc}") from exc
    except OSError as exc:
        raise VolumeFormatError(hp, f"cannot read header: {exc}") from exc

    if not isinstance(hdr, dict):
        raise VolumeFormatError(hp, "header must be a JSON object")
    missing = [k for k in HEADER_KEYS if k not in hdr]
    if missing:
        raise VolumeFormatError(hp, f"header missing keys {missing}")
    if hdr["order"] != "x-fastest":
        raise VolumeFormatError(hp, f"unsupported order {hdr['order']!r}")
    if hdr["endianness"] != "little":
        raise VolumeFormatError(hp, f"unsupported endianness {hdr['endianness']!r}")
    if hdr["dtype"] not in _DTYPES:
        raise VolumeFormatError(hp, f"unknown dtype {hdr['dtype']!r}")
    dims, spacing = hdr["dims"], hdr["spacing"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in dims)
    ):
        raise VolumeFormatError(hp, f"invalid dims {dims!r}")
    if (
        not isinstance(spacing, list)
        or len(spacing) != 3
        or not all(isinstance(s, (int, float)) and not isinstance(s, bool) and s > 0 for s in spacing)
    ):
        raise VolumeFormatError(hp, f"invalid spacing {spacing!r}")

    dt = _DTYPES[hdr["dtype"]]
    expected = dims[0] * dims[1] * dims[2] * dt.itemsize
    try:
        size = os.path.getsize(rp)
        if size != expected:
            raise VolumeFormatError(rp, f"raw length {size} bytes does not match dims {dims} ({expected} bytes)")
        flat = np.fromfile(rp, dtype=dt)
    except FileNotFoundError as exc:
        raise VolumeFormatError(rp, "raw file not found") from exc
    except OSError as exc:
        raise VolumeFormatError(rp, f"cannot read raw data: {exc}") from exc
    return Volume.from_flat(dims, flat.astype(dt.newbyteorder("="), copy=False), spacing)


def require_same_dims(a: Volume, b: Volume, what="volumes"):
    if a.dims != b.dims:
        raise VolumeError(f"shape mismatch between {what}: {a.dims} vs {b.dims}")


def check_labels(v: Volume, num_classes=NUM_CLASSES):
    if v.dtype != "uint8":
        raise VolumeError("label volume must be uint8")
    if v.data.size and int(v.data.max()) >= num_classes:
        raise VolumeError(f"label volume contains id {int(v.data.max())} outside [0, {num_classes - 1}]")


def check_binary(v: Volume, what="segmentation"):
    if v.dtype != "uint8":
        raise VolumeError(f"{what} must be uint8")
    if v.data.size and int(v.data.max()) > 1:
        raise VolumeError(f"{what} must be binary (0/1), found value {int(v.data.max())}")
