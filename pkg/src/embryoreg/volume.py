"""Volumes, masks, their on-disk format, preprocessing and binary morphology.

Arrays are indexed ``data[x0, x1, x2]`` and points are given in the same voxel
index order.  On disk the payload is written x0-fastest (Fortran order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError, InputError

VOLUME_DTYPE = "float32"
MASK_DTYPE = "uint8"


@dataclass(frozen=True)
class Landmarks:
    """Crown and rump points in voxel coordinates."""

    crown: tuple
    rump: tuple

    def __post_init__(self):
        crown = tuple(float(c) for c in self.crown)
        rump = tuple(float(c) for c in self.rump)
        if len(crown) != 3 or len(rump) != 3:
            raise InputError("landmarks must be 3D points")
        if not np.all(np.isfinite(crown + rump)):
            raise InputError("landmarks must be finite")
        object.__setattr__(self, "crown", crown)
        object.__setattr__(self, "rump", rump)

    @classmethod
    def from_array(cls, arr) -> "Landmarks":
        arr = np.asarray(arr, dtype=float).reshape(2, 3)
        return cls(tuple(arr[0]), tuple(arr[1]))

    def array(self) -> np.ndarray:
        return np.array([self.crown, self.rump], dtype=float)

    def to_json(self) -> dict:
        return {"crown": list(self.crown), "rump": list(self.rump)}

    @classmethod
    def from_json(cls, obj) -> Optional["Landmarks"]:
        if obj is None:
            return None
        return cls(obj["crown"], obj["rump"])


def _check_dims(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InputError(f"dims must be 3 positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar grid with isotropic voxel size (mm)."""

    data: np.ndarray
    voxel_size: float = 1.0
    ga_days: Optional[int] = None
    landmarks: Optional[Landmarks] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise InputError(f"volume data must be 3D, got shape {data.shape}")
        _check_dims(data.shape)
        if not np.all(np.isfinite(data)):
            raise InputError("volume data contains non-finite values")
        if not (np.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise InputError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.ga_days is not None and int(self.ga_days) < 0:
            raise InputError("ga_days must be non-negative")
        if self.landmarks is not None:
            lm = self.landmarks.array()
            if np.any(lm < 0) or np.any(lm >= np.array(data.shape)):
                raise InputError(f"landmarks {lm.tolist()} outside grid {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if self.ga_days is not None:
            object.__setattr__(self, "ga_days", int(self.ga_days))

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def with_data(self, data, **changes) -> "Volume":
        return replace(self, data=data, **changes)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary grid; shares the lattice of a paired Volume."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype != bool:
            if not np.all((raw == 0) | (raw == 1)):
                raise InputError("mask values must be 0 or 1")
        data = raw.astype(bool)
        if data.ndim != 3:
            raise InputError(f"mask data must be 3D, got shape {data.shape}")
        _check_dims(data.shape)
        if not (np.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise InputError(f"voxel_size must be positive, got {self.voxel_size}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def complement(self) -> "Mask":
        return Mask(~self.data, self.voxel_size)


# --------------------------------------------------------------------------
# File format: JSON header line, newline, raw little-endian payload.


def _write_blob(path, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(b"\n")
        fh.write(payload)


def _read_blob(path):
    raw = Path(path).read_bytes()
    split = raw.find(b"\n")
    if split < 0:
        raise InputError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:split].decode("utf-8"))
    except ValueError as exc:
        raise InputError(f"{path}: bad header ({exc})") from None
    return header, raw[split + 1:]


def _header(dims, voxel_size, dtype, ga_days=None, landmarks=None) -> dict:
    return {
        "dims": [int(d) for d in dims],
        "voxel_size_mm": float(voxel_size),
        "ga_days": None if ga_days is None else int(ga_days),
        "landmarks": None if landmarks is None else landmarks.to_json(),
        "dtype": dtype,
    }


def save_volume(path, vol: Volume) -> None:
    header = _header(vol.dims, vol.voxel_size, VOLUME_DTYPE, vol.ga_days, vol.landmarks)
    payload = vol.data.astype("<f4").ravel(order="F").tobytes()
    _write_blob(path, header, payload)


def load_volume(path) -> Volume:
    header, payload = _read_blob(path)
    if header.get("dtype") != VOLUME_DTYPE:
        raise InputError(f"{path}: expected dtype {VOLUME_DTYPE}, got {header.get('dtype')}")
    dims = _check_dims(header["dims"])
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != int(np.prod(dims)):
        raise InputError(f"{path}: payload has {arr.size} values, expected {np.prod(dims)}")
    data = arr.reshape(dims, order="F").astype(np.float64)
    return Volume(data, header["voxel_size_mm"], header.get("ga_days"),
                  Landmarks.from_json(header.get("landmarks")))


def save_mask(path, mask: Mask, ga_days=None, landmarks=None) -> None:
    header = _header(mask.dims, mask.voxel_size, MASK_DTYPE, ga_days, landmarks)
    payload = mask.data.astype("u1").ravel(order="F").tobytes()
    _write_blob(path, header, payload)


def load_mask(path) -> Mask:
    header, payload = _read_blob(path)
    if header.get("dtype") != MASK_DTYPE:
        raise InputError(f"{path}: expected dtype {MASK_DTYPE}, got {header.get('dtype')}")
    dims = _check_dims(header["dims"])
    arr = np.frombuffer(payload, dtype="u1")
    if arr.size != int(np.prod(dims)):
        raise InputError(f"{path}: payload has {arr.size} values, expected {np.prod(dims)}")
    return Mask(arr.reshape(dims, order="F"), header["voxel_size_mm"])


# --------------------------------------------------------------------------
# Preprocessing


def _pad_offsets(dims):
    side = max(dims)
    return side, np.array([(side - d) // 2 for d in dims])


def _resample_axes(side, target):
    # output index k sits at padded index k * side / target
    return np.arange(target) * (side / target)


def preprocess(v: Volume, target_dim: int = 64) -> Volume:
    """Zero-pad to a cube of side ``max(dims)`` and resample to ``target_dim``³.

    Intensities are resampled trilinearly.  The voxel size is scaled so the
    physical extent of the padded cube is preserved, and landmarks follow the
    same pad-then-scale map.
    """
    target_dim = int(target_dim)
    if target_dim < 2:
        raise InputError("target_dim must be >= 2")
    if not np.all(np.isfinite(v.data)):
        raise InputError("volume data contains non-finite values")
    side, offset = _pad_offsets(v.dims)
    scale = target_dim / side
    landmarks = None
    if v.landmarks is not None:
        landmarks = Landmarks.from_array((v.landmarks.array() + offset) * scale)
    if side == target_dim and all(d == side for d in v.dims):
        return v.with_data(v.data, landmarks=landmarks)
    padded = np.zeros((side,) * 3)
    sl = tuple(slice(o, o + d) for o, d in zip(offset, v.dims))
    padded[sl] = v.data
    pos = _resample_axes(side, target_dim)
    coords = np.meshgrid(pos, pos, pos, indexing="ij")
    out = ndimage.map_coordinates(padded, coords, order=1, mode="nearest")
    return Volume(out, v.voxel_size * side / target_dim, v.ga_days, landmarks)


def preprocess_mask(m: Mask, target_dim: int = 64) -> Mask:
    """Mask counterpart of :func:`preprocess` using nearest-neighbour sampling."""
    target_dim = int(target_dim)
    if target_dim < 2:
        raise InputError("target_dim must be >= 2")
    side, offset = _pad_offsets(m.dims)
    if side == target_dim and all(d == side for d in m.dims):
        return m
    padded = np.zeros((side,) * 3, dtype=bool)
    sl = tuple(slice(o, o + d) for o, d in zip(offset, m.dims))
    padded[sl] = m.data
    idx = np.clip(np.rint(_resample_axes(side, target_dim)).astype(int), 0, side - 1)
    out = padded[np.ix_(idx, idx, idx)]
    return Mask(out, m.voxel_size * side / target_dim)


# --------------------------------------------------------------------------
# Morphology


def ball(radius: int) -> np.ndarray:
    """Discrete ball {o : ||o||_2 <= radius} as a boolean structuring element."""
    r = int(radius)
    ax = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return x * x + y * y + z * z <= r * r


def _check_radius(radius):
    if int(radius) != radius or radius < 1:
        raise InputError(f"radius must be a positive integer, got {radius}")
    return int(radius)


def dilate(m: Mask, radius: int = 1) -> Mask:
    r = _check_radius(radius)
    out = ndimage.binary_dilation(m.data, structure=ball(r), border_value=0)
    return Mask(out, m.voxel_size)


def erode(m: Mask, radius: int = 1) -> Mask:
    # border_value=0: outside the grid counts as background
    r = _check_radius(radius)
    out = ndimage.binary_erosion(m.data, structure=ball(r), border_value=0)
    return Mask(out, m.voxel_size)


def mask_union(masks: Sequence[Mask]) -> Mask:
    masks = list(masks)
    if not masks:
        raise InputError("mask_union needs at least one mask")
    dims = masks[0].dims
    out = np.zeros(dims, dtype=bool)
    for m in masks:
        if m.dims != dims:
            raise DimensionMismatchError(f"mask dims {m.dims} != {dims}")
        out |= m.data
    return Mask(out, masks[0].voxel_size)


def check_same_dims(*items):
    dims = items[0].dims
    for it in items[1:]:
        if tuple(it.dims) != tuple(dims):
            raise DimensionMismatchError(f"dims {tuple(it.dims)} != {tuple(dims)}")
    return tuple(dims)
