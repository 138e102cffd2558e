"""Trilinear sampling and pull-back warping of volumes and masks."""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .affine import AffineTransform, apply_point, invert
from .errors import DimensionMismatchError, InputError
from .fields import DisplacementField
from .volume import Landmarks, Mask, Volume

MASK_THRESHOLD = 0.5


def sample_trilinear(v: Volume, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise InputError("sample point must be a finite 3-vector")
    return float(K.sample_points(v.data, x[None])[0])


def _affine_points(dims, t: AffineTransform) -> np.ndarray:
    return apply_point(t, K.lattice(dims))


def _field_points(d: DisplacementField) -> np.ndarray:
    return K.lattice(d.dims) + d.data.reshape(-1, 3)


def _moved_landmarks(v: Volume, t: AffineTransform):
    if v.landmarks is None:
        return None
    try:
        pts = apply_point(invert(t), v.landmarks.array())
    except ArithmeticError:
        return None
    if np.any(pts < 0) or np.any(pts >= np.array(v.dims)):
        return None
    return Landmarks.from_array(pts)


def warp_affine(v: Volume, t: AffineTransform) -> Volume:
    """``out(x) = v(t(x))`` on the lattice of ``v``.

    Landmarks, when present and still inside the grid, are carried to the
    output frame through ``t``'s inverse.
    """
    out = K.sample_points(v.data, _affine_points(v.dims, t)).reshape(v.dims)
    return Volume(out, v.voxel_size, v.ga_days, _moved_landmarks(v, t))


def warp_field(v: Volume, d: DisplacementField) -> Volume:
    """``out(x) = v(x + d(x))``."""
    if tuple(d.dims) != tuple(v.dims):
        raise DimensionMismatchError(f"field dims {d.dims} != volume dims {v.dims}")
    out = K.sample_points(v.data, _field_points(d)).reshape(v.dims)
    return Volume(out, v.voxel_size, v.ga_days)


def warp_points(arr: np.ndarray, pts: np.ndarray, out_dims) -> np.ndarray:
    return K.sample_points(arr, pts).reshape(tuple(out_dims))


def warp_mask(m: Mask, transform) -> Mask:
    """Warp a mask as a float volume, then threshold at 0.5."""
    if isinstance(transform, AffineTransform):
        pts = _affine_points(m.dims, transform)
    elif isinstance(transform, DisplacementField):
        if tuple(transform.dims) != tuple(m.dims):
            raise DimensionMismatchError(f"field dims {transform.dims} != mask dims {m.dims}")
        pts = _field_points(transform)
    else:
        raise InputError(f"cannot warp a mask by {type(transform).__name__}")
    vals = K.sample_points(m.data.astype(np.float64), pts).reshape(m.dims)
    return Mask(vals >= MASK_THRESHOLD, m.voxel_size)
