"""12-parameter affine transforms in voxel coordinates.

A transform maps atlas-space points to image-space points.  Warping an image
``I`` by ``t`` means ``out(x) = I(t(x))`` (pull-back), so warping by ``a`` and
then by ``b`` equals warping once by ``compose(a, b)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NonInvertibleError, NumericalError

IDENTITY_PARAMS = np.array([1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0], dtype=float)
_SINGULAR_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """4x4 homogeneous matrix with last row fixed to (0, 0, 0, 1)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise InputError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InputError("affine matrix must be finite")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InputError("last row of an affine matrix must be (0, 0, 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def params(self) -> np.ndarray:
        return matrix_to_params(self)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def from_linear(cls, linear, translation=(0.0, 0.0, 0.0)) -> "AffineTransform":
        m = np.eye(4)
        m[:3, :3] = linear
        m[:3, 3] = translation
        return cls(m)

    def to_json(self) -> dict:
        return {"matrix": [float(v) for v in self.matrix.ravel()]}

    @classmethod
    def from_json(cls, obj) -> "AffineTransform":
        vals = np.asarray(obj["matrix"], dtype=float)
        if vals.size != 16:
            raise InputError("transform JSON needs 16 matrix entries")
        return cls(vals.reshape(4, 4))


def params_to_matrix(p) -> AffineTransform:
    """Top three rows of the matrix, row-major, from a 12-vector."""
    p = np.asarray(p, dtype=float)
    if p.shape != (12,):
        raise InputError(f"affine params must be a 12-vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InputError("affine params must be finite")
    m = np.eye(4)
    m[:3, :] = p.reshape(3, 4)
    return AffineTransform(m)


def matrix_to_params(t: AffineTransform) -> np.ndarray:
    return t.matrix[:3, :].ravel().copy()


def apply_point(t: AffineTransform, x) -> np.ndarray:
    """Apply to one point (shape (3,)) or to many points (shape (n, 3))."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("points must be finite")
    return x @ t.linear.T + t.translation


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """``compose(a, b)(x) == a(b(x))``."""
    return AffineTransform(outer.matrix @ inner.matrix)


def invert(t: AffineTransform) -> AffineTransform:
    det = np.linalg.det(t.linear)
    if not abs(det) > _SINGULAR_TOL:
        raise NonInvertibleError(f"affine linear block is singular (det={det:.3e})")
    lin_inv = np.linalg.inv(t.linear)
    return AffineTransform.from_linear(lin_inv, -lin_inv @ t.translation)


def scaling_factors(t: AffineTransform) -> np.ndarray:
    """Singular values of the linear block, descending."""
    try:
        s = np.linalg.svd(t.linear, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from None
    return s


def rotation_matrix(axis, angle) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def similarity(scale, rotation, translation, center=(0.0, 0.0, 0.0)) -> AffineTransform:
    """``x -> center + scale * R (x - center) + translation``."""
    c = np.asarray(center, dtype=float)
    lin = float(scale) * np.asarray(rotation, dtype=float)
    return AffineTransform.from_linear(lin, c - lin @ c + np.asarray(translation, dtype=float))


def save_transform(path, t: AffineTransform) -> None:
    with open(path, "w") as fh:
        json.dump(t.to_json(), fh, indent=2)
        fh.write("\n")


def load_transform(path) -> AffineTransform:
    with open(path) as fh:
        return AffineTransform.from_json(json.load(fh))
