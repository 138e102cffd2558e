"""Dense velocity and displacement fields.

Fields are stored channel-last as ``(D0, D1, D2, 3)`` arrays in voxel units of
their own lattice.  A displacement ``d`` represents the map ``x -> x + d(x)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import DimensionMismatchError, InputError, NumericalError
from .volume import _read_blob, _write_blob, _check_dims

DEFAULT_STEPS = 7


class _Field:
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[3] != 3:
            raise InputError(f"field data must have shape (D0, D1, D2, 3), got {data.shape}")
        _check_dims(data.shape[:3])
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"{type(self).__name__} contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros(tuple(dims) + (3,)))

    @classmethod
    def constant(cls, dims, value):
        return cls(np.broadcast_to(np.asarray(value, dtype=float), tuple(dims) + (3,)))

    def max_norm(self) -> float:
        return float(np.sqrt((self.data ** 2).sum(axis=-1)).max())


@dataclass(frozen=True, eq=False)
class VelocityField(_Field):
    data: np.ndarray


@dataclass(frozen=True, eq=False)
class DisplacementField(_Field):
    data: np.ndarray


# --------------------------------------------------------------------------
# Scaling and squaring, with the intermediate fields kept for the adjoint.


def _check_steps(steps):
    if int(steps) != steps or steps < 1:
        raise InputError(f"steps must be a positive integer, got {steps}")
    return int(steps)


def _compose_arrays(outer, inner, grid):
    inner = np.ascontiguousarray(inner)
    pts = grid + inner.reshape(-1, 3)
    out = np.empty_like(pts)
    K.sample(np.ascontiguousarray(outer), pts, out)
    return inner + out.reshape(inner.shape)


def squaring_forward(v: np.ndarray, steps: int):
    """Return the list ``[d_0, ..., d_steps]`` with ``d_0 = v / 2**steps``."""
    d = np.ascontiguousarray(v / 2.0 ** steps)
    history = [d]
    for _ in range(steps):
        nxt = np.empty_like(d)
        K.self_compose(d, nxt)
        d = nxt
        history.append(d)
    return history


def squaring_backward(history, gout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the velocity given the gradient w.r.t. the final displacement."""
    steps = len(history) - 1
    g = np.ascontiguousarray(gout, dtype=np.float64)
    for k in range(steps, 0, -1):
        gd = np.empty_like(g)
        K.self_compose_backward(history[k - 1], g, gd)
        g = gd
    return g / 2.0 ** steps


def integrate_svf(v: VelocityField, steps: int = DEFAULT_STEPS) -> DisplacementField:
    """Flow of a stationary velocity field by scaling and squaring."""
    steps = _check_steps(steps)
    if not np.all(np.isfinite(v.data)):
        raise NumericalError("velocity field is not finite")
    return DisplacementField(squaring_forward(v.data, steps)[-1])


def invert_svf(v: VelocityField, steps: int = DEFAULT_STEPS) -> DisplacementField:
    """Inverse deformation: the flow of the negated velocity."""
    return integrate_svf(VelocityField(-v.data), steps)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Displacement of ``(id + outer) o (id + inner)``; ``outer`` sampled trilinearly."""
    if outer.dims != inner.dims:
        raise DimensionMismatchError(f"field dims {outer.dims} != {inner.dims}")
    return DisplacementField(_compose_arrays(outer.data, inner.data, K.lattice(inner.dims)))


def jacobian_det(d: DisplacementField) -> np.ndarray:
    """det of the Jacobian of ``id + d``; central differences, one-sided at edges."""
    jac = np.empty(d.dims + (3, 3))
    for c in range(3):
        grads = np.gradient(d.data[..., c], axis=(0, 1, 2))
        for a in range(3):
            jac[..., c, a] = grads[a] + (1.0 if a == c else 0.0)
    return np.linalg.det(jac)


# --------------------------------------------------------------------------
# Lattice resizing (align-corners linear interpolation, separable).


def interp_matrix(n_src: int, n_tgt: int) -> np.ndarray:
    """``(n_tgt, n_src)`` linear interpolation weights, corners aligned."""
    mat = np.zeros((n_tgt, n_src))
    if n_src == 1 or n_tgt == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_tgt) * ((n_src - 1) / (n_tgt - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_src - 2)
    frac = pos - lo
    rows = np.arange(n_tgt)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def apply_separable(arr: np.ndarray, mats) -> np.ndarray:
    """Apply one matrix per spatial axis of a channel-last array."""
    out = arr
    for axis, mat in enumerate(mats):
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
    return np.ascontiguousarray(out)


def apply_separable_adjoint(arr: np.ndarray, mats) -> np.ndarray:
    return apply_separable(arr, [m.T for m in mats])


def unit_factors(src_dims, tgt_dims) -> np.ndarray:
    """Per-component factor converting voxel units of ``src`` into ``tgt``."""
    f = []
    for s, t in zip(src_dims, tgt_dims):
        f.append(1.0 if s == 1 or t == 1 else (t - 1) / (s - 1))
    return np.array(f)


def resize_field(f, dims):
    """Resample a vector field onto another lattice, rescaling its components."""
    dims = _check_dims(dims)
    if tuple(f.dims) == dims:
        return f
    mats = [interp_matrix(s, t) for s, t in zip(f.dims, dims)]
    out = apply_separable(f.data, mats) * unit_factors(f.dims, dims)
    return type(f)(out)


# --------------------------------------------------------------------------
# .mfld files


def save_field(path, f) -> None:
    header = {"dims": [int(d) for d in f.dims], "channels": 3, "dtype": "float32",
              "kind": "velocity" if isinstance(f, VelocityField) else "displacement"}
    _write_blob(path, header, f.data.astype("<f4").transpose(2, 1, 0, 3).tobytes())


def load_field(path):
    header, payload = _read_blob(path)
    dims = _check_dims(header["dims"])
    if header.get("channels") != 3:
        raise InputError(f"{path}: expected 3 channels")
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != 3 * int(np.prod(dims)):
        raise InputError(f"{path}: payload size mismatch")
    # x0-fastest voxel order, components interleaved per voxel
    data = arr.reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3).astype(np.float64)
    cls = VelocityField if header.get("kind", "velocity") == "velocity" else DisplacementField
    return cls(data)
