"""Registration loss terms and their gradients.

Similarity is the masked local squared normalized cross-correlation over
cubic windows; windowed sums use cumulative-sum box filters.  All sums run on
a crop of the lattice that holds the evaluation region plus the window
half-width, which gives the same result as working on the full grid.

Affine gradients are taken with respect to the 12 row-major matrix
parameters; nonrigid gradients with respect to the velocity control grid,
back-propagated through the scaling-and-squaring recursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .affine import AffineTransform, apply_point, params_to_matrix, scaling_factors
from .errors import DimensionMismatchError, InputError, MissingLandmarksError, NonInvertibleError, NumericalError
from .fields import (DEFAULT_STEPS, DisplacementField, VelocityField, apply_separable,
                     apply_separable_adjoint, integrate_svf, interp_matrix, resize_field,
                     squaring_backward, squaring_forward, unit_factors)
from .sampler import warp_affine, warp_field
from .volume import Mask, Volume, check_same_dims

VARIANCE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda_l: float = 1.0
    lambda_s: float = 0.05
    lambda_d: float = 10.0
    window: int = 9

    def __post_init__(self):
        for name in ("lambda_l", "lambda_s", "lambda_d"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise InputError(f"{name} must be finite and non-negative, got {val}")
        if int(self.window) != self.window or self.window < 3 or self.window % 2 == 0:
            raise InputError(f"window must be an odd integer >= 3, got {self.window}")


# --------------------------------------------------------------------------
# Region crops and box sums


def box_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^3 window around each voxel, truncated at the edges."""
    return K.box_sum(np.ascontiguousarray(x, dtype=np.float64), int(radius))


class Region:
    """Evaluation mask restricted to a crop that contains all of its windows."""

    def __init__(self, mask: Mask, window: int):
        if mask.count() == 0:
            raise InputError("evaluation region is empty")
        self.dims = tuple(mask.dims)
        self.radius = int(window) // 2
        idx = np.argwhere(mask.data)
        self.lo = np.maximum(idx.min(axis=0) - self.radius, 0)
        self.hi = np.minimum(idx.max(axis=0) + self.radius + 1, np.array(self.dims))
        self.slices = tuple(slice(int(a), int(b)) for a, b in zip(self.lo, self.hi))
        self.shape = tuple(int(b - a) for a, b in zip(self.lo, self.hi))
        self.mask = mask.data[self.slices]
        self.count = int(mask.count())
        self.points = K.lattice(self.shape) + self.lo
        self.nwin = box_sum(np.ones(self.shape), self.radius)

    def crop(self, arr: np.ndarray) -> np.ndarray:
        return arr[self.slices]


class _Stats:
    """Window sums of a fixed image (the atlas side of the correlation)."""

    def __init__(self, a: np.ndarray, region: Region):
        a = a - a.mean()
        self.a = a
        self.s = box_sum(a, region.radius)
        self.v = box_sum(a * a, region.radius) - self.s ** 2 / region.nwin


def _ncc_sq_multi(stats: Sequence[_Stats], y: np.ndarray, region: Region, want_grad=True):
    """Squared local NCC of ``y`` against each fixed image.

    Returns the list of per-image values and the gradient w.r.t. ``y`` of
    their sum (windows with local variance <= eps contribute nothing).
    """
    r, n = region.radius, region.nwin
    y = y - y.mean()
    sy = box_sum(y, r)
    vy = box_sum(y * y, r) - sy ** 2 / n
    ok_y = region.mask & (vy > VARIANCE_EPS * n)
    values = []
    g_sy = np.zeros(region.shape)
    g_syy = np.zeros(region.shape)
    g_say_list = []
    for st in stats:
        valid = ok_y & (st.v > VARIANCE_EPS * n)
        cross = box_sum(st.a * y, r) - st.s * sy / n
        denom = np.where(valid, st.v * vy, 1.0)
        cc = np.where(valid, cross ** 2 / denom, 0.0)
        # correctly rounded reduction keeps tiny loss changes resolvable
        values.append(math.fsum(cc[valid]) / region.count)
        if want_grad:
            w = valid / region.count
            g_cross = w * 2.0 * cross / denom
            g_vy = -w * cc / np.where(valid, vy, 1.0)
            g_say_list.append((st, g_cross))
            g_syy += g_vy
            g_sy += -g_cross * st.s / n - g_vy * 2.0 * sy / n
    if not want_grad:
        return values, None
    grad = box_sum(g_sy, r) + 2.0 * y * box_sum(g_syy, r)
    g_say = np.zeros(region.shape)
    for st, g_cross in g_say_list:
        g_say += st.a * box_sum(g_cross, r)
    grad += g_say
    return values, grad


def ncc_local_sq(a: Volume, y: Volume, region: Mask, window: int = 9) -> float:
    """Masked local squared NCC in [0, 1]; averaged over all region voxels."""
    check_same_dims(a, y, region)
    reg = Region(region, window)
    vals, _ = _ncc_sq_multi([_Stats(reg.crop(a.data), reg)], reg.crop(y.data), reg, want_grad=False)
    return vals[0]


# --------------------------------------------------------------------------
# Affine terms


def _landmark_arrays(atlas_lms, image_lms):
    if atlas_lms is None or image_lms is None:
        raise MissingLandmarksError("landmark loss needs atlas and image landmarks")
    a = atlas_lms.array() if hasattr(atlas_lms, "array") else np.asarray(atlas_lms, float)
    b = image_lms.array() if hasattr(image_lms, "array") else np.asarray(image_lms, float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise InputError("landmark sets must both be (n, 3)")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("landmarks must be finite")
    return a, b


def landmark_mse(t: AffineTransform, atlas_lms, image_lms) -> float:
    """Mean over landmarks of the squared distance ``|x_I - t(x_A)|^2`` (voxels^2)."""
    a, b = _landmark_arrays(atlas_lms, image_lms)
    res = b - apply_point(t, a)
    return float((res ** 2).sum() / len(a))


def landmark_mse_grad(t: AffineTransform, atlas_lms, image_lms) -> np.ndarray:
    a, b = _landmark_arrays(atlas_lms, image_lms)
    res = b - apply_point(t, a)
    ah = np.hstack([a, np.ones((len(a), 1))])
    return (-2.0 / len(a) * res.T @ ah).ravel()


def scaling_penalty(t: AffineTransform) -> float:
    s = scaling_factors(t)
    if s.min() <= 1e-12:
        raise NonInvertibleError("scaling penalty undefined for a singular transform")
    return float((np.log(s) ** 2).sum())


def scaling_penalty_grad(t: AffineTransform) -> np.ndarray:
    u, s, vt = np.linalg.svd(t.linear)
    if s.min() <= 1e-12:
        raise NonInvertibleError("scaling penalty undefined for a singular transform")
    g = np.zeros((3, 4))
    g[:, :3] = (u * (2.0 * np.log(s) / s)) @ vt
    return g.ravel()


# --------------------------------------------------------------------------
# Diffusion regularizer


def _diffusion_value_grad(d: np.ndarray, mask: np.ndarray, count: int, want_grad=True):
    # forward differences; the last index along an axis reuses the backward one
    grad = np.zeros(d.shape)
    total = K.diffusion(np.ascontiguousarray(d, dtype=np.float64),
                        np.ascontiguousarray(mask, dtype=np.bool_), 1.0 / count, grad)
    return float(total), (grad if want_grad else None)


def diffusion_reg(d: DisplacementField, region: Mask) -> float:
    """Mean over the region of the squared Frobenius norm of the displacement gradient."""
    if tuple(d.dims) != tuple(region.dims):
        raise DimensionMismatchError(f"field dims {d.dims} != region dims {region.dims}")
    if region.count() == 0:
        raise InputError("evaluation region is empty")
    val, _ = _diffusion_value_grad(d.data, region.data, region.count(), want_grad=False)
    return val


# --------------------------------------------------------------------------
# Stage objectives


def _selected(atlases):
    atlases = list(atlases)
    if not atlases:
        raise InputError("no atlas selected")
    return atlases


def _check_finite(value, grad, stage):
    if not np.isfinite(value):
        raise NumericalError(f"{stage}: loss is not finite", stage=stage)
    if grad is not None:
        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise NumericalError(f"{stage}: gradient component {int(bad[0])} is not finite",
                                 stage=stage, index=int(bad[0]))


class AffineObjective:
    """Stage-1 (``landmarks`` given) or stage-2 (scaling penalty) affine loss.

    Called with a 12-vector of matrix parameters, returns ``(value, grad)``.
    """

    def __init__(self, image: Volume, atlases: Sequence[Volume], region: Mask,
                 weights: LossWeights = LossWeights(), stage: str = "stage1",
                 atlas_landmarks=None, image_landmarks=None):
        atlases = _selected(atlases)
        check_same_dims(region, *atlases)
        if stage not in ("stage1", "stage2"):
            raise InputError(f"unknown affine stage {stage!r}")
        self.stage = stage
        self.weights = weights
        self.image = np.ascontiguousarray(image.data)
        self.region = Region(region, weights.window)
        self.stats = [_Stats(self.region.crop(a.data), self.region) for a in atlases]
        self.points_h = np.hstack([self.region.points, np.ones((len(self.region.points), 1))])
        if stage == "stage1":
            if image_landmarks is None:
                raise MissingLandmarksError("stage 1 requires image landmarks; it cannot be skipped")
            self.lms = _landmark_arrays(atlas_landmarks, image_landmarks)

    def moved(self, params) -> np.ndarray:
        t = params_to_matrix(params)
        pts = self.points_h @ t.matrix[:3].T
        return K.sample_points(self.image, pts).reshape(self.region.shape)

    def terms(self, params) -> dict:
        t = params_to_matrix(params)
        vals, _ = _ncc_sq_multi(self.stats, self.moved(params), self.region, want_grad=False)
        out = {"sim": -float(np.mean(vals)), "ncc": [float(v) for v in vals]}
        if self.stage == "stage1":
            out["landmark"] = landmark_mse(t, *self.lms)
            out["total"] = out["sim"] + self.weights.lambda_l * out["landmark"]
        else:
            out["scaling"] = scaling_penalty(t)
            out["total"] = out["sim"] + self.weights.lambda_s * out["scaling"]
        return out

    def __call__(self, params):
        params = np.asarray(params, dtype=float)
        t = params_to_matrix(params)
        pts = self.points_h @ t.matrix[:3].T
        y, dy = K.sample_points_grad(self.image, pts)
        vals, gy = _ncc_sq_multi(self.stats, y.reshape(self.region.shape), self.region)
        m = len(self.stats)
        value = -sum(vals) / m
        g_pts = (-gy.ravel() / m)[:, None] * dy
        grad = (g_pts.T @ self.points_h).ravel()
        self.last_terms = {"sim": float(value)}
        if self.stage == "stage1":
            lam = self.weights.lambda_l
            term = landmark_mse(t, *self.lms)
            self.last_terms["landmark"] = term
            value += lam * term
            grad = grad + lam * landmark_mse_grad(t, *self.lms)
        else:
            lam = self.weights.lambda_s
            term = scaling_penalty(t)
            self.last_terms["scaling"] = term
            value += lam * term
            grad = grad + lam * scaling_penalty_grad(t)
        _check_finite(value, grad, self.stage)
        return float(value), grad


def stage1_loss(image: Volume, t: AffineTransform, atlases, region: Mask, atlas_landmarks,
                image_landmarks, weights: LossWeights = LossWeights()) -> float:
    obj = AffineObjective(image, atlases, region, weights, "stage1", atlas_landmarks, image_landmarks)
    return obj.terms(t.params)["total"]


def stage2_loss(image: Volume, t: AffineTransform, atlases, region: Mask,
                weights: LossWeights = LossWeights()) -> float:
    obj = AffineObjective(image, atlases, region, weights, "stage2")
    return obj.terms(t.params)["total"]


class NonrigidObjective:
    """Nonrigid loss as a function of the flattened velocity control grid.

    Control values are in voxel units of the full lattice.  They are
    upsampled to the integration lattice, integrated by scaling and squaring,
    and the displacement is upsampled back onto the evaluation crop.
    """

    def __init__(self, atlas: Volume, moving: Volume, region: Mask,
                 weights: LossWeights = LossWeights(), control_dims=(16, 16, 16),
                 integration_dims=None, steps: int = DEFAULT_STEPS):
        self.dims = check_same_dims(atlas, moving, region)
        self.weights = weights
        self.steps = int(steps)
        self.control_dims = tuple(int(c) for c in control_dims)
        self.int_dims = tuple(int(c) for c in (integration_dims or self.dims))
        self.moving = np.ascontiguousarray(moving.data)
        self.region = Region(region, weights.window)
        self.stats = [_Stats(self.region.crop(atlas.data), self.region)]
        self.m_up = [interp_matrix(c, n) for c, n in zip(self.control_dims, self.int_dims)]
        self.u_up = unit_factors(self.dims, self.int_dims)
        mats = [interp_matrix(n, d) for n, d in zip(self.int_dims, self.dims)]
        self.m_crop = [m[int(lo):int(hi)] for m, lo, hi in zip(mats, self.region.lo, self.region.hi)]
        self.u_down = unit_factors(self.int_dims, self.dims)
        self.size = int(np.prod(self.control_dims)) * 3

    def zeros(self):
        return np.zeros(self.size)

    def velocity(self, params) -> VelocityField:
        """Velocity on the integration lattice, in its own voxel units."""
        c = np.asarray(params, dtype=float).reshape(self.control_dims + (3,))
        return VelocityField(apply_separable(c, self.m_up) * self.u_up)

    def displacement(self, params, steps=None) -> DisplacementField:
        d = integrate_svf(self.velocity(params), steps or self.steps)
        return resize_field(d, self.dims)

    def _forward(self, params):
        v = self.velocity(params).data
        hist = squaring_forward(v, self.steps)
        d_crop = apply_separable(hist[-1], self.m_crop) * self.u_down
        return hist, d_crop

    def terms(self, params) -> dict:
        hist, d_crop = self._forward(params)
        pts = self.region.points + d_crop.reshape(-1, 3)
        y = K.sample_points(self.moving, pts).reshape(self.region.shape)
        vals, _ = _ncc_sq_multi(self.stats, y, self.region, want_grad=False)
        reg, _ = _diffusion_value_grad(d_crop, self.region.mask, self.region.count, want_grad=False)
        sim = -vals[0]
        return {"sim": sim, "ncc": vals[0], "diffusion": reg,
                "total": sim + self.weights.lambda_d * reg}

    def __call__(self, params):
        hist, d_crop = self._forward(params)
        pts = self.region.points + d_crop.reshape(-1, 3)
        y, dy = K.sample_points_grad(self.moving, pts)
        vals, gy = _ncc_sq_multi(self.stats, y.reshape(self.region.shape), self.region)
        lam = self.weights.lambda_d
        reg, g_reg = _diffusion_value_grad(d_crop, self.region.mask, self.region.count)
        value = -vals[0] + lam * reg
        self.last_terms = {"sim": -float(vals[0]), "diffusion": float(reg)}
        g_d = (-gy.ravel())[:, None] * dy
        g_d = g_d.reshape(d_crop.shape) + lam * g_reg
        g_int = apply_separable_adjoint(g_d * self.u_down, self.m_crop)
        g_v = squaring_backward(hist, g_int)
        g_c = apply_separable_adjoint(g_v * self.u_up, self.m_up)
        grad = g_c.ravel()
        _check_finite(value, grad, "nonrigid")
        return float(value), grad


def nonrigid_loss(atlas: Volume, moving: Volume, v: VelocityField, region: Mask,
                  weights: LossWeights = LossWeights(), steps: int = DEFAULT_STEPS) -> float:
    """-NCC(atlas, moving o exp(v)) + lambda_d * diffusion(exp(v)).

    ``v`` may live on a coarser lattice; its flow is resampled onto the
    atlas lattice before warping.
    """
    check_same_dims(atlas, moving, region)
    d = resize_field(integrate_svf(v, steps), atlas.dims)
    warped = warp_field(moving, d)
    return -ncc_local_sq(atlas, warped, region, weights.window) + weights.lambda_d * diffusion_reg(d, region)


# --------------------------------------------------------------------------
# Finite-difference verification


def relative_error(g, g_fd):
    return np.abs(g - g_fd) / np.maximum(np.maximum(np.abs(g), np.abs(g_fd)), 1e-8)


def fd_check(objective: Callable, params, h: float = 1e-4, tol: float = 1e-4,
             indices: Optional[Sequence[int]] = None, name: str = "loss") -> dict:
    """Compare an objective's gradient to central differences, component-wise.

    ``objective(params)`` must return ``(value, grad)``.  The report lists,
    per checked component, the analytic and numeric values, the relative
    error and whether it is within ``tol``.
    """
    if not h > 0:
        raise InputError("h must be positive")
    params = np.asarray(params, dtype=np.float64).copy()
    _, grad = objective(params)
    grad = np.asarray(grad, dtype=np.float64)
    _check_finite(0.0, grad, name)
    idx = range(params.size) if indices is None else indices
    entries = []
    for i in idx:
        p = params.copy()
        p[i] = params[i] + h
        fp, _ = objective(p)
        p[i] = params[i] - h
        fm, _ = objective(p)
        num = (fp - fm) / (2 * h)
        err = float(relative_error(grad[i], num))
        entries.append({"index": int(i), "analytic": float(grad[i]), "numeric": float(num),
                        "rel_error": err, "pass": bool(err <= tol)})
    max_err = max((e["rel_error"] for e in entries), default=0.0)
    return {"loss": name, "h": h, "tol": tol, "n_params": len(entries),
            "max_rel_error": max_err, "passed": bool(max_err <= tol), "entries": entries}
