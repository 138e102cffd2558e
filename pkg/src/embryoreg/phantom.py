"""Synthetic embryo-like phantoms with ground truth.

A phantom is a head sphere on top of a body ellipsoid with limb buds, a few
dark interior structures and low-frequency texture, over a dark background.
Optional bright blobs outside the embryo mimic the uterine wall, and
multiplicative Rayleigh speckle mimics ultrasound noise.  The crown sits at
the head apex and the rump at the base of the body; the crown-rump axis runs
along the second grid axis, crown first.

Random streams are derived from ``numpy.random.SeedSequence`` keyed by
component: shape ``(seed, 0)``, noise ``(seed, 1, ga)``, clutter
``(seed, 2, ga)``.  Shape therefore stays fixed across gestational ages for
one seed, which plays the role of one pregnancy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .affine import AffineTransform, apply_point, invert, rotation_matrix, similarity
from .errors import InputError
from .fields import VelocityField, integrate_svf, invert_svf, resize_field
from .volume import Landmarks, Mask, Volume

GA_MIN, GA_MAX = 56, 90
BACKGROUND = 0.1
FOREGROUND = 0.75
EDGE_WIDTH = 0.6
# noise-free intensity level separating embryo from background
THRESHOLD = BACKGROUND + 0.5 * (FOREGROUND - BACKGROUND)

# crown-rump length (mm) over gestational age (days); weekly anchors 8..12 weeks
_CRL_DAYS = np.array([56.0, 63.0, 70.0, 77.0, 84.0])
_CRL_MM = np.array([16.0, 22.0, 32.0, 44.0, 58.0])


def crl_mm(ga_days) -> float:
    ga = float(ga_days)
    if ga > _CRL_DAYS[-1]:
        slope = (_CRL_MM[-1] - _CRL_MM[-2]) / (_CRL_DAYS[-1] - _CRL_DAYS[-2])
        return float(_CRL_MM[-1] + slope * (ga - _CRL_DAYS[-1]))
    return float(np.interp(ga, _CRL_DAYS, _CRL_MM))


def crl_voxels(ga_days, side=64) -> float:
    """Crown-rump distance in voxels; grows linearly from 22 to 36 on a 64 grid."""
    frac = (float(ga_days) - GA_MIN) / (GA_MAX - GA_MIN)
    return side / 64.0 * (22.0 + 14.0 * frac)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    ga_days: int = 70
    dims: tuple = (64, 64, 64)
    noise: float = 0.0
    clutter: int = 0
    deform: Optional[tuple] = None  # (AffineTransform, VelocityField or None)

    def __post_init__(self):
        if not GA_MIN <= int(self.ga_days) <= GA_MAX:
            raise InputError(f"ga_days must be in [{GA_MIN}, {GA_MAX}], got {self.ga_days}")
        if self.noise < 0 or self.clutter < 0:
            raise InputError("noise and clutter must be non-negative")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


def _stream(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _rayleigh(rng, shape) -> np.ndarray:
    # unit-mean Rayleigh factor via inverse CDF of uniforms
    u = rng.random(shape)
    return np.sqrt(-(4.0 / np.pi) * np.log1p(-u))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ellipsoid_sdf(x, center, axes):
    q = (x - center) / axes
    k0 = np.sqrt((q ** 2).sum(-1))
    k1 = np.sqrt(((q / axes) ** 2).sum(-1))
    return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)


def _bump(x, center, radius):
    r2 = ((x - center) ** 2).sum(-1) / radius ** 2
    return np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)


@dataclass
class _Shape:
    crown: np.ndarray
    rump: np.ndarray
    head_c: np.ndarray
    head_r: float
    body_c: np.ndarray
    body_a: np.ndarray
    limbs: list = field(default_factory=list)
    organs: list = field(default_factory=list)
    waves: list = field(default_factory=list)

    def sdf(self, x):
        d = np.linalg.norm(x - self.head_c, axis=-1) - self.head_r
        d = np.minimum(d, _ellipsoid_sdf(x, self.body_c, self.body_a))
        for c, a in self.limbs:
            d = np.minimum(d, _ellipsoid_sdf(x, c, a))
        return d


def _shape(seed, ga_days, dims) -> _Shape:
    rng = _stream(seed, 0)
    side = min(dims)
    frac = (ga_days - GA_MIN) / (GA_MAX - GA_MIN)
    length = crl_voxels(ga_days, side)
    center = np.array(dims, dtype=float) / 2.0
    e0, e1 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    crown = center - 0.5 * length * e1
    rump = center + 0.5 * length * e1

    head_frac = 0.29 - 0.07 * frac + rng.normal(0.0, 0.012)
    head_r = head_frac * length
    head_c = crown + head_r * e1
    body_start = crown[1] + (1.55 + rng.uniform(-0.1, 0.1)) * head_r
    half = 0.5 * (rump[1] - body_start)
    width = rng.uniform(0.85, 1.15)
    body_a = half * np.array([0.78 * width, 1.0, 0.62 * width])
    body_c = rump - half * e1

    limbs = []
    bud = 0.3 + 0.2 * frac
    for pos in (-0.45, 0.5):
        lc = body_c + np.array([0.85 * body_a[0], pos * half, 0.0])
        la = bud * body_a[0] * np.array([0.8, 0.6, 0.9]) * rng.uniform(0.85, 1.15)
        limbs.append((lc, la))

    organs = [
        (head_c + np.array([0.1, 0.15, 0.0]) * head_r, 0.5 * head_r, 0.2),
        (body_c + np.array([0.3 * body_a[0], -0.35 * half, rng.uniform(-0.1, 0.1) * body_a[2]]),
         0.38 * min(body_a[0], body_a[2]), 0.18),
    ]
    waves = []
    for _ in range(3):
        k = rng.normal(size=3)
        k = k / np.linalg.norm(k) * (2 * np.pi / rng.uniform(6.0, 12.0)) * 64.0 / side
        waves.append((k, rng.uniform(0, 2 * np.pi)))
    return _Shape(crown, rump, head_c, head_r, body_c, body_a, limbs, organs, waves)


def _render(spec: PhantomSpec):
    dims = spec.dims
    shape = _shape(spec.seed, spec.ga_days, dims)
    x = K.lattice(dims).reshape(dims + (3,))
    sdf = shape.sdf(x)
    inner = np.clip((-sdf - 2.0) / 2.0, 0.0, 1.0)
    fg = np.full(dims, FOREGROUND)
    for c, r, depth in shape.organs:
        fg -= depth * _bump(x, c, r) * inner
    tex = sum(np.cos(x @ k + ph) for k, ph in shape.waves) / len(shape.waves)
    fg += 0.05 * tex * inner
    vol = BACKGROUND + (fg - BACKGROUND) * _sigmoid(-sdf / EDGE_WIDTH)
    mask = sdf <= 0.0

    if spec.clutter:
        rng = _stream(spec.seed, 2, spec.ga_days)
        side = min(dims)
        placed = 0
        for _ in range(200 * spec.clutter):
            if placed == spec.clutter:
                break
            c = rng.uniform(0, 1, 3) * (np.array(dims) - 1)
            r = rng.uniform(3.0, 7.0) * side / 64.0
            level = rng.uniform(0.5, 0.9)
            if shape.sdf(c[None])[0] <= r + 4.0:
                continue
            blob = _sigmoid(-(np.linalg.norm(x - c, axis=-1) - r) / EDGE_WIDTH)
            vol = vol + (level - BACKGROUND) * blob * (~mask)
            placed += 1
    if spec.noise > 0:
        rng = _stream(spec.seed, 1, spec.ga_days)
        vol = vol * (1.0 + spec.noise * (_rayleigh(rng, dims) - 1.0))
    vol = np.clip(vol, 0.0, 1.0)
    # round through float32 so the in-memory volume equals its file image
    vol = vol.astype(np.float32)
    if not spec.noise and not spec.clutter:
        # rounding may push an edge voxel across the half-contrast level
        hi = np.float32(THRESHOLD)
        if float(hi) < THRESHOLD:
            hi = np.nextafter(hi, np.float32(1))
        lo = np.nextafter(hi, np.float32(0))
        vol = np.where(mask, np.maximum(vol, hi), np.minimum(vol, lo))
    return vol.astype(np.float64), mask, shape


def voxel_size_mm(ga_days, side=64) -> float:
    return crl_mm(ga_days) / crl_voxels(ga_days, side)


def gen_phantom(spec: PhantomSpec):
    """Render a phantom; returns ``(Volume, Mask, Landmarks)``.

    When ``spec.deform`` is set the phantom is posed by
    :func:`apply_known_deformation` before being returned.
    """
    vol, mask, shape = _render(spec)
    vs = voxel_size_mm(spec.ga_days, min(spec.dims))
    lms = Landmarks(tuple(shape.crown), tuple(shape.rump))
    v = Volume(vol, vs, spec.ga_days, lms)
    m = Mask(mask, vs)
    if spec.deform is not None:
        t, nu = spec.deform
        v, m, lms, _ = apply_known_deformation(v, m, lms, t, nu)
    return v, m, lms


def apply_known_deformation(v: Volume, m: Mask, landmarks: Landmarks, t: AffineTransform,
                            nu: Optional[VelocityField] = None, steps: int = 7):
    """Move an object by the forward map ``F(x) = t(x + exp(nu)(x))``.

    Volume and mask are pulled back through ``F^-1 = exp(-nu) o t^-1`` and
    landmarks are pushed forward through ``F``.  Returns the deformed
    ``(Volume, Mask, Landmarks, truth)``; ``truth`` holds the forward and
    inverse transforms and the velocity.
    """
    t_inv = invert(t)
    z = apply_point(t_inv, K.lattice(v.dims))
    pts = z
    fwd_lms = landmarks.array()
    if nu is not None:
        d = resize_field(integrate_svf(nu, steps), v.dims)
        d_inv = resize_field(invert_svf(nu, steps), v.dims)
        pts = z + K.sample_points(d_inv.data, z)
        fwd_lms = fwd_lms + K.sample_points(d.data, fwd_lms)
    fwd_lms = apply_point(t, fwd_lms)
    vol = K.sample_points(v.data, pts).reshape(v.dims).astype(np.float32).astype(np.float64)
    msk = K.sample_points(m.data.astype(float), pts).reshape(m.dims) >= 0.5
    lms = Landmarks.from_array(fwd_lms)
    out_v = Volume(vol, v.voxel_size, v.ga_days, lms)
    truth = {"affine": t, "affine_inverse": t_inv, "velocity": nu}
    return out_v, Mask(msk, m.voxel_size), lms, truth


def random_similarity(rng: np.random.Generator, dims, max_angle_deg=30.0, max_shift=10.0,
                      scale_range=(0.9, 1.1)) -> AffineTransform:
    """Rotation about the grid center, translation and isotropic scale."""
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
    shift = rng.normal(size=3)
    shift = shift / np.linalg.norm(shift) * max_shift * rng.uniform(0.0, 1.0) ** (1 / 3)
    scale = rng.uniform(*scale_range)
    center = np.array(dims, dtype=float) / 2.0
    return similarity(scale, rotation_matrix(axis, angle), shift, center)


def smooth_velocity(rng: np.random.Generator, dims, max_norm: float, control=4) -> VelocityField:
    """Random smooth velocity: a coarse Gaussian grid upsampled, scaled to ``max_norm``."""
    coarse = rng.normal(size=(control, control, control, 3))
    coarse[0] = coarse[-1] = 0.0
    coarse[:, 0] = coarse[:, -1] = 0.0
    coarse[:, :, 0] = coarse[:, :, -1] = 0.0
    v = resize_field(VelocityField(coarse), dims).data
    # resize_field rescales units; undo that, amplitude is set below
    norm = np.sqrt((v ** 2).sum(-1)).max()
    return VelocityField(v * (max_norm / norm if norm > 0 else 0.0))


# --------------------------------------------------------------------------
# Lattice-symmetry augmentation

_AXES = {"x": 0, "y": 1, "z": 2}


def _parse_op(op: str):
    parts = op.split("_")
    if len(parts) == 2 and parts[1] in _AXES:
        kind, axis = parts[0], _AXES[parts[1]]
        if kind == "flip":
            return "flip", axis, 0
        if kind in ("rot90", "rot180", "rot270"):
            return "rot", axis, int(kind[3:]) // 90
    raise InputError(f"unknown augmentation {op!r}")


AUGMENTATIONS = tuple(f"flip_{a}" for a in "xyz") + tuple(
    f"rot{k}_{a}" for k in (90, 180, 270) for a in "xyz")


def _augment_points(pts, dims, kind, axis, k):
    pts = np.array(pts, dtype=float)
    dims = list(dims)
    if kind == "flip":
        pts[:, axis] = dims[axis] - 1 - pts[:, axis]
        return pts, tuple(dims)
    b, c = [a for a in range(3) if a != axis]
    for _ in range(k):
        # np.rot90(axes=(b, c)): new[b] = N_c - 1 - old[c], new[c] = old[b]
        nb = dims[c] - 1 - pts[:, c]
        nc = pts[:, b].copy()
        pts[:, b], pts[:, c] = nb, nc
        dims[b], dims[c] = dims[c], dims[b]
    return pts, tuple(dims)


def _augment_array(arr, kind, axis, k):
    if kind == "flip":
        return np.flip(arr, axis=axis).copy()
    b, c = [a for a in range(3) if a != axis]
    return np.rot90(arr, k, axes=(b, c)).copy()


def augment(v: Volume, m: Mask, landmarks: Optional[Landmarks], op: str):
    """Exact flip or 90-degree rotation applied to volume, mask and landmarks."""
    kind, axis, k = _parse_op(op)
    data = _augment_array(v.data, kind, axis, k)
    mdata = _augment_array(m.data, kind, axis, k)
    lms = None
    if landmarks is not None:
        pts, _ = _augment_points(landmarks.array(), v.dims, kind, axis, k)
        lms = Landmarks.from_array(pts)
    return Volume(data, v.voxel_size, v.ga_days, lms), Mask(mdata, m.voxel_size), lms
