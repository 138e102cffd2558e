"""Atlases in standard orientation, the evaluation region and GA-based selection."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .affine import AffineTransform, apply_point, rotation_matrix
from .errors import DegenerateLandmarksError, InputError, MissingLandmarksError, SelectionError
from .sampler import warp_affine, warp_mask
from .volume import (Landmarks, Mask, Volume, check_same_dims, dilate, load_mask,
                     load_volume, mask_union, save_mask, save_volume)

CANONICAL_FRACTIONS = ((0.5, 0.1875, 0.5), (0.5, 0.8125, 0.5))
_ROLL_AXIS = np.array([1.0, 0.0, 0.0])  # canonical half-plane direction
# a roll point closer to the crown-rump axis than this fraction of the span
# is too unstable to fix the roll
ROLL_MIN_FRACTION = 0.05


def canonical_landmarks(side: int = 64) -> Landmarks:
    """Crown and rump of the standard pose: (32, 12, 32) and (32, 52, 32) on 64^3."""
    c, r = (np.array(f) * side for f in CANONICAL_FRACTIONS)
    return Landmarks(tuple(c), tuple(r))


@dataclass(frozen=True, eq=False)
class Atlas:
    atlas_id: str
    pregnancy_id: str
    ga_days: int
    volume: Volume
    seg: Mask
    landmarks: Landmarks

    def __post_init__(self):
        check_same_dims(self.volume, self.seg)
        if self.seg.count() == 0:
            raise InputError(f"atlas {self.atlas_id}: segmentation is empty")
        if int(self.ga_days) < 0:
            raise InputError(f"atlas {self.atlas_id}: ga_days must be non-negative")


@dataclass(frozen=True, eq=False)
class AtlasSet:
    atlases: tuple
    canonical: Landmarks
    omega: Mask = field(default=None)

    def __post_init__(self):
        atlases = tuple(self.atlases)
        if not atlases:
            raise InputError("an atlas set needs at least one atlas")
        object.__setattr__(self, "atlases", atlases)
        keys = [(a.pregnancy_id, a.ga_days // 7) for a in atlases]
        if len(set(keys)) != len(keys):
            raise InputError("at most one atlas per pregnancy and week")
        ids = [a.atlas_id for a in atlases]
        if len(set(ids)) != len(ids):
            raise InputError("atlas ids must be unique")
        ref = self.canonical.array()
        for a in atlases:
            if np.abs(a.landmarks.array() - ref).max() > 0.5:
                raise InputError(f"atlas {a.atlas_id}: landmarks differ from the canonical pair")
        if self.omega is None:
            object.__setattr__(self, "omega", build_omega_mask(atlases))
        check_same_dims(self.omega, *[a.seg for a in atlases])

    @property
    def pregnancies(self) -> list:
        return sorted({a.pregnancy_id for a in self.atlases}, key=_pid_key)

    def by_pregnancy(self, pregnancy_id) -> list:
        return [a for a in self.atlases if a.pregnancy_id == str(pregnancy_id)]

    def get(self, atlas_id) -> Atlas:
        for a in self.atlases:
            if a.atlas_id == atlas_id:
                return a
        raise InputError(f"unknown atlas {atlas_id!r}")

    def subset(self, atlases) -> "AtlasSet":
        """Same canonical pair and region, fewer atlases."""
        return AtlasSet(tuple(atlases), self.canonical, self.omega)


def _pid_key(pid):
    # numeric ids sort numerically, others lexically after them
    s = str(pid)
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


# --------------------------------------------------------------------------
# Standard orientation


def _centroid(v: Volume, seg: Optional[Mask]):
    if seg is not None and seg.count():
        weights = seg.data.astype(float)
    else:
        weights = np.maximum(v.data - np.median(v.data), 0.0)
    total = weights.sum()
    if total <= 0:
        return None
    grids = np.meshgrid(*[np.arange(d, dtype=float) for d in v.dims], indexing="ij")
    return np.array([(g * weights).sum() / total for g in grids])


def _frame(axis, ref, min_norm=1e-6):
    q = ref - axis * np.dot(ref, axis)
    n = np.linalg.norm(q)
    if n < min_norm:
        return None
    q = q / n
    return np.column_stack([axis, q, np.cross(axis, q)])


def _minimal_rotation(u, w):
    c = float(np.dot(u, w))
    axis = np.cross(u, w)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # half turn about any axis orthogonal to u
        perp = np.cross(u, [1.0, 0, 0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(u, [0, 1.0, 0])
        return rotation_matrix(perp, np.pi)
    return rotation_matrix(axis, np.arctan2(s, c))


def standard_transform(image_lms: Landmarks, canonical: Landmarks, roll_point=None) -> AffineTransform:
    """Similarity ``psi`` with ``psi(canonical) = image landmarks``.

    ``psi`` maps standard-pose coordinates into the image, so the image in
    standard pose is ``image o psi``.  Roll about the crown-rump axis turns
    ``roll_point`` into the canonical +x half-plane; without a usable point
    the minimal rotation between the two axes is used.
    """
    c, r = image_lms.array()
    cc, cr = canonical.array()
    span_i, span_c = np.linalg.norm(r - c), np.linalg.norm(cr - cc)
    if span_i < 1e-6 or span_c < 1e-6:
        raise DegenerateLandmarksError("crown and rump coincide")
    u, w = (cr - cc) / span_c, (r - c) / span_i
    rot = None
    if roll_point is not None:
        f_img = _frame(w, np.asarray(roll_point, dtype=float) - c, ROLL_MIN_FRACTION * span_i)
        f_can = _frame(u, _ROLL_AXIS)
        if f_img is not None and f_can is not None:
            rot = f_img @ f_can.T
    if rot is None:
        rot = _minimal_rotation(u, w)
    lin = (span_i / span_c) * rot
    return AffineTransform.from_linear(lin, c - lin @ cc)


def align_to_standard(v: Volume, canonical: Landmarks, roll_reference=None,
                      seg: Optional[Mask] = None):
    """Resample ``v`` into standard pose; returns ``(Volume, psi)``.

    When ``roll_reference`` is omitted the intensity centroid (or the
    centroid of ``seg`` when given) fixes the roll.
    """
    if v.landmarks is None:
        raise MissingLandmarksError("align_to_standard needs crown and rump landmarks")
    if roll_reference is None:
        roll_reference = _centroid(v, seg)
    psi = standard_transform(v.landmarks, canonical, roll_reference)
    out = warp_affine(Volume(v.data, v.voxel_size, v.ga_days), psi)
    # the voxel size of the standard pose absorbs the similarity scale
    scale = float(np.cbrt(abs(np.linalg.det(psi.linear))))
    return Volume(out.data, v.voxel_size * scale, v.ga_days, canonical), psi


def build_atlas(atlas_id, pregnancy_id, v: Volume, seg: Mask, canonical: Landmarks,
                roll_reference=None) -> Atlas:
    if v.ga_days is None:
        raise InputError(f"atlas {atlas_id}: ga_days is required")
    aligned, psi = align_to_standard(v, canonical, roll_reference, seg)
    aseg = warp_mask(seg, psi)
    return Atlas(str(atlas_id), str(pregnancy_id), int(v.ga_days), aligned,
                 Mask(aseg.data, aligned.voxel_size), canonical)


def build_omega_mask(atlases: Sequence[Atlas], radius: int = 1) -> Mask:
    """Evaluation region: the union of all atlas segmentations, dilated."""
    atlases = list(atlases.atlases if isinstance(atlases, AtlasSet) else atlases)
    if not atlases:
        raise InputError("cannot build the evaluation region from an empty atlas set")
    return dilate(mask_union([a.seg for a in atlases]), radius)


def select_atlases(atlas_set, ga_image, m: int) -> list:
    """The ``m`` atlases closest in GA, at most one per pregnancy.

    ``atlas_set`` is an :class:`AtlasSet` or any sequence of atlases.  Ties
    in ``|ga - ga_image|`` go to the lower GA, then the lower pregnancy id.
    """
    if ga_image is None:
        raise SelectionError("image has no gestational age; atlas selection impossible")
    atlases = atlas_set.atlases if isinstance(atlas_set, AtlasSet) else tuple(atlas_set)
    n_p = len({a.pregnancy_id for a in atlases})
    if int(m) != m or m < 1:
        raise SelectionError(f"M must be a positive integer, got {m}")
    if m > n_p:
        raise SelectionError(f"M = {m} exceeds the number of pregnancies ({n_p})")
    ranked = sorted(atlases,
                    key=lambda a: (abs(a.ga_days - ga_image), a.ga_days, _pid_key(a.pregnancy_id)))
    chosen, seen = [], set()
    for a in ranked:
        if a.pregnancy_id in seen:
            continue
        chosen.append(a)
        seen.add(a.pregnancy_id)
        if len(chosen) == m:
            break
    return chosen


# --------------------------------------------------------------------------
# Directory layout


def save_atlas_set(path, atlas_set: AtlasSet) -> None:
    os.makedirs(path, exist_ok=True)
    for a in atlas_set.atlases:
        sub = os.path.join(path, a.atlas_id)
        os.makedirs(sub, exist_ok=True)
        save_volume(os.path.join(sub, "volume.mvol"), a.volume)
        save_mask(os.path.join(sub, "seg.mmask"), a.seg, a.ga_days, a.landmarks)
        with open(os.path.join(sub, "meta.json"), "w") as fh:
            json.dump({"pregnancy_id": a.pregnancy_id, "ga_days": a.ga_days}, fh, sort_keys=True)
            fh.write("\n")
    with open(os.path.join(path, "canonical.json"), "w") as fh:
        json.dump(atlas_set.canonical.to_json(), fh, sort_keys=True)
        fh.write("\n")
    save_mask(os.path.join(path, "omega.mmask"), atlas_set.omega)


def load_atlas_set(path) -> AtlasSet:
    if not os.path.isdir(path):
        raise InputError(f"atlas directory {path!r} does not exist")
    try:
        with open(os.path.join(path, "canonical.json")) as fh:
            canonical = Landmarks.from_json(json.load(fh))
    except FileNotFoundError:
        raise InputError(f"{path}: canonical.json missing") from None
    atlases = []
    for name in sorted(os.listdir(path)):
        sub = os.path.join(path, name)
        if not os.path.isfile(os.path.join(sub, "meta.json")):
            continue
        with open(os.path.join(sub, "meta.json")) as fh:
            meta = json.load(fh)
        vol = load_volume(os.path.join(sub, "volume.mvol"))
        seg = load_mask(os.path.join(sub, "seg.mmask"))
        atlases.append(Atlas(name, str(meta["pregnancy_id"]), int(meta["ga_days"]),
                             vol, seg, vol.landmarks or canonical))
    omega_path = os.path.join(path, "omega.mmask")
    omega = load_mask(omega_path) if os.path.exists(omega_path) else None
    return AtlasSet(tuple(atlases), canonical, omega)
