"""Segmentation transfer from atlases and label fusion strategies."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .affine import AffineTransform, apply_point, invert, save_transform
from .atlas import Atlas, AtlasSet, select_atlases
from .errors import EmbryoRegError, InputError, SelectionError
from .fields import DEFAULT_STEPS, VelocityField, invert_svf, resize_field, save_field
from .losses import LossWeights
from .optim import OptimConfig, register_affine, run_nonrigid
from .sampler import MASK_THRESHOLD, warp_affine
from .volume import Mask, Volume, check_same_dims, save_mask, save_volume

log = logging.getLogger(__name__)


@dataclass
class AtlasResult:
    atlas_id: str
    pregnancy_id: str
    velocity: VelocityField
    seg: Mask
    similarity: float
    iterations: int = 0
    best_iter: int = 0
    trace: list = field(default_factory=list, repr=False)


@dataclass
class RegistrationResult:
    phi_a: AffineTransform
    per_atlas: list
    fused_seg: Mask
    aligned_image: Volume
    strategy: str
    m: int
    info: dict = field(default_factory=dict)

    @property
    def similarity(self) -> float:
        """Mean final NCC over the per-atlas registrations."""
        return float(np.mean([p.similarity for p in self.per_atlas]))


def majority_vote(masks: Sequence[Mask], ties: str = "foreground") -> Mask:
    """Voxelwise majority; with an even count, a tie goes to ``ties``."""
    masks = list(masks)
    if not masks:
        raise InputError("majority vote needs at least one mask")
    if ties not in ("foreground", "background"):
        raise InputError(f"ties must be 'foreground' or 'background', got {ties!r}")
    check_same_dims(*masks)
    votes = np.zeros(masks[0].dims, dtype=np.int64)
    for m in masks:
        votes += m.data
    twice = 2 * votes
    fg = twice >= len(masks) if ties == "foreground" else twice > len(masks)
    return Mask(fg, masks[0].voxel_size)


def per_atlas_segmentation(seg_atlas: Mask, v: Optional[VelocityField], t: AffineTransform,
                           out_dims=None, steps: int = DEFAULT_STEPS, voxel_size=None) -> Mask:
    """Atlas segmentation carried into the image: ``S_A(z + dinv(z))``, ``z = t^-1(y)``.

    The inverse deformation and the inverse affine are applied in a single
    resampling of the atlas mask.
    """
    out_dims = tuple(out_dims or seg_atlas.dims)
    z = apply_point(invert(t), K.lattice(out_dims))
    pts = z
    if v is not None:
        dinv = resize_field(invert_svf(v, steps), seg_atlas.dims)
        pts = z + K.sample_points(dinv.data, z)
    vals = K.sample_points(seg_atlas.data.astype(np.float64), pts).reshape(out_dims)
    return Mask(vals >= MASK_THRESHOLD, voxel_size or seg_atlas.voxel_size)


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _register_to(image: Volume, atlases: Sequence[Atlas], atlas_set: AtlasSet, weights, config,
                 strategy, jobs=1) -> RegistrationResult:
    try:
        phi_a, stages = register_affine(image, atlases, atlas_set.omega, atlas_set.canonical,
                                        weights, config)
    except EmbryoRegError as exc:
        raise exc.with_stage(exc.stage or "affine")
    aligned = warp_affine(Volume(image.data, image.voxel_size, image.ga_days), phi_a)

    def one(atlas):
        try:
            v, res, obj = run_nonrigid(aligned, atlas, atlas_set.omega, weights, config)
        except EmbryoRegError as exc:
            raise exc.with_stage(f"nonrigid:{atlas.atlas_id}")
        ncc = float(obj.terms(res.params)["ncc"])
        seg = per_atlas_segmentation(atlas.seg, v, phi_a, image.dims, config.svf_steps,
                                     image.voxel_size)
        return AtlasResult(atlas.atlas_id, atlas.pregnancy_id, v, seg, ncc,
                           len(res.trace) - 1, res.best_iter, res.trace)

    per_atlas = _map(one, list(atlases), jobs)
    fused = majority_vote([p.seg for p in per_atlas])
    info = {"stages": {k: {"iterations": len(r.trace) - 1, "best_iter": r.best_iter,
                           "loss": r.loss} for k, r in stages.items()},
            "traces": {**{k: r.trace for k, r in stages.items()}}}
    return RegistrationResult(phi_a, per_atlas, fused, aligned, strategy, len(per_atlas), info)


def run_multi_subject(image: Volume, atlas_set: AtlasSet, m: int = 4,
                      weights: LossWeights = LossWeights(), config: OptimConfig = OptimConfig(),
                      jobs: int = 1) -> RegistrationResult:
    """The ``m`` GA-nearest atlases from distinct pregnancies, fused by majority vote."""
    try:
        chosen = select_atlases(atlas_set, image.ga_days, m)
    except EmbryoRegError as exc:
        raise exc.with_stage("select")
    return _register_to(image, chosen, atlas_set, weights, config, "multi", jobs)


def run_single_subject(image: Volume, atlas_set: AtlasSet, subject,
                       weights: LossWeights = LossWeights(), config: OptimConfig = OptimConfig(),
                       jobs: int = 1) -> RegistrationResult:
    """Only the atlases of pregnancy ``subject``; the GA-nearest one is used."""
    own = atlas_set.by_pregnancy(subject)
    if not own:
        raise SelectionError(f"no atlases for pregnancy {subject!r}", stage="select")
    try:
        chosen = select_atlases(atlas_set.subset(own), image.ga_days, 1)
    except EmbryoRegError as exc:
        raise exc.with_stage("select")
    res = _register_to(image, chosen, atlas_set, weights, config, "single", jobs)
    res.info["subject"] = str(subject)
    return res


def ensemble_from(results: dict, strategy="ensemble") -> RegistrationResult:
    """Vote over per-subject results; the aligned image comes from the best-similarity subject."""
    if not results:
        raise InputError("no subject result to fuse")
    keys = list(results)
    fused = majority_vote([results[k].fused_seg for k in keys])
    best = max(keys, key=lambda k: (results[k].similarity, -keys.index(k)))
    per_atlas = [p for k in keys for p in results[k].per_atlas]
    info = {"subjects": keys, "aligned_from": best,
            "stages": {k: results[k].info.get("stages", {}) for k in keys}}
    return RegistrationResult(results[best].phi_a, per_atlas, fused, results[best].aligned_image,
                              strategy, len(keys), info)


def run_ensemble(image: Volume, atlas_set: AtlasSet, weights: LossWeights = LossWeights(),
                 config: OptimConfig = OptimConfig(), jobs: int = 1,
                 subjects: Optional[Sequence] = None) -> RegistrationResult:
    """Single-subject registration for every pregnancy, then a vote over subjects.

    A subject whose registration fails is left out with a warning.
    """
    subjects = list(subjects) if subjects is not None else atlas_set.pregnancies
    if len(atlas_set.pregnancies) < 2:
        raise SelectionError("the ensemble strategy needs at least two pregnancies", stage="select")
    if image.ga_days is None:
        raise SelectionError("image has no gestational age; atlas selection impossible",
                             stage="select")

    def one(k):
        try:
            return k, run_single_subject(image, atlas_set, k, weights, config)
        except EmbryoRegError as exc:
            log.warning("subject %s excluded from the ensemble: %s", k, exc)
            return k, exc

    done = _map(one, subjects, jobs)
    results = {k: r for k, r in done if isinstance(r, RegistrationResult)}
    failed = {k: str(r) for k, r in done if not isinstance(r, RegistrationResult)}
    if not results:
        raise next(r for _, r in done)
    out = ensemble_from(results)
    out.info["excluded"] = failed
    return out


# --------------------------------------------------------------------------
# Result directories


def _summary(res: RegistrationResult) -> dict:
    info = {k: v for k, v in res.info.items() if k != "traces"}
    return {
        "strategy": res.strategy,
        "M": res.m,
        "phi_a": res.phi_a.to_json()["matrix"],
        "atlases": [{"atlas_id": p.atlas_id, "pregnancy_id": p.pregnancy_id,
                     "similarity": p.similarity, "iterations": p.iterations,
                     "best_iter": p.best_iter} for p in res.per_atlas],
        "fused_voxels": res.fused_seg.count(),
        "info": info,
    }


def save_result(path, res: RegistrationResult) -> None:
    """Write the result directory; contents depend only on the result values."""
    os.makedirs(path, exist_ok=True)
    save_transform(os.path.join(path, "phi_a.json"), res.phi_a)
    save_mask(os.path.join(path, "seg.mmask"), res.fused_seg, res.aligned_image.ga_days)
    save_volume(os.path.join(path, "aligned.mvol"), res.aligned_image)
    for p in res.per_atlas:
        sub = os.path.join(path, "per_atlas", p.atlas_id)
        os.makedirs(sub, exist_ok=True)
        save_field(os.path.join(sub, "field.mfld"), p.velocity)
        save_mask(os.path.join(sub, "seg.mmask"), p.seg)
    with open(os.path.join(path, "result.json"), "w") as fh:
        json.dump(_summary(res), fh, indent=2, sort_keys=True)
        fh.write("\n")
