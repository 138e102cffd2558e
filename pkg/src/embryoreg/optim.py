"""Instance optimization of the registration objectives with Adam.

Each image is registered by minimizing the affine and nonrigid losses
directly.  The affine stages run in a centred parametrization,
``x -> c + L (x - c) + tau * u`` with ``c`` the grid centre and ``tau`` half
the grid side, so that one learning rate suits both the linear block and
the translation; gradients are chained back from the 12 matrix parameters.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .affine import AffineTransform, IDENTITY_PARAMS, apply_point, params_to_matrix
from .errors import DivergenceError, EmbryoRegError, InputError, NumericalError
from .fields import VelocityField
from .losses import AffineObjective, LossWeights, NonrigidObjective
from .volume import Landmarks, Mask, Volume

log = logging.getLogger(__name__)

GUARD_VOXELS = 2.0


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer settings.

    Learning rates act on the centred affine parameters and on control-grid
    velocities in voxels; see the module docstring.
    """
    lr_stage1: float = 1e-2
    lr_stage2: float = 1e-3
    lr_nonrigid: float = 5e-2
    iters: int = 300
    iters_stage1: Optional[int] = None
    iters_stage2: Optional[int] = None
    iters_nonrigid: Optional[int] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    control_grid: int = 16
    integration_grid: Optional[int] = 32
    svf_steps: int = 7
    seed: int = 0
    multi_start: bool = False
    multi_start_iters: int = 20

    def __post_init__(self):
        for name in ("lr_stage1", "lr_stage2", "lr_nonrigid"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        for name in ("iters", "iters_stage1", "iters_stage2", "iters_nonrigid"):
            val = getattr(self, name)
            if val is not None and (int(val) != val or val < 1):
                raise InputError(f"{name} must be a positive integer")
        if self.control_grid < 2 or self.svf_steps < 1:
            raise InputError("control_grid must be >= 2 and svf_steps >= 1")
        if self.integration_grid is not None and self.integration_grid < 2:
            raise InputError("integration_grid must be >= 2")
        if int(self.multi_start_iters) != self.multi_start_iters or self.multi_start_iters < 0:
            raise InputError("multi_start_iters must be a non-negative integer")

    @classmethod
    def network_rates(cls, **changes) -> "OptimConfig":
        """The learning rates used for training the amortizing networks (1e-4, 1e-5, 1e-4).

        Kept for reference; at these rates a few hundred instance iterations
        barely move the parameters.
        """
        return cls(**{"lr_stage1": 1e-4, "lr_stage2": 1e-5, "lr_nonrigid": 1e-4, **changes})

    def stage_iters(self, stage: str) -> int:
        return int(getattr(self, f"iters_{stage}") or self.iters)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class OptimResult:
    params: np.ndarray
    loss: float
    best_iter: int
    trace: list = field(default_factory=list)


def minimize(objective: Callable, init, lr: float, iters: int, beta1=0.9, beta2=0.999,
             eps=1e-8, stage: str = "optim", terms: Optional[Callable] = None) -> OptimResult:
    """Adam on ``objective(params) -> (value, grad)``; returns the best iterate.

    The trace holds one row per evaluated iterate: ``iteration`` and
    ``total``, plus whatever ``terms(params)`` reports right after the
    objective was evaluated at ``params``.
    """
    x = np.array(init, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best_f, best_i = x.copy(), np.inf, 0
    trace = []
    for it in range(int(iters) + 1):
        try:
            f, g = objective(x)
        except NumericalError as exc:
            raise DivergenceError(f"{stage}: {exc.detail} at iteration {it}", trace, stage) from exc
        row = {"iteration": it, "total": float(f)}
        if terms is not None:
            row.update(terms(x))
        trace.append(row)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"{stage}: non-finite loss at iteration {it}", trace, stage)
        if f < best_f:
            best_x, best_f, best_i = x.copy(), float(f), it
        if it == iters:
            break
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** (it + 1))
        vhat = v / (1 - beta2 ** (it + 1))
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return OptimResult(best_x, best_f, best_i, trace)


def write_trace(path, trace) -> None:
    keys = []
    for row in trace:
        keys += [k for k in row if k not in keys and not isinstance(row[k], (list, dict))]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()
                        if k in keys})


# --------------------------------------------------------------------------
# Affine stages


class CentredAffine:
    """Linear map between centred parameters ``q`` and matrix parameters ``p``."""

    def __init__(self, dims):
        self.center = (np.array(dims, dtype=float) - 1.0) / 2.0
        self.tau = max(float(max(dims)) / 2.0, 1.0)
        # p = J q + b
        jac = np.zeros((12, 12))
        for i in range(3):
            for j in range(3):
                jac[4 * i + j, 4 * i + j] = 1.0
                jac[4 * i + 3, 4 * i + j] = -self.center[j]
            jac[4 * i + 3, 4 * i + 3] = self.tau
        self.jac = jac
        self.offset = np.zeros(12)
        self.offset[[3, 7, 11]] = self.center

    def to_params(self, q):
        return self.jac @ q + self.offset

    def from_params(self, p):
        return np.linalg.solve(self.jac, np.asarray(p, dtype=float) - self.offset)

    def wrap(self, objective):
        def f(q):
            val, g = objective(self.to_params(q))
            return val, self.jac.T @ g
        return f


def landmark_error(t: AffineTransform, atlas_lms: Landmarks, image_lms: Landmarks) -> float:
    """Mean Euclidean distance in voxels between mapped atlas and image landmarks."""
    res = image_lms.array() - apply_point(t, atlas_lms.array())
    return float(np.linalg.norm(res, axis=1).mean())


def _affine_run(obj: AffineObjective, t_init: AffineTransform, lr, iters, config: OptimConfig,
                stage, dims):
    cp = CentredAffine(dims)
    q0 = cp.from_params(t_init.params)
    wrapped = cp.wrap(obj)

    res = minimize(wrapped, q0, lr, iters, config.adam_beta1, config.adam_beta2,
                   config.adam_eps, stage=stage, terms=lambda q: obj.last_terms)
    return params_to_matrix(cp.to_params(res.params)), res


def run_stage1(image: Volume, atlases, region: Mask, atlas_landmarks: Landmarks,
               weights: LossWeights = LossWeights(), config: OptimConfig = OptimConfig(),
               t_init: Optional[AffineTransform] = None):
    """Landmark-supervised affine stage from identity; returns ``(transform, OptimResult)``."""
    obj = AffineObjective(image, [getattr(a, "volume", a) for a in atlases], region, weights,
                          "stage1", atlas_landmarks, image.landmarks)
    return _affine_run(obj, t_init or AffineTransform.identity(), config.lr_stage1,
                       config.stage_iters("stage1"), config, "stage1", image.dims)


def run_stage2(image: Volume, t_init: AffineTransform, atlases, region: Mask,
               weights: LossWeights = LossWeights(), config: OptimConfig = OptimConfig(),
               atlas_landmarks: Optional[Landmarks] = None):
    """Similarity refinement with the scaling penalty, started at ``t_init``.

    When both landmark sets are known, a result that moves the landmark
    error more than two voxels above that of ``t_init`` is rejected in favour
    of ``t_init``.
    """
    obj = AffineObjective(image, [getattr(a, "volume", a) for a in atlases], region, weights, "stage2")
    t, res = _affine_run(obj, t_init, config.lr_stage2, config.stage_iters("stage2"), config,
                         "stage2", image.dims)
    if atlas_landmarks is not None and image.landmarks is not None:
        before = landmark_error(t_init, atlas_landmarks, image.landmarks)
        after = landmark_error(t, atlas_landmarks, image.landmarks)
        if after > before + GUARD_VOXELS:
            log.warning("stage 2 raised the landmark error from %.2f to %.2f voxels; keeping stage 1",
                        before, after)
            return t_init, replace(res, params=t_init.params.copy())
    return t, res


def _grid(n, dims):
    return tuple(int(min(n, d)) for d in dims)


def nonrigid_objective(moving: Volume, atlas_volume: Volume, region: Mask,
                       weights: LossWeights, config: OptimConfig) -> NonrigidObjective:
    dims = atlas_volume.dims
    integ = None if config.integration_grid is None else _grid(config.integration_grid, dims)
    return NonrigidObjective(atlas_volume, moving, region, weights,
                             control_dims=_grid(config.control_grid, dims),
                             integration_dims=integ, steps=config.svf_steps)


def run_nonrigid(moving: Volume, atlas, region: Mask, weights: LossWeights = LossWeights(),
                 config: OptimConfig = OptimConfig()):
    """Velocity field aligning ``moving`` (already in atlas space) to the atlas.

    Returns ``(VelocityField, OptimResult, NonrigidObjective)``; the field
    lives on the integration lattice in its own voxel units.
    """
    av = getattr(atlas, "volume", atlas)
    obj = nonrigid_objective(moving, av, region, weights, config)

    res = minimize(obj, obj.zeros(), config.lr_nonrigid, config.stage_iters("nonrigid"),
                   config.adam_beta1, config.adam_beta2, config.adam_eps, stage="nonrigid",
                   terms=lambda p: obj.last_terms)
    return obj.velocity(res.params), res, obj


def axis_rotations() -> list:
    """The 24 rotations permuting the coordinate axes (signed), identity first."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            r = np.zeros((3, 3))
            r[range(3), perm] = signs
            if np.linalg.det(r) > 0:
                out.append(r)
    return out


def multi_start(image: Volume, atlases, region: Mask, weights: LossWeights = LossWeights(),
                config: OptimConfig = OptimConfig()):
    """Best start among the axis-aligned rotations about the grid centre.

    Each start gets a short run of the stage-2 objective, which needs no
    landmarks; returns ``(transform, OptimResult)`` of the lowest loss.
    """
    obj = AffineObjective(image, [getattr(a, "volume", a) for a in atlases], region, weights, "stage2")
    c = (np.array(image.dims, dtype=float) - 1.0) / 2.0
    best = None
    for r in axis_rotations():
        t0 = AffineTransform.from_linear(r, c - r @ c)
        t, res = _affine_run(obj, t0, config.lr_stage1, config.multi_start_iters, config,
                             "multistart", image.dims)
        if best is None or res.loss < best[1].loss:
            best = (t, res)
    return best


def register_affine(image: Volume, atlases, region: Mask, canonical: Landmarks,
                    weights: LossWeights = LossWeights(), config: OptimConfig = OptimConfig()):
    """Stage 1 then stage 2; returns ``(transform, {stage: OptimResult})``.

    With ``config.multi_start`` the stages start from the best axis-aligned
    rotation, and stage 1 is skipped when the image has no landmarks.
    """
    stages = {}
    t_init = None
    if config.multi_start:
        t_init, stages["multistart"] = multi_start(image, atlases, region, weights, config)
    if config.multi_start and image.landmarks is None:
        t1 = t_init
    else:
        try:
            t1, stages["stage1"] = run_stage1(image, atlases, region, canonical, weights, config,
                                              t_init)
        except EmbryoRegError as exc:
            raise exc.with_stage("stage1")
    try:
        t2, stages["stage2"] = run_stage2(image, t1, atlases, region, weights, config, canonical)
    except EmbryoRegError as exc:
        raise exc.with_stage("stage2")
    return t2, stages


def register_pipeline(image: Volume, atlas_set, strategy: str = "multi", m: int = 4,
                      weights: LossWeights = LossWeights(), config: OptimConfig = OptimConfig(),
                      subject=None, jobs: int = 1):
    """Select atlases, align affinely, refine nonrigidly and fuse.

    ``strategy`` is ``single`` (needs ``subject``), ``multi`` or ``ensemble``.
    """
    from . import fusion

    if strategy == "single":
        if subject is None:
            raise InputError("the single-subject strategy needs a pregnancy id", stage="select")
        return fusion.run_single_subject(image, atlas_set, subject, weights, config)
    if strategy == "multi":
        return fusion.run_multi_subject(image, atlas_set, m, weights, config, jobs=jobs)
    if strategy == "ensemble":
        return fusion.run_ensemble(image, atlas_set, weights, config, jobs=jobs)
    raise InputError(f"unknown strategy {strategy!r}", stage="select")
