"""Phantom atlas sets and image suites with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .affine import AffineTransform
from .atlas import AtlasSet, build_atlas, canonical_landmarks
from .phantom import (GA_MAX, GA_MIN, PhantomSpec, _stream, apply_known_deformation,
                      gen_phantom, random_similarity, smooth_velocity)
from .volume import Landmarks, Mask, Volume

# one scan per pregnancy, spread over the supported GA range
ATLAS_GAS = ((56,), (61,), (66,), (70,), (75,), (80,), (85,), (90,))
DEGRADED_NOISE = 6.0
DEGRADED_CLUTTER = 12
ATLAS_SEED = 1000
IMAGE_SEED = 2000


@dataclass
class Case:
    name: str
    image: Volume
    truth: Mask
    landmarks: Landmarks
    affine: AffineTransform
    velocity: Optional[object] = None


def make_atlas_set(dims=(64, 64, 64), gas=ATLAS_GAS, degraded: Optional[int] = None,
                   degraded_noise: float = DEGRADED_NOISE,
                   degraded_clutter: int = DEGRADED_CLUTTER) -> AtlasSet:
    """Atlases for ``len(gas)`` pregnancies, ids ``p<pregnancy>_ga<days>``.

    Pregnancy ``degraded`` (1-based), if given, gets heavy speckle and clutter.
    """
    canonical = canonical_landmarks(min(dims))
    atlases = []
    for i, pair in enumerate(gas, start=1):
        bad = degraded == i
        for ga in pair:
            spec = PhantomSpec(seed=ATLAS_SEED + i, ga_days=ga, dims=dims,
                               noise=degraded_noise if bad else 0.0,
                               clutter=degraded_clutter if bad else 0)
            v, m, _ = gen_phantom(spec)
            atlases.append(build_atlas(f"p{i}_ga{ga}", str(i), v, m, canonical))
    return AtlasSet(tuple(atlases), canonical)


def make_case(k: int, dims=(64, 64, 64), noise: float = 0.0, clutter: int = 0,
              deform: bool = True, max_velocity: float = 1.5, seed: int = IMAGE_SEED) -> Case:
    """Image ``k`` of a suite: a new pregnancy at a random GA in a random pose."""
    rng = _stream(seed, k)
    ga = int(rng.integers(GA_MIN, GA_MAX + 1))
    t = random_similarity(rng, dims)
    nu = smooth_velocity(rng, dims, max_velocity) if deform else None
    v, m, lms = gen_phantom(PhantomSpec(seed=seed + k, ga_days=ga, dims=dims,
                                        noise=noise, clutter=clutter))
    v2, m2, l2, _ = apply_known_deformation(v, m, lms, t, nu)
    return Case(f"case{k:02d}", v2, m2, l2, t, nu)


def make_image_suite(n: int = 20, **kw) -> list:
    return [make_case(k, **kw) for k in range(n)]
