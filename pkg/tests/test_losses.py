import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sphere
from embryoreg.affine import AffineTransform, rotation_matrix, similarity
from embryoreg.errors import InputError, MissingLandmarksError, NonInvertibleError, NumericalError
from embryoreg.fields import DisplacementField, VelocityField, integrate_svf
from embryoreg.losses import (AffineObjective, LossWeights, NonrigidObjective, VARIANCE_EPS,
                              box_sum, diffusion_reg, fd_check, landmark_mse, landmark_mse_grad,
                              ncc_local_sq, nonrigid_loss, scaling_penalty, scaling_penalty_grad,
                              stage1_loss, stage2_loss)
from embryoreg.phantom import smooth_velocity
from embryoreg.sampler import warp_affine, warp_field
from embryoreg.volume import Landmarks, Mask, Volume

LN2 = math.log(2.0)


def naive_ncc(a, y, region, window):
    """Per-voxel loop: windows truncated at the grid, zero-variance windows score 0."""
    r = window // 2
    total = 0.0
    dims = a.shape
    for x in np.argwhere(region):
        sl = tuple(slice(max(c - r, 0), min(c + r + 1, n)) for c, n in zip(x, dims))
        wa, wy = a[sl].ravel(), y[sl].ravel()
        n = wa.size
        da, dy = wa - wa.mean(), wy - wy.mean()
        va, vy = (da * da).sum(), (dy * dy).sum()
        if va > VARIANCE_EPS * n and vy > VARIANCE_EPS * n:
            total += (da * dy).sum() ** 2 / (va * vy)
    return total / region.sum()


def naive_diffusion(d, region):
    n = d.shape[:3]
    total = 0.0
    for x in np.argwhere(region):
        for a in range(3):
            lo, hi = list(x), list(x)
            if x[a] < n[a] - 1:
                hi[a] += 1
            else:
                lo[a] -= 1
            total += ((d[tuple(hi)] - d[tuple(lo)]) ** 2).sum()
    return total / region.sum()


def textured(rng, dims):
    return Volume(rng.random(dims) + 0.5 * np.sin(np.indices(dims).sum(0) / 3.0))


def region_with_edges(rng, dims, p=0.1):
    m = rng.random(dims) < p
    m[0, 0, 0] = m[-1, -1, -1] = m[0, -1, 3] = True
    return Mask(m)


class TestBoxSum:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 3))
    def test_matches_slicing(self, seed, r):
        x = np.random.default_rng(seed).standard_normal((7, 5, 6))
        out = box_sum(x, r)
        for idx in itertools.product(*(range(n) for n in x.shape)):
            sl = tuple(slice(max(c - r, 0), c + r + 1) for c in idx)
            assert out[idx] == pytest.approx(x[sl].sum(), abs=1e-12)


class TestNcc:
    def test_matches_naive_on_random_pairs(self, rng):
        dims = (24, 24, 24)
        for _ in range(5):
            a, y = textured(rng, dims), textured(rng, dims)
            reg = region_with_edges(rng, dims, 0.03)
            assert ncc_local_sq(a, y, reg, 9) == pytest.approx(naive_ncc(a.data, y.data, reg.data, 9),
                                                                abs=1e-10)

    def test_fixed_nine_cube_patterns(self):
        i, j, k = np.indices((9, 9, 9)).astype(float)
        a = Volume(np.sin(i) + np.cos(2 * j) * k / 9.0)
        y = Volume(np.cos(i * j / 7.0) + 0.1 * k)
        full = Mask(np.ones((9, 9, 9), bool))
        for w in (3, 5, 9):
            assert ncc_local_sq(a, y, full, w) == pytest.approx(naive_ncc(a.data, y.data, full.data, w),
                                                                 abs=1e-10)

    def test_self_correlation_is_one(self, rng):
        v = textured(rng, (16, 16, 16))
        reg = Mask(np.ones(v.dims, bool))
        assert ncc_local_sq(v, v, reg) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-5, 5).filter(lambda s: abs(s) > 0.05), st.floats(-10, 10))
    def test_affine_intensity_invariance(self, alpha, beta):
        v = textured(np.random.default_rng(3), (12, 12, 12))
        reg = sphere(v.dims, (6, 6, 6), 4)
        y = Volume(alpha * v.data + beta)
        assert ncc_local_sq(v, y, reg) == pytest.approx(1.0, abs=1e-9)

    def test_flat_windows_do_not_count(self, rng):
        v = Volume(np.zeros((12, 12, 12)))
        reg = Mask(np.ones(v.dims, bool))
        assert ncc_local_sq(v, textured(rng, v.dims), reg) == 0.0

    def test_empty_region(self, rng):
        v = textured(rng, (6, 6, 6))
        with pytest.raises(InputError):
            ncc_local_sq(v, v, Mask(np.zeros(v.dims, bool)))


class TestLandmarks:
    lms = Landmarks((10, 10, 10), (20, 15, 12))

    def test_identity_matching(self):
        assert landmark_mse(AffineTransform.identity(), self.lms, self.lms) == 0.0

    def test_three_four_five(self):
        moved = Landmarks.from_array(self.lms.array() + [3, 4, 0])
        assert landmark_mse(AffineTransform.identity(), self.lms, moved) == pytest.approx(25.0)

    def test_random_against_hand_computation(self, rng):
        t = AffineTransform.from_linear(np.eye(3) + 0.2 * rng.standard_normal((3, 3)),
                                        rng.standard_normal(3))
        b = Landmarks((1, 2, 3), (7, 8, 9))
        a = self.lms.array()
        hand = sum(float(np.sum((np.array(q) - (t.matrix[:3, :3] @ p + t.matrix[:3, 3])) ** 2))
                   for p, q in zip(a, b.array())) / 2
        assert landmark_mse(t, self.lms, b) == pytest.approx(hand, rel=1e-12)

    def test_translation_gradient(self, rng):
        b = Landmarks.from_array(self.lms.array() + rng.standard_normal((2, 3)))
        g = landmark_mse_grad(AffineTransform.identity(), self.lms, b).reshape(3, 4)
        res = b.array() - self.lms.array()
        assert np.allclose(g[:, 3], -2.0 * res.mean(axis=0))

    def test_missing(self):
        with pytest.raises(MissingLandmarksError):
            landmark_mse(AffineTransform.identity(), self.lms, None)


class TestScalingPenalty:
    def test_examples(self):
        assert scaling_penalty(AffineTransform.identity()) == 0.0
        assert scaling_penalty(AffineTransform.from_linear(rotation_matrix((1, 1, 0), 0.5))) \
            == pytest.approx(0.0, abs=1e-20)
        assert scaling_penalty(AffineTransform.from_linear(np.diag([2.0, 1, 1]))) \
            == pytest.approx(LN2 ** 2)
        assert scaling_penalty(AffineTransform.from_linear(np.diag([2.0, 0.5, 1]))) \
            == pytest.approx(2 * LN2 ** 2)
        assert LN2 ** 2 == pytest.approx(0.4805, abs=1e-4)

    def test_gradient_zero_at_identity(self):
        assert np.array_equal(scaling_penalty_grad(AffineTransform.identity()), np.zeros(12))

    def test_singular(self):
        with pytest.raises(NonInvertibleError):
            scaling_penalty(AffineTransform.from_linear(np.diag([1.0, 0, 1])))


class TestDiffusion:
    def test_constant_field(self):
        d = DisplacementField.constant((6, 6, 6), (1, 2, 3))
        assert diffusion_reg(d, Mask(np.ones((6, 6, 6), bool))) == 0.0

    def test_linear_field(self):
        d = np.zeros((8, 8, 8, 3))
        d[..., 0] = 0.1 * np.indices((8, 8, 8))[0]
        assert diffusion_reg(DisplacementField(d), Mask(np.ones((8, 8, 8), bool))) \
            == pytest.approx(0.01, abs=1e-15)

    def test_random_field_matches_loop(self, rng):
        d = rng.standard_normal((7, 8, 6, 3))
        reg = region_with_edges(rng, (7, 8, 6), 0.4)
        assert diffusion_reg(DisplacementField(d), reg) == pytest.approx(naive_diffusion(d, reg.data),
                                                                         abs=1e-10)


class TestAffineStages:
    @pytest.fixture
    def pair(self, rng):
        v = textured(rng, (14, 14, 14))
        lms = Landmarks((4, 7, 7), (10, 7, 7))
        return v, lms, sphere(v.dims, (7, 7, 7), 4)

    def test_stage1_at_optimum(self, pair):
        v, lms, reg = pair
        assert stage1_loss(v, AffineTransform.identity(), [v], reg, lms, lms) == pytest.approx(-1.0)

    def test_stage1_without_landmark_weight(self, pair, rng):
        v, lms, reg = pair
        t = similarity(1.05, rotation_matrix((0, 0, 1), 0.1), (0.3, 0, 0), (7, 7, 7))
        far = Landmarks((1, 1, 1), (2, 2, 2))
        val = stage1_loss(v, t, [v], reg, lms, far, LossWeights(lambda_l=0.0))
        assert val == pytest.approx(-ncc_local_sq(v, warp_affine(v, t), reg), abs=1e-12)

    def test_stage1_averages_atlases(self, pair, rng):
        v, lms, reg = pair
        a2 = textured(rng, v.dims)
        t = AffineTransform.from_linear(np.eye(3), (0.4, -0.2, 0.1))
        img = Landmarks((5, 6, 7), (9, 8, 7))
        moved = warp_affine(v, t)
        hand = -(ncc_local_sq(v, moved, reg) + ncc_local_sq(a2, moved, reg)) / 2 \
            + landmark_mse(t, lms, img)
        assert stage1_loss(v, t, [v, a2], reg, lms, img) == pytest.approx(hand, abs=1e-12)

    def test_stage2_examples(self, pair):
        v, _, reg = pair
        assert stage2_loss(v, AffineTransform.identity(), [v], reg) == pytest.approx(-1.0)
        t = AffineTransform.from_linear(np.diag([2.0, 1, 1]))
        ncc = ncc_local_sq(v, warp_affine(v, t), reg)
        assert stage2_loss(v, t, [v], reg) == pytest.approx(-ncc + 0.05 * LN2 ** 2, abs=1e-12)
        assert stage2_loss(v, t, [v], reg, LossWeights(lambda_s=0)) == pytest.approx(-ncc, abs=1e-12)

    def test_stage1_needs_landmarks(self, pair):
        v, lms, reg = pair
        with pytest.raises(MissingLandmarksError):
            AffineObjective(v, [v], reg, stage="stage1", atlas_landmarks=lms, image_landmarks=None)

    def test_no_atlas(self, pair):
        v, _, reg = pair
        with pytest.raises(InputError):
            AffineObjective(v, [], reg, stage="stage2")

    @pytest.mark.parametrize("stage", ["stage1", "stage2"])
    def test_gradient_small_instance(self, pair, rng, stage):
        v, lms, reg = pair
        img = Volume(warp_affine(textured(rng, v.dims), AffineTransform.identity()).data)
        obj = AffineObjective(img, [v], reg, stage=stage, atlas_landmarks=lms,
                              image_landmarks=Landmarks((4.5, 7, 7), (10, 7.5, 7)))
        # chosen so that no sample coordinate lands on a lattice plane
        p = np.array([1.02, 0.01, 0.003, 0.31, -0.004, 0.98, 0.02, 0.17, 0.01, 0.0, 1.01, -0.2345])
        assert fd_check(obj, p, h=1e-5, tol=1e-5)["passed"]


class TestNonrigid:
    @pytest.fixture
    def pair(self, rng):
        a = textured(rng, (12, 12, 12))
        return a, sphere(a.dims, (6, 6, 6), 4)

    def test_zero_velocity_on_atlas(self, pair):
        a, reg = pair
        assert nonrigid_loss(a, a, VelocityField.zeros(a.dims), reg) == pytest.approx(-1.0)

    def test_components(self, pair, rng):
        a, reg = pair
        moving = textured(rng, a.dims)
        v = smooth_velocity(rng, a.dims, 0.8)
        d = integrate_svf(v)
        sim = -ncc_local_sq(a, warp_field(moving, d), reg)
        assert nonrigid_loss(a, moving, v, reg, LossWeights(lambda_d=0)) == pytest.approx(sim, abs=1e-12)
        full = sim + 10 * diffusion_reg(d, reg)
        assert nonrigid_loss(a, moving, v, reg) == pytest.approx(full, abs=1e-12)
        obj = NonrigidObjective(a, moving, reg, control_dims=a.dims)
        assert obj(v.data.ravel())[0] == pytest.approx(full, abs=1e-12)

    def test_gradient_small_instance(self, pair, rng):
        a, reg = pair
        moving = textured(rng, a.dims)
        obj = NonrigidObjective(a, moving, reg, control_dims=(4, 4, 4))
        p = 0.35 + 0.05 * rng.standard_normal(obj.size)
        assert fd_check(obj, p, h=1e-5, tol=1e-5)["passed"]


def test_fd_check_reports_nan_component():
    def obj(p):
        g = np.zeros_like(p)
        g[2] = np.nan
        return 0.0, g

    with pytest.raises(NumericalError) as exc:
        fd_check(obj, np.zeros(4))
    assert exc.value.index == 2


def test_weights_validated():
    with pytest.raises(InputError):
        LossWeights(lambda_d=-1)
    with pytest.raises(InputError):
        LossWeights(window=4)
