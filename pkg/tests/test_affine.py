import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from embryoreg.affine import (AffineTransform, apply_point, compose, invert, load_transform,
                              matrix_to_params, params_to_matrix, rotation_matrix, save_transform,
                              scaling_factors, similarity)
from embryoreg.errors import InputError, NonInvertibleError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def translation(v):
    return AffineTransform.from_linear(np.eye(3), v)


def random_affine(rng):
    lin = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    return AffineTransform.from_linear(lin, 5 * rng.standard_normal(3))


class TestParams:
    def test_identity(self):
        p = np.array([1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0], float)
        assert np.array_equal(params_to_matrix(p).matrix, np.eye(4))

    def test_translation_column(self):
        p = np.array([1, 0, 0, 2, 0, 1, 0, 3, 0, 0, 1, 4], float)
        t = params_to_matrix(p)
        assert np.array_equal(apply_point(t, [0, 0, 0]), [2, 3, 4])
        assert np.array_equal(t.linear, np.eye(3))

    def test_round_trip_exact(self, rng):
        for _ in range(100):
            p = rng.standard_normal(12) * 10
            assert np.array_equal(matrix_to_params(params_to_matrix(p)), p)

    @given(arrays(np.float64, 12, elements=finite))
    def test_round_trip_property(self, p):
        assert np.array_equal(params_to_matrix(p).params, p)

    def test_rejects_non_finite_and_bad_shape(self):
        p = np.zeros(12)
        p[3] = np.nan
        with pytest.raises(InputError):
            params_to_matrix(p)
        with pytest.raises(InputError):
            params_to_matrix(np.zeros(9))

    def test_last_row_enforced(self):
        m = np.eye(4)
        m[3, 0] = 1e-3
        with pytest.raises(InputError):
            AffineTransform(m)


class TestApply:
    def test_examples(self):
        assert np.array_equal(apply_point(AffineTransform.identity(), [5, 6, 7]), [5, 6, 7])
        assert np.array_equal(apply_point(translation([1, 0, 0]), [0, 0, 0]), [1, 0, 0])
        assert np.array_equal(apply_point(AffineTransform.from_linear(2 * np.eye(3)), [1, 1, 1]),
                              [2, 2, 2])

    def test_batched_matches_single(self, rng):
        t = random_affine(rng)
        pts = rng.standard_normal((10, 3))
        hom = np.hstack([pts, np.ones((10, 1))]) @ t.matrix.T
        assert np.allclose(apply_point(t, pts), hom[:, :3], atol=1e-12)


class TestCompose:
    def test_identity_left(self, rng):
        t = random_affine(rng)
        assert np.array_equal(compose(AffineTransform.identity(), t).matrix, t.matrix)

    def test_translations_add(self):
        t = compose(translation([1, 2, 3]), translation([-4, 0.5, 2]))
        assert np.allclose(t.translation, [-3, 2.5, 5]) and np.array_equal(t.linear, np.eye(3))

    def test_pointwise(self, rng):
        a, b = random_affine(rng), random_affine(rng)
        ab = compose(a, b)
        for x in rng.standard_normal((20, 3)) * 10:
            assert np.allclose(apply_point(ab, x), apply_point(a, apply_point(b, x)), atol=1e-10)


class TestInvert:
    def test_examples(self):
        assert np.allclose(invert(AffineTransform.identity()).matrix, np.eye(4))
        assert np.allclose(invert(translation([1, -2, 3])).translation, [-1, 2, -3])
        inv = invert(AffineTransform.from_linear(np.diag([2.0, 4.0, 8.0])))
        assert np.allclose(inv.linear, np.diag([0.5, 0.25, 0.125]))

    def test_singular(self):
        with pytest.raises(NonInvertibleError):
            invert(AffineTransform.from_linear(np.diag([1.0, 0.0, 1.0])))

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_compose_with_inverse_is_identity(self, seed):
        t = random_affine(np.random.default_rng(seed))
        assert np.allclose(compose(t, invert(t)).matrix, np.eye(4), atol=1e-8)


class TestScaling:
    def test_examples(self):
        assert np.allclose(scaling_factors(AffineTransform.identity()), [1, 1, 1])
        r = rotation_matrix((1, 2, 3), 0.7)
        assert np.allclose(scaling_factors(AffineTransform.from_linear(r)), [1, 1, 1])
        assert np.allclose(scaling_factors(AffineTransform.from_linear(np.diag([2, 1, 0.5]))),
                           [2, 1, 0.5])

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_similarity_has_equal_factors(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.uniform(0.5, 2)
        t = similarity(s, rotation_matrix(rng.standard_normal(3) + 1e-3, rng.uniform(0, 6)),
                       rng.standard_normal(3))
        assert np.allclose(scaling_factors(t), s)


def test_rotation_is_orthonormal(rng):
    r = rotation_matrix(rng.standard_normal(3), 1.1)
    assert np.allclose(r @ r.T, np.eye(3)) and np.isclose(np.linalg.det(r), 1.0)


def test_similarity_fixes_center():
    c = np.array([10.0, 20.0, 30.0])
    t = similarity(1.3, rotation_matrix((0, 0, 1), 0.4), (0, 0, 0), c)
    assert np.allclose(apply_point(t, c), c)


def test_json_round_trip(tmp_path, rng):
    t = random_affine(rng)
    save_transform(tmp_path / "t.json", t)
    assert np.array_equal(load_transform(tmp_path / "t.json").matrix, t.matrix)
