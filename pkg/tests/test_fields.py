import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from embryoreg.errors import DimensionMismatchError, InputError, NumericalError
from embryoreg.fields import (DisplacementField, VelocityField, compose_fields, integrate_svf,
                              invert_svf, jacobian_det, load_field, resize_field, save_field,
                              squaring_backward, squaring_forward)
from embryoreg.phantom import smooth_velocity


def interp(field, pts):
    """Independent trilinear sampling with edge clamping, per component."""
    coords = np.clip(pts, 0, np.array(field.shape[:3]) - 1).T
    return np.stack([ndimage.map_coordinates(field[..., c], coords, order=1, mode="nearest")
                     for c in range(3)], axis=-1)


def grid(dims):
    return np.indices(dims).reshape(3, -1).T.astype(float)


def euler_flow(v, n_steps):
    dims = v.shape[:3]
    x0 = grid(dims)
    x = x0.copy()
    for _ in range(n_steps):
        x = x + interp(v, x) / n_steps
    return (x - x0).reshape(v.shape)


class TestIntegrate:
    def test_zero(self):
        assert not integrate_svf(VelocityField.zeros((6, 6, 6))).data.any()
        assert not invert_svf(VelocityField.zeros((6, 6, 6))).data.any()

    def test_constant_velocity(self):
        c = (0.3, -0.7, 1.25)
        d = integrate_svf(VelocityField.constant((8, 8, 8), c)).data
        assert np.allclose(d, c, atol=1e-12)
        dinv = invert_svf(VelocityField.constant((8, 8, 8), c)).data
        assert np.allclose(dinv, -np.array(c), atol=1e-12)

    def test_matches_fine_euler(self, rng):
        v = smooth_velocity(rng, (16, 16, 16), 0.1)
        d = integrate_svf(v, 7).data
        oracle = euler_flow(v.data, 2 ** 10)
        assert np.abs(d - oracle).max() <= 1e-3

    def test_bad_steps_and_nan(self):
        v = VelocityField.zeros((4, 4, 4))
        with pytest.raises(InputError):
            integrate_svf(v, 0)
        with pytest.raises(NumericalError):
            VelocityField(np.full((4, 4, 4, 3), np.nan))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.5, 5.0))
    def test_inverse_consistency_and_positive_jacobian(self, seed, amp):
        v = smooth_velocity(np.random.default_rng(seed), (24, 24, 24), amp)
        fwd, inv = integrate_svf(v), invert_svf(v)
        err = np.linalg.norm(compose_fields(fwd, inv).data, axis=-1)[3:-3, 3:-3, 3:-3]
        assert err.max() <= 0.5
        assert jacobian_det(fwd).min() > 0


class TestAdjoint:
    def test_backward_is_the_adjoint_of_forward(self, rng):
        # the offset keeps border sample points off the clamp kink at the edge
        v = smooth_velocity(rng, (10, 10, 10), 1.5).data + 0.1
        g = rng.standard_normal(v.shape)
        dv = rng.standard_normal(v.shape)

        def f(x):
            return float((squaring_forward(x, 5)[-1] * g).sum())

        analytic = float((squaring_backward(squaring_forward(v, 5), g) * dv).sum())
        h = 1e-6
        numeric = (f(v + h * dv) - f(v - h * dv)) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-5)


class TestCompose:
    def test_zero_is_neutral(self, rng):
        f = DisplacementField(smooth_velocity(rng, (12, 12, 12), 1.0).data)
        z = DisplacementField.zeros(f.dims)
        assert np.allclose(compose_fields(z, f).data, f.data)
        assert np.allclose(compose_fields(f, z).data, f.data)

    def test_translations_add(self):
        a = DisplacementField.constant((8, 8, 8), (0.5, 0, -1))
        b = DisplacementField.constant((8, 8, 8), (1, 0.25, 0))
        assert np.allclose(compose_fields(a, b).data[2:-2, 2:-2, 2:-2], (1.5, 0.25, -1))

    def test_point_tracing(self, rng):
        dims = (16, 16, 16)
        outer = DisplacementField(smooth_velocity(rng, dims, 2.0).data)
        inner = DisplacementField(smooth_velocity(rng, dims, 2.0).data)
        out = compose_fields(outer, inner).data
        for x in rng.integers(0, 16, (50, 3)):
            y = x + inner.data[tuple(x)]
            z = y + interp(outer.data, y[None])[0]
            assert np.allclose(x + out[tuple(x)], z, atol=1e-10)

    def test_dims_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            compose_fields(DisplacementField.zeros((4, 4, 4)), DisplacementField.zeros((4, 4, 5)))


class TestJacobian:
    def test_identity(self):
        assert np.allclose(jacobian_det(DisplacementField.zeros((6, 6, 6))), 1.0)

    def test_linear_field(self):
        d = 0.1 * np.indices((8, 8, 8)).transpose(1, 2, 3, 0).astype(float)
        jd = jacobian_det(DisplacementField(d))
        assert np.allclose(jd[1:-1, 1:-1, 1:-1], 1.331)


class TestResize:
    def test_constant_field_rescales_units(self):
        f = VelocityField.constant((5, 9, 17), (1.0, 1.0, 1.0))
        g = resize_field(f, (9, 9, 9))
        assert np.allclose(g.data[..., 0], 2.0)
        assert np.allclose(g.data[..., 1], 1.0)
        assert np.allclose(g.data[..., 2], 0.5)

    def test_linear_field_round_trip(self):
        d = np.indices((5, 5, 5)).transpose(1, 2, 3, 0) * 0.1
        up = resize_field(DisplacementField(d), (9, 9, 9))
        back = resize_field(up, (5, 5, 5))
        assert np.allclose(back.data, d, atol=1e-12)


def test_field_file_round_trip(tmp_path, rng):
    f = VelocityField(rng.standard_normal((3, 4, 5, 3)).astype(np.float32))
    save_field(tmp_path / "f.mfld", f)
    g = load_field(tmp_path / "f.mfld")
    assert isinstance(g, VelocityField) and np.array_equal(g.data, f.data)
