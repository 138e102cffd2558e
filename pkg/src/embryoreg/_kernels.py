"""Compiled trilinear sampling kernels and their adjoints.

Arrays are channel-last ``(D0, D1, D2, C)`` float64.  Coordinates are clamped
to ``[0, D - 1]`` per axis; the derivative with respect to a clamped
coordinate is zero.
"""

import numba
import numpy as np

_JIT = dict(nogil=True, cache=True)


@numba.njit(inline="always", **_JIT)
def _axis(x, n):
    # returns (lower index, upper index, fraction, derivative gate)
    if n == 1:
        return 0, 0, 0.0, 0.0
    gate = 1.0
    if x < 0.0:
        x = 0.0
        gate = 0.0
    elif x > n - 1.0:
        x = n - 1.0
        gate = 0.0
    i = int(np.floor(x))
    if i > n - 2:
        i = n - 2
    return i, i + 1, x - i, gate


@numba.njit(**_JIT)
def sample(arr, pts, out):
    d0, d1, d2, nc = arr.shape
    for n in range(pts.shape[0]):
        i0, i1, fx, _ = _axis(pts[n, 0], d0)
        j0, j1, fy, _ = _axis(pts[n, 1], d1)
        k0, k1, fz, _ = _axis(pts[n, 2], d2)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for c in range(nc):
            out[n, c] = (
                gx * (gy * (gz * arr[i0, j0, k0, c] + fz * arr[i0, j0, k1, c])
                      + fy * (gz * arr[i0, j1, k0, c] + fz * arr[i0, j1, k1, c]))
                + fx * (gy * (gz * arr[i1, j0, k0, c] + fz * arr[i1, j0, k1, c])
                        + fy * (gz * arr[i1, j1, k0, c] + fz * arr[i1, j1, k1, c])))


@numba.njit(**_JIT)
def sample_grad(arr, pts, out, grad):
    """Values plus spatial derivatives ``grad[n, c, axis]`` at each point."""
    d0, d1, d2, nc = arr.shape
    for n in range(pts.shape[0]):
        i0, i1, fx, ex = _axis(pts[n, 0], d0)
        j0, j1, fy, ey = _axis(pts[n, 1], d1)
        k0, k1, fz, ez = _axis(pts[n, 2], d2)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for c in range(nc):
            a000 = arr[i0, j0, k0, c]
            a001 = arr[i0, j0, k1, c]
            a010 = arr[i0, j1, k0, c]
            a011 = arr[i0, j1, k1, c]
            a100 = arr[i1, j0, k0, c]
            a101 = arr[i1, j0, k1, c]
            a110 = arr[i1, j1, k0, c]
            a111 = arr[i1, j1, k1, c]
            lo = gy * (gz * a000 + fz * a001) + fy * (gz * a010 + fz * a011)
            hi = gy * (gz * a100 + fz * a101) + fy * (gz * a110 + fz * a111)
            out[n, c] = gx * lo + fx * hi
            grad[n, c, 0] = ex * (hi - lo)
            grad[n, c, 1] = ey * (gx * ((gz * a010 + fz * a011) - (gz * a000 + fz * a001))
                                  + fx * ((gz * a110 + fz * a111) - (gz * a100 + fz * a101)))
            grad[n, c, 2] = ez * (gx * (gy * (a001 - a000) + fy * (a011 - a010))
                                  + fx * (gy * (a101 - a100) + fy * (a111 - a110)))


@numba.njit(**_JIT)
def sample_backward(arr, pts, gout, garr, gpts):
    """Adjoint of :func:`sample`: accumulates into ``garr`` and ``gpts``."""
    d0, d1, d2, nc = arr.shape
    for n in range(pts.shape[0]):
        i0, i1, fx, ex = _axis(pts[n, 0], d0)
        j0, j1, fy, ey = _axis(pts[n, 1], d1)
        k0, k1, fz, ez = _axis(pts[n, 2], d2)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        px = 0.0
        py = 0.0
        pz = 0.0
        for c in range(nc):
            g = gout[n, c]
            if g == 0.0:
                continue
            garr[i0, j0, k0, c] += g * gx * gy * gz
            garr[i0, j0, k1, c] += g * gx * gy * fz
            garr[i0, j1, k0, c] += g * gx * fy * gz
            garr[i0, j1, k1, c] += g * gx * fy * fz
            garr[i1, j0, k0, c] += g * fx * gy * gz
            garr[i1, j0, k1, c] += g * fx * gy * fz
            garr[i1, j1, k0, c] += g * fx * fy * gz
            garr[i1, j1, k1, c] += g * fx * fy * fz
            a000 = arr[i0, j0, k0, c]
            a001 = arr[i0, j0, k1, c]
            a010 = arr[i0, j1, k0, c]
            a011 = arr[i0, j1, k1, c]
            a100 = arr[i1, j0, k0, c]
            a101 = arr[i1, j0, k1, c]
            a110 = arr[i1, j1, k0, c]
            a111 = arr[i1, j1, k1, c]
            lo0 = gz * a000 + fz * a001
            lo1 = gz * a010 + fz * a011
            hi0 = gz * a100 + fz * a101
            hi1 = gz * a110 + fz * a111
            px += g * ((gy * hi0 + fy * hi1) - (gy * lo0 + fy * lo1))
            py += g * (gx * (lo1 - lo0) + fx * (hi1 - hi0))
            pz += g * (gx * (gy * (a001 - a000) + fy * (a011 - a010))
                       + fx * (gy * (a101 - a100) + fy * (a111 - a110)))
        gpts[n, 0] += ex * px
        gpts[n, 1] += ey * py
        gpts[n, 2] += ez * pz


def as_channels(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return arr[..., None] if arr.ndim == 3 else arr


def sample_points(arr, pts):
    """Sample a (D0,D1,D2) or (D0,D1,D2,C) array at points ``(N, 3)``."""
    a = as_channels(arr)
    p = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
    out = np.empty((p.shape[0], a.shape[3]))
    sample(a, p, out)
    return out[:, 0] if np.ndim(arr) == 3 else out


def sample_points_grad(arr, pts):
    a = as_channels(arr)
    p = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
    out = np.empty((p.shape[0], a.shape[3]))
    grad = np.empty((p.shape[0], a.shape[3], 3))
    sample_grad(a, p, out, grad)
    if np.ndim(arr) == 3:
        return out[:, 0], grad[:, 0, :]
    return out, grad


def lattice(dims) -> np.ndarray:
    """All voxel coordinates of a grid as ``(prod(dims), 3)``, C order."""
    axes = [np.arange(d, dtype=np.float64) for d in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


@numba.njit(**_JIT)
def _box_axis(src, dst, r, axis):
    # running window sum along one axis, window truncated at the edges
    n0, n1, n2 = src.shape
    n = src.shape[axis]
    m0 = n0 if axis != 0 else 1
    m1 = n1 if axis != 1 else 1
    m2 = n2 if axis != 2 else 1
    for a in range(m0):
        for b in range(m1):
            for c in range(m2):
                acc = 0.0
                for t in range(min(r + 1, n)):
                    if axis == 0:
                        acc += src[t, b, c]
                    elif axis == 1:
                        acc += src[a, t, c]
                    else:
                        acc += src[a, b, t]
                for t in range(n):
                    if axis == 0:
                        dst[t, b, c] = acc
                    elif axis == 1:
                        dst[a, t, c] = acc
                    else:
                        dst[a, b, t] = acc
                    hi = t + r + 1
                    lo = t - r
                    if hi < n:
                        if axis == 0:
                            acc += src[hi, b, c]
                        elif axis == 1:
                            acc += src[a, hi, c]
                        else:
                            acc += src[a, b, hi]
                    if lo >= 0:
                        if axis == 0:
                            acc -= src[lo, b, c]
                        elif axis == 1:
                            acc -= src[a, lo, c]
                        else:
                            acc -= src[a, b, lo]


@numba.njit(**_JIT)
def box_sum(x, r):
    tmp = np.empty_like(x)
    out = np.empty_like(x)
    _box_axis(x, out, r, 0)
    _box_axis(out, tmp, r, 1)
    _box_axis(tmp, out, r, 2)
    return out


@numba.njit(**_JIT)
def self_compose(d, out):
    """``out(x) = d(x) + d(x + d(x))`` on the lattice of ``d``."""
    d0, d1, d2, _ = d.shape
    for i in range(d0):
        for j in range(d1):
            for k in range(d2):
                i0, i1, fx, _ = _axis(i + d[i, j, k, 0], d0)
                j0, j1, fy, _ = _axis(j + d[i, j, k, 1], d1)
                k0, k1, fz, _ = _axis(k + d[i, j, k, 2], d2)
                gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
                for c in range(3):
                    out[i, j, k, c] = d[i, j, k, c] + (
                        gx * (gy * (gz * d[i0, j0, k0, c] + fz * d[i0, j0, k1, c])
                              + fy * (gz * d[i0, j1, k0, c] + fz * d[i0, j1, k1, c]))
                        + fx * (gy * (gz * d[i1, j0, k0, c] + fz * d[i1, j0, k1, c])
                                + fy * (gz * d[i1, j1, k0, c] + fz * d[i1, j1, k1, c])))


@numba.njit(**_JIT)
def self_compose_backward(d, g, gd):
    """Adjoint of :func:`self_compose` at ``d``: writes ``dL/dd`` into ``gd``."""
    d0, d1, d2, _ = d.shape
    gd[:] = g
    for i in range(d0):
        for j in range(d1):
            for k in range(d2):
                i0, i1, fx, ex = _axis(i + d[i, j, k, 0], d0)
                j0, j1, fy, ey = _axis(j + d[i, j, k, 1], d1)
                k0, k1, fz, ez = _axis(k + d[i, j, k, 2], d2)
                gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
                px = 0.0
                py = 0.0
                pz = 0.0
                for c in range(3):
                    w = g[i, j, k, c]
                    if w == 0.0:
                        continue
                    gd[i0, j0, k0, c] += w * gx * gy * gz
                    gd[i0, j0, k1, c] += w * gx * gy * fz
                    gd[i0, j1, k0, c] += w * gx * fy * gz
                    gd[i0, j1, k1, c] += w * gx * fy * fz
                    gd[i1, j0, k0, c] += w * fx * gy * gz
                    gd[i1, j0, k1, c] += w * fx * gy * fz
                    gd[i1, j1, k0, c] += w * fx * fy * gz
                    gd[i1, j1, k1, c] += w * fx * fy * fz
                    lo0 = gz * d[i0, j0, k0, c] + fz * d[i0, j0, k1, c]
                    lo1 = gz * d[i0, j1, k0, c] + fz * d[i0, j1, k1, c]
                    hi0 = gz * d[i1, j0, k0, c] + fz * d[i1, j0, k1, c]
                    hi1 = gz * d[i1, j1, k0, c] + fz * d[i1, j1, k1, c]
                    px += w * ((gy * hi0 + fy * hi1) - (gy * lo0 + fy * lo1))
                    py += w * (gx * (lo1 - lo0) + fx * (hi1 - hi0))
                    pz += w * (gx * (gy * (d[i0, j0, k1, c] - d[i0, j0, k0, c])
                                     + fy * (d[i0, j1, k1, c] - d[i0, j1, k0, c]))
                               + fx * (gy * (d[i1, j0, k1, c] - d[i1, j0, k0, c])
                                       + fy * (d[i1, j1, k1, c] - d[i1, j1, k0, c])))
                gd[i, j, k, 0] += ex * px
                gd[i, j, k, 1] += ey * py
                gd[i, j, k, 2] += ez * pz


@numba.njit(**_JIT)
def diffusion(d, mask, scale, grad):
    """``scale * sum_mask |grad d|^2`` with forward differences (backward at the last index).

    Accumulates the gradient into ``grad`` and returns the value.
    """
    n = d.shape[:3]
    total = 0.0
    for i in range(n[0]):
        for j in range(n[1]):
            for k in range(n[2]):
                if not mask[i, j, k]:
                    continue
                for a in range(3):
                    if n[a] < 2:
                        continue
                    p = (i, j, k)[a]
                    if p < n[a] - 1:
                        i1, j1, k1 = i + (a == 0), j + (a == 1), k + (a == 2)
                        i0, j0, k0 = i, j, k
                    else:
                        i1, j1, k1 = i, j, k
                        i0, j0, k0 = i - (a == 0), j - (a == 1), k - (a == 2)
                    for c in range(3):
                        diff = d[i1, j1, k1, c] - d[i0, j0, k0, c]
                        total += scale * diff * diff
                        g = 2.0 * scale * diff
                        grad[i1, j1, k1, c] += g
                        grad[i0, j0, k0, c] -= g
    return total
