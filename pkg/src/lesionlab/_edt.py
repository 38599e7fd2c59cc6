"""Separable exact squared Euclidean distance transform.

Lower-envelope-of-parabolas pass (Felzenszwalb & Huttenlocher) applied
along each axis in turn. Background samples seed the transform with 0,
foreground samples with +inf.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _intersect(f, p, q, step):
    xp = p * step
    xq = q * step
    return ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))


@njit(cache=True)
def _envelope_1d(f, n, step, out, v, z):
    # v: parabola vertex indices, z: boundaries between envelope segments
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        s = _intersect(f, v[k], q, step)
        while s <= z[k]:
            k -= 1
            s = _intersect(f, v[k], q, step)
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf

    if k < 0:
        for i in range(n):
            out[i] = np.inf
        return

    j = 0
    for i in range(n):
        xi = i * step
        while z[j + 1] < xi:
            j += 1
        p = v[j]
        d = xi - p * step
        out[i] = d * d + f[p]


@njit(cache=True)
def _pass_axis0(a, step):
    n0, n1, n2 = a.shape
    f = np.empty(n0)
    out = np.empty(n0)
    v = np.empty(n0, dtype=np.int64)
    z = np.empty(n0 + 1)
    for j in range(n1):
        for k in range(n2):
            for i in range(n0):
                f[i] = a[i, j, k]
            _envelope_1d(f, n0, step, out, v, z)
            for i in range(n0):
                a[i, j, k] = out[i]


@njit(cache=True)
def _pass_axis1(a, step):
    n0, n1, n2 = a.shape
    f = np.empty(n1)
    out = np.empty(n1)
    v = np.empty(n1, dtype=np.int64)
    z = np.empty(n1 + 1)
    for i in range(n0):
        for k in range(n2):
            for j in range(n1):
                f[j] = a[i, j, k]
            _envelope_1d(f, n1, step, out, v, z)
            for j in range(n1):
                a[i, j, k] = out[j]


@njit(cache=True)
def _pass_axis2(a, step):
    n0, n1, n2 = a.shape
    f = np.empty(n2)
    out = np.empty(n2)
    v = np.empty(n2, dtype=np.int64)
    z = np.empty(n2 + 1)
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                f[k] = a[i, j, k]
            _envelope_1d(f, n2, step, out, v, z)
            for k in range(n2):
                a[i, j, k] = out[k]


def squared_edt(foreground, spacing=(1.0, 1.0, 1.0)):
    """Squared distance from every voxel to the nearest background voxel.

    ``foreground`` is a 3D boolean array. Voxels outside the array are
    *not* considered; callers pad beforehand when they want that.
    """
    a = np.where(foreground, np.inf, 0.0)
    _pass_axis0(a, float(spacing[0]))
    _pass_axis1(a, float(spacing[1]))
    _pass_axis2(a, float(spacing[2]))
    return a
