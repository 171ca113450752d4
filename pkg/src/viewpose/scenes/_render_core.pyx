# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled raycasting kernel.

Mirrors _render_np.trace_rays operation-for-operation (same expression
trees, same association, no fast-math) so the two backends produce
bit-identical images.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport copysign, fabs, sqrt

cnp.import_array()

DEF TINY_DIR = 1e-12


def trace_rays(
    cnp.float64_t[::1] origin,
    cnp.float64_t[:, :, ::1] dirs,
    cnp.int32_t[::1] kinds,
    cnp.float64_t[:, ::1] centers,
    cnp.float64_t[::1] sizes,
    cnp.float64_t[:, ::1] albedos,
    cnp.float64_t[::1] background,
    cnp.float64_t[::1] light,
    double ambient,
    double diffuse,
    double tmin,
):
    """Shade every ray against sphere/box primitives; returns (H, W, 3) in [0, 1]."""
    cdef Py_ssize_t h = dirs.shape[0]
    cdef Py_ssize_t w = dirs.shape[1]
    cdef Py_ssize_t n_prim = kinds.shape[0]
    out_arr = np.empty((h, w, 3), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] out = out_arr

    cdef Py_ssize_t i, j, p, k, ax
    cdef double d0, d1, d2, t_best, t, s
    cdef double oc0, oc1, oc2, b, cc, disc, root
    cdef double n0, n1, n2, nd, shade, inv, lo, hi, t0, t1, tmp
    cdef double ts0, ts1, ts2, tb0, tb1, tb2, tnear, tfar
    cdef double dk0, dk1, dk2
    cdef double px, py, pz
    cdef int best, hit_axis, axis_sign

    cdef double ox = origin[0]
    cdef double oy = origin[1]
    cdef double oz = origin[2]
    cdef double lx = light[0]
    cdef double ly = light[1]
    cdef double lz = light[2]

    for i in range(h):
        for j in range(w):
            d0 = dirs[i, j, 0]
            d1 = dirs[i, j, 1]
            d2 = dirs[i, j, 2]
            t_best = np.inf
            best = -1
            n0 = n1 = n2 = 0.0
            for p in range(n_prim):
                if kinds[p] == 0:
                    # sphere: |o + t d - c|^2 = r^2
                    oc0 = ox - centers[p, 0]
                    oc1 = oy - centers[p, 1]
                    oc2 = oz - centers[p, 2]
                    b = oc0 * d0 + oc1 * d1 + oc2 * d2
                    cc = oc0 * oc0 + oc1 * oc1 + oc2 * oc2 - sizes[p] * sizes[p]
                    disc = b * b - cc
                    if disc < 0.0:
                        continue
                    root = sqrt(disc)
                    t = -b - root
                    if t <= tmin:
                        t = -b + root
                    if t <= tmin or t >= t_best:
                        continue
                    t_best = t
                    best = p
                    px = ox + t * d0
                    py = oy + t * d1
                    pz = oz + t * d2
                    n0 = (px - centers[p, 0]) / sizes[p]
                    n1 = (py - centers[p, 1]) / sizes[p]
                    n2 = (pz - centers[p, 2]) / sizes[p]
                else:
                    # axis-aligned box via slabs; near-zero direction
                    # components are clamped so no infinities appear
                    dk0 = d0
                    if fabs(dk0) < TINY_DIR:
                        dk0 = copysign(TINY_DIR, dk0)
                    dk1 = d1
                    if fabs(dk1) < TINY_DIR:
                        dk1 = copysign(TINY_DIR, dk1)
                    dk2 = d2
                    if fabs(dk2) < TINY_DIR:
                        dk2 = copysign(TINY_DIR, dk2)

                    s = sizes[p]
                    inv = 1.0 / dk0
                    t0 = (centers[p, 0] - s - ox) * inv
                    t1 = (centers[p, 0] + s - ox) * inv
                    if t0 < t1:
                        ts0 = t0
                        tb0 = t1
                    else:
                        ts0 = t1
                        tb0 = t0
                    inv = 1.0 / dk1
                    t0 = (centers[p, 1] - s - oy) * inv
                    t1 = (centers[p, 1] + s - oy) * inv
                    if t0 < t1:
                        ts1 = t0
                        tb1 = t1
                    else:
                        ts1 = t1
                        tb1 = t0
                    inv = 1.0 / dk2
                    t0 = (centers[p, 2] - s - oz) * inv
                    t1 = (centers[p, 2] + s - oz) * inv
                    if t0 < t1:
                        ts2 = t0
                        tb2 = t1
                    else:
                        ts2 = t1
                        tb2 = t0

                    tnear = ts0
                    ax = 0
                    if ts1 > tnear:
                        tnear = ts1
                        ax = 1
                    if ts2 > tnear:
                        tnear = ts2
                        ax = 2
                    tfar = tb0
                    hit_axis = 0
                    if tb1 < tfar:
                        tfar = tb1
                        hit_axis = 1
                    if tb2 < tfar:
                        tfar = tb2
                        hit_axis = 2
                    if tnear > tfar or tfar <= tmin:
                        continue
                    if tnear > tmin:
                        t = tnear
                        axis_sign = -1
                    else:
                        # origin inside the box: exit face, normal toward camera
                        t = tfar
                        ax = hit_axis
                        axis_sign = -1
                    if t >= t_best:
                        continue
                    t_best = t
                    best = p
                    if ax == 0:
                        n0 = axis_sign * copysign(1.0, dk0)
                        n1 = 0.0
                        n2 = 0.0
                    elif ax == 1:
                        n0 = 0.0
                        n1 = axis_sign * copysign(1.0, dk1)
                        n2 = 0.0
                    else:
                        n0 = 0.0
                        n1 = 0.0
                        n2 = axis_sign * copysign(1.0, dk2)

            if best < 0:
                out[i, j, 0] = background[0]
                out[i, j, 1] = background[1]
                out[i, j, 2] = background[2]
            else:
                nd = n0 * lx + n1 * ly + n2 * lz
                if nd < 0.0:
                    nd = 0.0
                shade = ambient + diffuse * nd
                out[i, j, 0] = albedos[best, 0] * shade
                out[i, j, 1] = albedos[best, 1] * shade
                out[i, j, 2] = albedos[best, 2] * shade

    return out_arr
