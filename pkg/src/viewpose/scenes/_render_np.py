"""Pure-numpy raycasting kernel (fallback for the compiled core).

Keep every expression tree identical to _render_core.pyx: the two backends
must produce bit-identical images, which the test suite asserts.
"""

import numpy as np

_TINY_DIR = 1e-12


def trace_rays(origin, dirs, kinds, centers, sizes, albedos, background,
               light, ambient, diffuse, tmin):
    """Shade every ray against sphere/box primitives; returns (H, W, 3) in [0, 1]."""
    h, w = dirs.shape[:2]
    d = dirs.reshape(-1, 3)
    d0, d1, d2 = d[:, 0], d[:, 1], d[:, 2]
    ox, oy, oz = origin

    t_best = np.full(h * w, np.inf)
    normal = np.zeros((h * w, 3))
    color = np.broadcast_to(albedos[0] if len(kinds) else background,
                            (h * w, 3)).copy()
    any_hit = np.zeros(h * w, dtype=bool)

    for p in range(len(kinds)):
        if kinds[p] == 0:
            oc0 = ox - centers[p, 0]
            oc1 = oy - centers[p, 1]
            oc2 = oz - centers[p, 2]
            b = oc0 * d0 + oc1 * d1 + oc2 * d2
            cc = oc0 * oc0 + oc1 * oc1 + oc2 * oc2 - sizes[p] * sizes[p]
            disc = b * b - cc
            valid = disc >= 0.0
            root = np.sqrt(np.where(valid, disc, 0.0))
            t = -b - root
            t = np.where(t <= tmin, -b + root, t)
            hit = valid & (t > tmin) & (t < t_best)
            px = ox + t * d0
            py = oy + t * d1
            pz = oz + t * d2
            n = np.stack(
                [
                    (px - centers[p, 0]) / sizes[p],
                    (py - centers[p, 1]) / sizes[p],
                    (pz - centers[p, 2]) / sizes[p],
                ],
                axis=1,
            )
        else:
            dk = np.where(np.abs(d) < _TINY_DIR,
                          np.copysign(_TINY_DIR, d), d)
            inv = 1.0 / dk
            lo = (centers[p] - sizes[p] - origin) * inv
            hi = (centers[p] + sizes[p] - origin) * inv
            ts = np.minimum(lo, hi)
            tb = np.maximum(lo, hi)
            tnear = np.maximum(np.maximum(ts[:, 0], ts[:, 1]), ts[:, 2])
            tfar = np.minimum(np.minimum(tb[:, 0], tb[:, 1]), tb[:, 2])
            ax_near = np.argmax(ts, axis=1)
            ax_far = np.argmin(tb, axis=1)
            slab_hit = (tnear <= tfar) & (tfar > tmin)
            inside = tnear <= tmin
            t = np.where(inside, tfar, tnear)
            ax = np.where(inside, ax_far, ax_near)
            hit = slab_hit & (t < t_best)
            n = np.zeros((h * w, 3))
            sign = -np.copysign(1.0, dk)
            n[np.arange(h * w), ax] = sign[np.arange(h * w), ax]

        t_best = np.where(hit, t, t_best)
        normal = np.where(hit[:, None], n, normal)
        color = np.where(hit[:, None], albedos[p], color)
        any_hit |= hit

    nd = (normal[:, 0] * light[0] + normal[:, 1] * light[1]
          + normal[:, 2] * light[2])
    nd = np.where(nd < 0.0, 0.0, nd)
    shade = ambient + diffuse * nd
    out = np.where(any_hit[:, None], color * shade[:, None], background)
    return out.reshape(h, w, 3)
