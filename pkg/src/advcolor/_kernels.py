"""Numba kernels for the two hot paths: small convolutions and the
per-pixel color difference with its input gradient.

The color-difference kernel tracks forward-mode duals -- a value plus
three partial derivatives -- through the sRGB decode, the XYZ/Lab maps
and the full distance formula, so one pass yields both the per-pixel
distance and d(distance)/d(pixel).  Branch selection and the derivative
clamps mirror :mod:`.diffcore` exactly (sqrt derivative clamped at
1e-12, atan2 cotangents zero at the origin, piecewise ops follow the
forward branch).

All loops parallelize over independent output elements only, so results
are bit-deterministic regardless of thread count.
"""

from __future__ import annotations

import ctypes
import math

import numpy as np
from numba import njit, prange

# Large numpy temporaries would otherwise churn through mmap/munmap on
# glibc, costing a fresh page-fault pass per attack iteration.
try:
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except OSError:
    pass

# Constants shared with the numpy color pipeline.
_M = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)
M00, M01, M02 = _M[0]
M10, M11, M12 = _M[1]
M20, M21, M22 = _M[2]
WX = M00 + M01 + M02
WY = M10 + M11 + M12
WZ = M20 + M21 + M22

LAB_T0 = (6.0 / 29.0) ** 3
LAB_SLOPE = (29.0 / 6.0) ** 2 / 3.0
LAB_OFFSET = 4.0 / 29.0
P25_7 = 25.0 ** 7
RAD = math.pi / 180.0
DEG = 180.0 / math.pi
SQRT_CLAMP = 1e-12
ATAN2_CLAMP = 1e-24


# ---------------------------------------------------------------------------
# Dual-number helpers: (value, d/dx, d/dy, d/dz)
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _dadd(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3])


@njit(cache=True, fastmath=True)
def _dsub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3])


@njit(cache=True, fastmath=True)
def _dmul(a, b):
    return (
        a[0] * b[0],
        a[0] * b[1] + a[1] * b[0],
        a[0] * b[2] + a[2] * b[0],
        a[0] * b[3] + a[3] * b[0],
    )


@njit(cache=True, fastmath=True)
def _ddiv(a, b):
    v = a[0] / b[0]
    return (
        v,
        (a[1] - v * b[1]) / b[0],
        (a[2] - v * b[2]) / b[0],
        (a[3] - v * b[3]) / b[0],
    )


@njit(cache=True, fastmath=True)
def _dscale(a, k):
    return (a[0] * k, a[1] * k, a[2] * k, a[3] * k)


@njit(cache=True, fastmath=True)
def _dshift(a, k):
    return (a[0] + k, a[1], a[2], a[3])


@njit(cache=True, fastmath=True)
def _dneg(a):
    return (-a[0], -a[1], -a[2], -a[3])


@njit(cache=True, fastmath=True)
def _dsqrt(a):
    v = math.sqrt(a[0])
    d = 0.5 / math.sqrt(max(a[0], SQRT_CLAMP))
    return (v, d * a[1], d * a[2], d * a[3])


@njit(cache=True, fastmath=True)
def _dsin(a):
    c = math.cos(a[0])
    return (math.sin(a[0]), c * a[1], c * a[2], c * a[3])


@njit(cache=True, fastmath=True)
def _dcos(a):
    s = -math.sin(a[0])
    return (math.cos(a[0]), s * a[1], s * a[2], s * a[3])


@njit(cache=True, fastmath=True)
def _dexp(a):
    v = math.exp(a[0])
    return (v, v * a[1], v * a[2], v * a[3])


@njit(cache=True, fastmath=True)
def _dpow7(a):
    v = a[0]
    v2 = v * v
    v6 = v2 * v2 * v2
    d = 7.0 * v6
    return (v6 * v, d * a[1], d * a[2], d * a[3])


@njit(cache=True, fastmath=True)
def _dcbrt(a):
    # only called for arguments bounded away from zero
    c = np.cbrt(a[0])
    d = 1.0 / (3.0 * c * c)
    return (c, d * a[1], d * a[2], d * a[3])


@njit(cache=True, fastmath=True)
def _datan2(y, x):
    v = math.atan2(y[0], x[0])
    den = max(x[0] * x[0] + y[0] * y[0], ATAN2_CLAMP)
    gy = x[0] / den
    gx = -y[0] / den
    return (
        v,
        gy * y[1] + gx * x[1],
        gy * y[2] + gx * x[2],
        gy * y[3] + gx * x[3],
    )


@njit(cache=True, fastmath=True)
def _dhue(b, a):
    h = _dscale(_datan2(b, a), DEG)
    if h[0] < 0.0:
        h = _dshift(h, 360.0)
    return h


# ---------------------------------------------------------------------------
# sRGB -> Lab on duals
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _dlin(c):
    if c[0] <= 0.04045:
        return _dscale(c, 1.0 / 12.92)
    t = (c[0] + 0.055) / 1.055
    v = t ** 2.4
    d = (2.4 / 1.055) * v / t
    return (v, d * c[1], d * c[2], d * c[3])


@njit(cache=True, fastmath=True)
def _dlabf(t):
    if t[0] > LAB_T0:
        return _dcbrt(t)
    return _dshift(_dscale(t, LAB_SLOPE), LAB_OFFSET)


@njit(cache=True, fastmath=True)
def _dlab_from_srgb(r, g, b):
    lr, lg, lb = _dlin(r), _dlin(g), _dlin(b)
    x = _dadd(_dadd(_dscale(lr, M00), _dscale(lg, M01)), _dscale(lb, M02))
    y = _dadd(_dadd(_dscale(lr, M10), _dscale(lg, M11)), _dscale(lb, M12))
    z = _dadd(_dadd(_dscale(lr, M20), _dscale(lg, M21)), _dscale(lb, M22))
    fx = _dlabf(_dscale(x, 1.0 / WX))
    fy = _dlabf(_dscale(y, 1.0 / WY))
    fz = _dlabf(_dscale(z, 1.0 / WZ))
    ll = _dshift(_dscale(fy, 116.0), -16.0)
    aa = _dscale(_dsub(fx, fy), 500.0)
    bb = _dscale(_dsub(fy, fz), 200.0)
    return ll, aa, bb


# ---------------------------------------------------------------------------
# The distance formula on duals
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _de00_core(l1, a1, b1, l2, a2, b2, kl, kc, kh):
    c1 = _dsqrt(_dadd(_dmul(a1, a1), _dmul(b1, b1)))
    c2 = _dsqrt(_dadd(_dmul(a2, a2), _dmul(b2, b2)))
    cbar = _dscale(_dadd(c2, c1), 0.5)
    cb7 = _dpow7(cbar)
    g = _dscale(_dshift(_dneg(_dsqrt(_ddiv(cb7, _dshift(cb7, P25_7)))), 1.0), 0.5)
    gp = _dshift(g, 1.0)
    a1p = _dmul(gp, a1)
    a2p = _dmul(gp, a2)
    c1p = _dsqrt(_dadd(_dmul(a1p, a1p), _dmul(b1, b1)))
    c2p = _dsqrt(_dadd(_dmul(a2p, a2p), _dmul(b2, b2)))
    h1p = _dhue(b1, a1p)
    h2p = _dhue(b2, a2p)
    achroma = c1p[0] * c2p[0] == 0.0

    dl = _dsub(l2, l1)
    dc = _dsub(c2p, c1p)
    hd = _dsub(h2p, h1p)
    if achroma:
        dh = (0.0, 0.0, 0.0, 0.0)
    elif hd[0] > 180.0:
        dh = _dshift(hd, -360.0)
    elif hd[0] < -180.0:
        dh = _dshift(hd, 360.0)
    else:
        dh = hd
    dhh = _dmul(
        _dscale(_dsqrt(_dmul(c1p, c2p)), 2.0), _dsin(_dscale(dh, 0.5 * RAD))
    )

    lbar = _dscale(_dadd(l2, l1), 0.5)
    cbarp = _dscale(_dadd(c1p, c2p), 0.5)
    hsum = _dadd(h1p, h2p)
    if achroma:
        hbar = hsum
    elif abs(h1p[0] - h2p[0]) <= 180.0:
        hbar = _dscale(hsum, 0.5)
    elif hsum[0] < 360.0:
        hbar = _dscale(_dshift(hsum, 360.0), 0.5)
    else:
        hbar = _dscale(_dshift(hsum, -360.0), 0.5)

    t = (1.0, 0.0, 0.0, 0.0)
    t = _dsub(t, _dscale(_dcos(_dscale(_dshift(hbar, -30.0), RAD)), 0.17))
    t = _dadd(t, _dscale(_dcos(_dscale(hbar, 2.0 * RAD)), 0.24))
    t = _dadd(t, _dscale(_dcos(_dscale(_dshift(_dscale(hbar, 3.0), 6.0), RAD)), 0.32))
    t = _dsub(t, _dscale(_dcos(_dscale(_dshift(_dscale(hbar, 4.0), -63.0), RAD)), 0.20))

    hs = _dscale(_dshift(hbar, -275.0), 1.0 / 25.0)
    dtheta = _dscale(_dexp(_dneg(_dmul(hs, hs))), 30.0)
    cb7p = _dpow7(cbarp)
    rc = _dscale(_dsqrt(_ddiv(cb7p, _dshift(cb7p, P25_7))), 2.0)
    lm = _dshift(lbar, -50.0)
    ls = _dmul(lm, lm)
    sl = _dshift(_ddiv(_dscale(ls, 0.015), _dsqrt(_dshift(ls, 20.0))), 1.0)
    sc = _dshift(_dscale(cbarp, 0.045), 1.0)
    sh = _dshift(_dscale(_dmul(cbarp, t), 0.015), 1.0)
    rt = _dneg(_dmul(_dsin(_dscale(dtheta, 2.0 * RAD)), rc))

    fl = _ddiv(dl, _dscale(sl, kl))
    fc = _ddiv(dc, _dscale(sc, kc))
    fh = _ddiv(dhh, _dscale(sh, kh))
    s = _dadd(
        _dadd(_dmul(fl, fl), _dmul(fc, fc)),
        _dadd(_dmul(fh, fh), _dmul(rt, _dmul(fc, fh))),
    )
    return _dsqrt(s)


@njit(cache=True, parallel=True, fastmath=True)
def srgb_to_lab_vals(x, out):
    """Lab values of sRGB pixel rows via the same chain the duals use."""
    for p in prange(x.shape[0]):
        l, a, b = _dlab_from_srgb(
            (x[p, 0], 0.0, 0.0, 0.0),
            (x[p, 1], 0.0, 0.0, 0.0),
            (x[p, 2], 0.0, 0.0, 0.0),
        )
        out[p, 0] = l[0]
        out[p, 1] = a[0]
        out[p, 2] = b[0]


@njit(cache=True, parallel=True, fastmath=True)
def de00_ref(lab1, x2, kl, kc, kh, want_grad, de, grad):
    """Distance between fixed reference Lab rows and sRGB rows x2,
    with gradients taken with respect to x2."""
    for p in prange(lab1.shape[0]):
        l1 = (lab1[p, 0], 0.0, 0.0, 0.0)
        a1 = (lab1[p, 1], 0.0, 0.0, 0.0)
        b1 = (lab1[p, 2], 0.0, 0.0, 0.0)
        l2, a2, b2 = _dlab_from_srgb(
            (x2[p, 0], 1.0, 0.0, 0.0),
            (x2[p, 1], 0.0, 1.0, 0.0),
            (x2[p, 2], 0.0, 0.0, 1.0),
        )
        e = _de00_core(l1, a1, b1, l2, a2, b2, kl, kc, kh)
        de[p] = e[0]
        if want_grad:
            grad[p, 0] = e[1]
            grad[p, 1] = e[2]
            grad[p, 2] = e[3]


@njit(cache=True, parallel=True, fastmath=True)
def de00_lab(lab1, lab2, kl, kc, kh, want_grad, de, grad):
    """Per-pixel distance between Lab pixel rows, gradients wrt lab2."""
    for p in prange(lab1.shape[0]):
        l1 = (lab1[p, 0], 0.0, 0.0, 0.0)
        a1 = (lab1[p, 1], 0.0, 0.0, 0.0)
        b1 = (lab1[p, 2], 0.0, 0.0, 0.0)
        l2 = (lab2[p, 0], 1.0, 0.0, 0.0)
        a2 = (lab2[p, 1], 0.0, 1.0, 0.0)
        b2 = (lab2[p, 2], 0.0, 0.0, 1.0)
        e = _de00_core(l1, a1, b1, l2, a2, b2, kl, kc, kh)
        de[p] = e[0]
        if want_grad:
            grad[p, 0] = e[1]
            grad[p, 1] = e[2]
            grad[p, 2] = e[3]


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def conv2d_fwd(xp, w, b, stride, out):
    n_, ho, wo, cout = out.shape
    kh, kw, cin = w.shape[0], w.shape[1], w.shape[2]
    for n in range(n_):
        for oy in range(ho):
            iy = oy * stride
            for ox in range(wo):
                ix = ox * stride
                for oc in range(cout):
                    out[n, oy, ox, oc] = b[oc]
                for i in range(kh):
                    for j in range(kw):
                        for ic in range(cin):
                            v = xp[n, iy + i, ix + j, ic]
                            for oc in range(cout):
                                out[n, oy, ox, oc] += v * w[i, j, ic, oc]


@njit(cache=True, fastmath=True)
def conv2d_input_grad(dy, w, stride, dxp):
    n_, ho, wo, cout = dy.shape
    kh, kw, cin = w.shape[0], w.shape[1], w.shape[2]
    for n in range(n_):
        for oy in range(ho):
            iy = oy * stride
            for ox in range(wo):
                ix = ox * stride
                for i in range(kh):
                    for j in range(kw):
                        for ic in range(cin):
                            s = 0.0
                            for oc in range(cout):
                                s += dy[n, oy, ox, oc] * w[i, j, ic, oc]
                            dxp[n, iy + i, ix + j, ic] += s


@njit(cache=True, fastmath=True)
def conv2d_weight_grad(xp, dy, stride, dw):
    n_, ho, wo, cout = dy.shape
    kh, kw, cin = dw.shape[0], dw.shape[1], dw.shape[2]
    for t in range(kh * kw):
        i = t // kw
        j = t % kw
        for ic in range(cin):
            for oc in range(cout):
                dw[i, j, ic, oc] = 0.0
        for n in range(n_):
            for oy in range(ho):
                iy = oy * stride + i
                for ox in range(wo):
                    ix = ox * stride + j
                    for ic in range(cin):
                        v = xp[n, iy, ix, ic]
                        for oc in range(cout):
                            dw[i, j, ic, oc] += v * dy[n, oy, ox, oc]
