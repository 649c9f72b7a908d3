"""Differentiable color-space conversions: sRGB <-> linear RGB <-> XYZ <-> CIELAB <-> CIELCH.

Illuminant D65, 2 degree observer throughout.  All conversions are
per-pixel maps over arrays whose last axis holds the three channels, so
they accept single images (H, W, 3), batches (N, H, W, 3) or bare pixels
(3,).  Hue is measured in degrees in [0, 360); when chroma is zero, hue
is 0 and its partial derivatives are defined as 0.
"""

from __future__ import annotations

import numpy as np

from . import diffcore
from .diffcore import Lambda, register_primitive
from .exceptions import DomainError, ShapeError

# sRGB primaries -> XYZ under D65 (IEC 61966-2-1).
SRGB_TO_XYZ_MATRIX = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# True inverse of the forward matrix (the published 7-digit inverse is only
# accurate to ~1e-7, which breaks the 1e-6 round-trip guarantee near black).
XYZ_TO_SRGB_MATRIX = np.linalg.inv(SRGB_TO_XYZ_MATRIX)

# Reference white = image of linear (1,1,1); keeps white -> (100, 0, 0) exact.
WHITE_D65 = SRGB_TO_XYZ_MATRIX.sum(axis=1)

_KNEE_SRGB = 0.04045
_KNEE_LINEAR = 0.0031308
_LAB_T0 = (6.0 / 29.0) ** 3
_LAB_SLOPE = (29.0 / 6.0) ** 2 / 3.0
_LAB_OFFSET = 4.0 / 29.0
_RANGE_TOL = 1e-9


def _require_channels(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != 3:
        raise ShapeError(f"{name} must have 3 channels on the last axis, got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# sRGB <-> linear RGB
# ---------------------------------------------------------------------------

def srgb_to_linear(img):
    """Decode the sRGB transfer function; components must lie in [0, 1]."""
    img = _require_channels(img, "sRGB image")
    lo, hi = float(np.min(img)), float(np.max(img))
    if lo < -_RANGE_TOL or hi > 1.0 + _RANGE_TOL:
        raise DomainError(f"sRGB components must lie in [0, 1], got [{lo}, {hi}]")
    return np.where(img <= _KNEE_SRGB, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)


def _srgb_to_linear_vjp(img, ct):
    img = np.asarray(img, dtype=np.float64)
    slope = np.where(
        img <= _KNEE_SRGB,
        1.0 / 12.92,
        (2.4 / 1.055) * ((img + 0.055) / 1.055) ** 1.4,
    )
    return slope * ct


def linear_to_srgb(lin):
    lin = _require_channels(lin, "linear RGB image")
    return np.where(
        lin <= _KNEE_LINEAR, 12.92 * lin, 1.055 * np.maximum(lin, 0.0) ** (1.0 / 2.4) - 0.055
    )


# ---------------------------------------------------------------------------
# linear RGB <-> XYZ
# ---------------------------------------------------------------------------

def linear_to_xyz(lin):
    lin = _require_channels(lin, "linear RGB image")
    return lin @ SRGB_TO_XYZ_MATRIX.T


def _linear_to_xyz_vjp(lin, ct):
    return np.asarray(ct, dtype=np.float64) @ SRGB_TO_XYZ_MATRIX


def xyz_to_linear(xyz):
    xyz = _require_channels(xyz, "XYZ image")
    return xyz @ XYZ_TO_SRGB_MATRIX.T


# ---------------------------------------------------------------------------
# XYZ <-> CIELAB
# ---------------------------------------------------------------------------

def _lab_f(t):
    return np.where(t > _LAB_T0, np.cbrt(t), _LAB_SLOPE * t + _LAB_OFFSET)


def _lab_f_prime(t):
    smooth = np.cbrt(np.maximum(t, _LAB_T0)) ** -2 / 3.0
    return np.where(t > _LAB_T0, smooth, _LAB_SLOPE)


def xyz_to_lab(xyz):
    """CIE L*a*b* under D65; XYZ must be nonnegative."""
    xyz = _require_channels(xyz, "XYZ image")
    if float(np.min(xyz)) < -_RANGE_TOL:
        raise DomainError("XYZ components must be nonnegative")
    f = _lab_f(np.maximum(xyz, 0.0) / WHITE_D65)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def _xyz_to_lab_vjp(xyz, ct):
    xyz = np.asarray(xyz, dtype=np.float64)
    ct = np.asarray(ct, dtype=np.float64)
    ct_l, ct_a, ct_b = ct[..., 0], ct[..., 1], ct[..., 2]
    g_fx = 500.0 * ct_a
    g_fy = 116.0 * ct_l - 500.0 * ct_a + 200.0 * ct_b
    g_fz = -200.0 * ct_b
    fprime = _lab_f_prime(np.maximum(xyz, 0.0) / WHITE_D65)
    return np.stack([g_fx, g_fy, g_fz], axis=-1) * fprime / WHITE_D65


def lab_to_xyz(lab):
    lab = _require_channels(lab, "Lab image")
    L, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > 6.0 / 29.0, f ** 3, (f - _LAB_OFFSET) / _LAB_SLOPE)
    return t * WHITE_D65


# ---------------------------------------------------------------------------
# CIELAB <-> CIELCH
# ---------------------------------------------------------------------------

def lab_to_lch(lab):
    """Polar form (L, C, H); H in degrees in [0, 360), 0 for achromatic pixels."""
    lab = _require_channels(lab, "Lab image")
    L, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    c = np.hypot(a, b)
    h = np.degrees(np.arctan2(b, a))
    h = np.where(h < 0.0, h + 360.0, h)
    return np.stack([L, c, h], axis=-1)


def _lab_to_lch_vjp(lab, ct):
    lab = np.asarray(lab, dtype=np.float64)
    ct = np.asarray(ct, dtype=np.float64)
    a, b = lab[..., 1], lab[..., 2]
    ct_l, ct_c, ct_h = ct[..., 0], ct[..., 1], ct[..., 2]
    r2 = a * a + b * b
    r = np.sqrt(np.maximum(r2, diffcore.SQRT_CLAMP))
    denom = np.maximum(r2, diffcore.ATAN2_CLAMP)
    deg = 180.0 / np.pi
    da = ct_c * a / r + ct_h * (-b / denom) * deg
    db = ct_c * b / r + ct_h * (a / denom) * deg
    return np.stack([ct_l, da, db], axis=-1)


def lch_to_lab(lch):
    lch = _require_channels(lch, "LCH image")
    L, c, h = lch[..., 0], lch[..., 1], lch[..., 2]
    hr = np.radians(h)
    return np.stack([L, c * np.cos(hr), c * np.sin(hr)], axis=-1)


# ---------------------------------------------------------------------------
# Convenience chains
# ---------------------------------------------------------------------------

def srgb_to_lab(img):
    return xyz_to_lab(linear_to_xyz(srgb_to_linear(img)))


def lab_to_srgb(lab):
    return linear_to_srgb(xyz_to_linear(lab_to_xyz(lab)))


def srgb_to_lab_vjp(img, ct):
    """VJP of the full sRGB -> Lab chain (used by the perceptual module)."""
    lin = srgb_to_linear(img)
    xyz = linear_to_xyz(lin)
    ct = _xyz_to_lab_vjp(xyz, ct)
    ct = _linear_to_xyz_vjp(lin, ct)
    return _srgb_to_linear_vjp(img, ct)


# Stage objects for pipeline composition and the shared FD property suite.
SRGB_TO_LINEAR = Lambda(srgb_to_linear, _srgb_to_linear_vjp, "srgb_to_linear")
LINEAR_TO_XYZ = Lambda(linear_to_xyz, _linear_to_xyz_vjp, "linear_to_xyz")
XYZ_TO_LAB = Lambda(xyz_to_lab, _xyz_to_lab_vjp, "xyz_to_lab")
LAB_TO_LCH = Lambda(lab_to_lch, _lab_to_lch_vjp, "lab_to_lch")
SRGB_TO_LAB = diffcore.compose([SRGB_TO_LINEAR, LINEAR_TO_XYZ, XYZ_TO_LAB])


def _sample_srgb(rng):
    # Away from the gamma knee (0.04045) so FD probes stay on one branch.
    return rng.uniform(0.08, 0.95, size=(5, 4, 3))


def _sample_linear(rng):
    # Bounded below so every XYZ component clears the CIELAB knee.
    return rng.uniform(0.2, 0.9, size=(5, 4, 3))


def _sample_lab(rng):
    # Chroma bounded away from 0 to keep hue derivatives smooth.
    L = rng.uniform(20.0, 90.0, size=(5, 4))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(5, 4))
    radius = rng.uniform(5.0, 60.0, size=(5, 4))
    return np.stack([L, radius * np.cos(theta), radius * np.sin(theta)], axis=-1)


register_primitive("srgb_to_linear", SRGB_TO_LINEAR, _sample_srgb)
register_primitive("linear_to_xyz", LINEAR_TO_XYZ, _sample_linear)
register_primitive(
    "xyz_to_lab", XYZ_TO_LAB, lambda rng: linear_to_xyz(_sample_linear(rng))
)
register_primitive("lab_to_lch", LAB_TO_LCH, _sample_lab)
register_primitive("srgb_to_lab", SRGB_TO_LAB, _sample_srgb)
