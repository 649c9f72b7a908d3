"""CIEDE2000 color difference, its image-level accumulation, and the
texture-weighted variant -- all with gradients for the perturbed image.

The formula follows the CIE's 2000 revision with all five refinements:
the a*-axis rescaling G, the weighting functions S_L, S_C, S_H and the
chroma-hue rotation term R_T.  Hue arithmetic is in degrees.  Branches
(hue wrap-around, achromatic pixels) follow the standard case analysis;
ties at a 180 degree hue difference resolve to the positive branch.

Gradients are taken with respect to the *second* image of a pair; the
first is the fixed reference.  The backward pass reuses the expression
tape from :mod:`.diffcore`, so every branch rule and derivative clamp is
inherited from there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, colorspace, diffcore
from .diffcore import (
    Lambda,
    atan2n,
    cosn,
    expn,
    leaf,
    nsum,
    register_primitive,
    sinn,
    sqrtn,
    where,
)
from .exceptions import DomainError, ShapeError

_DEG = np.pi / 180.0
_POW25_7 = 25.0 ** 7


@dataclass(frozen=True)
class DeltaEParams:
    """Parametric factors k_L, k_C, k_H; unity for graphic-arts viewing."""

    k_l: float = 1.0
    k_c: float = 1.0
    k_h: float = 1.0

    def __post_init__(self):
        if min(self.k_l, self.k_c, self.k_h) <= 0.0:
            raise DomainError("DeltaEParams factors must be strictly positive")


_DEFAULT = DeltaEParams()


def _hue_deg(b, a):
    """Hue angle of (a, b) in degrees in [0, 360); 0 at the origin."""
    h = atan2n(b, a) * (1.0 / _DEG)
    return where(h.value < 0.0, h + 360.0, h)


def _delta_e00_graph(lab1, lab2_nodes, params):
    """Tape graph of the per-pixel distance.

    ``lab1`` holds plain arrays (the reference), ``lab2_nodes`` tape
    nodes of identical shape.  Returns the distance node.
    """
    L1, a1, b1 = lab1
    L2, a2, b2 = lab2_nodes

    # Same formula as the tape path so the distance stays exactly symmetric.
    c1 = np.sqrt(a1 * a1 + b1 * b1)
    c2 = sqrtn(a2 * a2 + b2 * b2)
    cbar = (c2 + c1) * 0.5
    cbar7 = cbar ** 7
    g = (1.0 - sqrtn(cbar7 / (cbar7 + _POW25_7))) * 0.5

    a1p = (g + 1.0) * a1
    a2p = (g + 1.0) * a2
    c1p = sqrtn(a1p * a1p + b1 * b1)
    c2p = sqrtn(a2p * a2p + b2 * b2)
    h1p = _hue_deg(leaf(np.broadcast_to(b1, a1p.value.shape)), a1p)
    h2p = _hue_deg(b2, a2p)

    achroma = (c1p.value * c2p.value) == 0.0

    dl = L2 - L1
    dc = c2p - c1p
    hdiff = h2p - h1p
    dh = where(
        hdiff.value > 180.0,
        hdiff - 360.0,
        where(hdiff.value < -180.0, hdiff + 360.0, hdiff),
    )
    dh = where(achroma, dh * 0.0, dh)
    dhh = 2.0 * sqrtn(c1p * c2p) * sinn(dh * (0.5 * _DEG))

    lbar = (L2 + L1) * 0.5
    cbarp = (c1p + c2p) * 0.5
    hsum = h1p + h2p
    habs = np.abs(h1p.value - h2p.value)
    hbar = where(
        habs <= 180.0,
        hsum * 0.5,
        where(hsum.value < 360.0, (hsum + 360.0) * 0.5, (hsum - 360.0) * 0.5),
    )
    hbar = where(achroma, hsum, hbar)

    t = (
        1.0
        - 0.17 * cosn((hbar - 30.0) * _DEG)
        + 0.24 * cosn(hbar * (2.0 * _DEG))
        + 0.32 * cosn((hbar * 3.0 + 6.0) * _DEG)
        - 0.20 * cosn((hbar * 4.0 - 63.0) * _DEG)
    )
    hshift = (hbar - 275.0) * (1.0 / 25.0)
    dtheta = 30.0 * expn(-(hshift * hshift))
    cbarp7 = cbarp ** 7
    rc = 2.0 * sqrtn(cbarp7 / (cbarp7 + _POW25_7))
    lshift = (lbar - 50.0) * (lbar - 50.0)
    sl = 1.0 + 0.015 * lshift / sqrtn(lshift + 20.0)
    sc = 1.0 + 0.045 * cbarp
    sh = 1.0 + 0.015 * cbarp * t
    rt = -sinn(dtheta * (2.0 * _DEG)) * rc

    fl = dl / (params.k_l * sl)
    fc = dc / (params.k_c * sc)
    fh = dhh / (params.k_h * sh)
    return sqrtn(fl * fl + fc * fc + fh * fh + rt * fc * fh)


def _split_lab(lab):
    lab = np.asarray(lab, dtype=np.float64)
    return lab[..., 0], lab[..., 1], lab[..., 2]


def _check_pair(x1, x2, name):
    if np.asarray(x1).shape != np.asarray(x2).shape:
        raise ShapeError(
            f"{name}: shapes differ, {np.asarray(x1).shape} vs {np.asarray(x2).shape}"
        )
    if np.asarray(x1).shape[-1] != 3:
        raise ShapeError(f"{name}: expected 3 channels, got {np.asarray(x1).shape}")


def _flat_pixels(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return arr.reshape(-1, 3)


def _lab_reference(x) -> np.ndarray:
    """Lab rows of an sRGB array via the kernel's own conversion chain."""
    flat = _flat_pixels(x)
    out = np.empty_like(flat)
    _kernels.srgb_to_lab_vals(flat, out)
    return out


def _de00_from_ref(lab1_flat, x2, params, want_grad):
    flat2 = _flat_pixels(x2)
    de = np.empty(len(flat2))
    grad = np.empty((len(flat2), 3)) if want_grad else np.empty((1, 3))
    _kernels.de00_ref(
        lab1_flat, flat2, params.k_l, params.k_c, params.k_h, want_grad, de, grad
    )
    shape = np.asarray(x2).shape
    de = de.reshape(shape[:-1])
    return (de, grad.reshape(shape)) if want_grad else (de, None)


def delta_e00_lab(lab1, lab2, params: DeltaEParams = _DEFAULT):
    """Per-pixel distance between Lab arrays of identical shape (..., 3)."""
    _check_pair(lab1, lab2, "delta_e00_lab")
    flat1, flat2 = _flat_pixels(lab1), _flat_pixels(lab2)
    de = np.empty(len(flat1))
    grad = np.empty((1, 3))
    _kernels.de00_lab(flat1, flat2, params.k_l, params.k_c, params.k_h, False, de, grad)
    return de.reshape(np.asarray(lab1).shape[:-1])


def delta_e00(lch1, lch2, params: DeltaEParams = _DEFAULT):
    """Per-pixel distance between LCH arrays (L, C, H-degrees) of equal shape."""
    _check_pair(lch1, lch2, "delta_e00")
    return delta_e00_lab(
        colorspace.lch_to_lab(lch1), colorspace.lch_to_lab(lch2), params
    )


def delta_e00_map(x, x2, params: DeltaEParams = _DEFAULT):
    """Per-pixel map between two sRGB images through the full pipeline."""
    _check_pair(x, x2, "delta_e00_map")
    return _de00_from_ref(_lab_reference(x), x2, params, False)[0]


def c2(x, x2, params: DeltaEParams = _DEFAULT):
    """Accumulated difference: L2 norm of the per-pixel map.

    Scalar for a single image pair, a vector of per-image values for
    batched input.
    """
    m = delta_e00_map(x, x2, params)
    axes = (-2, -1) if m.ndim >= 2 else None
    return np.sqrt(np.sum(m * m, axis=axes))


def _norm_with_grad(de, dpix, weight):
    """Fold the per-pixel map and Jacobian rows into the norm and its grad."""
    scaled = de if weight is None else de * weight
    axes = (-2, -1) if de.ndim >= 2 else None
    s = np.sum(scaled * scaled, axis=axes)
    total = np.sqrt(s)
    denom = np.sqrt(np.maximum(s, diffcore.SQRT_CLAMP))
    ct = scaled if weight is None else scaled * weight
    if axes is None:
        ct = ct / denom
    else:
        ct = ct / denom[..., None, None]
    return total, ct[..., None] * dpix


def c2_and_grad(x, x2, params: DeltaEParams = _DEFAULT):
    """Accumulated difference and its gradient with respect to ``x2``."""
    _check_pair(x, x2, "c2")
    de, dpix = _de00_from_ref(_lab_reference(x), x2, params, True)
    return _norm_with_grad(de, dpix, None)


class ColorDistanceRef:
    """Accumulated color difference against a fixed reference image(s).

    Precomputes the reference Lab rows once, which matters inside attack
    loops where the same reference is hit thousands of times.  Values and
    gradients agree bitwise with :func:`c2` / :func:`c2_and_grad`.
    ``sigma`` switches on the texture weighting of :func:`weighted_c2`.
    """

    def __init__(self, x, params: DeltaEParams = _DEFAULT, sigma=None):
        self._x = np.ascontiguousarray(x, dtype=np.float64)
        self._params = params
        self._lab = _lab_reference(self._x).reshape(self._x.shape)
        self._weight = None if sigma is None else _sigma_weight(sigma)

    def _pieces(self, x2, rows, want_grad):
        if rows is None:
            lab = self._lab
            weight = self._weight
        else:
            lab = self._lab[rows]
            weight = None if self._weight is None else self._weight[rows]
        _check_pair(lab, x2, "ColorDistanceRef")
        de, dpix = _de00_from_ref(_flat_pixels(lab), x2, self._params, want_grad)
        return de, dpix, weight

    def value(self, x2, rows=None):
        de, _, weight = self._pieces(x2, rows, False)
        scaled = de if weight is None else de * weight
        axes = (-2, -1) if de.ndim >= 2 else None
        return np.sqrt(np.sum(scaled * scaled, axis=axes))

    def value_and_grad(self, x2, rows=None):
        de, dpix, weight = self._pieces(x2, rows, True)
        return _norm_with_grad(de, dpix, weight)


def _tape_c2_and_grad(x, x2, params: DeltaEParams = _DEFAULT, weight=None):
    """Expression-tape route for the accumulated difference.

    Redundant with :func:`c2_and_grad` on purpose: the tape and the
    fused kernel are independent derivations of the same backward pass,
    and the test suite holds them against each other.
    """
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    _check_pair(x, x2, "c2")

    lab1 = colorspace.srgb_to_lab(x)
    lin2 = colorspace.srgb_to_linear(x2)
    xyz2 = colorspace.linear_to_xyz(lin2)
    lab2 = colorspace.xyz_to_lab(xyz2)

    l2n, a2n, b2n = (leaf(lab2[..., i]) for i in range(3))
    de = _delta_e00_graph(_split_lab(lab1), (l2n, a2n, b2n), params)
    if weight is not None:
        de = de * np.asarray(weight, dtype=np.float64)
    axes = (-2, -1) if de.value.ndim >= 2 else None
    total = sqrtn(nsum(de * de, axis=axes))

    seed = np.ones_like(np.asarray(total.value))
    grads = diffcore.backward(total, seed)
    dlab = np.stack(
        [
            grads.get(id(n), np.zeros_like(lab2[..., 0]))
            for n in (l2n, a2n, b2n)
        ],
        axis=-1,
    )
    ct = colorspace._xyz_to_lab_vjp(xyz2, dlab)
    ct = colorspace._linear_to_xyz_vjp(lin2, ct)
    dx2 = colorspace._srgb_to_linear_vjp(x2, ct)
    return total.value, dx2


def c2_against(x_ref, params: DeltaEParams = _DEFAULT) -> diffcore.DifferentiableFn:
    """Stage computing the accumulated difference to a fixed reference."""
    ref = ColorDistanceRef(x_ref, params)
    return Lambda(
        lambda x2: ref.value(x2),
        lambda x2, ct: ref.value_and_grad(x2)[1] * ct,
        "c2",
    )


# ---------------------------------------------------------------------------
# Texture complexity and the structure-weighted accumulation
# ---------------------------------------------------------------------------

def _box3(a):
    """Sum over 3x3 neighborhoods; windows shrink at the borders."""
    p = np.pad(a, ((1, 1), (1, 1)), mode="constant")
    out = np.zeros_like(a)
    h, w = a.shape
    for i in range(3):
        for j in range(3):
            out += p[i : i + h, j : j + w]
    return out


def texture_complexity(x) -> np.ndarray:
    """Per-channel local standard deviation, clipped and rescaled to [0, 1].

    Each entry is the population standard deviation of the surrounding
    3x3 window (shrunk at borders).  The top 5% of entries across the
    whole map are clipped to the 95th percentile, then the map is
    min-max normalized; a constant image yields an all-zero map.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ShapeError(f"texture_complexity expects (H, W, 3), got {x.shape}")
    h, w = x.shape[:2]
    if h < 3 or w < 3:
        raise DomainError(f"image too small for 3x3 windows: {h}x{w}")

    cnt = _box3(np.ones((h, w)))
    sigma = np.empty_like(x)
    for ch in range(3):
        # Shift by the channel mean first: window variance is shift
        # invariant, and this keeps a constant image at exactly zero.
        shifted = x[..., ch] - x[..., ch].mean()
        s1 = _box3(shifted)
        s2 = _box3(shifted ** 2)
        mean = s1 / cnt
        var = np.maximum(s2 / cnt - mean * mean, 0.0)
        sigma[..., ch] = np.sqrt(var)

    thr = np.percentile(sigma, 95.0)
    sigma = np.minimum(sigma, thr)
    lo, hi = float(sigma.min()), float(sigma.max())
    if hi - lo <= 0.0:
        return np.zeros_like(sigma)
    return (sigma - lo) / (hi - lo)


def _sigma_weight(sigma):
    """Reduce the 3-channel map to the per-pixel factor 1 - mean(sigma)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape[-1] != 3:
        raise ShapeError(f"sigma must have shape (..., 3), got {sigma.shape}")
    if float(sigma.min()) < 0.0 or float(sigma.max()) > 1.0:
        raise DomainError("sigma entries must lie in [0, 1]")
    return 1.0 - sigma.mean(axis=-1)


def weighted_c2(x, x2, sigma, params: DeltaEParams = _DEFAULT):
    """Accumulated difference with smooth regions emphasized.

    The per-pixel map is scaled by (1 - sigma), with the 3-channel sigma
    averaged per pixel, before taking the norm.  Reduces to :func:`c2`
    when sigma is all zero.
    """
    m = delta_e00_map(x, x2, params) * _sigma_weight(sigma)
    axes = (-2, -1) if m.ndim >= 2 else None
    return np.sqrt(np.sum(m * m, axis=axes))


def weighted_c2_and_grad(x, x2, sigma, params: DeltaEParams = _DEFAULT):
    _check_pair(x, x2, "weighted_c2")
    de, dpix = _de00_from_ref(_lab_reference(x), x2, params, True)
    return _norm_with_grad(de, dpix, _sigma_weight(sigma))


def weighted_c2_against(x_ref, sigma, params: DeltaEParams = _DEFAULT):
    ref = ColorDistanceRef(x_ref, params, sigma=sigma)
    return Lambda(
        lambda x2: ref.value(x2),
        lambda x2, ct: ref.value_and_grad(x2)[1] * ct,
        "weighted_c2",
    )


def _sample_pair(rng):
    base = rng.uniform(0.15, 0.85, size=(6, 5, 3))
    other = np.clip(base + rng.uniform(-0.1, 0.1, size=base.shape), 0.05, 0.95)
    return base, other


def _register():
    rng_ref = np.random.default_rng(20240711)
    x_ref, _ = _sample_pair(rng_ref)

    register_primitive(
        "c2",
        c2_against(x_ref),
        lambda rng: np.clip(
            x_ref + rng.uniform(-0.08, 0.08, size=x_ref.shape), 0.05, 0.95
        ),
    )

    sigma = np.clip(rng_ref.uniform(0.0, 1.0, size=x_ref.shape), 0.0, 1.0)
    register_primitive(
        "weighted_c2",
        weighted_c2_against(x_ref, sigma),
        lambda rng: np.clip(
            x_ref + rng.uniform(-0.08, 0.08, size=x_ref.shape), 0.05, 0.95
        ),
    )


_register()
