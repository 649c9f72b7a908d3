"""Deterministic synthetic image corpus and PNG round-trip helpers.

Ten procedurally rendered classes of 32x32 color patches: a shape
family (disk / square / plus / x-cross / stripes / checker / rings /
two-tone gradient) crossed with a warm-on-cool or cool-on-warm palette.
Colors are saturated and images mix smooth and textured regions, which
is what the perceptual attacks care about.  All randomness flows from a
single seeded generator, so the corpus is bit-reproducible.
"""

from __future__ import annotations

import colorsys
import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ConfigError
from .validation import quantize255

N_CLASSES = 10
CLASS_NAMES = [
    "disk_warm",
    "disk_cool",
    "square_warm",
    "square_cool",
    "plus_warm",
    "xcross_cool",
    "hstripes",
    "vstripes",
    "checker",
    "rings",
]

_WARM = (-30.0, 60.0)
_COOL = (150.0, 280.0)


def _pick_color(rng, hue_range):
    lo, hi = hue_range
    h = (rng.uniform(lo, hi) % 360.0) / 360.0
    s = rng.uniform(0.55, 1.0)
    v = rng.uniform(0.45, 1.0)
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def render_sample(class_id: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Render one image of the given class; output on the 1/255 grid."""
    warm_fg = class_id in (0, 2, 4, 6, 8)
    fg = _pick_color(rng, _WARM if warm_fg else _COOL)
    bg = _pick_color(rng, _COOL if warm_fg else _WARM)

    yy, xx = _grid(size)
    cy = size / 2.0 + rng.uniform(-4.0, 4.0)
    cx = size / 2.0 + rng.uniform(-4.0, 4.0)
    r = rng.uniform(0.22, 0.34) * size

    name = CLASS_NAMES[class_id]
    if name.startswith("disk"):
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif name.startswith("square"):
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif name.startswith("plus"):
        t = rng.uniform(0.35, 0.5) * r
        mask = ((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= 1.4 * r)) | (
            (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= 1.4 * r)
        )
    elif name.startswith("xcross"):
        t = rng.uniform(0.3, 0.45) * r
        u, v = yy - cy, xx - cx
        band = 1.4 * r
        mask = ((np.abs(u - v) <= t) | (np.abs(u + v) <= t)) & (
            (np.abs(u) <= band) & (np.abs(v) <= band)
        )
    elif name == "hstripes":
        period = rng.integers(5, 9)
        phase = rng.integers(0, period)
        mask = ((yy.astype(int) + phase) // (period // 2 + 1)) % 2 == 0
    elif name == "vstripes":
        period = rng.integers(5, 9)
        phase = rng.integers(0, period)
        mask = ((xx.astype(int) + phase) // (period // 2 + 1)) % 2 == 0
    elif name == "checker":
        cell = rng.integers(3, 6)
        mask = ((yy.astype(int) // cell) + (xx.astype(int) // cell)) % 2 == 0
    elif name == "rings":
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        period = rng.uniform(5.0, 8.0)
        mask = (d // (period / 2.0)) % 2 == 0
    else:
        raise ConfigError(f"unknown class id {class_id}")

    img = np.where(mask[..., None], fg, bg)

    # Mild global shading keeps smooth regions non-trivial.
    shade = 1.0 - 0.25 * rng.uniform(0.0, 1.0) * (xx + yy)[..., None] / (2.0 * size)
    img = img * shade
    noise_sigma = rng.uniform(0.01, 0.05)
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return quantize255(np.clip(img, 0.0, 1.0))


def make_corpus(n_train: int, n_val: int, seed: int, size: int = 32):
    """Balanced train/val splits; returns (Xtr, ytr, Xva, yva)."""
    rng = np.random.default_rng(seed)

    def split(n):
        X = np.empty((n, size, size, 3))
        y = np.empty(n, dtype=np.int64)
        for i in range(n):
            y[i] = i % N_CLASSES
            X[i] = render_sample(int(y[i]), rng, size)
        return X, y

    xtr, ytr = split(n_train)
    xva, yva = split(n_val)
    return xtr, ytr, xva, yva


def flat_textured_probe(seed: int = 0, size: int = 32) -> np.ndarray:
    """Left half a solid saturated color, right half high-contrast checker."""
    rng = np.random.default_rng(seed)
    img = np.empty((size, size, 3))
    img[:, : size // 2] = np.array([0.12, 0.75, 0.15])
    cell = 2
    yy, xx = _grid(size)
    checker = (((yy.astype(int) // cell) + (xx.astype(int) // cell)) % 2).astype(float)
    right = np.stack([checker * 0.9 + 0.05] * 3, axis=-1)
    right += rng.normal(0.0, 0.08, size=right.shape)
    img[:, size // 2 :] = right[:, size // 2 :]
    return quantize255(np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# PNG + manifest I/O
# ---------------------------------------------------------------------------

def save_png(path, img) -> None:
    """Write an image on the 1/255 grid as 8-bit RGB PNG (lossless)."""
    arr = np.asarray(img, dtype=np.float64)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_split(directory, X, y, targets=None) -> None:
    """Write images plus a ``manifest.csv`` with header id,filename,label,target."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(X)):
        fname = f"img_{i:05d}.png"
        save_png(directory / fname, X[i])
        tgt = "" if targets is None else str(int(targets[i]))
        rows.append([str(i), fname, str(int(y[i])), tgt])
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "filename", "label", "target"])
        writer.writerows(rows)


def default_targets(y, n_classes: int = N_CLASSES) -> np.ndarray:
    """Deterministic per-image target labels, never equal to the truth."""
    y = np.asarray(y, dtype=np.int64)
    offset = 1 + (np.arange(len(y)) % (n_classes - 1))
    return (y + offset) % n_classes
