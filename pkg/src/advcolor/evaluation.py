"""Campaign-level evaluation: aggregates, input-transform robustness,
and cross-model transferability.

Success rates are over the whole suite; perturbation-size means are
over successful images only.  Robustness measures how many originally
successful adversarial images still flip the model after a transform,
using the plain misclassification predicate (kappa = 0).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .classifier import is_adversarial
from .exceptions import ContractError, DomainError, TransformError
from .validation import check_image, check_images


@dataclass(frozen=True)
class AttackAggregate:
    """Suite-level aggregate of one attack run."""

    n: int
    n_success: int
    success_rate: float  # percent
    mean_l2: float | None
    mean_linf: float | None
    mean_c2: float | None

    def as_dict(self):
        return {
            "n": self.n,
            "n_success": self.n_success,
            "success_rate": self.success_rate,
            "mean_l2": self.mean_l2,
            "mean_linf": self.mean_linf,
            "mean_c2": self.mean_c2,
        }


@dataclass(frozen=True)
class RobustnessCurve:
    """Survival rate (percent) per grid point of one input transform."""

    transform: str
    grid: tuple
    rates: tuple

    def as_dict(self):
        return {
            "transform": self.transform,
            "grid": list(self.grid),
            "rates": list(self.rates),
        }


def aggregate(outcomes) -> AttackAggregate:
    """Success rate over all outcomes, size means over the successful ones."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ContractError("aggregate needs at least one outcome")
    n = len(outcomes)
    succ = [o for o in outcomes if o.success]
    if succ:
        mean = lambda key: float(np.mean([getattr(o, key) for o in succ]))  # noqa: E731
        means = (mean("l2"), mean("linf"), mean("c2"))
    else:
        means = (None, None, None)
    return AttackAggregate(
        n=n,
        n_success=len(succ),
        success_rate=100.0 * len(succ) / n,
        mean_l2=means[0],
        mean_linf=means[1],
        mean_c2=means[2],
    )


# ---------------------------------------------------------------------------
# Input transforms
# ---------------------------------------------------------------------------

def bit_depth_reduce(x, bits: int) -> np.ndarray:
    """Quantize each channel to 2**bits uniform levels over [0, 1]."""
    if not 1 <= int(bits) <= 8:
        raise DomainError(f"bits must lie in 1..8, got {bits}")
    x = np.asarray(x, dtype=np.float64)
    levels = 2 ** int(bits) - 1
    return np.round(x * levels) / levels


def jpeg_roundtrip(x, quality: int) -> np.ndarray:
    """Baseline JPEG encode/decode at the given quality (4:4:4 sampling).

    Operates on the 8-bit image; output is back on the 1/255 grid.
    """
    if not 1 <= int(quality) <= 100:
        raise DomainError(f"quality must lie in 1..100, got {quality}")
    x = check_image(x, "jpeg input")
    u8 = np.round(x * 255.0).astype(np.uint8)
    try:
        buf = io.BytesIO()
        Image.fromarray(u8, mode="RGB").save(
            buf, format="JPEG", quality=int(quality), subsampling=0
        )
        buf.seek(0)
        with Image.open(buf) as im:
            out = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as e:
        raise TransformError(f"JPEG round-trip failed at quality {quality}: {e}") from e
    return out / 255.0


TRANSFORMS = {
    "identity": lambda x, _point: x,
    "bit_depth": bit_depth_reduce,
    "jpeg": jpeg_roundtrip,
}


def robustness_eval(model, adv_images, y, success, transform: str, grid) -> RobustnessCurve:
    """Fraction of originally successful images still adversarial after
    the transform, per grid point (misclassification, kappa = 0)."""
    if transform not in TRANSFORMS:
        raise DomainError(f"unknown transform {transform!r}")
    fn = TRANSFORMS[transform]
    adv_images = check_images(adv_images)
    success = np.asarray(success, dtype=bool)
    y = np.asarray(y, dtype=np.int64)
    base = adv_images[success]
    base_y = y[success]
    rates = []
    for point in grid:
        if len(base) == 0:
            rates.append(0.0)
            continue
        transformed = np.stack([np.clip(fn(img, point), 0.0, 1.0) for img in base])
        z = model.decision_function(transformed)
        still = is_adversarial(z, y=base_y, kappa=0.0)
        rates.append(100.0 * float(np.mean(still)))
    return RobustnessCurve(transform=transform, grid=tuple(grid), rates=tuple(rates))


def transfer_eval(adv_images, y, clean_images, target_model) -> float:
    """Untargeted misclassification rate of a second model on the
    adversarial images, over the sub-suite it classifies correctly."""
    adv_images = check_images(adv_images)
    clean_images = check_images(clean_images)
    y = np.asarray(y, dtype=np.int64)
    pred_clean = target_model.predict(clean_images)
    mask = pred_clean == y
    if not mask.any():
        raise DomainError("transfer_eval: target model classifies no clean image correctly")
    z = target_model.decision_function(adv_images[mask])
    fooled = is_adversarial(z, y=y[mask], kappa=0.0)
    return 100.0 * float(np.mean(fooled))


def contact_sheet(original, adversarial, amplification: float = 10.0) -> np.ndarray:
    """Side-by-side strip: original | adversarial | amplified difference.

    The difference panel is recentered at mid-gray so sign survives.
    """
    original = check_image(original, "original")
    adversarial = check_image(adversarial, "adversarial")
    delta = adversarial - original
    panel = np.clip(0.5 + amplification * delta, 0.0, 1.0)
    gap = np.ones((original.shape[0], 2, 3))
    return np.concatenate([original, gap, adversarial, gap, panel], axis=1)
