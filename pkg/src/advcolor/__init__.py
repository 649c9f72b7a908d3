"""Adversarial image perturbations under perceptual color distance.

Gradient-based attacks that minimize the accumulated CIEDE2000 color
difference of a perturbation instead of its RGB norm, next to the usual
RGB-norm baselines, plus a small classifier stack and an evaluation
harness for robustness and transferability at desk scale.
"""

from . import (  # noqa: F401
    attacks,
    classifier,
    colorspace,
    data,
    diffcore,
    evaluation,
    perceptual,
    validation,
)
from .exceptions import AdvColorError  # noqa: F401

__version__ = "0.1.0"
