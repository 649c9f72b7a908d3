"""Small convolutional classifiers with input gradients.

Everything is float64 numpy.  Layers are functional: ``forward_cache``
returns the activations needed by ``backward``, so shared model weights
are safe to use from several threads at once.  The estimator follows
sklearn conventions (``fit`` / ``predict`` / ``decision_function`` /
``get_params``); ``decision_function`` returns the raw logits that the
attack objectives consume.
"""

from __future__ import annotations

import io
import json
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import _kernels
from .diffcore import Lambda, check_finite
from .exceptions import (
    CheckpointError,
    DomainError,
    ShapeError,
    TrainingError,
)
from .validation import check_images, check_labels

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _pad_hw(x, pad):
    if pad == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad : pad + h, pad : pad + w, :] = x
    return xp


class Conv2D:
    """Same-padding strided convolution (compiled direct loops)."""

    def __init__(self, rng, kh, kw, cin, cout, stride=1, pad=0):
        self.kh, self.kw, self.cin, self.cout = kh, kw, cin, cout
        self.stride, self.pad = stride, pad
        fan_in = kh * kw * cin
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kh, kw, cin, cout))
        self.b = np.zeros(cout)

    @property
    def params(self):
        return [self.w, self.b]

    def _out_size(self, h, w):
        ho = (h + 2 * self.pad - self.kh) // self.stride + 1
        wo = (w + 2 * self.pad - self.kw) // self.stride + 1
        return ho, wo

    def forward_cache(self, x):
        n, h, w, _ = x.shape
        ho, wo = self._out_size(h, w)
        xp = _pad_hw(np.ascontiguousarray(x), self.pad)
        y = np.empty((n, ho, wo, self.cout))
        _kernels.conv2d_fwd(xp, self.w, self.b, self.stride, y)
        return y, (xp, x.shape, ho, wo)

    def backward(self, cache, dy, need_param_grads=True):
        xp, xshape, ho, wo = cache
        n, h, w, _ = xshape
        dy = np.ascontiguousarray(dy)
        grads = None
        if need_param_grads:
            dw = np.empty_like(self.w)
            _kernels.conv2d_weight_grad(xp, dy, self.stride, dw)
            grads = [dw, dy.sum(axis=(0, 1, 2))]
        dxp = np.zeros_like(xp)
        _kernels.conv2d_input_grad(dy, self.w, self.stride, dxp)
        dx = dxp[:, self.pad : self.pad + h, self.pad : self.pad + w, :]
        return np.ascontiguousarray(dx), grads


class ReLU:
    params: list = []

    def forward_cache(self, x):
        y = np.maximum(x, 0.0)
        return y, (x > 0.0)

    def backward(self, cache, dy, need_param_grads=True):
        return dy * cache, [] if need_param_grads else None


class AvgPool2:
    """2x2 average pooling, stride 2; input spatial dims must be even."""

    params: list = []

    def forward_cache(self, x):
        n, h, w, c = x.shape
        y = x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
        return y, x.shape

    def backward(self, cache, dy, need_param_grads=True):
        n, h, w, c = cache
        dx = np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) * 0.25
        return dx, [] if need_param_grads else None


class Flatten:
    params: list = []

    def forward_cache(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy, need_param_grads=True):
        return dy.reshape(cache), [] if need_param_grads else None


class Dense:
    def __init__(self, rng, nin, nout):
        self.w = rng.normal(0.0, np.sqrt(2.0 / nin), size=(nin, nout))
        self.b = np.zeros(nout)

    @property
    def params(self):
        return [self.w, self.b]

    def forward_cache(self, x):
        return x @ self.w + self.b, x

    def backward(self, cache, dy, need_param_grads=True):
        grads = None
        if need_param_grads:
            grads = [cache.T @ dy, dy.sum(axis=0)]
        return dy @ self.w.T, grads


def _arch_small(rng, input_shape, n_classes):
    h, w, _ = input_shape
    layers = [
        Conv2D(rng, 3, 3, 3, 10, stride=2, pad=1),
        ReLU(),
        Conv2D(rng, 3, 3, 10, 20, stride=2, pad=1),
        ReLU(),
        Flatten(),
        Dense(rng, (h // 4) * (w // 4) * 20, 40),
        ReLU(),
        Dense(rng, 40, n_classes),
    ]
    return layers


def _arch_deep(rng, input_shape, n_classes):
    h, w, _ = input_shape
    layers = [
        Conv2D(rng, 5, 5, 3, 10, stride=2, pad=2),
        ReLU(),
        Conv2D(rng, 3, 3, 10, 16, stride=1, pad=1),
        ReLU(),
        AvgPool2(),
        Conv2D(rng, 3, 3, 16, 16, stride=1, pad=1),
        ReLU(),
        AvgPool2(),
        Flatten(),
        Dense(rng, (h // 8) * (w // 8) * 16, n_classes),
    ]
    return layers


ARCHITECTURES: dict[str, Callable] = {
    "small": _arch_small,
    "deep": _arch_deep,
}


# ---------------------------------------------------------------------------
# Losses and adversarial predicates
# ---------------------------------------------------------------------------

def _as_2d(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None], True
    if z.ndim != 2:
        raise ShapeError(f"logits must be (K,) or (N, K), got {z.shape}")
    return z, False


def _check_class(label, k, name="label"):
    label = np.asarray(label, dtype=np.int64)
    if np.any(label < 0) or np.any(label >= k):
        raise DomainError(f"{name} out of range [0, {k - 1}]")
    return label


def softmax(z):
    z, squeeze = _as_2d(z)
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def cross_entropy(z, y):
    """Negative log softmax probability of the true class."""
    z, squeeze = _as_2d(z)
    y = _check_class(np.atleast_1d(y), z.shape[1])
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = lse - zs[np.arange(len(z)), y]
    return float(loss[0]) if squeeze else loss


def cross_entropy_grad(z, y):
    z, squeeze = _as_2d(z)
    y = _check_class(np.atleast_1d(y), z.shape[1])
    g = np.array(softmax(z), copy=True)
    g[np.arange(len(z)), y] -= 1.0
    return g[0] if squeeze else g


def _other_max(z, label):
    masked = np.array(z, copy=True)
    masked[np.arange(len(z)), label] = -np.inf
    return masked.max(axis=1), masked.argmax(axis=1)


def margin_loss(z, label, kappa=0.0, targeted=False):
    """Logit-margin objective, clamped below at -kappa.

    Targeted: max(max_{i != t} Z_i - Z_t, -kappa).
    Untargeted: max(Z_y - max_{i != y} Z_i, -kappa).
    """
    if kappa < 0.0:
        raise DomainError("kappa must be nonnegative")
    z, squeeze = _as_2d(z)
    label = _check_class(np.atleast_1d(label), z.shape[1])
    zl = z[np.arange(len(z)), label]
    other, _ = _other_max(z, label)
    raw = (other - zl) if targeted else (zl - other)
    out = np.maximum(raw, -kappa)
    return float(out[0]) if squeeze else out


def margin_loss_grad(z, label, kappa=0.0, targeted=False):
    if kappa < 0.0:
        raise DomainError("kappa must be nonnegative")
    z, squeeze = _as_2d(z)
    label = _check_class(np.atleast_1d(label), z.shape[1])
    zl = z[np.arange(len(z)), label]
    other, other_idx = _other_max(z, label)
    raw = (other - zl) if targeted else (zl - other)
    active = raw > -kappa
    g = np.zeros_like(z)
    rows = np.arange(len(z))
    sgn_other = 1.0 if targeted else -1.0
    g[rows, other_idx] = sgn_other * active
    g[rows, label] = -sgn_other * active
    return g[0] if squeeze else g


def is_adversarial(z, y=None, target=None, kappa=0.0):
    """Success predicate: targeted needs Z_t to beat the rest by kappa,
    untargeted needs Z_y to fall kappa below the strongest other logit."""
    if kappa < 0.0:
        raise DomainError("kappa must be nonnegative")
    z, squeeze = _as_2d(z)
    if target is not None:
        t = _check_class(np.atleast_1d(target), z.shape[1], "target")
        other, _ = _other_max(z, t)
        out = z[np.arange(len(z)), t] > other + kappa
    else:
        if y is None:
            raise DomainError("is_adversarial needs y (untargeted) or target")
        yy = _check_class(np.atleast_1d(y), z.shape[1])
        other, _ = _other_max(z, yy)
        out = z[np.arange(len(z)), yy] + kappa < other
    return bool(out[0]) if squeeze else out


def logit_margin(z, y):
    """Clean confidence margin Z_y - max_{i != y} Z_i (positive = correct)."""
    z, squeeze = _as_2d(z)
    y = _check_class(np.atleast_1d(y), z.shape[1])
    other, _ = _other_max(z, y)
    out = z[np.arange(len(z)), y] - other
    return float(out[0]) if squeeze else out


# ---------------------------------------------------------------------------
# Estimator
# ---------------------------------------------------------------------------

class ConvNetClassifier(BaseEstimator, ClassifierMixin):
    """A small convolutional classifier trained with SGD + momentum.

    Deterministic for a fixed seed: weight init, batch order and all
    arithmetic are reproducible run to run on the same machine.
    """

    def __init__(
        self,
        architecture="small",
        n_classes=10,
        input_shape=(32, 32, 3),
        epochs=12,
        batch_size=64,
        learning_rate=0.02,
        momentum=0.9,
        seed=0,
    ):
        self.architecture = architecture
        self.n_classes = n_classes
        self.input_shape = input_shape
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    # -- construction ------------------------------------------------------

    def _build(self, rng):
        if self.architecture not in ARCHITECTURES:
            raise DomainError(
                f"unknown architecture {self.architecture!r};"
                f" choose from {sorted(ARCHITECTURES)}"
            )
        self.layers_ = ARCHITECTURES[self.architecture](
            rng, tuple(self.input_shape), self.n_classes
        )
        self.classes_ = np.arange(self.n_classes)
        return self

    def init_weights(self):
        """Build layers with seeded random weights without training."""
        self._build(np.random.default_rng(self.seed))
        return self

    @property
    def parameters(self):
        return [p for layer in self.layers_ for p in layer.params]

    # -- inference ---------------------------------------------------------

    def _check_input(self, X):
        X = check_images(X)
        if X.shape[1:] != tuple(self.input_shape):
            raise ShapeError(
                f"expected images of shape {tuple(self.input_shape)}, got {X.shape[1:]}"
            )
        return X

    def _forward_cache(self, X):
        caches = []
        out = X
        for layer in self.layers_:
            out, cache = layer.forward_cache(out)
            caches.append(cache)
        return out, caches

    def decision_function(self, X):
        """Raw logits, shape (N, n_classes)."""
        X = self._check_input(X)
        return self._forward_cache(X)[0]

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    # -- gradients ---------------------------------------------------------

    def _input_backward(self, caches, dlogits):
        d = dlogits
        for layer, cache in zip(reversed(self.layers_), reversed(caches)):
            d, _ = layer.backward(cache, d, need_param_grads=False)
        return d

    def _param_backward(self, caches, dlogits):
        d = dlogits
        grads = []
        for layer, cache in zip(reversed(self.layers_), reversed(caches)):
            d, g = layer.backward(cache, d, need_param_grads=True)
            grads.extend(reversed(g))
        grads.reverse()
        return grads

    def input_gradient(self, X, dlogits):
        """VJP of the logits with respect to the input batch."""
        X = self._check_input(X)
        _, caches = self._forward_cache(X)
        return self._input_backward(caches, np.asarray(dlogits, dtype=np.float64))

    # -- training ----------------------------------------------------------

    def fit(self, X, y, validation=None):
        X = self._check_input(check_images(X))
        y = check_labels(y, self.n_classes, len(X))
        rng = np.random.default_rng(self.seed)
        self._build(rng)

        params = self.parameters
        velocity = [np.zeros_like(p) for p in params]
        n = len(X)
        self.history_ = []

        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                logits, caches = self._forward_cache(X[idx])
                loss = float(np.mean(cross_entropy(logits, y[idx])))
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"training diverged (non-finite loss) at epoch {epoch}"
                    )
                epoch_loss += loss * len(idx)
                dz = cross_entropy_grad(logits, y[idx]) / len(idx)
                grads = self._param_backward(caches, dz)
                for p, v, g in zip(params, velocity, grads):
                    v *= self.momentum
                    v -= self.learning_rate * g
                    p += v
            record = {"epoch": epoch, "loss": epoch_loss / n}
            if validation is not None:
                xv, yv = validation
                record["val_accuracy"] = float(self.score(xv, yv))
            self.history_.append(record)
        return self

    # -- persistence -------------------------------------------------------

    def save(self, path):
        """Write a versioned checkpoint (architecture descriptor + arrays)."""
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "architecture": self.architecture,
            "n_classes": int(self.n_classes),
            "input_shape": list(self.input_shape),
            "seed": int(self.seed),
            "n_params": len(self.parameters),
        }
        arrays = {f"p{i}": p for i, p in enumerate(self.parameters)}
        buf = io.BytesIO()
        np.savez(buf, meta=np.array(json.dumps(meta)), **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        try:
            with np.load(path) as data:
                meta = json.loads(str(data["meta"]))
                if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                    raise CheckpointError(
                        f"{path}: unsupported checkpoint format"
                        f" {meta.get('format_version')!r}"
                    )
                model = cls(
                    architecture=meta["architecture"],
                    n_classes=meta["n_classes"],
                    input_shape=tuple(meta["input_shape"]),
                    seed=meta["seed"],
                )
                model.init_weights()
                params = model.parameters
                if meta["n_params"] != len(params):
                    raise CheckpointError(f"{path}: parameter count mismatch")
                for i, p in enumerate(params):
                    stored = data[f"p{i}"]
                    if stored.shape != p.shape:
                        raise CheckpointError(
                            f"{path}: parameter p{i} has shape {stored.shape},"
                            f" expected {p.shape}"
                        )
                    p[...] = stored
                return model
        except CheckpointError:
            raise
        except Exception as e:  # zip/JSON/key errors from a damaged file
            raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e


# ---------------------------------------------------------------------------
# Attack-facing gradient helpers
# ---------------------------------------------------------------------------

def loss_input_grad(model, X, labels, kind="xent", kappa=0.0, targeted=False):
    """Per-image loss, its input gradient, and the logits in one pass.

    ``labels`` is the true class for untargeted objectives and the
    target class for targeted ones.
    """
    X = model._check_input(check_images(X))
    labels = check_labels(labels, model.n_classes, len(X))
    logits, caches = model._forward_cache(X)
    if kind == "xent":
        loss = cross_entropy(logits, labels)
        dz = cross_entropy_grad(logits, labels)
    elif kind == "margin":
        loss = margin_loss(logits, labels, kappa=kappa, targeted=targeted)
        dz = margin_loss_grad(logits, labels, kappa=kappa, targeted=targeted)
    else:
        raise DomainError(f"unknown loss kind {kind!r}")
    check_finite(loss, "loss")
    grad = model._input_backward(caches, dz)
    return loss, grad, logits


def xent_fn(model, label):
    """Scalar cross-entropy of one image as a differentiable stage."""

    def fwd(x):
        return cross_entropy(model.decision_function(x[None])[0], label)

    def vjp(x, ct):
        _, g, _ = loss_input_grad(model, x[None], [label], kind="xent")
        return g[0] * ct

    return Lambda(fwd, vjp, "cross_entropy")


def margin_fn(model, label, kappa=0.0, targeted=False):
    """Scalar margin loss of one image as a differentiable stage."""

    def fwd(x):
        return margin_loss(
            model.decision_function(x[None])[0], label, kappa=kappa, targeted=targeted
        )

    def vjp(x, ct):
        _, g, _ = loss_input_grad(
            model, x[None], [label], kind="margin", kappa=kappa, targeted=targeted
        )
        return g[0] * ct

    return Lambda(fwd, vjp, "margin_loss")
