"""White-box attacks minimizing RGB norms or perceptual color distance.

All attacks run batched over a suite of images and are deterministic:
no randomness enters the loops, so a rerun on the same inputs is
bit-identical.  Images returned in outcomes are always clipped to
[0, 1] and quantized to the 1/255 grid, and a reported success is
re-verified on the quantized image.

Conventions shared by the iterative attacks:

* classification-loss steps move along the normalized cross-entropy
  gradient -- ascent on J(x', y) untargeted, descent on J(x', t)
  targeted;
* zero gradients make the step a no-op instead of dividing by zero;
* a non-finite gradient aborts with an error naming the iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import perceptual
from .classifier import is_adversarial, loss_input_grad
from .diffcore import check_finite
from .exceptions import ConfigError, DomainError, NonFiniteError
from .validation import check_images, check_labels, quantize255

_TINY = 1e-12


class _named_step:
    """Re-raise non-finite failures with the iteration that hit them."""

    def __init__(self, context):
        self.context = context

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, NonFiniteError):
            raise NonFiniteError(f"{self.context}: {exc}") from exc
        return False


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing from ``start`` at step 0 to ``end`` at step ``total``."""

    start: float
    end: float
    total: int

    def __post_init__(self):
        if self.total <= 0:
            raise DomainError("schedule length must be positive")

    def value(self, k: int) -> float:
        if not 0 <= k <= self.total:
            raise DomainError(f"schedule step {k} outside [0, {self.total}]")
        return self.end + 0.5 * (self.start - self.end) * (
            1.0 + np.cos(np.pi * k / self.total)
        )


@dataclass
class AttackOutcome:
    """Result for one image: the adversarial candidate and its size metrics.

    ``image`` is quantized; when ``success`` is true the quantized image
    satisfies the attack's adversarial predicate.  ``l2`` is measured in
    [0, 1] units over the whole image, ``linf`` in 1/255 levels, ``c2``
    is the accumulated perceptual color difference.
    """

    image: np.ndarray
    success: bool
    iterations: int
    l2: float
    linf: float
    c2: float
    trace: list | None = field(default=None, repr=False)


def _row_norms(d):
    return np.sqrt(np.sum(d * d, axis=(1, 2, 3)))


def _unit(g):
    n = _row_norms(g)[:, None, None, None]
    return np.where(n > _TINY, g / np.maximum(n, _TINY), 0.0)


def _clip01(x):
    return np.clip(x, 0.0, 1.0)


def _loss_ascent(model, x, labels, targeted):
    """Cross-entropy step direction to *add* to the image."""
    loss, g, logits = loss_input_grad(model, x, labels, kind="xent")
    return (loss, -g, logits) if targeted else (loss, g, logits)


class BaseAttack(BaseEstimator):
    """Shared surface: ``perturb(model, X, y, targets)`` -> outcomes.

    Subclasses are configured entirely through constructor parameters
    (sklearn conventions, so ``get_params`` round-trips into run
    configs) and implement ``_attack`` on validated batches.
    """

    targeted = False
    kappa = 0.0

    def perturb(self, model, X, y, targets=None):
        X = check_images(X)
        y = check_labels(y, model.n_classes, len(X))
        if self.kappa < 0.0:
            raise DomainError("kappa must be nonnegative")
        if self.targeted:
            if targets is None:
                raise DomainError("targeted attack requires target labels")
            targets = check_labels(targets, model.n_classes, len(X), "targets")
            if np.any(targets == y):
                raise DomainError("target label equals the true label")
        return self._attack(model, X, y, targets if self.targeted else None)

    # -- helpers shared by subclasses ---------------------------------------

    def _adv_mask(self, logits, y, targets):
        if self.targeted:
            return is_adversarial(logits, target=targets, kappa=self.kappa)
        return is_adversarial(logits, y=y, kappa=self.kappa)

    def _attack_labels(self, y, targets):
        return targets if self.targeted else y

    def _finalize(self, X, best_img, success, iterations, traces=None):
        best_img = quantize255(best_img)
        delta = best_img - X
        l2 = _row_norms(delta)
        linf = np.max(np.abs(delta), axis=(1, 2, 3)) * 255.0
        c2v = np.atleast_1d(perceptual.c2(X, best_img))
        return [
            AttackOutcome(
                image=best_img[i],
                success=bool(success[i]),
                iterations=int(iterations[i]),
                l2=float(l2[i]),
                linf=float(linf[i]),
                c2=float(c2v[i]),
                trace=None if traces is None else traces[i],
            )
            for i in range(len(X))
        ]

    def _attack(self, model, X, y, targets):
        raise NotImplementedError

    @classmethod
    def budget_params(cls, budget):
        """Translate a config budget entry into constructor parameters."""
        raise ConfigError(f"{cls.__name__} does not take a budget")


# ---------------------------------------------------------------------------
# I-FGSM
# ---------------------------------------------------------------------------

class IFGSM(BaseAttack):
    """Iterative sign-gradient attack under a growing L-infinity bound.

    Rounds run at bounds 1/255, 2/255, ... with a fixed per-round step
    budget; each round restarts from the clean image, and an image exits
    at the first bound where it succeeds.  sign(0) is 0, so zero
    gradients leave the iterate unchanged.
    """

    def __init__(
        self,
        alpha=1.0 / 255.0,
        steps_per_round=100,
        max_rounds=64,
        kappa=0.0,
        targeted=False,
    ):
        self.alpha = alpha
        self.steps_per_round = steps_per_round
        self.max_rounds = max_rounds
        self.kappa = kappa
        self.targeted = targeted

    def _attack(self, model, X, y, targets):
        n = len(X)
        best_img = quantize255(X.copy())
        success = np.zeros(n, dtype=bool)
        steps_taken = np.zeros(n, dtype=np.int64)
        pending = np.arange(n)

        for rnd in range(1, self.max_rounds + 1):
            if len(pending) == 0:
                break
            eps = rnd / 255.0
            idx = pending.copy()
            x0 = X[idx]
            xa = x0.copy()
            counts = steps_taken[idx].copy()

            for k in range(self.steps_per_round + 1):
                t_rows = targets[idx] if self.targeted else None
                labels = self._attack_labels(y[idx], t_rows)
                with _named_step(f"round {rnd}, step {k + 1}"):
                    _, gdir, logits = _loss_ascent(model, xa, labels, self.targeted)
                adv = self._adv_mask(logits, y[idx], t_rows)
                if adv.any():
                    done = np.where(adv)[0]
                    best_img[idx[done]] = xa[done]
                    success[idx[done]] = True
                    steps_taken[idx[done]] = counts[done]
                    keep = ~adv
                    xa, x0, idx = xa[keep], x0[keep], idx[keep]
                    counts, gdir = counts[keep], gdir[keep]
                if k == self.steps_per_round or len(idx) == 0:
                    break
                check_finite(gdir, f"gradient at round {rnd}, step {k + 1}")
                xa = xa + self.alpha * np.sign(gdir)
                xa = _clip01(np.clip(xa, x0 - eps, x0 + eps))
                counts += 1

            steps_taken[idx] = counts
            pending = idx
        return self._finalize(X, best_img, success, steps_taken)


# ---------------------------------------------------------------------------
# C&W family
# ---------------------------------------------------------------------------

class _CarliniBase(BaseAttack):
    """Joint penalty + margin optimization over the tanh-space variable.

    A fresh Adam run per search step; the trade-off constant is bisected
    in log space within [init/1000, init*1000], moving down when the
    step produced an adversarial iterate and up otherwise.  Only the
    final returned iterate is quantized; candidates are re-verified on
    their quantized version before being recorded as best.
    """

    DEFAULT_LAM = {"targeted": 1.0, "untargeted": 1.0}
    _SQUEEZE = 1e-6
    # Quantizing can move the size metric by a bounded amount; candidates
    # whose raw metric is clearly worse than the recorded best need no
    # quantized re-check.
    _CAND_REL = 1.05
    _CAND_ABS = 1.0

    def _make_objective(self, X):
        """Returns (penalty(x_adv) -> (value, grad), metric(rows, xq))."""
        raise NotImplementedError

    def _raw_metric(self, pval):
        """Selection metric implied by the penalty value."""
        raise NotImplementedError

    def _lam0(self):
        if self.initial_lam is not None:
            return float(self.initial_lam)
        return self.DEFAULT_LAM["targeted" if self.targeted else "untargeted"]

    @classmethod
    def budget_params(cls, budget):
        steps, iters = budget
        return {"search_steps": int(steps), "iterations": int(iters)}

    def _attack(self, model, X, y, targets):
        n = len(X)
        lam0 = self._lam0()
        lam = np.full(n, lam0)
        log_lo = np.full(n, np.log(lam0 / 1000.0))
        log_hi = np.full(n, np.log(lam0 * 1000.0))

        best_metric = np.full(n, np.inf)
        best_img = quantize255(X.copy())
        found = np.zeros(n, dtype=bool)
        attack_label = self._attack_labels(y, targets)
        penalty, metric = self._make_objective(X)

        xi = self._SQUEEZE
        u = np.arctanh(2.0 * np.clip(X, xi, 1.0 - xi) - 1.0)
        traces = [[] for _ in range(n)] if self.keep_trace else None

        b1, b2, eps_adam = 0.9, 0.999, 1e-8
        for step in range(self.search_steps):
            w = np.zeros_like(X)
            m = np.zeros_like(X)
            v = np.zeros_like(X)
            step_success = np.zeros(n, dtype=bool)

            for it in range(1, self.iterations + 1):
                x_adv = 0.5 * (np.tanh(u + w) + 1.0)
                with _named_step(f"search step {step}, iteration {it}"):
                    mval, mgrad, logits = loss_input_grad(
                        model,
                        x_adv,
                        attack_label,
                        kind="margin",
                        kappa=self.kappa,
                        targeted=self.targeted,
                    )
                    pval, pgrad = penalty(x_adv)
                raw_adv = self._adv_mask(logits, y, targets)
                step_success |= raw_adv
                worth = raw_adv & (
                    self._raw_metric(pval) <= best_metric * self._CAND_REL + self._CAND_ABS
                )
                if worth.any():
                    rows = np.where(worth)[0]
                    xq = quantize255(x_adv[rows])
                    zq = model.decision_function(xq)
                    advq = self._adv_mask(
                        zq, y[rows], targets[rows] if self.targeted else None
                    )
                    if advq.any():
                        ok = rows[advq]
                        mets = metric(ok, xq[advq])
                        improved = mets < best_metric[ok]
                        upd = ok[improved]
                        best_metric[upd] = mets[improved]
                        best_img[upd] = xq[advq][improved]
                        found[upd] = True

                dx = pgrad + lam[:, None, None, None] * mgrad
                check_finite(dx, f"gradient at search step {step}, iteration {it}")
                dw = dx * (2.0 * x_adv * (1.0 - x_adv))
                m = b1 * m + (1.0 - b1) * dw
                v = b2 * v + (1.0 - b2) * dw * dw
                mhat = m / (1.0 - b1 ** it)
                vhat = v / (1.0 - b2 ** it)
                w = w - self.learning_rate * mhat / (np.sqrt(vhat) + eps_adam)

            if traces is not None:
                for i in range(n):
                    traces[i].append(
                        {"lam": float(lam[i]), "success": bool(step_success[i])}
                    )
            lam_log = np.log(lam)
            log_hi = np.where(step_success, np.minimum(log_hi, lam_log), log_hi)
            log_lo = np.where(step_success, log_lo, np.maximum(log_lo, lam_log))
            lam = np.exp(0.5 * (log_lo + log_hi))

        iters = np.full(n, self.search_steps * self.iterations, dtype=np.int64)
        return self._finalize(X, best_img, found, iters, traces)


class CarliniWagner(_CarliniBase):
    """L2-penalized joint optimization (tanh reparameterization + Adam)."""

    DEFAULT_LAM = {"targeted": 1.0, "untargeted": 10.0}
    _CAND_ABS = 0.15  # worst-case L2 shift from rounding a 32x32x3 image

    def __init__(
        self,
        search_steps=9,
        iterations=1000,
        learning_rate=0.01,
        initial_lam=None,
        kappa=0.0,
        targeted=False,
        keep_trace=False,
    ):
        self.search_steps = search_steps
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.initial_lam = initial_lam
        self.kappa = kappa
        self.targeted = targeted
        self.keep_trace = keep_trace

    def _make_objective(self, X):
        def penalty(x_adv):
            delta = x_adv - X
            return np.sum(delta * delta, axis=(1, 2, 3)), 2.0 * delta

        def metric(rows, xq):
            return _row_norms(xq - X[rows])

        return penalty, metric

    def _raw_metric(self, pval):
        return np.sqrt(pval)


class PercCW(_CarliniBase):
    """C&W with the L2 penalty replaced by accumulated color difference."""

    DEFAULT_LAM = {"targeted": 1.0, "untargeted": 100.0}
    _CAND_ABS = 4.0  # rounding moves the accumulated difference by a few units

    def __init__(
        self,
        search_steps=9,
        iterations=1000,
        learning_rate=0.01,
        initial_lam=None,
        kappa=0.0,
        targeted=False,
        keep_trace=False,
    ):
        self.search_steps = search_steps
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.initial_lam = initial_lam
        self.kappa = kappa
        self.targeted = targeted
        self.keep_trace = keep_trace

    def _make_objective(self, X):
        ref = perceptual.ColorDistanceRef(X)

        def penalty(x_adv):
            return ref.value_and_grad(x_adv)

        def metric(rows, xq):
            return np.atleast_1d(ref.value(xq, rows=rows))

        return penalty, metric

    def _raw_metric(self, pval):
        return pval


# ---------------------------------------------------------------------------
# DDN
# ---------------------------------------------------------------------------

class DDN(BaseAttack):
    """L2 attack with a norm bound that shrinks when adversarial.

    Normalized cross-entropy steps; the perturbation is projected onto
    the eps-sphere each iteration, with eps scaled by (1 - gamma) when
    the current iterate is adversarial and (1 + gamma) otherwise.  The
    iterate under evaluation is clipped and quantized each iteration
    (the accumulated perturbation itself stays continuous), and the
    smallest-L2 adversarial quantized iterate is returned.
    """

    def __init__(
        self,
        iterations=100,
        gamma=0.05,
        eps_init=1.0,
        alpha_start=1.0,
        alpha_end=0.01,
        kappa=0.0,
        targeted=False,
        keep_trace=False,
    ):
        self.iterations = iterations
        self.gamma = gamma
        self.eps_init = eps_init
        self.alpha_start = alpha_start
        self.alpha_end = alpha_end
        self.kappa = kappa
        self.targeted = targeted
        self.keep_trace = keep_trace

    @classmethod
    def budget_params(cls, budget):
        return {"iterations": int(budget)}

    def _attack(self, model, X, y, targets):
        n = len(X)
        sched = CosineSchedule(self.alpha_start, self.alpha_end, self.iterations)
        delta = np.zeros_like(X)
        eps = np.full(n, self.eps_init)
        best_l2 = np.full(n, np.inf)
        best_img = quantize255(X.copy())
        found = np.zeros(n, dtype=bool)
        attack_label = self._attack_labels(y, targets)
        traces = [[] for _ in range(n)] if self.keep_trace else None

        def consider(xq, adv):
            l2q = _row_norms(xq - X)
            improved = adv & (l2q < best_l2)
            best_l2[improved] = l2q[improved]
            best_img[improved] = xq[improved]
            found[improved] = True

        for k in range(1, self.iterations + 1):
            xq = quantize255(_clip01(X + delta))
            with _named_step(f"iteration {k}"):
                _, gdir, logits = _loss_ascent(model, xq, attack_label, self.targeted)
            adv = self._adv_mask(logits, y, targets)
            consider(xq, adv)
            check_finite(gdir, f"gradient at iteration {k}")
            delta = delta + sched.value(k - 1) * _unit(gdir)
            eps = np.where(adv, (1.0 - self.gamma) * eps, (1.0 + self.gamma) * eps)
            delta = eps[:, None, None, None] * _unit(delta)
            if traces is not None:
                dn = _row_norms(delta)
                for i in range(n):
                    traces[i].append(
                        {
                            "eps": float(eps[i]),
                            "adversarial": bool(adv[i]),
                            "delta_norm": float(dn[i]),
                        }
                    )

        xq = quantize255(_clip01(X + delta))
        adv = self._adv_mask(model.decision_function(xq), y, targets)
        consider(xq, adv)
        iters = np.full(n, self.iterations, dtype=np.int64)
        return self._finalize(X, best_img, found, iters, traces)


# ---------------------------------------------------------------------------
# Alternating-loss perceptual attack
# ---------------------------------------------------------------------------

class PercAL(BaseAttack):
    """Alternate between classification-loss and color-distance descent.

    Each iteration looks at the current (clipped, quantized) iterate:
    while it is not adversarial the perturbation grows along the
    normalized classification-loss gradient with step ``alpha_l``; once
    adversarial it shrinks along the normalized gradient of the
    accumulated color difference with step ``alpha_c``.  Both steps
    anneal on cosine schedules.  The adversarial iterate with the
    smallest accumulated difference is returned.

    With ``structure=True`` the objective weights the per-pixel map by
    (1 - sigma), sigma being the texture-complexity map of the original
    image, computed once up front.
    """

    def __init__(
        self,
        iterations=100,
        alpha_l_start=1.0,
        alpha_l_end=0.01,
        alpha_c_start=None,
        alpha_c_end=0.05,
        structure=False,
        kappa=0.0,
        targeted=False,
        keep_trace=False,
    ):
        self.iterations = iterations
        self.alpha_l_start = alpha_l_start
        self.alpha_l_end = alpha_l_end
        self.alpha_c_start = alpha_c_start
        self.alpha_c_end = alpha_c_end
        self.structure = structure
        self.kappa = kappa
        self.targeted = targeted
        self.keep_trace = keep_trace

    @classmethod
    def budget_params(cls, budget):
        return {"iterations": int(budget)}

    def _resolved_alpha_c_start(self):
        if self.alpha_c_start is not None:
            return float(self.alpha_c_start)
        # The easy untargeted low-confidence setting starts lower.
        return 0.1 if (not self.targeted and self.kappa == 0.0) else 0.5

    def _attack(self, model, X, y, targets):
        n = len(X)
        sched_l = CosineSchedule(self.alpha_l_start, self.alpha_l_end, self.iterations)
        sched_c = CosineSchedule(
            self._resolved_alpha_c_start(), self.alpha_c_end, self.iterations
        )
        sigma = None
        if self.structure:
            sigma = np.stack([perceptual.texture_complexity(x) for x in X])
        ref = perceptual.ColorDistanceRef(X, sigma=sigma)

        delta = np.zeros_like(X)
        cur = quantize255(_clip01(X))
        best_sel = np.full(n, np.inf)
        best_img = quantize255(X.copy())
        found = np.zeros(n, dtype=bool)
        traces = [[] for _ in range(n)] if self.keep_trace else None

        def color_step(rows, k):
            val, gc = ref.value_and_grad(cur[rows], rows=rows)
            val = np.atleast_1d(val)
            improved = val < best_sel[rows]
            upd = rows[improved]
            best_sel[upd] = val[improved]
            best_img[upd] = cur[rows][improved]
            found[upd] = True
            if k is not None:
                check_finite(gc, f"color gradient at iteration {k}")
                delta[rows] -= sched_c.value(k - 1) * _unit(gc)
            return val

        for k in range(1, self.iterations + 1):
            logits = model.decision_function(cur)
            adv = self._adv_mask(logits, y, targets)
            sel_val = np.full(n, np.nan)
            if adv.any():
                rows = np.where(adv)[0]
                sel_val[rows] = color_step(rows, k)
            na = ~adv
            if na.any():
                rows = np.where(na)[0]
                labels = self._attack_labels(y, targets)[rows]
                with _named_step(f"iteration {k}"):
                    _, gdir, _ = _loss_ascent(model, cur[rows], labels, self.targeted)
                check_finite(gdir, f"loss gradient at iteration {k}")
                delta[rows] += sched_l.value(k - 1) * _unit(gdir)
            cur = quantize255(_clip01(X + delta))
            if traces is not None:
                for i in range(n):
                    traces[i].append(
                        {
                            "adversarial": bool(adv[i]),
                            "loss_step": bool(na[i]),
                            "selection_value": float(sel_val[i]) if adv[i] else None,
                        }
                    )

        # The final iterate is also a candidate.
        adv = self._adv_mask(model.decision_function(cur), y, targets)
        if adv.any():
            color_step(np.where(adv)[0], None)

        iters = np.full(n, self.iterations, dtype=np.int64)
        return self._finalize(X, best_img, found, iters, traces)


def perc_al_structured(**params) -> PercAL:
    """The structure-weighted variant of :class:`PercAL`."""
    return PercAL(structure=True, **params)


ATTACK_REGISTRY = {
    "ifgsm": IFGSM,
    "cw": CarliniWagner,
    "perc_cw": PercCW,
    "ddn": DDN,
    "perc_al": PercAL,
    "perc_al_structured": perc_al_structured,
}


def make_attack(name: str, budget=None, **params):
    """Instantiate a registered attack, translating an optional budget."""
    if name not in ATTACK_REGISTRY:
        raise ConfigError(
            f"unknown attack {name!r}; choose from {sorted(ATTACK_REGISTRY)}"
        )
    factory = ATTACK_REGISTRY[name]
    cls = PercAL if name == "perc_al_structured" else factory
    if budget is not None:
        params = {**cls.budget_params(budget), **params}
    return factory(**params)
