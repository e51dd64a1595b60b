"""Unlabeled test-domain adaptation with bias-corrected soft pseudo-labels.

The stable classifier's calibrated outputs serve as soft labels for the
unstable features. Because those labels are noisy in a class-dependent but
input-independent way, a classifier fit to them can be mapped back to one
for the true label by inverting the noise channel, then fused with the
stable prediction in logit space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .errors import (
    DegenerateClassMass,
    EmptyInput,
    LearnerFailure,
    LengthMismatch,
    SfbError,
    UninformativeStable,
)
from .nn import AdamState, adam_step
from .probability import (
    CLAMP_EPS,
    check_probability,
    check_simplex,
    combine_binary,
    combine_multiclass,
    project_to_simplex,
)

DELTA_INF = 1e-3
CHECKPOINT_VERSION = 1


def _is_binary(probs: np.ndarray) -> bool:
    return probs.ndim == 1


def _validate(probs) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput("no stable predictions given")
    return check_probability(arr) if arr.ndim == 1 else check_simplex(arr)


@dataclass(frozen=True)
class PseudoLabels:
    values: np.ndarray

    @property
    def mass(self):
        """Soft class count: a scalar for binary labels, a length-K vector otherwise."""
        m = self.values.sum(axis=0)
        return float(m) if self.values.ndim == 1 else m

    @property
    def prior(self):
        return self.mass / len(self.values)


def soft_pseudo_labels(stable_probs) -> PseudoLabels:
    return PseudoLabels(_validate(stable_probs).copy())


@dataclass(frozen=True)
class PseudoLabelStats:
    """Pseudo-label confusion: ``confusion[y, y'] = Pr[pseudo = y | true = y']``."""

    confusion: np.ndarray

    @classmethod
    def from_accuracies(cls, eps0: float, eps1: float) -> "PseudoLabelStats":
        return cls(np.array([[eps0, 1.0 - eps1], [1.0 - eps0, eps1]]))

    @property
    def binary(self) -> bool:
        return self.confusion.shape == (2, 2)

    @property
    def eps0(self) -> float:
        return float(self.confusion[0, 0])

    @property
    def eps1(self) -> float:
        return float(self.confusion[1, 1])

    @property
    def informativeness(self) -> float:
        """eps0 + eps1 - 1 for two classes, the smallest singular value otherwise."""
        if self.binary:
            return self.eps0 + self.eps1 - 1.0
        return float(np.linalg.svd(self.confusion, compute_uv=False).min())

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "PseudoLabelStats":
        return cls(np.asarray(data["confusion"], dtype=np.float64))


def estimate_binary_accuracies(stable_probs) -> PseudoLabelStats:
    p = _validate(stable_probs)
    if p.ndim != 1:
        raise ValueError("expected class-1 probabilities")
    n, n1 = len(p), p.sum()
    if n1 <= 0 or n1 >= n:
        raise DegenerateClassMass(f"soft class-1 count {n1} leaves an empty class among {n}")
    eps1 = np.dot(p, p) / n1
    eps0 = np.dot(1 - p, 1 - p) / (n - n1)
    return PseudoLabelStats.from_accuracies(float(eps0), float(eps1))


def estimate_confusion(stable_probs) -> PseudoLabelStats:
    f = _validate(stable_probs)
    if f.ndim != 2:
        raise ValueError("expected an (n, K) matrix of class probabilities")
    mass = f.sum(axis=0)
    if (mass <= 0).any():
        raise DegenerateClassMass(f"zero soft mass for classes {np.flatnonzero(mass <= 0).tolist()}")
    return PseudoLabelStats(f.T @ (f / mass))


def estimate_stats(stable_probs) -> PseudoLabelStats:
    probs = np.asarray(stable_probs)
    return estimate_binary_accuracies(probs) if probs.ndim == 1 else estimate_confusion(probs)


def bias_correct_binary(tilde_p, stats: PseudoLabelStats):
    """Invert the pseudo-label noise channel and clip to [0, 1]."""
    denom = stats.eps0 + stats.eps1 - 1.0
    if denom <= DELTA_INF:
        raise UninformativeStable(f"eps0 + eps1 - 1 = {denom:.3g} is not above {DELTA_INF}")
    t = check_probability(tilde_p)
    out = np.clip((t + stats.eps0 - 1.0) / denom, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _simplex_least_squares(eps, t, p0, iters=2000, tol=1e-13):
    """Projected gradient on 0.5 * ||eps p - t||^2 over the simplex, row-wise."""
    step = 1.0 / np.linalg.norm(eps, 2) ** 2
    p = p0
    for _ in range(iters):
        grad = (p @ eps.T - t) @ eps
        nxt = project_to_simplex(p - step * grad)
        if np.abs(nxt - p).max() < tol:
            return nxt
        p = nxt
    return p


def bias_correct_multiclass(tilde_p, stats: PseudoLabelStats) -> np.ndarray:
    """Simplex-constrained least-squares inversion of the confusion channel."""
    if stats.informativeness <= DELTA_INF:
        raise UninformativeStable(f"confusion matrix is near singular (sigma_min={stats.informativeness:.3g})")
    t = check_simplex(tilde_p)
    eps = stats.confusion
    rows = np.atleast_2d(t)
    unconstrained = np.linalg.lstsq(eps, rows.T, rcond=None)[0].T
    projected = project_to_simplex(unconstrained)

    def residual(p):
        return np.linalg.norm(p @ eps.T - rows, axis=1)

    worse = residual(projected) > residual(unconstrained) + 1e-9
    if worse.any():
        projected[worse] = _simplex_least_squares(eps, rows[worse], projected[worse])
    return projected.reshape(t.shape)


def bias_correct(tilde_p, stats: PseudoLabelStats):
    return bias_correct_binary(tilde_p, stats) if np.ndim(tilde_p) <= 1 else bias_correct_multiclass(tilde_p, stats)


# --------------------------------------------------------------------------- learners

class TabularLearner:
    """Mean soft target per distinct feature row; unseen rows get the global mean."""

    def __init__(self):
        self.cells: dict[tuple, np.ndarray] = {}
        self.fallback = None

    def clone(self) -> "TabularLearner":
        return TabularLearner()

    def fit(self, features, targets) -> "TabularLearner":
        x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
        y = np.asarray(targets, dtype=np.float64)
        if len(x) != len(y):
            raise LengthMismatch("features and targets differ in length")
        keys, inverse = np.unique(x, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        counts = np.bincount(inverse)
        if y.ndim == 1:
            means = np.bincount(inverse, weights=y) / counts
        else:
            means = np.stack([np.bincount(inverse, weights=y[:, k]) for k in range(y.shape[1])], 1)
            means /= counts[:, None]
        self.cells = {tuple(k): m for k, m in zip(keys, means)}
        self.fallback = y.mean(axis=0)
        return self

    def predict_proba(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
        return np.array([self.cells.get(tuple(row), self.fallback) for row in x], dtype=np.float64)

    def get_params(self) -> dict:
        return {"kind": "tabular",
                "cells": [[list(k), np.atleast_1d(v).tolist()] for k, v in self.cells.items()],
                "fallback": np.atleast_1d(self.fallback).tolist()}

    @classmethod
    def from_params(cls, params: dict) -> "TabularLearner":
        obj = cls()
        scalar = len(params["fallback"]) == 1
        unpack = (lambda v: float(v[0])) if scalar else np.asarray
        obj.cells = {tuple(k): unpack(v) for k, v in params["cells"]}
        obj.fallback = unpack(params["fallback"])
        return obj


class LogisticLearner:
    """Linear softmax/sigmoid head fit by Adam on soft-label cross-entropy.

    ``init`` optionally gives starting ``(weight, bias)``; ``batch_size=None``
    means full batch.
    """

    def __init__(self, lr=0.1, steps=100, l2=0.0, batch_size=None, init=None, seed=0):
        self.lr, self.steps, self.l2 = lr, steps, l2
        self.batch_size, self.init, self.seed = batch_size, init, seed
        self.weight = None
        self.bias = None

    def clone(self) -> "LogisticLearner":
        return LogisticLearner(self.lr, self.steps, self.l2, self.batch_size, self.init, self.seed)

    def _logits(self, x):
        return x @ self.weight + self.bias

    def fit(self, features, targets) -> "LogisticLearner":
        x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
        y = np.asarray(targets, dtype=np.float64)
        if len(x) != len(y):
            raise LengthMismatch("features and targets differ in length")
        binary = y.ndim == 1
        width = 1 if binary else y.shape[1]
        y2 = y[:, None] if binary else y
        if self.init is not None:
            self.weight = np.array(self.init[0], dtype=np.float64).reshape(x.shape[1], width)
            self.bias = np.array(self.init[1], dtype=np.float64).reshape(width)
        else:
            self.weight = np.zeros((x.shape[1], width))
            self.bias = np.zeros(width)
        params = [self.weight, self.bias]
        state = AdamState.zeros_like(params)
        rng = np.random.default_rng(self.seed)
        n = len(x)
        for _ in range(self.steps):
            if self.batch_size is None or self.batch_size >= n:
                xb, yb = x, y2
            else:
                idx = rng.choice(n, self.batch_size, replace=False)
                xb, yb = x[idx], y2[idx]
            z = self._logits(xb)
            p = special.expit(z) if binary else special.softmax(z, axis=1)
            g = (p - yb) / len(xb)
            grads = [xb.T @ g + self.l2 * self.weight, g.sum(axis=0)]
            adam_step(params, grads, state, self.lr)
        return self

    def predict_proba(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
        z = self._logits(x)
        return special.expit(z[:, 0]) if z.shape[1] == 1 else special.softmax(z, axis=1)

    def get_params(self) -> dict:
        return {"kind": "logistic", "lr": self.lr, "steps": self.steps, "l2": self.l2,
                "batch_size": self.batch_size, "seed": self.seed,
                "weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_params(cls, params: dict) -> "LogisticLearner":
        obj = cls(params["lr"], params["steps"], params["l2"], params["batch_size"], seed=params["seed"])
        obj.weight = np.asarray(params["weight"], dtype=np.float64)
        obj.bias = np.asarray(params["bias"], dtype=np.float64)
        return obj


LEARNERS = {"tabular": TabularLearner, "logistic": LogisticLearner}


def learner_from_params(params: dict):
    return LEARNERS[params["kind"]].from_params(params)


# --------------------------------------------------------------------------- classifier

def _interior(p):
    """Keep corrected probabilities off exact 0/1 so fusion with the stable head stays finite."""
    p = np.clip(p, CLAMP_EPS, 1 - CLAMP_EPS)
    return p if p.ndim == 1 else p / p.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class AdaptedClassifier:
    """Fusion of a calibrated stable predictor with a (bias-corrected) unstable learner.

    ``unstable=None`` is the stable-only fallback.
    """

    stable: Callable
    unstable: object
    stats: PseudoLabelStats | None
    prior: object
    bias_correction: bool = True
    stable_ref: str = ""

    @property
    def mode(self) -> str:
        return "binary" if np.ndim(self.prior) == 0 else "multiclass"

    def unstable_proba(self, xu) -> np.ndarray:
        t = np.asarray(self.unstable.predict_proba(xu), dtype=np.float64)
        if self.bias_correction:
            t = bias_correct(t, self.stats)
        return _interior(np.asarray(t))

    def predict_proba(self, xs, xu) -> np.ndarray:
        ps = np.asarray(self.stable(xs), dtype=np.float64)
        if self.unstable is None:
            return ps
        pu = self.unstable_proba(xu)
        if self.mode == "binary":
            return np.asarray(combine_binary(ps, pu, self.prior))
        return combine_multiclass(ps, pu, self.prior)

    def predict(self, xs, xu) -> np.ndarray:
        p = self.predict_proba(xs, xu)
        return (p > 0.5).astype(int) if p.ndim == 1 else p.argmax(axis=1)

    def to_json(self) -> str:
        return json.dumps({
            "version": CHECKPOINT_VERSION,
            "mode": self.mode,
            "stats": None if self.stats is None else self.stats.to_dict(),
            "prior": np.asarray(self.prior).tolist(),
            "bias_correction": self.bias_correction,
            "stable_ref": self.stable_ref,
            "unstable_params": None if self.unstable is None else self.unstable.get_params(),
        })

    @classmethod
    def from_json(cls, text: str, stable: Callable) -> "AdaptedClassifier":
        """Rebuild around ``stable``, which the caller resolves from ``stable_ref``."""
        data = json.loads(text)
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        prior = data["prior"]
        prior = float(prior) if data["mode"] == "binary" else np.asarray(prior)
        stats = None if data["stats"] is None else PseudoLabelStats.from_dict(data["stats"])
        params = data["unstable_params"]
        unstable = None if params is None else learner_from_params(params)
        return cls(stable, unstable, stats, prior, data["bias_correction"], data["stable_ref"])


@dataclass
class AdaptResult:
    classifier: AdaptedClassifier
    rounds: list = field(default_factory=list)  # per-round diagnostics dicts
    fallback: bool = False
    frozen_stats_classifier: AdaptedClassifier | None = None


def _fit(learner, xu, targets):
    fresh = learner.clone()
    try:
        fresh.fit(xu, targets)
        out = np.asarray(fresh.predict_proba(xu[:1]))
    except SfbError:
        raise
    except Exception as exc:  # learner implementations are user-supplied
        raise LearnerFailure(f"{type(fresh).__name__} failed: {exc}") from exc
    if not np.isfinite(out).all():
        raise LearnerFailure(f"{type(fresh).__name__} produced non-finite predictions")
    return fresh


def _one_round(stable, labeler, learner, xs, xu, bias_correction, stats=None, ref=""):
    labels = soft_pseudo_labels(labeler(xs, xu))
    if stats is None:
        stats = estimate_stats(labels.values)
    if bias_correction and stats.informativeness <= DELTA_INF:
        raise UninformativeStable(f"pseudo-labels are uninformative ({stats.informativeness:.3g})")
    fitted = _fit(learner, xu, labels.values)
    clf = AdaptedClassifier(stable, fitted, stats, labels.prior, bias_correction, ref)
    return clf, labels


def adapt(stable: Callable, learner, xs, xu, rounds: int = 1, bias_correction: bool = True,
          on_uninformative: str = "raise", stable_ref: str = "") -> AdaptResult:
    """Fit ``learner`` on ``xu`` against pseudo-labels from ``stable(xs)``.

    Later rounds draw pseudo-labels (and re-estimate the confusion) from the
    previous round's fused predictor, but always fuse with the original
    stable predictor. When ``rounds > 1`` a variant that keeps the first
    round's statistics is also returned.
    """
    if rounds < 1:
        raise ValueError("rounds must be positive")
    if on_uninformative not in ("raise", "fallback"):
        raise ValueError("on_uninformative must be 'raise' or 'fallback'")
    if len(xs) == 0:
        raise EmptyInput("no unlabeled samples")
    if len(xs) != len(xu):
        raise LengthMismatch("stable and unstable feature sets differ in length")

    def from_stable(a, _):
        return stable(a)

    try:
        clf, labels = _one_round(stable, from_stable, learner, xs, xu, bias_correction, ref=stable_ref)
    except UninformativeStable:
        if on_uninformative == "raise":
            raise
        prior = soft_pseudo_labels(stable(xs)).prior
        return AdaptResult(AdaptedClassifier(stable, None, None, prior, bias_correction, stable_ref),
                           fallback=True)

    history = [_diagnostics(1, clf, labels)]
    frozen = clf
    for r in range(2, rounds + 1):
        clf, labels = _one_round(stable, clf.predict_proba, learner, xs, xu, bias_correction, ref=stable_ref)
        frozen, frozen_labels = _one_round(stable, frozen.predict_proba, learner, xs, xu,
                                           bias_correction, stats=history[0]["stats_obj"], ref=stable_ref)
        diag = _diagnostics(r, clf, labels)
        diag["frozen_prior"] = np.asarray(frozen_labels.prior).tolist()
        history.append(diag)
    for d in history:
        d.pop("stats_obj")
    return AdaptResult(clf, history, False, frozen if rounds > 1 else None)


def _diagnostics(round_idx, clf, labels):
    return {"round": round_idx, "confusion": clf.stats.confusion.tolist(),
            "informativeness": clf.stats.informativeness,
            "prior": np.asarray(labels.prior).tolist(), "stats_obj": clf.stats}
