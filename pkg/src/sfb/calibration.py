"""Temperature scaling and expected calibration error."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .errors import LengthMismatch

DEFAULT_GRID = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0)
DEFAULT_BINS = 15


def _as_matrix(probs) -> np.ndarray:
    """Binary probabilities (n,) become (n, 2) rows; multiclass passes through."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        return np.stack([1.0 - p, p], axis=1)
    return p


def _bin_stats(probs, labels, bins: int):
    p = _as_matrix(probs)
    y = np.asarray(labels).astype(int)
    if len(p) != len(y):
        raise LengthMismatch(f"{len(p)} predictions but {len(y)} labels")
    if bins < 1:
        raise ValueError("bins must be at least 1")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    # bin b covers (b/bins, (b+1)/bins]; confidence 0 lands in bin 0
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    return count, conf_sum, acc_sum


def ece(probs, labels, bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error over equal-width bins of max-class confidence."""
    count, conf_sum, acc_sum = _bin_stats(probs, labels, bins)
    n = count.sum()
    if n == 0:
        return 0.0
    return float(np.abs(acc_sum - conf_sum).sum() / n)


def reliability_curve(probs, labels, bins: int = DEFAULT_BINS):
    """Non-empty bins as (mean confidence, accuracy, count)."""
    count, conf_sum, acc_sum = _bin_stats(probs, labels, bins)
    return [(float(c / k), float(a / k), int(k))
            for k, c, a in zip(count, conf_sum, acc_sum) if k > 0]


def apply_temperature(logits, temperature: float):
    """sigmoid(z/T) for 1-D logits, softmax(z/T) row-wise for 2-D logits."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    if z.ndim <= 1:
        out = special.expit(z)
        return float(out) if z.ndim == 0 else out
    return special.softmax(z, axis=-1)


def fit_temperature(logits, labels, grid=DEFAULT_GRID, bins: int = DEFAULT_BINS) -> float:
    """Grid temperature with the lowest ECE; ties go to the value closest to 1."""
    grid = list(grid)
    if not grid:
        raise ValueError("temperature grid is empty")
    if len(np.asarray(logits)) != len(np.asarray(labels)):
        raise LengthMismatch("logits and labels differ in length")
    scores = [ece(apply_temperature(logits, t), labels, bins) for t in grid]
    best = min(range(len(grid)), key=lambda i: (scores[i], abs(grid[i] - 1.0)))
    return float(grid[best])


@dataclass
class CalibrationReport:
    ece_before: float
    ece_after: float
    temperature: float
    bins: int
    reliability_curve: list = field(default_factory=list)

    @classmethod
    def build(cls, logits, labels, grid=DEFAULT_GRID, bins: int = DEFAULT_BINS):
        t = fit_temperature(logits, labels, grid, bins)
        after = apply_temperature(logits, t)
        return cls(ece(apply_temperature(logits, 1.0), labels, bins), ece(after, labels, bins),
                   t, bins, reliability_curve(after, labels, bins))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        data = json.loads(text)
        data["reliability_curve"] = [tuple(r) for r in data["reliability_curve"]]
        return cls(**data)
