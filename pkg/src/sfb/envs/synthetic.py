"""Two-feature synthetic environments with exact Bayes oracles.

Anti-causal (AC), ±1 coding::

    Y   ~ Rad(0.5)
    X_S = Y * Rad(0.75)
    X_U = Y * Rad(beta)

Cause-effect with direct dependence (CEDD), {0, 1} coding::

    X_S ~ Bern(0.5)
    Y   = X_S xor Bern(0.75)
    X_U = Y xor Bern(beta) xor X_S

Rad(p) is +1 with probability p and -1 otherwise. Features are stored as
``x[:, 0] = X_S`` and ``x[:, 1] = X_U``; labels are always {0, 1}.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import UnsupportedGenerator
from .base import EnvDataset

STABLE_STRENGTH = 0.75


def _check(beta, n):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta={beta} outside [0, 1]")
    if n < 1:
        raise ValueError("n must be positive")


def _rad(rng, p, n):
    return np.where(rng.random(n) < p, 1, -1)


def gen_ac(beta: float, n: int, seed=0, env_id: str | None = None) -> EnvDataset:
    _check(beta, n)
    rng = np.random.default_rng(seed)
    y = _rad(rng, 0.5, n)
    xs = y * _rad(rng, STABLE_STRENGTH, n)
    xu = y * _rad(rng, beta, n)
    x = np.stack([xs, xu], axis=1).astype(np.float64)
    return EnvDataset(env_id or f"ac-{beta:g}", beta, x, (y + 1) // 2, "AC")


def gen_cedd(beta: float, n: int, seed=0, env_id: str | None = None) -> EnvDataset:
    _check(beta, n)
    rng = np.random.default_rng(seed)
    xs = (rng.random(n) < 0.5).astype(int)
    y = xs ^ (rng.random(n) < STABLE_STRENGTH)
    xu = y ^ (rng.random(n) < beta) ^ xs
    x = np.stack([xs, xu], axis=1).astype(np.float64)
    return EnvDataset(env_id or f"cedd-{beta:g}", beta, x, y.astype(int), "CEDD")


GENERATORS = {"AC": gen_ac, "CEDD": gen_cedd}


def _joint(tag: str, beta: float) -> dict:
    """Exact {(y, x_s, x_u): probability} by enumerating the noise variables."""
    p = STABLE_STRENGTH
    out: dict = {}
    if tag == "AC":
        for y, ns, nu in itertools.product((-1, 1), repeat=3):
            w = 0.5 * (p if ns == 1 else 1 - p) * (beta if nu == 1 else 1 - beta)
            key = ((y + 1) // 2, y * ns, y * nu)
            out[key] = out.get(key, 0.0) + w
    elif tag == "CEDD":
        for xs, a, b in itertools.product((0, 1), repeat=3):
            w = 0.5 * (p if a else 1 - p) * (beta if b else 1 - beta)
            y = xs ^ a
            key = (y, xs, y ^ b ^ xs)
            out[key] = out.get(key, 0.0) + w
    else:
        raise UnsupportedGenerator(f"no closed-form oracle for {tag!r}")
    return out


@dataclass(frozen=True)
class BayesOracle:
    """Exact conditionals of a two-feature generator.

    ``lookup[(x_s, x_u)] = (Pr[Y=1|x_s], Pr[Y=1|x_u], Pr[Y=1|x_s, x_u])`` and
    ``marginal[(x_s, x_u)]`` is the cell probability.
    """

    tag: str
    beta: float
    lookup: dict
    marginal: dict
    bayes_accuracy: float

    def xu_values(self):
        return sorted({xu for _, xu in self.marginal})

    def xu_marginal(self, xu) -> float:
        return sum(p for (_, u), p in self.marginal.items() if u == xu)

    def posterior_xu(self, xu) -> float:
        return next(v[1] for (_, u), v in self.lookup.items() if u == xu)

    def posterior_xs(self, xs) -> float:
        return next(v[0] for (s, _), v in self.lookup.items() if s == xs)

    def posterior(self, xs, xu):
        """Vectorized Pr[Y=1 | x_s, x_u]."""
        xs, xu = np.broadcast_arrays(np.asarray(xs), np.asarray(xu))
        return np.array([self.lookup[(s, u)][2] for s, u in zip(xs.ravel(), xu.ravel())]).reshape(xs.shape)

    def pseudo_label_posterior(self, xu) -> float:
        """Pr[pseudo-label = 1 | x_u] when pseudo-labels come from the exact stable posterior."""
        cells = [(s, p) for (s, u), p in self.marginal.items() if u == xu]
        mass = sum(p for _, p in cells)
        return sum(p * self.posterior_xs(s) for s, p in cells) / mass

    def pseudo_label_accuracies(self):
        """Exact (eps0, eps1) of soft pseudo-labels from the stable posterior."""
        p1 = sum(p * v[2] for (s, u), p in self.marginal.items() for v in [self.lookup[(s, u)]])
        hit1 = hit0 = 0.0
        for (s, u), p in self.marginal.items():
            ps, pj = self.posterior_xs(s), self.lookup[(s, u)][2]
            hit1 += p * pj * ps
            hit0 += p * (1 - pj) * (1 - ps)
        return hit0 / (1 - p1), hit1 / p1


def bayes_oracle(tag: str, beta: float) -> BayesOracle:
    joint = _joint(tag, beta)
    cells: dict = {}
    for (y, xs, xu), p in joint.items():
        cells.setdefault((xs, xu), [0.0, 0.0])[y] += p

    def cond(match):
        num = sum(p for (y, xs, xu), p in joint.items() if y == 1 and match(xs, xu))
        den = sum(p for (y, xs, xu), p in joint.items() if match(xs, xu))
        return num / den

    lookup = {}
    marginal = {}
    for (xs, xu), (p0, p1) in cells.items():
        lookup[(xs, xu)] = (cond(lambda s, u: s == xs), cond(lambda s, u: u == xu), p1 / (p0 + p1))
        marginal[(xs, xu)] = p0 + p1
    acc = sum(max(v) for v in cells.values())
    return BayesOracle(tag, beta, lookup, marginal, acc)


def suboptimality_vs_bayes(classifier, oracle: BayesOracle) -> float:
    """Probability over X_U that ``classifier`` disagrees with the Bayes classifier on X_U.

    ``classifier`` maps an array of x_u values to hard labels. Where the Bayes
    posterior is exactly 1/2 either label is optimal and no disagreement counts.
    """
    if oracle.tag not in ("AC", "CEDD"):
        raise UnsupportedGenerator(f"no closed-form oracle for {oracle.tag!r}")
    values = oracle.xu_values()
    preds = np.asarray(classifier(np.array(values, dtype=np.float64))).ravel()
    total = 0.0
    for u, h in zip(values, preds):
        post = oracle.posterior_xu(u)
        if post == 0.5:
            continue
        if int(h) != int(post > 0.5):
            total += oracle.xu_marginal(u)
    return total
