"""Multi-environment training of a split-representation model.

The model has a shared trunk whose output is split into a stable part and
an unstable part. A single linear head reads the stable part; each training
environment gets its own linear head on the unstable part. The objective sums,
over environments, the stable-head risk and the risk of the logit-space
fusion of both heads. It adds a stability penalty on the stable head and a
within-class cross-covariance penalty between the two parts.

All penalties return closed-form gradients with respect to logits or
features, so only first-order reverse mode through the trunk is needed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import special

from .errors import (
    BadSplit,
    ConfigError,
    DegenerateClass,
    EmptyEnvironment,
    LengthMismatch,
    NonFiniteLoss,
    TooFewEnvironments,
)
from .nn import AdamState, DenseNet, adam_step, backward, cosine_lr, forward
from .probability import CLAMP_EPS

PENALTIES = ("irmv1", "vrex")


# --------------------------------------------------------------------------- risks

def _as_targets(labels, n_classes):
    """Binary -> (n,) floats in [0, 1]; multiclass -> (n, K) rows."""
    y = np.asarray(labels, dtype=np.float64)
    if n_classes == 2:
        return y if y.ndim == 1 else y[:, 1]
    if y.ndim == 1:
        return np.eye(n_classes)[y.astype(int)]
    return y


def cross_entropy_risk(probs, labels) -> float:
    """Mean negative log-likelihood; labels may be fractional.

    ``probs`` is a vector of class-1 probabilities or an (n, K) matrix.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(p) != len(y):
        raise LengthMismatch(f"{len(p)} predictions but {len(y)} labels")
    if p.ndim == 1:
        p = np.clip(p, CLAMP_EPS, 1 - CLAMP_EPS)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    if y.ndim == 1:
        y = np.eye(p.shape[1])[y.astype(int)]
    return float(-np.mean(np.sum(y * np.log(np.clip(p, CLAMP_EPS, 1.0)), axis=1)))


def _weights(w, n):
    """Per-sample counts; ``None`` means every row counts once."""
    return np.ones(n) if w is None else np.asarray(w, dtype=np.float64)


def logit_risk(z, y, weights=None):
    """Cross-entropy of logits ``z`` against soft targets ``y``; returns (value, dvalue/dz).

    ``weights`` are per-row multiplicities: a row with weight k counts as k
    identical samples.
    """
    w = _weights(weights, len(z))
    total = w.sum()
    if z.ndim == 1:
        value = np.dot(w, np.logaddexp(0.0, z) - y * z) / total
        return float(value), w * (special.expit(z) - y) / total
    logp = special.log_softmax(z, axis=1)
    value = -np.dot(w, np.sum(y * logp, axis=1)) / total
    return float(value), w[:, None] * (np.exp(logp) * y.sum(axis=1, keepdims=True) - y) / total


# --------------------------------------------------------------------------- penalties

def irmv1_penalty(logits, labels, weights=None):
    """Squared gradient of the risk w.r.t. a unit scalar multiplier on the logits.

    Binary logits are a vector, K-class logits an (n, K) matrix with integer
    or one-hot/soft labels. Returns ``(value, dvalue/dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if len(z) == 0:
        raise EmptyEnvironment("IRMv1 penalty needs at least one sample")
    w = _weights(weights, len(z))
    total = w.sum()
    y = np.asarray(labels, dtype=np.float64)
    if z.ndim == 1:
        s = special.expit(z)
        m = np.dot(w, (s - y) * z) / total
        grad = 2 * m / total * w * (s * (1 - s) * z + s - y)
        return float(m * m), grad
    if y.ndim == 1:
        y = np.eye(z.shape[1])[y.astype(int)]
    s = special.softmax(z, axis=1)
    m = np.dot(w, np.sum((s - y) * z, axis=1)) / total
    zbar = np.sum(s * z, axis=1, keepdims=True)
    grad = 2 * m / total * w[:, None] * ((s - y) + s * (z - zbar))
    return float(m * m), grad


def vrex_penalty(risks):
    """Population variance of environment risks and its gradient per risk."""
    r = np.asarray(risks, dtype=np.float64)
    if len(r) < 2:
        raise TooFewEnvironments("risk variance needs at least two environments")
    dev = r - r.mean()
    return float(np.mean(dev * dev)), 2 * dev / len(r)


def cond_indep_penalty(phi_s, phi_u, labels, weights=None):
    """Class-weighted squared Frobenius norm of within-class cross-covariances.

    Returns ``(value, grad_phi_s, grad_phi_u)``. Labels are hard class indices;
    fractional binary labels are rounded.
    """
    a = np.asarray(phi_s, dtype=np.float64)
    b = np.asarray(phi_u, dtype=np.float64)
    y = np.asarray(labels)
    if y.ndim == 2:
        y = y.argmax(axis=1)
    elif y.dtype.kind == "f":
        y = (y > 0.5).astype(int)
    if not (len(a) == len(b) == len(y)):
        raise LengthMismatch("features and labels must be aligned")
    w = _weights(weights, len(y))
    total = w.sum()
    value = 0.0
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        wc = w[idx]
        k = wc.sum()
        if k < 2:
            raise DegenerateClass(f"class {cls} has {k:g} sample(s); need at least 2")
        ca = a[idx] - wc @ a[idx] / k
        cb = b[idx] - wc @ b[idx] / k
        cov = (ca * wc[:, None]).T @ cb / (k - 1)
        share = k / total
        value += share * float(np.sum(cov * cov))
        scale = 2 * share / (k - 1) * wc[:, None]
        ga[idx] = scale * (cb @ cov.T)
        gb[idx] = scale * (ca @ cov)
    return value, ga, gb


# --------------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    lambda_S: float = 0.0
    lambda_C: float = 0.0
    lr: float = 1e-2
    steps: int = 500
    pretrain_steps: int = 0
    batch_size: int | None = None  # None: full batch
    penalty: str = "irmv1"
    seed: int = 0
    dim_S: int = 4
    hidden: tuple = (8, 8)
    width: int = 8
    dropout: float = 0.0
    cosine: bool = False
    joint: bool = True  # False trains the stable head alone (ERM/IRM baselines)
    n_classes: int = 2
    weight_decay: float = 0.0
    feature_activation: str = "relu"  # activation on the split representation

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.penalty not in PENALTIES:
            raise ConfigError("penalty", f"unknown penalty {self.penalty!r}; expected one of {PENALTIES}")
        for name in ("lambda_S", "lambda_C", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.steps < 1:
            raise ConfigError("steps", "must be at least 1")
        if not 0 <= self.pretrain_steps <= self.steps:
            raise ConfigError("pretrain_steps", "must lie in [0, steps]")
        if not 0 < self.dim_S < self.width:
            raise ConfigError("dim_S", f"must lie strictly between 0 and width={self.width}")
        if self.n_classes < 2:
            raise ConfigError("n_classes", "need at least two classes")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if self.feature_activation not in ("relu", "identity"):
            raise ConfigError("feature_activation", "must be 'relu' or 'identity'")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("batch_size", "must be at least 2")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown training option")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("train", str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# --------------------------------------------------------------------------- model

def _init_linear(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)


class SfbModel:
    """Shared trunk, stable head on the first ``dim_S`` features, one unstable head per environment."""

    def __init__(self, trunk: DenseNet, dim_S: int, stable_head, unstable_heads: dict,
                 n_classes: int = 2, prior=0.5, temperature: float = 1.0):
        if not 0 < dim_S < trunk.out_dim:
            raise BadSplit(f"dim_S={dim_S} must lie strictly between 0 and {trunk.out_dim}")
        self.trunk = trunk
        self.dim_S = dim_S
        self.stable_head = [np.asarray(p, dtype=np.float64) for p in stable_head]
        self.unstable_heads = {k: [np.asarray(p, dtype=np.float64) for p in v]
                               for k, v in unstable_heads.items()}
        self.n_classes = n_classes
        self.prior = prior
        self.temperature = temperature

    @classmethod
    def create(cls, in_dim: int, env_ids, cfg: TrainConfig, prior=0.5) -> "SfbModel":
        sizes = [in_dim, *cfg.hidden, cfg.width]
        trunk = DenseNet.create(sizes, activations=["relu"] * (len(sizes) - 2) + [cfg.feature_activation],
                                dropout_p=cfg.dropout, seed=cfg.seed)
        rng = np.random.default_rng([cfg.seed, 1])
        out = 1 if cfg.n_classes == 2 else cfg.n_classes
        stable = _init_linear(rng, cfg.dim_S, out)
        heads = {e: _init_linear(rng, cfg.width - cfg.dim_S, out) for e in env_ids} if cfg.joint else {}
        return cls(trunk, cfg.dim_S, stable, heads, cfg.n_classes, prior)

    @property
    def binary(self) -> bool:
        return self.n_classes == 2

    def params(self) -> list:
        out = self.trunk.params() + self.stable_head
        for e in sorted(self.unstable_heads):
            out += self.unstable_heads[e]
        return out

    def _head(self, h, head):
        z = h @ head[0] + head[1]
        return z[:, 0] if self.binary else z

    def features(self, x):
        h = self.trunk(np.asarray(x, dtype=np.float64))
        return h[:, :self.dim_S], h[:, self.dim_S:]

    def stable_logits(self, x):
        return self._head(self.features(x)[0], self.stable_head)

    def stable_proba(self, x, temperature: float | None = None):
        t = self.temperature if temperature is None else temperature
        z = self.stable_logits(x) / t
        return special.expit(z) if self.binary else special.softmax(z, axis=1)

    def unstable_logits(self, x, env_id):
        return self._head(self.features(x)[1], self.unstable_heads[env_id])

    def mean_unstable_head(self):
        heads = list(self.unstable_heads.values())
        return [np.mean([h[i] for h in heads], axis=0) for i in range(2)]

    def prior_logit(self):
        p = np.asarray(self.prior, dtype=np.float64)
        return float(special.logit(p)) if self.binary else np.log(p)

    def copy(self) -> "SfbModel":
        return SfbModel.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "trunk": self.trunk.to_dict(),
            "dim_S": self.dim_S,
            "stable_head": [p.tolist() for p in self.stable_head],
            "unstable_heads": {str(k): [p.tolist() for p in v] for k, v in self.unstable_heads.items()},
            "n_classes": self.n_classes,
            "prior": np.asarray(self.prior).tolist(),
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SfbModel":
        return cls(DenseNet.from_dict(data["trunk"]), data["dim_S"], data["stable_head"],
                   data["unstable_heads"], data["n_classes"], data["prior"], data["temperature"])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "SfbModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# --------------------------------------------------------------------------- objective

@dataclass
class EnvRisk:
    env_id: str
    risk: float
    joint_risk: float = 0.0
    stability: float = 0.0
    cond_indep: float = 0.0


@dataclass
class ObjectiveResult:
    value: float
    grads: list
    env_risks: list = field(default_factory=list)
    stability: float = 0.0
    cond_indep: float = 0.0


def sfb_objective(model: SfbModel, batches: dict, cfg: TrainConfig, train_mode: bool = False,
                  penalties: bool = True) -> ObjectiveResult:
    """Objective value and gradients in ``model.params()`` order.

    ``batches`` maps env id to ``(x, labels)`` or ``(x, labels, weights)``;
    labels may be soft and weights are row multiplicities.
    """
    joint = cfg.joint and bool(model.unstable_heads)
    env_ids = list(batches)
    if joint:
        missing = [e for e in env_ids if e not in model.unstable_heads]
        if missing:
            raise ValueError(f"no unstable head for environments {missing}")
    xs = [np.asarray(batches[e][0], dtype=np.float64) for e in env_ids]
    ys = [_as_targets(batches[e][1], model.n_classes) for e in env_ids]
    ws = [batches[e][2] if len(batches[e]) > 2 else None for e in env_ids]
    for e, x in zip(env_ids, xs):
        if len(x) == 0:
            raise EmptyEnvironment(f"environment {e} has no samples")
    bounds = np.cumsum([0] + [len(x) for x in xs])
    h, tape = forward(model.trunk, np.concatenate(xs), train_mode)
    ds = model.dim_S
    dh = np.zeros_like(h)
    w_s, b_s = model.stable_head
    g_ws = np.zeros_like(w_s)
    g_bs = np.zeros_like(b_s)
    head_grads = {e: [np.zeros_like(p) for p in model.unstable_heads[e]] for e in model.unstable_heads}
    prior_logit = model.prior_logit()
    use_stab = penalties and cfg.lambda_S > 0
    use_ci = penalties and cfg.lambda_C > 0 and joint

    total = 0.0
    env_risks = []
    stable_dz = []
    irm_total = ci_total = 0.0
    for i, e in enumerate(env_ids):
        sl = slice(bounds[i], bounds[i + 1])
        phi_s, phi_u = h[sl, :ds], h[sl, ds:]
        y = ys[i]
        z_s = model._head(phi_s, model.stable_head)
        r_s, dz_s = logit_risk(z_s, y, ws[i])
        er = EnvRisk(str(e), r_s)
        total += r_s
        if use_stab and cfg.penalty == "irmv1":
            pen, dpen = irmv1_penalty(z_s, y, ws[i])
            er.stability = pen
            irm_total += pen
            dz_s = dz_s + cfg.lambda_S * dpen
        stable_dz.append(dz_s)
        if joint:
            w_u, b_u = model.unstable_heads[e]
            z_u = model._head(phi_u, model.unstable_heads[e])
            r_j, dz_j = logit_risk(z_s + z_u - prior_logit, y, ws[i])
            er.joint_risk = r_j
            total += r_j
            stable_dz[-1] = stable_dz[-1] + dz_j
            dz_j2 = dz_j[:, None] if model.binary else dz_j
            head_grads[e][0] += phi_u.T @ dz_j2
            head_grads[e][1] += dz_j2.sum(axis=0)
            dh[sl, ds:] += dz_j2 @ w_u.T
        if use_ci:
            pen, ga, gb = cond_indep_penalty(phi_s, phi_u, y, ws[i])
            er.cond_indep = pen
            ci_total += pen
            dh[sl, :ds] += cfg.lambda_C * ga
            dh[sl, ds:] += cfg.lambda_C * gb
        env_risks.append(er)

    stability = irm_total
    if use_stab and cfg.penalty == "vrex":
        stability, dvar = vrex_penalty([er.risk for er in env_risks])
        for i, er in enumerate(env_risks):
            sl = slice(bounds[i], bounds[i + 1])
            z_s = model._head(h[sl, :ds], model.stable_head)
            _, dz_s = logit_risk(z_s, ys[i], ws[i])
            stable_dz[i] = stable_dz[i] + cfg.lambda_S * dvar[i] * dz_s
    total += cfg.lambda_S * stability if use_stab else 0.0
    total += cfg.lambda_C * ci_total

    for i in range(len(env_ids)):
        sl = slice(bounds[i], bounds[i + 1])
        dz = stable_dz[i][:, None] if model.binary else stable_dz[i]
        g_ws += h[sl, :ds].T @ dz
        g_bs += dz.sum(axis=0)
        dh[sl, :ds] += dz @ w_s.T

    grads = backward(tape, dh) + [g_ws, g_bs]
    for e in sorted(model.unstable_heads):
        grads += head_grads[e]
    return ObjectiveResult(total, grads, env_risks, stability if use_stab else 0.0, ci_total)


# --------------------------------------------------------------------------- loop

def pooled_prior(datasets, n_classes=2):
    y = np.concatenate([np.asarray(d.y) for d in datasets]).astype(int)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    freq = counts / counts.sum()
    return float(freq[1]) if n_classes == 2 else freq


def compress_rows(x, y):
    """Merge identical (x, y) rows into ``(x, y, counts)``.

    Full-batch objectives are sums of per-row terms weighted by these counts,
    so the result is exact; it only pays off for discrete inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if y.ndim != 1:
        return x, y
    keys = np.concatenate([x, y[:, None].astype(np.float64)], axis=1)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    if len(uniq) > len(x) // 2:
        return x, y
    return uniq[:, :-1], uniq[:, -1].astype(y.dtype), counts.astype(np.float64)


def train(datasets, cfg: TrainConfig, log: list | None = None) -> SfbModel:
    """Fit a model on labeled training environments.

    The first ``cfg.pretrain_steps`` steps optimize the risks alone. When
    ``log`` is a list, one metrics dict per step is appended to it.
    """
    if len(datasets) < 2:
        raise TooFewEnvironments("training needs at least two environments")
    env_ids = [str(d.env_id) for d in datasets]
    if len(set(env_ids)) != len(env_ids):
        raise ValueError("environment ids must be unique")
    prior = pooled_prior(datasets, cfg.n_classes)
    model = SfbModel.create(datasets[0].x.shape[1], env_ids, cfg, prior)
    params = model.params()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 2])
    full = {e: compress_rows(d.x, d.y) if cfg.dropout == 0 else (d.x, d.y)
            for e, d in zip(env_ids, datasets)}
    for step in range(cfg.steps):
        batches = {}
        for e, d in zip(env_ids, datasets):
            if cfg.batch_size is None or cfg.batch_size >= len(d.y):
                batches[e] = full[e]
            else:
                idx = rng.choice(len(d.y), cfg.batch_size, replace=False)
                batches[e] = (d.x[idx], d.y[idx])
        result = sfb_objective(model, batches, cfg, train_mode=True,
                               penalties=step >= cfg.pretrain_steps)
        if not np.isfinite(result.value):
            raise NonFiniteLoss(step, result.value)
        if log is not None:
            row = {"step": step, "objective": result.value, "stability": result.stability,
                   "cond_indep": result.cond_indep}
            for er in result.env_risks:
                row[f"risk_{er.env_id}"] = er.risk
                row[f"joint_risk_{er.env_id}"] = er.joint_risk
            log.append(row)
        grads = result.grads
        if cfg.weight_decay:
            grads = [g + cfg.weight_decay * p for g, p in zip(grads, params)]
        lr = cosine_lr(cfg.lr, step, cfg.steps) if cfg.cosine else cfg.lr
        adam_step(params, grads, state, lr)
        model.trunk.mark_updated()
    return model


def write_metrics_csv(log: list, path):
    if not log:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(log[0]))
        writer.writeheader()
        writer.writerows(log)
