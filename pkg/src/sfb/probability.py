"""Probability and logit algebra: sigmoid/logit, combination functions, simplex tools.

All functions accept scalars or numpy arrays and broadcast. Saturated
probabilities (exactly 0 or 1) map to infinite logits instead of being
clamped; :func:`clamp` is provided for training code that needs finite
values.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from .errors import ConflictingCertainty, InvalidProbability, ZeroMass

CLAMP_EPS = 1e-7
SIMPLEX_TOL = 1e-9


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def check_probability(p):
    """Return ``p`` as float array, rejecting values outside [0, 1] or NaN."""
    arr = np.asarray(p, dtype=np.float64)
    if np.isnan(arr).any() or (arr < 0).any() or (arr > 1).any():
        raise InvalidProbability(f"probability outside [0, 1]: {p!r}")
    return arr


def check_simplex(v, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate rows of ``v`` as points on the probability simplex.

    Entries must lie in [0, 1] and each row must sum to 1 within ``tol``;
    rows inside the tolerance are renormalized exactly.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] < 2:
        raise InvalidProbability("simplex vectors need at least two entries")
    if np.isnan(arr).any() or (arr < 0).any() or (arr > 1).any():
        raise InvalidProbability("simplex entries must lie in [0, 1]")
    s = arr.sum(axis=-1, keepdims=True)
    if (np.abs(s - 1.0) > tol).any():
        raise InvalidProbability("simplex entries must sum to 1")
    return arr / s


def clamp(p, eps: float = CLAMP_EPS):
    return _out(np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps))


def logit(p):
    """log(p / (1 - p)); 0 and 1 map to -inf and +inf."""
    return _out(special.logit(check_probability(p)))


def sigmoid(z):
    return _out(special.expit(np.asarray(z, dtype=np.float64)))


def combine_binary(p_s, p_u, prior):
    """Fuse stable and unstable class-1 probabilities in logit space.

    Computes sigmoid(logit p_s + logit p_u - logit prior). A saturated
    input wins over a finite one; inputs saturated in opposite directions
    raise :class:`ConflictingCertainty`.
    """
    ps = check_probability(p_s)
    pu = check_probability(p_u)
    pr = check_probability(prior)
    if ((pr <= 0) | (pr >= 1)).any():
        raise InvalidProbability("prior must lie strictly inside (0, 1)")
    conflict = ((ps == 1) & (pu == 0)) | ((ps == 0) & (pu == 1))
    if conflict.any():
        raise ConflictingCertainty("stable and unstable predictions disagree with certainty")
    z = special.logit(ps) + special.logit(pu) - special.logit(pr)
    return _out(special.expit(z))


def combine_multiclass(p_s, p_u, prior):
    """Normalize(p_s * p_u / prior) along the last axis."""
    ps = check_simplex(p_s)
    pu = check_simplex(p_u)
    pr = check_simplex(prior)
    if not (ps.shape[-1] == pu.shape[-1] == pr.shape[-1]):
        raise InvalidProbability("class counts differ")
    if (pr <= 0).any():
        raise InvalidProbability("prior must be strictly positive")
    q = ps * pu / pr
    mass = q.sum(axis=-1, keepdims=True)
    if (mass <= 0).any():
        raise ZeroMass("product of stable and unstable predictions is identically zero")
    return q / mass


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex.

    Sort-based exact algorithm (Held et al. / Duchi et al.).
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("projection needs finite entries")
    flat = v.reshape(-1, v.shape[-1])
    k = flat.shape[1]
    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = u - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(flat)), rho] / (rho + 1)
    out = np.maximum(flat - theta[:, None], 0.0)
    return out.reshape(v.shape)
