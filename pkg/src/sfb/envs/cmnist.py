"""ColorMNIST: binary digit label with label noise, plus a color channel tied to the label.

Each image is downsampled to 14x14 and duplicated into two channels; the
channel not matching the color is zeroed. The label is ``digit >= 5``
flipped with probability ``label_noise``; the color is the label flipped
with the environment's color noise ``e``. Color agreement therefore
predicts the label with probability ``1 - e`` while shape caps out at
``1 - label_noise``.
"""
from __future__ import annotations

import numpy as np

from .base import EnvDataset

DEFAULT_TRAIN_NOISE = (0.1, 0.2)
DEFAULT_TEST_NOISE = 0.9
LABEL_NOISE = 0.25
FEATURES = 2 * 14 * 14
CONTAINER_FORMAT = "sfb-tensors"
CONTAINER_VERSION = 1


def noise_for_correlation(c: float) -> float:
    """Color noise giving color-label correlation ``c`` in [-1, 1]."""
    if not -1.0 <= c <= 1.0:
        raise ValueError("correlation must lie in [-1, 1]")
    return (1.0 - c) / 2.0


def colorize(images, colors) -> np.ndarray:
    """(n, 28, 28) uint8 + colors in {0, 1} -> (n, 392) floats in [0, 1]."""
    small = np.asarray(images)[:, ::2, ::2].astype(np.float64) / 255.0
    n = len(small)
    out = np.zeros((n, 2, 14, 14))
    out[np.arange(n), np.asarray(colors, dtype=int)] = small
    return out.reshape(n, FEATURES)


def make_cmnist(images, digits, color_noise_levels=(*DEFAULT_TRAIN_NOISE, DEFAULT_TEST_NOISE),
                label_noise: float = LABEL_NOISE, seed=0, env_ids=None) -> list:
    """Split the digits into one interleaved environment per noise level."""
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must lie in [0, 1)")
    levels = list(color_noise_levels)
    if any(not 0.0 <= e <= 1.0 for e in levels):
        raise ValueError("color noise levels must lie in [0, 1]")
    images = np.asarray(images)
    digits = np.asarray(digits).astype(int)
    if len(images) != len(digits):
        raise ValueError("images and digits differ in length")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(digits))
    envs = []
    for k, e in enumerate(levels):
        idx = order[k::len(levels)]
        clean = (digits[idx] >= 5).astype(int)
        label = clean ^ (rng.random(len(idx)) < label_noise)
        color = label ^ (rng.random(len(idx)) < e)
        name = env_ids[k] if env_ids else f"cmnist-{k}-{e:g}"
        envs.append(EnvDataset(name, float(e), colorize(images[idx], color), label.astype(int), "CMNIST",
                               {"digit": digits[idx], "color": color.astype(int)}))
    return envs


def grayscale(x) -> np.ndarray:
    """Collapse both color channels into one so color carries no information."""
    x = np.asarray(x).reshape(len(x), 2, 14 * 14)
    merged = x.sum(axis=1)
    return np.concatenate([merged, merged], axis=1)


def save_container(path, datasets):
    """Versioned npz container of CMNIST environments."""
    payload = {"format": np.array(CONTAINER_FORMAT), "version": np.array(CONTAINER_VERSION),
               "count": np.array(len(datasets))}
    for i, d in enumerate(datasets):
        payload[f"env{i}_id"] = np.array(d.env_id)
        payload[f"env{i}_beta"] = np.array(d.beta)
        payload[f"env{i}_x"] = d.x.astype(np.float32)
        payload[f"env{i}_y"] = d.y.astype(np.uint8)
        for k, v in d.extras.items():
            payload[f"env{i}_extra_{k}"] = v
    with open(path, "wb") as f:
        np.savez_compressed(f, **payload)


def load_container(path) -> list:
    with np.load(path) as z:
        if str(z["format"]) != CONTAINER_FORMAT or int(z["version"]) != CONTAINER_VERSION:
            raise ValueError(f"{path}: not a version-{CONTAINER_VERSION} {CONTAINER_FORMAT} file")
        out = []
        for i in range(int(z["count"])):
            prefix = f"env{i}_extra_"
            extras = {k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)}
            out.append(EnvDataset(str(z[f"env{i}_id"]), float(z[f"env{i}_beta"]),
                                  z[f"env{i}_x"].astype(np.float64), z[f"env{i}_y"].astype(int),
                                  "CMNIST", extras))
    return out
