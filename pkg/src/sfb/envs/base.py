from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

TAGS = ("AC", "CEDD", "CMNIST")


@dataclass(frozen=True)
class EnvDataset:
    """Labeled samples from one environment; ``x`` is (n, d), ``y`` holds class indices."""

    env_id: str
    beta: float
    x: np.ndarray
    y: np.ndarray
    tag: str
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta={self.beta} outside [0, 1]")
        if self.tag not in TAGS:
            raise ValueError(f"unknown generator tag {self.tag!r}")
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("x must be (n, d) with one label per row")

    def __len__(self):
        return len(self.y)

    @property
    def xs(self) -> np.ndarray:
        """Stable coordinate of a two-feature synthetic dataset."""
        return self.x[:, 0]

    @property
    def xu(self) -> np.ndarray:
        return self.x[:, 1]

    def subset(self, idx, env_id: str | None = None) -> "EnvDataset":
        extras = {k: v[idx] for k, v in self.extras.items()}
        return EnvDataset(env_id or self.env_id, self.beta, self.x[idx], self.y[idx], self.tag, extras)


def write_csv(datasets, path):
    """Two-feature synthetic datasets as rows of env_id, beta, x_s, x_u, y."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env_id", "beta", "x_s", "x_u", "y"])
        for d in datasets:
            for xs, xu, y in zip(d.x[:, 0], d.x[:, 1], d.y):
                w.writerow([d.env_id, d.beta, int(xs), int(xu), int(y)])


def read_csv(path, tag: str):
    rows = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.setdefault((r["env_id"], float(r["beta"])), []).append(
                (float(r["x_s"]), float(r["x_u"]), int(r["y"])))
    out = []
    for (env_id, beta), vals in rows.items():
        arr = np.array(vals)
        out.append(EnvDataset(env_id, beta, arr[:, :2], arr[:, 2].astype(int), tag))
    return out
