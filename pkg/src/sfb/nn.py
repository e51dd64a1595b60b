"""Minimal dense feed-forward networks with hand-written reverse mode and Adam.

Parameters are plain float64 numpy arrays. ``forward`` returns a
:class:`GradientTape` that caches what ``backward`` needs; a tape is tied
to the parameter version it was recorded with, so updating the network
invalidates it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadSplit, ShapeMismatch, StaleTape

ACTIVATIONS = ("relu", "identity")
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatch("bias width must match weight columns")


class DenseNet:
    """Stack of affine layers with relu/identity activations and inverted dropout.

    Dropout (if ``dropout_p > 0``) is applied after every relu activation in
    train mode only. Masks come from a generator seeded with ``seed`` so a
    sequence of train-mode passes is reproducible.
    """

    def __init__(self, layers: list[Layer], dropout_p: float = 0.0, seed: int = 0):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeMismatch("consecutive layer dimensions do not chain")
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        self.layers = layers
        self.dropout_p = float(dropout_p)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.version = 0

    @classmethod
    def create(cls, sizes, activations=None, dropout_p=0.0, seed=0, final_activation="identity"):
        """Kaiming-uniform (fan-in) initialized network with ``len(sizes) - 1`` layers."""
        rng = np.random.default_rng(seed)
        n = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n - 1) + [final_activation]
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            bound = 1.0 / math.sqrt(fan_in)
            layers.append(Layer(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                rng.uniform(-bound, bound, fan_out), act))
        # dropout masks get their own stream, derived from but distinct from init
        return cls(layers, dropout_p, seed=seed + 7919)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def mark_updated(self):
        self.version += 1

    def __call__(self, x, train_mode=False):
        return forward(self, x, train_mode)[0]

    def copy(self) -> "DenseNet":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        net = DenseNet(layers, self.dropout_p, self.seed)
        net.rng = np.random.default_rng()
        net.rng.bit_generator.state = self.rng.bit_generator.state
        return net

    def to_dict(self, optimizer: "AdamState | None" = None) -> dict:
        data = {
            "version": CHECKPOINT_VERSION,
            "dropout_p": self.dropout_p,
            "seed": self.seed,
            "layers": [
                {"shape": list(l.weight.shape), "activation": l.activation,
                 "weight": l.weight.ravel().tolist(), "bias": l.bias.tolist()}
                for l in self.layers
            ],
        }
        if optimizer is not None:
            data["optimizer"] = {
                "step": optimizer.step,
                "m": [a.ravel().tolist() for a in optimizer.m],
                "v": [a.ravel().tolist() for a in optimizer.v],
            }
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNet":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        layers = [Layer(np.asarray(l["weight"], dtype=np.float64).reshape(l["shape"]),
                        np.asarray(l["bias"], dtype=np.float64), l["activation"])
                  for l in data["layers"]]
        return cls(layers, data["dropout_p"], data["seed"])

    def optimizer_from_dict(self, data: dict) -> "AdamState | None":
        opt = data.get("optimizer")
        if opt is None:
            return None
        shapes = [p.shape for p in self.params()]
        return AdamState(opt["step"],
                         [np.asarray(a).reshape(s) for a, s in zip(opt["m"], shapes)],
                         [np.asarray(a).reshape(s) for a, s in zip(opt["v"], shapes)])

    def save(self, path, optimizer: "AdamState | None" = None):
        with open(path, "w") as f:
            json.dump(self.to_dict(optimizer), f)

    @classmethod
    def load(cls, path) -> "DenseNet":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class GradientTape:
    net: DenseNet
    version: int
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activations
    masks: list = field(default_factory=list)  # dropout masks (or None)


def forward(net: DenseNet, batch, train_mode: bool = False):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeMismatch(f"expected batch of width {net.in_dim}, got shape {x.shape}")
    tape = GradientTape(net, net.version)
    keep = 1.0 - net.dropout_p
    for layer in net.layers:
        tape.inputs.append(x)
        z = x @ layer.weight + layer.bias
        tape.pre.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
        mask = None
        if train_mode and net.dropout_p > 0 and layer.activation == "relu":
            mask = (net.rng.random(x.shape) < keep) / keep
            x = x * mask
        tape.masks.append(mask)
    return x, tape


def backward(tape: GradientTape, output_grads, return_input_grad: bool = False):
    """Reverse pass: gradients in the order of ``net.params()``."""
    net = tape.net
    if tape.version != net.version or len(tape.inputs) != len(net.layers):
        raise StaleTape("network parameters changed since this tape was recorded")
    g = np.asarray(output_grads, dtype=np.float64)
    if g.shape != tape.pre[-1].shape:
        raise ShapeMismatch(f"output gradient shape {g.shape} != output shape {tape.pre[-1].shape}")
    grads = []
    for layer, x, z, mask in zip(reversed(net.layers), reversed(tape.inputs),
                                 reversed(tape.pre), reversed(tape.masks)):
        if mask is not None:
            g = g * mask
        if layer.activation == "relu":
            g = g * (z > 0)
        grads.append(g.sum(axis=0))
        grads.append(x.T @ g)
        g = g @ layer.weight.T
    grads.reverse()
    return (grads, g) if return_input_grad else grads


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    return base_lr * (1.0 + math.cos(math.pi * step / total)) / 2.0


@dataclass(frozen=True)
class SplitRepresentation:
    phi_s: np.ndarray
    phi_u: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.phi_s, self.phi_u], axis=-1)


def split(trunk_output, dim_s: int) -> SplitRepresentation:
    h = np.asarray(trunk_output)
    width = h.shape[-1]
    if not 0 < dim_s < width:
        raise BadSplit(f"dim_S={dim_s} must lie strictly between 0 and width {width}")
    return SplitRepresentation(h[..., :dim_s], h[..., dim_s:])
