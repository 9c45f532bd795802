"""Linear layers, MLPs, SGD with momentum and the annealing schedules."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


class LinearLayer:
    def __init__(self, weight: Tensor, bias: Tensor):
        if bias.shape != (1, weight.shape[1]):
            raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
        self.weight = weight
        self.bias = bias

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_row_broadcast(ad.matmul(x, self.weight), self.bias)


class Mlp:
    """Affine layers with relu between them and nothing after the last."""

    def __init__(self, layers: list[LinearLayer]):
        if not layers:
            raise ConfigError("an Mlp needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_features != b.in_features:
                raise DimensionError(
                    f"layer {i} outputs {a.out_features} but layer {i + 1} expects {b.in_features}"
                )
        self.layers = layers

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def preactivations(self, x: np.ndarray) -> list[np.ndarray]:
        """Inputs to every relu, computed without recording a graph."""
        out = []
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers[:-1]:
            h = h @ layer.weight.values + layer.bias.values
            out.append(h)
            h = np.maximum(h, 0.0)
        return out


def init_params(dims, seed) -> Mlp:
    """Glorot-uniform weights and zero biases for the layer sizes ``dims``.

    ``seed`` may be an int or anything ``numpy.random.default_rng`` accepts.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError(f"layer sizes must have >= 2 entries, all >= 1; got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(
            LinearLayer(Tensor(w, requires_grad=True), Tensor(np.zeros((1, fan_out)), requires_grad=True))
        )
    return Mlp(layers)


def forward(net: Mlp, x: Tensor) -> Tensor:
    if x.shape[1] != net.layers[0].in_features:
        raise DimensionError(
            f"input has {x.shape[1]} columns but the network expects {net.layers[0].in_features}"
        )
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        h = layer(h)
        if i < last:
            h = ad.relu(h)
    return h


class SgdMomentum:
    """v <- momentum * v - lr * mult * g ; p <- p + v.

    ``groups`` is a list of ``(params, lr_multiplier)`` pairs; a bare list of
    tensors is treated as a single group with multiplier 1.
    """

    def __init__(self, groups, learning_rate=0.01, momentum=0.9):
        if groups and isinstance(groups[0], Tensor):
            groups = [(groups, 1.0)]
        self.groups = [(list(params), float(mult)) for params, mult in groups]
        seen = set()
        for params, _ in self.groups:
            for p in params:
                if id(p) in seen:
                    raise ConfigError("a parameter is registered with the optimizer twice")
                seen.add(id(p))
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = {id(p): np.zeros_like(p.values) for params, _ in self.groups for p in params}

    def parameters(self) -> list[Tensor]:
        return [p for params, _ in self.groups for p in params]

    def step(self, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else float(learning_rate)
        for params, mult in self.groups:
            eta = lr * mult
            for p in params:
                v = self.velocity[id(p)]
                v *= self.momentum
                v -= eta * p.grad
                p.values += v

    def zero_grad(self):
        ad.zero_grad_all(self.parameters())


def step(opt: SgdMomentum, learning_rate=None):
    opt.step(learning_rate)


def _clamp_progress(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        warnings.warn(f"training progress {p} outside [0, 1]; clamped", RuntimeWarning, stacklevel=3)
        return min(max(p, 0.0), 1.0)
    return p


@dataclass(frozen=True)
class Schedules:
    eta0: float = 0.01
    lr_decay_alpha: float = field(default=10.0)
    lr_decay_beta: float = field(default=0.75)
    grl_gamma: float = field(default=10.0)

    def lr_at(self, p: float) -> float:
        p = _clamp_progress(p)
        return self.eta0 / (1.0 + self.lr_decay_alpha * p) ** self.lr_decay_beta

    def grl_lambda_at(self, p: float) -> float:
        p = _clamp_progress(p)
        return 2.0 / (1.0 + math.exp(-self.grl_gamma * p)) - 1.0


def lr_at(schedules: Schedules, p: float) -> float:
    return schedules.lr_at(p)


def grl_lambda_at(schedules: Schedules, p: float) -> float:
    return schedules.grl_lambda_at(p)
