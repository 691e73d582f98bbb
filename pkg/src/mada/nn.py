"""Layers, initialization, SGD with momentum, schedules and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError

OUTPUT_ACTIVATIONS = ("none", "softmax", "sigmoid")
CHECKPOINT_FORMAT = "mada-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(eq=False)
class LinearLayer:
    name: str
    W: np.ndarray
    b: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{self.name}.W", self.W), (f"{self.name}.b", self.b)]


@dataclass(eq=False)
class Mlp:
    """Affine layers joined by relu; ``output`` is applied after the last one."""

    layers: list[LinearLayer]
    output: str = "none"

    def __post_init__(self):
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer {nxt.name} expects {nxt.in_dim} inputs, {prev.name} gives {prev.out_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x, tape: ad.Tape | None = None):
        """Tape-recorded forward when ``tape`` is given, plain numpy otherwise."""
        if tape is None:
            return self._forward_values(ad.as_tensor(x))
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, network expects {self.in_dim}")
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            W = tape.param(f"{layer.name}.W", layer.W)
            b = tape.param(f"{layer.name}.b", layer.b)
            h = ad.add_bias(ad.matmul(h, W), b)
            if i < last:
                h = ad.relu(h)
        if self.output == "softmax":
            h = ad.softmax_rows(h)
        elif self.output == "sigmoid":
            h = ad.sigmoid(h)
        return h

    def _forward_values(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, network expects {self.in_dim}")
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = h @ layer.W + layer.b
            if i < last:
                h = np.maximum(h, 0.0)
        if self.output == "softmax":
            h = ad.stable_softmax(h)
        elif self.output == "sigmoid":
            h = ad.stable_sigmoid(h)
        return h


def init_layer(name: str, in_dim: int, out_dim: int, rng: np.random.Generator) -> LinearLayer:
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    W = rng.uniform(-bound, bound, size=(in_dim, out_dim))
    return LinearLayer(name, W, np.zeros((1, out_dim)))


def init_params(
    dims: list[int],
    seed: int | np.random.Generator,
    name: str = "mlp",
    output: str = "none",
) -> Mlp:
    """Uniform fan-based initialization, zero biases; pure in ``(dims, seed)``."""
    if len(dims) < 2:
        raise ConfigError(f"an MLP needs at least input and output dims, got {dims}")
    if any(int(d) < 1 for d in dims):
        raise ConfigError(f"dimensions must be positive, got {dims}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = [init_layer(f"{name}.{i}", dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
    return Mlp(layers, output)


# --------------------------------------------------------------------------
# schedules


def _check_progress(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"training progress must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class LrSchedule:
    eta0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75

    def __post_init__(self):
        if self.eta0 <= 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"invalid learning-rate schedule {self}")


@dataclass(frozen=True)
class LambdaSchedule:
    delta: float = 10.0
    lambda_max: float = 1.0

    def __post_init__(self):
        if self.delta <= 0 or self.lambda_max < 0:
            raise ConfigError(f"invalid lambda schedule {self}")


def lr_at(schedule: LrSchedule, p: float) -> float:
    """Annealed learning rate ``eta0 / (1 + alpha p)^beta``."""
    _check_progress(p)
    return schedule.eta0 / (1.0 + schedule.alpha * p) ** schedule.beta


def lambda_at(schedule: LambdaSchedule, p: float) -> float:
    """Adaptation weight ramp ``lambda_max (2 / (1 + exp(-delta p)) - 1)``."""
    _check_progress(p)
    return schedule.lambda_max * (2.0 / (1.0 + math.exp(-schedule.delta * p)) - 1.0)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class SgdMomentum:
    momentum: float = 0.9
    lr_multiplier: dict[str, float] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: ad.Gradients, eta: float) -> None:
        sgd_step(self, params, grads, eta)


def sgd_step(opt: SgdMomentum, params: dict[str, np.ndarray], grads: ad.Gradients, eta: float) -> None:
    """``v <- momentum v + g``; ``theta <- theta - eta * multiplier * v``, in place."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters {missing}")
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = opt.momentum * v + g
        opt.velocity[name] = v
        theta -= eta * opt.lr_multiplier.get(name, 1.0) * v


# --------------------------------------------------------------------------
# checkpoints
#
# JSON document: {"format": "mada-checkpoint", "version": 1, "meta": {...},
#  "params": {name: {"shape": [rows, cols], "values": [row-major floats]}}}.
# Floats are written with Python's shortest round-trip repr, so loading
# reproduces every value bit for bit.


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(arr.shape), "values": [float(v) for v in arr.ravel()]}
            for name, arr in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for name, entry in doc["params"].items():
        rows, cols = entry["shape"]
        values = np.array(entry["values"], dtype=np.float64)
        if values.size != rows * cols:
            raise ShapeError(f"{path}: {name} declares {rows}x{cols} but holds {values.size} values")
        params[name] = values.reshape(rows, cols)
    return params, doc.get("meta", {})


def unique_layers(mlps: Iterable[Mlp]) -> list[LinearLayer]:
    seen: dict[int, LinearLayer] = {}
    for mlp in mlps:
        for layer in mlp.layers:
            seen.setdefault(id(layer), layer)
    return list(seen.values())
