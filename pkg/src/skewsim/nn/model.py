"""Small model zoo built from the layer primitives.

Three architectures cover the experiments: a linear softmax classifier, a
two-hidden-layer MLP, and a small two-conv network. The MLP and conv nets
carry a normalization slot after each hidden/conv layer that can be empty,
BatchNorm, or GroupNorm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .layers import BatchNorm, Conv2d, Dense, Flatten, GroupNorm, MaxPool2, ReLU, Reshape
from .params import ParamVector

ARCHS = ("logreg", "mlp", "smallconv")
NORM_KINDS = ("none", "batch", "group")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_dim: int
    num_classes: int
    norm: str = "none"
    group_size: int = 2
    hidden: int = 128
    conv_channels: tuple[int, int] = (16, 32)
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ShapeError(f"unknown architecture {self.arch!r}")
        if self.norm not in NORM_KINDS:
            raise ShapeError(f"unknown norm kind {self.norm!r}")
        if self.arch == "smallconv":
            shape = self.resolved_image_shape()
            if math.prod(shape) != self.input_dim:
                raise ShapeError(
                    f"image shape {shape} does not cover {self.input_dim} input features"
                )

    def resolved_image_shape(self) -> tuple[int, int, int]:
        if self.image_shape is not None:
            return tuple(self.image_shape)
        side = math.isqrt(self.input_dim)
        if side * side != self.input_dim:
            raise ShapeError(
                f"cannot infer a square image from {self.input_dim} features"
            )
        return (1, side, side)

    def to_json(self) -> str:
        d = {
            "arch": self.arch,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "norm": self.norm,
            "group_size": self.group_size,
            "hidden": self.hidden,
            "conv_channels": list(self.conv_channels),
            "image_shape": list(self.image_shape) if self.image_shape else None,
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        return cls(
            arch=d["arch"],
            input_dim=d["input_dim"],
            num_classes=d["num_classes"],
            norm=d.get("norm", "none"),
            group_size=d.get("group_size", 2),
            hidden=d.get("hidden", 128),
            conv_channels=tuple(d.get("conv_channels", (16, 32))),
            image_shape=tuple(d["image_shape"]) if d.get("image_shape") else None,
        )


def _norm_layer(spec: ModelSpec, name: str, channels: int):
    if spec.norm == "batch":
        return BatchNorm(name, channels)
    if spec.norm == "group":
        return GroupNorm(name, channels, spec.group_size)
    return None


def _build_layers(spec: ModelSpec):
    """Returns (layers, stat_points): indices whose outputs feed a norm slot."""
    layers: list = []
    stat_points: list[int] = []

    def add_norm(name, channels):
        stat_points.append(len(layers) - 1)
        norm = _norm_layer(spec, name, channels)
        if norm is not None:
            layers.append(norm)

    if spec.arch == "logreg":
        layers.append(Dense("out", spec.input_dim, spec.num_classes))
    elif spec.arch == "mlp":
        layers.append(Dense("fc1", spec.input_dim, spec.hidden))
        add_norm("norm1", spec.hidden)
        layers.append(ReLU())
        layers.append(Dense("fc2", spec.hidden, spec.hidden))
        add_norm("norm2", spec.hidden)
        layers.append(ReLU())
        layers.append(Dense("out", spec.hidden, spec.num_classes))
    else:
        cin, h, w = spec.resolved_image_shape()
        c1, c2 = spec.conv_channels
        layers.append(Reshape((cin, h, w)))
        layers.append(Conv2d("conv1", cin, c1))
        add_norm("norm1", c1)
        layers.append(ReLU())
        layers.append(Conv2d("conv2", c1, c2))
        add_norm("norm2", c2)
        layers.append(ReLU())
        layers.append(MaxPool2())
        layers.append(Flatten())
        layers.append(Dense("out", c2 * (h // 2) * (w // 2), spec.num_classes))
    return layers, stat_points


@dataclass
class ActivationCache:
    layer_caches: list
    logits: np.ndarray
    norm_input_means: list = field(default_factory=list)
    train: bool = True


class Model:
    def __init__(self, spec: ModelSpec, dtype=np.float32, init_seed: int | None = 0):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers, self.stat_points = _build_layers(spec)
        layout = []
        for layer in self.layers:
            for name, shape, _ in layer.param_layout():
                layout.append((layer.name, name, shape))
        self.params = ParamVector.allocate(layout, self.dtype)
        self.decay_mask = np.zeros(len(self.params), dtype=bool)
        for layer in self.layers:
            views = {}
            for name, shape, decay in layer.param_layout():
                seg = self.params.segment(f"{layer.name}.{name}")
                views[name] = self.params.view(seg.key)
                if decay:
                    self.decay_mask[seg.offset : seg.offset + seg.size] = True
            layer.bind(views)
        if init_seed is not None:
            rng = np.random.default_rng(init_seed)
            for layer in self.layers:
                if layer.param_layout():
                    layer.init_params(rng)

    @property
    def size(self) -> int:
        return len(self.params)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in self.layers:
            for name, arr in getattr(layer, "state_arrays", list)():
                out.append((f"{layer.name}.{name}", arr))
        return out

    def copy(self) -> "Model":
        clone = Model(self.spec, self.dtype, init_seed=None)
        clone.params.data[...] = self.params.data
        for (_, src), (_, dst) in zip(self.state_arrays(), clone.state_arrays()):
            dst[...] = src
        return clone

    def forward(self, x, train: bool) -> tuple[np.ndarray, ActivationCache]:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(
                f"expected batch of shape (N, {self.spec.input_dim}), got {x.shape}"
            )
        h = x.astype(self.dtype, copy=False)
        caches = []
        means = []
        # overflow is detected by the finiteness check, not by warnings
        with np.errstate(all="ignore"):
            for i, layer in enumerate(self.layers):
                h, cache = layer.forward(h, train)
                caches.append(cache)
                if i in self.stat_points:
                    axes = (0,) + tuple(range(2, h.ndim))
                    means.append(h.mean(axis=axes))
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("non-finite logits in forward pass")
        return h, ActivationCache(caches, h, means, train)

    def backprop(self, cache: ActivationCache, labels, weight_decay: float = 0.0):
        with np.errstate(all="ignore"):
            loss, dlogits, correct = softmax_cross_entropy(cache.logits, labels)
            grad = self.params.zeros_like()
            dy = dlogits
            for layer, lcache in zip(reversed(self.layers), reversed(cache.layer_caches)):
                dy, grads = layer.backward(dy, lcache)
                for name, g in grads.items():
                    grad.view(f"{layer.name}.{name}")[...] = g
            if weight_decay:
                w = self.params.data
                grad.data[self.decay_mask] += weight_decay * w[self.decay_mask]
                loss = loss + 0.5 * weight_decay * float(np.sum(w[self.decay_mask] ** 2))
        return grad, float(loss), int(correct)

    def loss_and_grad(self, x, y, weight_decay: float = 0.0, train: bool = True):
        _, cache = self.forward(x, train)
        return self.backprop(cache, y, weight_decay)

    def evaluate(self, x, y, batch_size: int = 512) -> float:
        """Accuracy in eval mode (BatchNorm uses running estimates).

        Non-finite predictions score zero rather than raising, so a diverged
        model can still be reported on.
        """
        n = x.shape[0]
        correct = 0
        for start in range(0, n, batch_size):
            xb = x[start : start + batch_size]
            try:
                logits, _ = self.forward(xb, train=False)
            except NonFiniteError:
                continue
            correct += int(np.sum(logits.argmax(axis=1) == y[start : start + batch_size]))
        return correct / n


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy; returns (loss, dlogits, correct_count)."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    correct = int(np.sum(logits.argmax(axis=1) == labels))
    return float(loss), dlogits.astype(logits.dtype, copy=False), correct


def forward(model: Model, batch, mode: str = "train"):
    return model.forward(batch, train=(mode == "train"))


def backward(model: Model, cache: ActivationCache, labels, weight_decay: float = 0.0):
    grad, _, _ = model.backprop(cache, labels, weight_decay)
    return grad
