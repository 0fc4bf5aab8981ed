"""Classifier = feature extractor g followed by a linear head ``W g(x) + b``."""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .errors import DimensionError

HEAD_W = "head.weight"
HEAD_B = "head.bias"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # linear | conv | relu | flatten | avgpool
    in_dim: int = 0
    out_dim: int = 0

    def to_dict(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d.get("in_dim", 0)), int(d.get("out_dim", 0)))


def mlp_layers(input_shape, hidden=128, feature_dim=32):
    d = int(np.prod(input_shape))
    return [
        LayerSpec("flatten"),
        LayerSpec("linear", d, hidden),
        LayerSpec("relu"),
        LayerSpec("linear", hidden, feature_dim),
        LayerSpec("relu"),
    ]


def cnn_layers(input_shape, feature_dim=32, channels=(16, 32)):
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise DimensionError(f"cnn needs H, W divisible by 4, got {(h, w)}")
    c1, c2 = channels
    return [
        LayerSpec("conv", c, c1),
        LayerSpec("relu"),
        LayerSpec("avgpool"),
        LayerSpec("conv", c1, c2),
        LayerSpec("relu"),
        LayerSpec("avgpool"),
        LayerSpec("flatten"),
        LayerSpec("linear", c2 * (h // 4) * (w // 4), feature_dim),
    ]


@dataclass
class Model:
    """``forward(x) = head.weight @ g(x) + head.bias`` with named parameters."""

    layers: list
    num_classes: int
    feature_dim: int
    input_shape: tuple
    params: nk.ParamSet = field(default_factory=nk.ParamSet)
    architecture: str = "custom"
    etf_seed: dict = None

    @classmethod
    def build(cls, layers, input_shape, num_classes, rng, architecture="custom"):
        """Kaiming-uniform weights, zero biases, drawn in layer order from ``rng``."""
        feature_dim = _trace_feature_dim(layers, input_shape)
        model = cls(list(layers), int(num_classes), feature_dim, tuple(input_shape),
                    architecture=architecture)
        for i, spec in enumerate(model.layers):
            if spec.kind == "linear":
                model.params.add(f"feat.{i}.weight",
                                 nk.kaiming_uniform((spec.out_dim, spec.in_dim), spec.in_dim, rng))
                model.params.add(f"feat.{i}.bias", np.zeros(spec.out_dim, np.float32))
            elif spec.kind == "conv":
                model.params.add(f"feat.{i}.weight",
                                 nk.kaiming_uniform((spec.out_dim, spec.in_dim, 3, 3), spec.in_dim * 9, rng))
                model.params.add(f"feat.{i}.bias", np.zeros(spec.out_dim, np.float32))
        model.params.add(HEAD_W, nk.kaiming_uniform((num_classes, feature_dim), feature_dim, rng))
        model.params.add(HEAD_B, np.zeros(num_classes, np.float32))
        return model

    @property
    def head_W(self):
        return self.params[HEAD_W].data

    @property
    def head_b(self):
        return self.params[HEAD_B].data

    def features(self, x):
        """g(x) as a Tensor (records the tape when grads are enabled)."""
        h = nk.as_tensor(x)
        if h.shape[1:] != self.input_shape:
            raise DimensionError(f"expected inputs of shape {self.input_shape}, got {h.shape[1:]}")
        for i, spec in enumerate(self.layers):
            if spec.kind == "linear":
                h = nk.linear(h, self.params[f"feat.{i}.weight"], self.params[f"feat.{i}.bias"])
            elif spec.kind == "conv":
                h = nk.conv2d(h, self.params[f"feat.{i}.weight"], self.params[f"feat.{i}.bias"])
            elif spec.kind == "relu":
                h = nk.relu(h)
            elif spec.kind == "avgpool":
                h = nk.avgpool2(h)
            elif spec.kind == "flatten":
                h = nk.flatten(h)
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
        return h

    def forward(self, x):
        return nk.linear(self.features(x), self.params[HEAD_W], self.params[HEAD_B])

    __call__ = forward

    def embed(self, x, batch_size=512):
        """g(x) as a float32 array, evaluated without a tape."""
        x = np.asarray(x, dtype=np.float32)
        out = []
        with nk.no_grad():
            for s in range(0, len(x), batch_size):
                out.append(self.features(x[s:s + batch_size]).data)
        if not out:
            return np.zeros((0, self.feature_dim), np.float32)
        return np.concatenate(out)

    def logits(self, x, batch_size=512):
        feats = self.embed(x, batch_size)
        return head_logits(feats, self.head_W, self.head_b)

    def predict(self, x, batch_size=512):
        return np.argmax(self.logits(x, batch_size), axis=1)

    def copy(self):
        dup = copy.copy(self)
        dup.layers = list(self.layers)
        dup.params = self.params.copy()
        return dup

    def state(self):
        """Parameter arrays keyed by name (copies)."""
        return {name: t.data.copy() for name, t in self.params.items()}


def head_logits(features, W, b):
    """Evaluation-path logits with 64-bit accumulation."""
    return features.astype(np.float64) @ W.astype(np.float64).T + b.astype(np.float64)


def _trace_feature_dim(layers, input_shape):
    shape = tuple(input_shape)
    for spec in layers:
        if spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "linear":
            if shape != (spec.in_dim,):
                raise DimensionError(f"linear layer expects {spec.in_dim} inputs, got shape {shape}")
            shape = (spec.out_dim,)
        elif spec.kind == "conv":
            if len(shape) != 3 or shape[0] != spec.in_dim:
                raise DimensionError(f"conv layer expects {spec.in_dim} channels, got shape {shape}")
            shape = (spec.out_dim,) + shape[1:]
        elif spec.kind == "avgpool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise DimensionError(f"avgpool needs an even CHW shape, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "relu":
            pass
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    if len(shape) != 1:
        raise DimensionError(f"feature extractor must end flat, ends with shape {shape}")
    return shape[0]
