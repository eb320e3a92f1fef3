"""Dense ReLU classifiers over normalized tabular features.

The network maps normalized features to two logits ``g = (g0, g1)``;
``f = softmax(g)``. Every entry point accepts raw-space feature vectors whose
elements are either floats or tape handles. Plain float vectors are evaluated
with numpy; as soon as one element is a :class:`~seqrecourse.autodiff.Var`
the network is unrolled onto that tape, folding any constant inputs.

Model file layout (all keys required unless noted)::

    {
      "schema": {
        "scheme": "zscore" | "minmax",          # optional, default zscore
        "features": [
          {"name": "age", "kind": "numeric", "domain": [15, 120],
           "norm": {"mean": 35.5, "std": 11.4}},   # or {"min": .., "max": ..}
          {"name": "guarantor=yes", "kind": "onehot",
           "group": "guarantor", "category": "yes"}
        ]
      },
      "layers": [
        {"shape": [out, in], "weights": [[...], ...], "bias": [...],
         "activation": "relu" | "linear"}
      ]
    }

Weights are stored row-major, one row per output unit. Unknown keys are
rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Var, relu

SCHEMES = ("zscore", "minmax")
ACTIVATIONS = ("relu", "linear")


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # "numeric" | "onehot"
    domain_min: float
    domain_max: float
    mean: float = 0.0
    std: float = 1.0
    norm_min: float = 0.0
    norm_max: float = 1.0
    group: str | None = None
    category: str | None = None

    @property
    def span(self) -> float:
        return self.domain_max - self.domain_min


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    scheme: str = "zscore"
    groups: dict[str, tuple[int, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ModelFormatError(f"unknown normalization scheme {self.scheme!r}")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ModelFormatError("duplicate feature names in schema")
        groups: dict[str, list[int]] = {}
        for j, f in enumerate(self.features):
            if f.kind == "numeric":
                if not f.domain_max > f.domain_min:
                    raise ModelFormatError(f"feature {f.name!r}: domain_max must exceed domain_min")
                if self.scheme == "zscore" and f.std == 0:
                    raise ModelFormatError(f"feature {f.name!r}: std is zero")
                if self.scheme == "minmax" and f.norm_max == f.norm_min:
                    raise ModelFormatError(f"feature {f.name!r}: normalization min equals max")
            elif f.kind == "onehot":
                if not f.group or f.category is None:
                    raise ModelFormatError(f"one-hot feature {f.name!r} needs group and category")
                groups.setdefault(f.group, []).append(j)
            else:
                raise ModelFormatError(f"feature {f.name!r}: unknown kind {f.kind!r}")
        object.__setattr__(self, "groups", {g: tuple(ix) for g, ix in groups.items()})
        object.__setattr__(self, "_index", {n: j for j, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown feature {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def group_member(self, group: str, category: str) -> int:
        for j in self.groups.get(group, ()):
            if self.features[j].category == category:
                return j
        raise KeyError(f"group {group!r} has no category {category!r}")

    def scale(self, j: int) -> float:
        """d(normalized)/d(raw) for feature ``j``."""
        f = self.features[j]
        if f.kind == "onehot":
            return 1.0
        if self.scheme == "zscore":
            return 1.0 / f.std
        return 1.0 / (f.norm_max - f.norm_min)

    def normalize_one(self, j: int, v):
        f = self.features[j]
        if f.kind == "onehot":
            return v
        if self.scheme == "zscore":
            return (v - f.mean) / f.std
        return (v - f.norm_min) / (f.norm_max - f.norm_min)

    def normalized_span(self, j: int) -> float:
        return self.features[j].span * self.scale(j)

    def validate(self, raw: Sequence[float], *, where: str = "instance") -> None:
        if len(raw) != len(self.features):
            raise ValueError(f"{where}: expected {len(self.features)} features, got {len(raw)}")
        for j, f in enumerate(self.features):
            v = float(raw[j])
            if not math.isfinite(v):
                raise ValueError(f"{where}: feature {f.name!r} is not finite")
            if f.kind == "numeric" and not f.domain_min <= v <= f.domain_max:
                raise ValueError(
                    f"{where}: {f.name}={v} outside domain [{f.domain_min}, {f.domain_max}]")
        for g, ix in self.groups.items():
            vals = [float(raw[j]) for j in ix]
            if any(v not in (0.0, 1.0) for v in vals) or sum(vals) != 1.0:
                raise ValueError(f"{where}: one-hot group {g!r} is not a valid encoding")


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ModelFormatError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ModelFormatError("layer weights/bias shapes disagree")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ModelFormatError("model has no layers")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.weights.shape[0] != nxt.weights.shape[1]:
                raise ModelFormatError(f"layer {i + 1} input dim does not match layer {i} output dim")
        if self.layers[-1].weights.shape[0] != 2:
            raise ModelFormatError("final layer must have exactly 2 outputs")
        if self.layers[-1].activation != "linear":
            raise ModelFormatError("final layer must be linear (its outputs are the logits)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return 2


@dataclass(frozen=True)
class Instance:
    raw: np.ndarray
    id: str = ""
    label: int | None = None


def normalize(schema: FeatureSchema, raw) -> np.ndarray | list:
    if len(raw) != len(schema):
        raise ValueError(f"expected {len(schema)} features, got {len(raw)}")
    if any(isinstance(v, Var) for v in raw):
        return [schema.normalize_one(j, v) for j, v in enumerate(raw)]
    out = np.asarray(raw, dtype=float).copy()
    for j in range(len(schema)):
        out[j] = schema.normalize_one(j, out[j])
    return out


def _check_dims(model: ModelSpec, schema: FeatureSchema, raw) -> None:
    if model.input_dim != len(schema):
        raise ValueError(f"model expects {model.input_dim} inputs, schema has {len(schema)}")
    if len(raw) != model.input_dim:
        raise ValueError(f"model expects {model.input_dim} inputs, got {len(raw)}")


def _unrolled(model: ModelSpec, xs: list):
    for layer in model.layers:
        W = layer.weights.tolist()
        out = []
        for row, b in zip(W, layer.bias.tolist()):
            acc_c = 0.0
            acc_v = None
            for w, x in zip(row, xs):
                if isinstance(x, Var):
                    term = x * w
                    acc_v = term if acc_v is None else acc_v + term
                else:
                    acc_c += w * x
            z = acc_c + b if acc_v is None else acc_v + (acc_c + b)
            out.append(relu(z) if layer.activation == "relu" else z)
        xs = out
    return xs[0], xs[1]


def _forward_np(model: ModelSpec, xn: np.ndarray, keep: bool = False):
    h = xn
    pre = []
    for layer in model.layers:
        z = layer.weights @ h + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return (h, pre) if keep else h


def logits(model: ModelSpec, schema: FeatureSchema, raw):
    """Pre-softmax outputs ``(g0, g1)`` at a raw-space point."""
    _check_dims(model, schema, raw)
    xn = normalize(schema, raw)
    if isinstance(xn, list):
        return _unrolled(model, xn)
    g = _forward_np(model, xn)
    return float(g[0]), float(g[1])


def probabilities(model: ModelSpec, schema: FeatureSchema, raw) -> tuple[float, float]:
    g0, g1 = logits(model, schema, raw)
    m = max(g0, g1)
    e0, e1 = math.exp(g0 - m), math.exp(g1 - m)
    s = e0 + e1
    return e0 / s, e1 / s


def predict(model: ModelSpec, schema: FeatureSchema, raw) -> int:
    """1 iff ``g1 > g0``; ties classify as 0."""
    g0, g1 = logits(model, schema, raw)
    return int(g1 > g0)


def target_loss(model: ModelSpec, schema: FeatureSchema, raw) -> float:
    """Cross-entropy against label 1: ``-log softmax(g)_1``."""
    g0, g1 = logits(model, schema, raw)
    d = g0 - g1
    return d + math.log1p(math.exp(-d)) if d > 0 else math.log1p(math.exp(d))


def input_gradient_of_loss(model: ModelSpec, schema: FeatureSchema, raw) -> np.ndarray:
    """d(target_loss)/d(raw feature) for every feature."""
    _check_dims(model, schema, raw)
    xn = normalize(schema, raw)
    g, pre = _forward_np(model, xn, keep=True)
    d = g[0] - g[1]
    p0 = 1.0 / (1.0 + math.exp(-d)) if d >= 0 else math.exp(d) / (1.0 + math.exp(d))
    delta = np.array([p0, -p0])
    for layer, z in zip(reversed(model.layers), reversed(pre)):
        if layer.activation == "relu":
            delta = delta * (z > 0.0)
        delta = layer.weights.T @ delta
    scales = np.array([schema.scale(j) for j in range(len(schema))])
    return delta * scales


@dataclass(frozen=True)
class Model:
    """A network bundled with the schema its inputs follow."""

    spec: ModelSpec
    schema: FeatureSchema

    def logits(self, raw):
        return logits(self.spec, self.schema, raw)

    def predict(self, raw) -> int:
        return predict(self.spec, self.schema, raw)

    def probabilities(self, raw):
        return probabilities(self.spec, self.schema, raw)

    def loss_gradient(self, raw) -> np.ndarray:
        return input_gradient_of_loss(self.spec, self.schema, raw)


# -- file format ---------------------------------------------------------

def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ModelFormatError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ModelFormatError(f"{where}: unknown field(s) {sorted(extra)}")


def _feature_from_json(d: dict, scheme: str, i: int) -> Feature:
    where = f"schema.features[{i}]"
    kind = d.get("kind", "numeric")
    if kind == "onehot":
        _reject_unknown(d, {"name", "kind", "group", "category"}, where)
        return Feature(name=d["name"], kind="onehot", domain_min=0.0, domain_max=1.0,
                       group=d["group"], category=str(d["category"]))
    _reject_unknown(d, {"name", "kind", "domain", "norm"}, where)
    lo, hi = (float(v) for v in d["domain"])
    norm = d.get("norm", {})
    if scheme == "zscore":
        _reject_unknown(norm, {"mean", "std"}, f"{where}.norm")
        return Feature(d["name"], "numeric", lo, hi, mean=float(norm["mean"]), std=float(norm["std"]))
    _reject_unknown(norm, {"min", "max"}, f"{where}.norm")
    return Feature(d["name"], "numeric", lo, hi,
                   norm_min=float(norm.get("min", lo)), norm_max=float(norm.get("max", hi)))


def schema_from_json(d: dict) -> FeatureSchema:
    _reject_unknown(d, {"scheme", "features"}, "schema")
    scheme = d.get("scheme", "zscore")
    feats = tuple(_feature_from_json(f, scheme, i) for i, f in enumerate(d["features"]))
    return FeatureSchema(feats, scheme)


def schema_to_json(schema: FeatureSchema) -> dict:
    out = []
    for f in schema.features:
        if f.kind == "onehot":
            out.append({"name": f.name, "kind": "onehot", "group": f.group, "category": f.category})
        elif schema.scheme == "zscore":
            out.append({"name": f.name, "kind": "numeric", "domain": [f.domain_min, f.domain_max],
                        "norm": {"mean": f.mean, "std": f.std}})
        else:
            out.append({"name": f.name, "kind": "numeric", "domain": [f.domain_min, f.domain_max],
                        "norm": {"min": f.norm_min, "max": f.norm_max}})
    return {"scheme": schema.scheme, "features": out}


def model_from_json(d: dict) -> Model:
    _reject_unknown(d, {"schema", "layers"}, "model")
    layers = []
    for i, ld in enumerate(d["layers"]):
        _reject_unknown(ld, {"shape", "weights", "bias", "activation"}, f"layers[{i}]")
        W = np.asarray(ld["weights"], dtype=float)
        shape = tuple(ld["shape"])
        if W.shape != shape:
            raise ModelFormatError(f"layers[{i}]: declared shape {shape} but weights are {W.shape}")
        layers.append(Layer(W, np.asarray(ld["bias"], dtype=float), ld["activation"]))
    spec = ModelSpec(tuple(layers))
    schema = schema_from_json(d["schema"])
    if spec.input_dim != len(schema):
        raise ModelFormatError(f"first layer takes {spec.input_dim} inputs but schema has {len(schema)}")
    return Model(spec, schema)


def model_to_json(model: Model) -> dict:
    return {
        "schema": schema_to_json(model.schema),
        "layers": [
            {"shape": list(l.weights.shape), "weights": l.weights.tolist(),
             "bias": l.bias.tolist(), "activation": l.activation}
            for l in model.spec.layers
        ],
    }


def load_model(path: str | Path) -> Model:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return model_from_json(data)
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing field {exc}") from exc
