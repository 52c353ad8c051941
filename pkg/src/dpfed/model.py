"""Dense ReLU/ReLU/Softmax classifier with cross-entropy loss and plain SGD.

Parameters live in a single flat float64 vector (:class:`ParamVector`); each
layer occupies ``rows * cols`` weights (row-major, ``rows`` = fan-in)
followed by ``cols`` biases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from dpfed import kernels
from dpfed.errors import EmptyBatchError, ShapeError
from dpfed.seeding import check_seed

PROB_CLAMP = 1e-12


class LayerShape(NamedTuple):
    rows: int
    cols: int
    has_bias: bool = True

    @property
    def size(self) -> int:
        return self.rows * self.cols + (self.cols if self.has_bias else 0)


@dataclass(frozen=True)
class ParamVector:
    """Flat, read-only weight vector plus per-layer shape metadata."""

    values: np.ndarray
    shapes: tuple[LayerShape, ...]

    def __post_init__(self):
        shapes = tuple(LayerShape(int(r), int(c), bool(h)) for r, c, h in self.shapes)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        expected = sum(s.size for s in shapes)
        if values.size != expected:
            raise ShapeError(f"values has {values.size} entries, layer shapes need {expected}")
        if not np.isfinite(values).all():
            raise ValueError("parameter vector contains NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes", shapes)

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shapes)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.shapes == other.shapes

    def layers(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """(weights, bias) views per layer; bias is None for bias-free layers."""
        out = []
        offset = 0
        for shape in self.shapes:
            w = self.values[offset : offset + shape.rows * shape.cols].reshape(shape.rows, shape.cols)
            offset += shape.rows * shape.cols
            b = None
            if shape.has_bias:
                b = self.values[offset : offset + shape.cols]
                offset += shape.cols
            out.append((w, b))
        return out

    def norm(self) -> float:
        """Euclidean norm with an exactly rounded sum of squares."""
        return math.sqrt(math.fsum(self.values * self.values))

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros(other.values.size), other.shapes)


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(self.layer_dims)
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        for d in dims:
            if isinstance(d, bool) or int(d) != d or d <= 0:
                raise ValueError(f"layer dims must be positive integers, got {dims}")
        if dims[-1] < 2:
            raise ValueError("output dim must be at least 2")
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in dims))

    @property
    def layer_shapes(self) -> tuple[LayerShape, ...]:
        d = self.layer_dims
        return tuple(LayerShape(d[i], d[i + 1], True) for i in range(len(d) - 1))


@dataclass(frozen=True)
class TrainingBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        y = np.asarray(self.labels)
        if y.ndim != 1:
            raise ShapeError("labels must be 1-D")
        if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0):
            raise ValueError("labels must be non-negative class indices")
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        y = y.astype(np.int64)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, index: np.ndarray) -> "TrainingBatch":
        return TrainingBatch(self.features[index], self.labels[index])


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """He-normal weights (variance 2/fan_in), zero biases, deterministic in ``seed``."""
    rng = np.random.Generator(np.random.PCG64(check_seed(seed)))
    chunks = []
    for shape in spec.layer_shapes:
        std = math.sqrt(2.0 / shape.rows)
        chunks.append(rng.standard_normal(shape.rows * shape.cols) * std)
        chunks.append(np.zeros(shape.cols))
    return ParamVector(np.concatenate(chunks), spec.layer_shapes)


def _check_layout(params: ParamVector, batch: TrainingBatch) -> None:
    shapes = params.shapes
    if len(shapes) < 2:
        raise ShapeError("need at least one hidden ReLU layer before the softmax layer")
    for prev, nxt in zip(shapes, shapes[1:]):
        if prev.cols != nxt.rows:
            raise ShapeError(f"layer widths do not chain: {prev.cols} -> {nxt.rows}")
    if shapes[-1].cols < 2:
        raise ShapeError("softmax layer needs at least 2 outputs")
    if batch.features.shape[1] != shapes[0].rows:
        raise ShapeError(f"batch has {batch.features.shape[1]} features, model expects {shapes[0].rows}")
    if len(batch) and batch.labels.max() >= shapes[-1].cols:
        raise ShapeError(f"label {batch.labels.max()} out of range for {shapes[-1].cols} classes")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(params: ParamVector, x: np.ndarray):
    """Returns (layer inputs, pre-activations, probabilities)."""
    layers = params.layers()
    inputs, pre = [], []
    a = x
    for idx, (w, b) in enumerate(layers):
        inputs.append(a)
        z = kernels.dense_forward(a, w, b)
        pre.append(z)
        a = np.maximum(z, 0.0) if idx < len(layers) - 1 else _softmax(z)
    return inputs, pre, a


def forward(params: ParamVector, batch: TrainingBatch) -> np.ndarray:
    """Class-probability matrix, one row per sample."""
    _check_layout(params, batch)
    if not len(batch):
        return np.empty((0, params.shapes[-1].cols))
    return _forward_pass(params, batch.features)[2]


def _true_class_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return probs[np.arange(labels.size), labels]


def loss(params: ParamVector, batch: TrainingBatch) -> float:
    """Mean categorical cross-entropy, probabilities clamped at 1e-12.

    The mean uses an exactly rounded sum, so it does not depend on sample order.
    """
    if not len(batch):
        raise EmptyBatchError("loss of an empty batch")
    probs = forward(params, batch)
    p = np.maximum(_true_class_probs(probs, batch.labels), PROB_CLAMP)
    return math.fsum(-np.log(p)) / len(batch)


def grad(params: ParamVector, batch: TrainingBatch) -> ParamVector:
    """Exact mean gradient of :func:`loss`; samples stuck at the clamp contribute zero."""
    if not len(batch):
        raise EmptyBatchError("gradient of an empty batch")
    _check_layout(params, batch)
    n = len(batch)
    inputs, pre, probs = _forward_pass(params, batch.features)
    dz = probs.copy()
    rows = np.arange(n)
    dz[rows, batch.labels] -= 1.0
    clamped = _true_class_probs(probs, batch.labels) < PROB_CLAMP
    dz[clamped] = 0.0
    dz /= n

    layers = params.layers()
    pieces: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for idx in range(len(layers) - 1, -1, -1):
        w, b = layers[idx]
        dw, db, da = kernels.dense_backward(inputs[idx], np.ascontiguousarray(dz), w, idx > 0)
        pieces[2 * idx] = dw.reshape(-1)
        pieces[2 * idx + 1] = db if b is not None else np.empty(0)
        if idx > 0:
            dz = da * (pre[idx - 1] > 0.0)
    return ParamVector(np.concatenate(pieces), params.shapes)


def sgd_step(params: ParamVector, gradient: ParamVector, lr: float) -> ParamVector:
    if not params.same_layout(gradient):
        raise ShapeError("gradient layout does not match parameters")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return params.with_values(params.values - lr * gradient.values)


def lr_decay(base_lr: float, alpha: float, round: int) -> float:
    """Inverse-time decay ``base_lr / (1 + alpha * round)``."""
    if not base_lr > 0:
        raise ValueError("base_lr must be positive")
    if not alpha >= 0:
        raise ValueError("alpha must be non-negative")
    if round < 0:
        raise ValueError("round must be non-negative")
    return base_lr / (1.0 + alpha * round)


def sgd_epoch(
    params: ParamVector,
    batch: TrainingBatch,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> ParamVector:
    """One shuffled pass of mini-batch SGD; the last mini-batch may be short."""
    order = rng.permutation(len(batch))
    for start in range(0, len(order), batch_size):
        mini = batch.subset(order[start : start + batch_size])
        params = sgd_step(params, grad(params, mini), lr)
    return params


def predict(params: ParamVector, batch: TrainingBatch) -> np.ndarray:
    return np.argmax(forward(params, batch), axis=1)


def confusion_matrix(labels: Sequence[int], predicted: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predicted)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> EvalMetrics:
    """Macro metrics over the classes that occur as true labels.

    F1 is the harmonic mean of macro precision and macro recall.
    """
    total = cm.sum()
    if total == 0:
        raise EmptyBatchError("no samples to evaluate")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = support > 0
    precision_c = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall_c = tp / np.where(present, support, 1)
    precision = float(precision_c[present].mean())
    recall = float(recall_c[present].mean())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalMetrics(float(tp.sum() / total), precision, recall, f1)


def evaluate(params: ParamVector, batch: TrainingBatch) -> EvalMetrics:
    if not len(batch):
        raise EmptyBatchError("evaluate on an empty batch")
    pred = predict(params, batch)
    return metrics_from_confusion(confusion_matrix(batch.labels, pred, params.shapes[-1].cols))
