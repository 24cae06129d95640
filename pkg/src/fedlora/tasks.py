"""Synthetic classification task and the frozen-base + LoRA model trained on it.

The model is ``logits = head @ tanh((W0 + scaling * B @ A) @ x)``, optionally
with several adapted tanh layers stacked before the head. Only the adapter
factors train; ``W0`` and ``head`` are read-only arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import ShapeError, frozen
from .lora import FrozenLayer, LoraAdapter, init_adapter


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ShapeError(f"inputs {x.shape} and labels {y.shape} do not line up")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "inputs", frozen(x))
        object.__setattr__(self, "labels", frozen(y.astype(np.int64)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.005
    local_epochs: int = 1
    batch_size: int = 1
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be non-negative, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_steps_per_epoch is not None and self.max_steps_per_epoch < 0:
            raise ValueError(f"max_steps_per_epoch must be non-negative, got {self.max_steps_per_epoch}")


def make_synthetic(classes: int, per_class: int, dim: int, separation: float, seed: int) -> LabeledDataset:
    """Gaussian clouds with unit noise, one per class.

    Class ``c`` is centred at ``separation / sqrt(2) * e_c``, so every pair of
    class means is ``separation`` apart and all class signal lives in the first
    ``classes`` input coordinates. Samples are shuffled.
    """
    if classes < 2 or per_class < 1 or separation < 0:
        raise ValueError("need classes >= 2, per_class >= 1 and separation >= 0")
    if classes > dim:
        raise ValueError(f"cannot place {classes} class means in {dim} dimensions")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2.0)
    inputs = means[labels] + rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return LabeledDataset(inputs[order], labels[order], classes)


def save_dataset(path: str | Path, data: LabeledDataset) -> None:
    """One sample per line: comma-separated features, then the integer label."""
    with open(path, "w") as fh:
        for x, y in zip(data.inputs, data.labels):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")


def load_dataset(path: str | Path, class_count: int | None = None) -> LabeledDataset:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: dataset is empty")
    inputs = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows])
    return LabeledDataset(inputs, labels, class_count or int(labels.max()) + 1)


@dataclass(frozen=True)
class AdaptedModel:
    """Stack of frozen layers with adapters, followed by a frozen linear head."""

    layers: tuple[FrozenLayer, ...]
    head: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        head = self.head
        if head.flags.writeable:
            head = frozen(np.array(head, dtype=np.float64))
        if head.shape[1] != self.layers[-1].w0.shape[0]:
            raise ShapeError(f"head {head.shape} does not fit layer output {self.layers[-1].w0.shape[0]}")
        object.__setattr__(self, "head", head)

    @property
    def adapters(self) -> tuple[LoraAdapter, ...]:
        return tuple(layer.adapter for layer in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].w0.shape[1]

    def with_adapters(self, adapters: Sequence[LoraAdapter]) -> AdaptedModel:
        if len(adapters) != len(self.layers):
            raise ValueError(f"expected {len(self.layers)} adapters, got {len(adapters)}")
        return AdaptedModel(tuple(l.with_adapter(a) for l, a in zip(self.layers, adapters)), self.head)


def make_model(dim: int, classes: int, rank: int, seed: int, *, scaling: float = 1.0,
               blind_inputs: int | None = None, depth: int = 1, base_scale: float = 0.1,
               head_scale: float = 1.0) -> AdaptedModel:
    """Reference model for the synthetic task.

    ``W0`` is a random projection whose first ``blind_inputs`` columns
    (default: ``classes``) are zeroed, so the frozen base cannot see the
    coordinates that carry class signal in ``make_synthetic`` data and starts
    at chance accuracy. The adapter has to learn that path.

    ``base_scale`` sets the entry std of ``W0`` (times ``1/sqrt(dim)``). A small
    value keeps the base path's response to the nuisance coordinates weak;
    with a unit scale those responses swamp what a frozen-``a`` adapter can
    express.
    """
    rng = np.random.default_rng(seed)
    blind = classes if blind_inputs is None else blind_inputs
    layers = []
    for i in range(depth):
        w0 = rng.normal(0.0, base_scale / np.sqrt(dim), size=(dim, dim))
        if i == 0:
            w0[:, :blind] = 0.0
        adapter_seed = int(rng.integers(2**63))
        layers.append(FrozenLayer(frozen(w0), init_adapter(dim, dim, rank, adapter_seed, scaling)))
    head = rng.normal(0.0, head_scale, size=(classes, dim))
    return AdaptedModel(tuple(layers), frozen(head))


# Raw-array kernels, shared by the public functions and the training loop.

def _forward(w0s, bs, as_, scales, head, x):
    hs = [x]
    for w0, b, a, s in zip(w0s, bs, as_, scales):
        w = w0 + s * (b @ a)
        hs.append(np.tanh(hs[-1] @ w.T))
    return hs, hs[-1] @ head.T


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def _gradients(w0s, bs, as_, scales, head, x, y):
    hs, logits = _forward(w0s, bs, as_, scales, head, x)
    g = _softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    g /= len(y)
    dh = g @ head
    grads = [None] * len(w0s)
    for l in range(len(w0s) - 1, -1, -1):
        dz = dh * (1.0 - hs[l + 1] ** 2)
        dw = dz.T @ hs[l]
        b, a, s = bs[l], as_[l], scales[l]
        grads[l] = (s * (dw @ a.T), s * (b.T @ dw))
        if l:
            dh = dz @ (w0s[l] + s * (b @ a))
    return grads


def _unpack(model: AdaptedModel):
    ads = model.adapters
    return ([l.w0 for l in model.layers], [a.b for a in ads], [a.a for a in ads],
            [a.scaling for a in ads], model.head)


def _as_batch(model: AdaptedModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    batch = np.atleast_2d(x)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match model input dim {model.input_dim}")
    return batch


def forward(model: AdaptedModel, x) -> np.ndarray:
    """Logits for one input vector (returns 1-D) or a batch of rows (returns 2-D)."""
    batch = _as_batch(model, x)
    w0s, bs, as_, s, head = _unpack(model)
    logits = _forward(w0s, bs, as_, s, head, batch)[1]
    return logits[0] if np.ndim(x) == 1 else logits


def cross_entropy(model: AdaptedModel, inputs, labels) -> float:
    w0s, bs, as_, s, head = _unpack(model)
    return _loss(_forward(w0s, bs, as_, s, head, _as_batch(model, inputs))[1], np.asarray(labels))


def adapter_gradients(model: AdaptedModel, inputs, labels) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of the mean cross-entropy w.r.t. each layer's ``(b, a)``."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("batch is empty")
    w0s, bs, as_, s, head = _unpack(model)
    return _gradients(w0s, bs, as_, s, head, _as_batch(model, inputs), labels)
