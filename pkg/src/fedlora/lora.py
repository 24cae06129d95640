"""LoRA adapter state and merge semantics over a frozen base weight."""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import ShapeError, as_matrix, format_matrix, frozen, matmul, parse_matrix

INIT_STD = 0.02


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank increment ``scaling * b @ a`` for an m x n weight.

    ``b`` is m x rank, ``a`` is rank x n. Arrays are stored read-only; produce
    a new adapter instead of editing one.
    """

    b: np.ndarray
    a: np.ndarray
    scaling: float = 1.0

    def __post_init__(self):
        b, a = frozen(as_matrix(self.b)), frozen(as_matrix(self.a))
        if b.shape[1] != a.shape[0]:
            raise ShapeError(f"adapter factors do not share a rank: b {b.shape}, a {a.shape}")
        if b.shape[1] > min(b.shape[0], a.shape[1]):
            raise ValueError(f"rank {b.shape[1]} exceeds min(m, n) = {min(b.shape[0], a.shape[1])}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "scaling", float(self.scaling))

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the weight the adapter modifies."""
        return self.b.shape[0], self.a.shape[1]

    @property
    def trainable_param_count(self) -> int:
        m, n = self.shape
        return (m + n) * self.rank

    def replace(self, *, b=None, a=None) -> LoraAdapter:
        return LoraAdapter(self.b if b is None else b, self.a if a is None else a, self.scaling)


def init_adapter(m: int, n: int, r: int, seed: int, scaling: float = 1.0) -> LoraAdapter:
    """Standard LoRA start: ``a`` ~ N(0, 0.02^2), ``b`` = 0, so the increment is zero."""
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)}], got {r}")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, INIT_STD, size=(r, n))
    return LoraAdapter(np.zeros((m, r)), a, scaling)


def delta_w(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scaling * matmul(adapter.b, adapter.a)


@dataclass(frozen=True)
class FrozenLayer:
    w0: np.ndarray
    adapter: LoraAdapter

    def __post_init__(self):
        w0 = self.w0
        if not (isinstance(w0, np.ndarray) and not w0.flags.writeable):
            w0 = frozen(as_matrix(w0))
        if w0.shape != self.adapter.shape:
            raise ShapeError(f"base weight {w0.shape} does not match adapter {self.adapter.shape}")
        object.__setattr__(self, "w0", w0)

    def with_adapter(self, adapter: LoraAdapter) -> FrozenLayer:
        # w0 is already validated and read-only; share it rather than copy.
        return FrozenLayer(self.w0, adapter)


def merge(layer: FrozenLayer) -> np.ndarray:
    return layer.w0 + delta_w(layer.adapter)


def format_adapter(adapter: LoraAdapter) -> str:
    return (
        "lora-adapter\n"
        f"rank {adapter.rank}\n"
        f"scaling {adapter.scaling!r}\n"
        "b\n" + format_matrix(adapter.b) + "a\n" + format_matrix(adapter.a)
    )


def parse_adapter(text: str) -> LoraAdapter:
    stream = io.StringIO(text)
    if stream.readline().strip() != "lora-adapter":
        raise ValueError("not an adapter checkpoint")
    fields = {}
    for key in ("rank", "scaling"):
        name, value = stream.readline().split()
        if name != key:
            raise ValueError(f"expected '{key}' header, got '{name}'")
        fields[key] = value
    mats = {}
    for key in ("b", "a"):
        if stream.readline().strip() != key:
            raise ValueError(f"expected '{key}' block")
        mats[key] = parse_matrix(stream)
    adapter = LoraAdapter(mats["b"], mats["a"], float(fields["scaling"]))
    if adapter.rank != int(fields["rank"]):
        raise ValueError(f"rank header {fields['rank']} disagrees with factor shapes")
    return adapter


def save_adapter(path: str | Path, adapter: LoraAdapter) -> None:
    Path(path).write_text(format_adapter(adapter))


def load_adapter(path: str | Path) -> LoraAdapter:
    return parse_adapter(Path(path).read_text())
