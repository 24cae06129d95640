"""Server-side aggregation of client LoRA adapters.

Three strategies are provided:

* ``aggregate_fedavg`` averages ``b`` and ``a`` separately. The product of the
  averages is not the average of the products, so this carries an error.
* ``aggregate_ffa`` assumes every client kept ``a`` frozen at a shared value and
  averages ``b`` only, which is exact.
* ``aggregate_fra`` forms the exact weighted mean of the increments and
  re-factorizes it to the adapter rank with a truncated SVD. Its error is the
  smallest any rank-r adapter can achieve.

Weights are relative sample counts; they are normalized here, so callers may
pass raw counts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import ShapeError, frobenius_norm, svd, tail_norm
from .lora import LoraAdapter, delta_w


class AggregationError(ValueError):
    pass


class ProtocolError(AggregationError):
    """A client broke the freeze-A contract."""


@dataclass(frozen=True)
class ClientUpdate:
    adapter: LoraAdapter
    weight: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight <= 0:
            raise ValueError(f"client weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class AggregateOutcome:
    """Aggregated adapter plus what it should have been.

    ``err_norm`` is ``||delta_w(adapter) - exact_delta||_F``.
    """

    adapter: LoraAdapter
    exact_delta: np.ndarray
    err_norm: float
    spectrum: np.ndarray | None = field(default=None, compare=False)


def normalized_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    w = np.array([u.weight for u in updates], dtype=float)
    return w / w.sum()


def _validate(updates: Sequence[ClientUpdate]) -> None:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ref = updates[0].adapter
    for k, u in enumerate(updates[1:], 1):
        ad = u.adapter
        if ad.shape != ref.shape or ad.rank != ref.rank:
            raise ShapeError(
                f"client {k} adapter is {ad.shape} rank {ad.rank}, "
                f"expected {ref.shape} rank {ref.rank}"
            )
        if ad.scaling != ref.scaling:
            raise AggregationError(f"client {k} scaling {ad.scaling} differs from {ref.scaling}")


def _merge_identical(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    """Collapse bitwise-identical adapters into one update with summed weight.

    Averaging copies of the same adapter must give that adapter back; merging
    first makes this hold exactly, including for the SVD path.
    """
    merged: list[ClientUpdate] = []
    for u in updates:
        for i, m in enumerate(merged):
            if np.array_equal(m.adapter.b, u.adapter.b) and np.array_equal(m.adapter.a, u.adapter.a):
                merged[i] = ClientUpdate(m.adapter, m.weight + u.weight)
                break
        else:
            merged.append(u)
    return merged


def stacked_factors(updates: Sequence[ClientUpdate]) -> tuple[np.ndarray, np.ndarray]:
    """Weighted block concatenation: ``B_hat = [w_1 B_1 | ... ]``, ``A_hat = [A_1; ...]``.

    The weight is applied once, to the ``b`` blocks, so ``B_hat @ A_hat`` is the
    weighted mean of the unscaled products.
    """
    w = normalized_weights(updates)
    b_hat = np.concatenate([wk * u.adapter.b for wk, u in zip(w, updates)], axis=1)
    a_hat = np.concatenate([u.adapter.a for u in updates], axis=0)
    return b_hat, a_hat


def exact_delta(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Weighted mean of the client increments, ``sum_k w_k delta_w(adapter_k)``."""
    _validate(updates)
    b_hat, a_hat = stacked_factors(updates)
    return updates[0].adapter.scaling * (b_hat @ a_hat)


def _outcome(adapter: LoraAdapter, target: np.ndarray, spectrum=None) -> AggregateOutcome:
    return AggregateOutcome(adapter, target, frobenius_norm(delta_w(adapter) - target), spectrum)


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> AggregateOutcome:
    _validate(updates)
    updates = _merge_identical(updates)
    target = exact_delta(updates)
    w = normalized_weights(updates)
    b = sum(wk * u.adapter.b for wk, u in zip(w, updates))
    a = sum(wk * u.adapter.a for wk, u in zip(w, updates))
    return _outcome(updates[0].adapter.replace(b=b, a=a), target)


def aggregate_ffa(updates: Sequence[ClientUpdate], frozen_a: np.ndarray) -> AggregateOutcome:
    _validate(updates)
    for k, u in enumerate(updates):
        if not np.array_equal(u.adapter.a, frozen_a):
            raise ProtocolError(f"client {k} returned an 'a' factor that differs from the frozen one")
    updates = _merge_identical(updates)
    target = exact_delta(updates)
    w = normalized_weights(updates)
    b = sum(wk * u.adapter.b for wk, u in zip(w, updates))
    return _outcome(updates[0].adapter.replace(b=b, a=frozen_a), target)


def aggregate_fra(updates: Sequence[ClientUpdate], r: int) -> AggregateOutcome:
    _validate(updates)
    ref = updates[0].adapter
    m, n = ref.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)}], got {r}")
    updates = _merge_identical(updates)
    target = exact_delta(updates)
    if len(updates) == 1 and r == ref.rank:
        return _outcome(updates[0].adapter, target)

    b_hat, a_hat = stacked_factors(updates)
    res = svd(b_hat @ a_hat)
    b = res.u[:, :r] * res.singular_values[:r]
    a = res.vt[:r]
    return _outcome(LoraAdapter(b, a, ref.scaling), target, spectrum=ref.scaling * res.singular_values)


def fedavg_error(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Closed-form FedAvg error ``0.25 (B1 - B2)(A1 - A2)`` for two equally weighted clients.

    Sign convention: exact mean minus FedAvg product, scaled like ``delta_w``.
    """
    if len(updates) != 2:
        raise AggregationError(f"closed form needs exactly two updates, got {len(updates)}")
    _validate(updates)
    if updates[0].weight != updates[1].weight:
        raise AggregationError("closed form needs equal client weights")
    (u1, u2) = (u.adapter for u in updates)
    return 0.25 * u1.scaling * ((u1.b - u2.b) @ (u1.a - u2.a))


def fra_truncation_error(delta: np.ndarray, r: int) -> float:
    """Frobenius norm of the SVD tail dropped when keeping ``r`` components."""
    if not 1 <= r <= min(delta.shape):
        raise ValueError(f"rank must be in [1, {min(delta.shape)}], got {r}")
    return tail_norm(svd(delta).singular_values, r)


@dataclass(frozen=True)
class RoundTrace:
    exact_delta_norm: float
    err_norms: dict[str, float]
    spectrum: np.ndarray


def round_trace(updates: Sequence[ClientUpdate], r: int) -> RoundTrace:
    """Diagnostics of every strategy applicable to one round's updates."""
    fra = aggregate_fra(updates, r)
    errs = {"fedavg": aggregate_fedavg(updates).err_norm, "fra": fra.err_norm}
    a0 = updates[0].adapter.a
    if all(np.array_equal(u.adapter.a, a0) for u in updates):
        errs["ffa"] = aggregate_ffa(updates, a0).err_norm
    spectrum = svd(fra.exact_delta).singular_values
    return RoundTrace(frobenius_norm(fra.exact_delta), errs, spectrum)


def format_round_trace(trace: RoundTrace) -> str:
    lines = [f"exact_delta_norm {trace.exact_delta_norm!r}"]
    lines += [f"err_norm {name} {trace.err_norms[name]!r}" for name in sorted(trace.err_norms)]
    lines.append("spectrum")
    lines += [repr(float(d)) for d in trace.spectrum]
    return "\n".join(lines) + "\n"


def write_round_trace(path: str | Path, trace: RoundTrace) -> None:
    Path(path).write_text(format_round_trace(trace))
