"""Additive noise for privacy and the two places it can be injected.

Noise on both LoRA factors multiplies out into cross and quadratic terms, so
the perturbation of the product is no longer Gaussian. Noise added to the
aggregated full-rank increment before re-factorization survives unchanged
when the adapter keeps full rank.

``scale`` is the standard deviation (Gaussian) or the diversity ``b``
(Laplace). No privacy accounting or update clipping is done here.

Samples come from numpy's ``default_rng`` (PCG64 bit generator; ziggurat
transform for normals, inverse-CDF for Laplace), seeded per call, so a
(seed, shape, spec) triple always gives the same matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .aggregation import AggregateOutcome
from .linalg import frobenius_norm, svd
from .lora import LoraAdapter, delta_w

DISTRIBUTIONS = ("gaussian", "laplace")


@dataclass(frozen=True)
class NoiseSpec:
    distribution: str = "gaussian"
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}, got {self.distribution!r}")
        if not self.scale > 0:
            raise ValueError(f"noise scale must be positive, got {self.scale}")

    def derive(self, *keys: int) -> NoiseSpec:
        """Spec with a sub-seed determined by (seed, *keys)."""
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(keys))
        return replace(self, seed=int(ss.generate_state(1, np.uint64)[0]))


def noise_matrix(rows: int, cols: int, spec: NoiseSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    if spec.distribution == "gaussian":
        return rng.normal(0.0, spec.scale, size=(rows, cols))
    return rng.laplace(0.0, spec.scale, size=(rows, cols))


def dp_per_adapter(adapter: LoraAdapter, spec: NoiseSpec) -> tuple[LoraAdapter, np.ndarray]:
    """Perturb ``b`` and ``a`` independently.

    Returns the noisy adapter and the resulting change of its increment,
    ``delta_w(noisy) - delta_w(adapter)``.
    """
    nb = noise_matrix(*adapter.b.shape, spec.derive(0))
    na = noise_matrix(*adapter.a.shape, spec.derive(1))
    noisy = adapter.replace(b=adapter.b + nb, a=adapter.a + na)
    return noisy, delta_w(noisy) - delta_w(adapter)


def dp_post_aggregation(exact_delta: np.ndarray, r: int, spec: NoiseSpec, scaling: float = 1.0) -> AggregateOutcome:
    """Add noise to the aggregated increment, then truncate to rank ``r``.

    The outcome's ``exact_delta`` is the noised target and ``err_norm`` is the
    truncation residual against it, which vanishes at full rank.
    """
    m, n = exact_delta.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank must be in [1, {min(m, n)}], got {r}")
    target = exact_delta + noise_matrix(m, n, spec)
    res = svd(target / scaling)
    adapter = LoraAdapter(res.u[:, :r] * res.singular_values[:r], res.vt[:r], scaling)
    return AggregateOutcome(
        adapter, target, frobenius_norm(delta_w(adapter) - target), scaling * res.singular_values
    )
