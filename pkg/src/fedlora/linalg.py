"""Dense matrix helpers and a one-sided Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays. ``as_matrix`` is the single
gatekeeper that enforces shape and finiteness; everything else assumes its
inputs went through it.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_SWEEPS = 100
ROTATION_TOL = 1e-12


class ShapeError(ValueError):
    """Raised when matrix dimensions do not conform."""


class SvdConvergenceError(RuntimeError):
    def __init__(self, sweeps: int):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps")
        self.sweeps = sweeps


def as_matrix(data) -> np.ndarray:
    """Coerce ``data`` to a nonempty, finite, 2-D float64 array (copied)."""
    m = np.array(data, dtype=np.float64, copy=True)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim}-D input")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"matrix must be nonempty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


def frozen(m: np.ndarray) -> np.ndarray:
    """Mark an array read-only and return it."""
    m.setflags(write=False)
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def frobenius_norm(m: np.ndarray) -> float:
    # Scale by the largest entry so tiny or huge values neither underflow nor overflow.
    top = float(np.max(np.abs(m))) if m.size else 0.0
    if top == 0.0:
        return 0.0
    return top * math.sqrt(float(np.sum(np.square(m / top))))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(singular_values) @ vt``.

    ``u`` is rows x k, ``vt`` is k x cols with k = min(rows, cols); singular
    values are sorted descending.
    """

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        k = len(self.singular_values) if rank is None else rank
        return (self.u[:, :k] * self.singular_values[:k]) @ self.vt[:k]


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of a round-robin tournament on ``n`` (even) players.

    Every pair (i, j) appears exactly once across the n - 1 steps, and the
    pairs within one step are disjoint, so their rotations commute.
    """
    players = list(range(n))
    steps = []
    for _ in range(n - 1):
        half = n // 2
        left = players[:half]
        right = players[half:][::-1]
        p = np.array([min(i, j) for i, j in zip(left, right)])
        q = np.array([max(i, j) for i, j in zip(left, right)])
        steps.append((p, q))
        players = [players[0], players[-1], *players[1:-1]]
    return steps


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged in ``keep`` with an orthonormal
    completion of the kept ones (Gram-Schmidt against coordinate axes)."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if keep[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                basis.append(v)
                out[:, j] = v
                break
    return out


def _jacobi_tall(m: np.ndarray) -> SvdResult:
    """One-sided (Hestenes) Jacobi on a matrix with rows >= cols."""
    rows, cols = m.shape
    n = cols + (cols % 2)
    work = np.zeros((rows, n))
    work[:, :cols] = m
    v = np.eye(n)
    steps = _round_robin(n) if n > 1 else []

    for sweep in range(1, MAX_SWEEPS + 1):
        rotated = False
        for p, q in steps:
            wp, wq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > ROTATION_TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = work[:, p], work[:, q]
            work[:, p] = c * wp - s * wq
            work[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise SvdConvergenceError(MAX_SWEEPS)

    work, v = work[:, :cols], v[:cols, :cols]
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]

    # Columns with negligible norm carry no direction; fill them in so u
    # keeps orthonormal columns.
    floor = max(rows, cols) * np.finfo(float).eps * (sigma[0] if sigma.size else 0.0)
    keep = sigma > floor
    u = np.zeros_like(work)
    u[:, keep] = work[:, keep] / sigma[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
    return SvdResult(u=u, singular_values=sigma, vt=v.T.copy())


def svd(m: np.ndarray) -> SvdResult:
    m = as_matrix(m)
    if m.shape[0] >= m.shape[1]:
        return _jacobi_tall(m)
    t = _jacobi_tall(m.T)
    return SvdResult(u=t.vt.T.copy(), singular_values=t.singular_values, vt=t.u.T.copy())


def _check_rank(m: np.ndarray, r: int) -> None:
    k = min(m.shape)
    if not isinstance(r, (int, np.integer)) or isinstance(r, bool) or not 1 <= r <= k:
        raise ValueError(f"rank must be an integer in [1, {k}] for a {m.shape[0]}x{m.shape[1]} matrix, got {r!r}")


def truncated_svd(m: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``r`` factorization ``m ~= b @ a``.

    Singular values are folded into ``b`` so ``a`` has orthonormal rows.
    """
    _check_rank(m, r)
    res = svd(m)
    b = res.u[:, :r] * res.singular_values[:r]
    a = res.vt[:r].copy()
    return b, a


def tail_norm(singular_values: np.ndarray, r: int) -> float:
    """sqrt of the sum of squared singular values beyond the first ``r``."""
    return math.sqrt(float(np.sum(np.square(singular_values[r:]))))


def format_matrix(m: np.ndarray) -> str:
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in m]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str | io.TextIOBase) -> np.ndarray:
    stream = io.StringIO(text) if isinstance(text, str) else text
    header = stream.readline().split()
    if len(header) != 2:
        raise ValueError("matrix header must be 'rows cols'")
    rows, cols = int(header[0]), int(header[1])
    values = []
    for i in range(rows):
        fields = stream.readline().split()
        if len(fields) != cols:
            raise ValueError(f"matrix row {i} has {len(fields)} values, expected {cols}")
        values.append([float(x) for x in fields])
    return as_matrix(values)


def save_matrix(path: str | Path, m: np.ndarray) -> None:
    Path(path).write_text(format_matrix(m))


def load_matrix(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        return parse_matrix(fh)
