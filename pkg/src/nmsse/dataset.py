"""Density-matrix series as real feature vectors, convergence gating, and
window/split carving for network training.

A d-level density matrix maps to d^2 - 1 reals: successive population
differences, then upper-triangle real parts, then upper-triangle imaginary
parts, both in row-major order.  The inverse needs the trace, which the
difference encoding drops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "vectorize",
    "vectorize_series",
    "devectorize",
    "component_names",
    "ConvergedPrefix",
    "find_converged_prefix",
    "make_windows",
    "DatasetSplit",
    "split_windows",
]


def vectorize_series(rho: np.ndarray) -> np.ndarray:
    """Vectorize matrices with any leading shape (..., d, d) -> (..., d^2-1).

    Input is Hermitized first, (rho + rho^+)/2, so per-trajectory products
    of unequal forward/backward states are welcome.
    """
    rho = np.asarray(rho, dtype=complex)
    d = rho.shape[-1]
    if rho.shape[-2] != d or d < 2:
        raise ValueError("expected (..., d, d) matrices with d >= 2")
    herm = 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))
    diag = np.einsum("...ii->...i", herm).real
    deltas = diag[..., :-1] - diag[..., 1:]
    iu, ju = np.triu_indices(d, 1)
    off = herm[..., iu, ju]
    return np.concatenate([deltas, off.real, off.imag], axis=-1)


def vectorize(rho: np.ndarray) -> np.ndarray:
    """One matrix (d, d) -> one real vector (d^2 - 1,)."""
    rho = np.asarray(rho)
    if rho.ndim != 2:
        raise ValueError("vectorize takes a single matrix; see vectorize_series")
    return vectorize_series(rho)


def _infer_dim(n_components: int) -> int:
    d = int(round(np.sqrt(n_components + 1)))
    if d * d - 1 != n_components or d < 2:
        raise ValueError(f"component count {n_components} is not d^2-1 for integer d >= 2")
    return d


def component_names(d: int) -> list[str]:
    """Column labels matching the vector layout, 1-based indices."""
    names = [f"delta_{i + 1}" for i in range(d - 1)]
    iu, ju = np.triu_indices(d, 1)
    names += [f"re_{i + 1}_{j + 1}" for i, j in zip(iu, ju)]
    names += [f"im_{i + 1}_{j + 1}" for i, j in zip(iu, ju)]
    return names


def devectorize(vec: np.ndarray, trace: float = 1.0) -> np.ndarray:
    """Rebuild the Hermitian matrix; the dropped trace defaults to 1."""
    vec = np.asarray(vec, dtype=float)
    if vec.ndim != 1:
        raise ValueError("devectorize takes a single component vector")
    d = _infer_dim(vec.size)
    deltas = vec[: d - 1]
    n_off = d * (d - 1) // 2
    re = vec[d - 1 : d - 1 + n_off]
    im = vec[d - 1 + n_off :]
    # populations from differences plus the trace constraint
    suffix = np.concatenate([np.cumsum(deltas[::-1])[::-1], [0.0]])
    base = (trace - suffix.sum()) / d
    diag = base + suffix
    rho = np.diag(diag).astype(complex)
    iu, ju = np.triu_indices(d, 1)
    rho[iu, ju] = re + 1j * im
    rho[ju, iu] = re - 1j * im
    return rho


class ConvergedPrefix(NamedTuple):
    count: int
    converged: bool


def find_converged_prefix(se_summary: np.ndarray, eps1: float) -> ConvergedPrefix:
    """Length of the leading span whose scalar standard error stays <= eps1.

    First crossing wins: points after the first violation are ignored even
    if the error dips back down.  count == 0 means not even the first point
    qualifies.
    """
    se = np.asarray(se_summary, dtype=float)
    if se.ndim != 1:
        raise ValueError("expected a 1-d standard-error summary")
    if eps1 <= 0:
        raise ValueError("eps1 must be positive")
    bad = np.nonzero(se > eps1)[0]
    count = int(bad[0]) if bad.size else se.size
    return ConvergedPrefix(count=count, converged=count > 0)


def make_windows(series: np.ndarray, length: int):
    """Sliding windows X (W, length, C) and next-step targets y (W, C).

    W = T - length; a series too short for one window yields empty arrays.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim != 2:
        raise ValueError("series must be (T, C)")
    if length < 1:
        raise ValueError("window length must be >= 1")
    t_len, n_comp = series.shape
    count = t_len - length
    if count <= 0:
        return np.zeros((0, length, n_comp)), np.zeros((0, n_comp))
    idx = np.arange(length)[None, :] + np.arange(count)[:, None]
    return series[idx], series[length:]


@dataclass(frozen=True)
class DatasetSplit:
    """Index sets into a window array; t1/t2/v partition the usable windows."""

    t1: np.ndarray
    t2: np.ndarray
    v: np.ndarray
    seed: int

    @property
    def n_windows(self) -> int:
        return self.t1.size + self.t2.size + self.v.size


def split_windows(n_windows: int, seed: int) -> DatasetSplit:
    """Chronological 3:1 train/validation cut, then a seeded 7:3 shuffle split.

    The validation quarter is the most recent data; the earlier three
    quarters are shuffled and divided 7:3, with floor rounding giving the
    first part of each cut.
    """
    if n_windows < 0:
        raise ValueError("window count must be >= 0")
    n_train = (3 * n_windows) // 4
    v = np.arange(n_train, n_windows)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_train)
    n_t1 = (7 * n_train) // 10
    return DatasetSplit(t1=perm[:n_t1], t2=perm[n_t1:], v=v, seed=seed)
