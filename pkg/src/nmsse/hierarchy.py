"""Truncated ladder space carrying the memory of the bath and the
non-Hermitian effective Hamiltonians that drive paired trajectories.

A trajectory state lives on system x ladder space.  Each bath expansion term
contributes one ladder mode with occupation 0..n_max; raising past n_max is
dropped (hard truncation).  The effective Hamiltonian is

    H(t) = H_s + sum_b xi_b(t) f_b - i sum_m nu_m n_m - i sum_m sqrt(d_m) f_b(m) (B+_m - B_m)

where the last term is the sqrt(2 d_m) momentum coupling written out through
p = i (B+ - B) / sqrt(2).  Forward trajectories insert xi1(t); backward ones
insert the conjugate of the sampled xi2*(t).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "HierarchySpace",
    "StochasticState",
    "BathTerm",
    "EffectiveHamiltonian",
    "apply_ladder",
    "system_projection",
    "DEFAULT_DIM_CAP",
]

DEFAULT_DIM_CAP = 1_000_000


@dataclass(frozen=True)
class HierarchySpace:
    """Occupation lattice for n_modes ladder modes truncated at n_max."""

    n_modes: int
    n_max: int

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("need at least one ladder mode")
        if self.n_max < 1:
            raise ValueError("truncation level n_max must be >= 1")

    @property
    def levels(self) -> int:
        return self.n_max + 1

    @property
    def dim(self) -> int:
        return self.levels**self.n_modes

    @cached_property
    def occupations(self) -> np.ndarray:
        """Occupation numbers per flat index, shape (dim, n_modes).

        Flat ordering is lexicographic with the first mode most significant,
        so the vacuum (all zeros) is index 0.
        """
        grids = np.indices((self.levels,) * self.n_modes)
        return grids.reshape(self.n_modes, self.dim).T.copy()

    @property
    def vacuum_index(self) -> int:
        return 0

    def _shape(self):
        return (self.levels,) * self.n_modes

    def raise_matrix(self, mode: int) -> np.ndarray:
        """Dense matrix of B+ on the given mode (truncated above n_max)."""
        occ = self.occupations
        out = np.zeros((self.dim, self.dim))
        src = np.nonzero(occ[:, mode] < self.n_max)[0]
        stride = self.levels ** (self.n_modes - 1 - mode)
        dst = src + stride
        out[dst, src] = np.sqrt(occ[src, mode] + 1.0)
        return out

    def lower_matrix(self, mode: int) -> np.ndarray:
        return self.raise_matrix(mode).T.copy()


def apply_ladder(space: HierarchySpace, amplitudes: np.ndarray, mode: int, kind: str) -> np.ndarray:
    """Apply B+ ('raise') or B ('lower') on one mode of (dim_s, dim) amplitudes.

    Works by shifted slicing on the occupation axis, no dense matrix; weight
    that would leave the truncated lattice is dropped.
    """
    if kind not in ("raise", "lower"):
        raise ValueError("kind must be 'raise' or 'lower'")
    dim_s = amplitudes.shape[0]
    amp = amplitudes.reshape((dim_s,) + space._shape())
    out = np.zeros_like(amp)
    axis = 1 + mode
    n = np.arange(space.levels)
    shape = [1] * amp.ndim
    shape[axis] = space.levels
    if kind == "raise":
        # out[n] = sqrt(n) * amp[n-1]
        src = [slice(None)] * amp.ndim
        dst = [slice(None)] * amp.ndim
        src[axis] = slice(0, space.levels - 1)
        dst[axis] = slice(1, space.levels)
        out[tuple(dst)] = amp[tuple(src)]
        out *= np.sqrt(n).reshape(shape)
    else:
        # out[n] = sqrt(n+1) * amp[n+1]
        src = [slice(None)] * amp.ndim
        dst = [slice(None)] * amp.ndim
        src[axis] = slice(1, space.levels)
        dst[axis] = slice(0, space.levels - 1)
        out[tuple(dst)] = amp[tuple(src)]
        out *= np.sqrt(n + 1.0).reshape(shape)
    return out.reshape(dim_s, space.dim)


@dataclass
class StochasticState:
    """Amplitudes over system x ladder space for one trajectory flavor."""

    amplitudes: np.ndarray  # (dim_s, dim_h) complex
    flavor: str  # 'forward' | 'backward'
    t: float

    def __post_init__(self):
        if self.flavor not in ("forward", "backward"):
            raise ValueError("flavor must be 'forward' or 'backward'")
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.ndim != 2:
            raise ValueError("amplitudes must be (dim_s, dim_h)")

    @property
    def vacuum_amplitude(self) -> np.ndarray:
        return self.amplitudes[:, 0]


@dataclass(frozen=True)
class BathTerm:
    """One exponential kernel term: which bath drives it, amplitude, decay rate."""

    bath: int
    d: complex
    nu: float


class EffectiveHamiltonian:
    """Non-Hermitian generator shared by forward and backward trajectories.

    The time-independent part and the noise-coupling operators are exposed
    both structurally (apply) and as dense matrices (dense_parts) over the
    flattened system x ladder index, flattened row-major so that
    flat = s * dim_h + h.
    """

    def __init__(self, h_s, f_ops, terms, space: HierarchySpace, dim_cap: int = DEFAULT_DIM_CAP):
        self.h_s = np.asarray(h_s, dtype=complex)
        self.f_ops = [np.asarray(f, dtype=complex) for f in f_ops]
        self.terms = list(terms)
        self.space = space
        self.dim_s = self.h_s.shape[0]
        if self.h_s.shape != (self.dim_s, self.dim_s):
            raise ValueError("h_s must be square")
        for f in self.f_ops:
            if f.shape != self.h_s.shape:
                raise ValueError("coupling operators must match h_s shape")
        if len(self.terms) != space.n_modes:
            raise ValueError("one ladder mode per expansion term required")
        for term in self.terms:
            if not 0 <= term.bath < len(self.f_ops):
                raise ValueError("term references an unknown bath")
        if self.dim_s * space.dim > dim_cap:
            raise ValueError(
                f"total dimension {self.dim_s * space.dim} exceeds cap {dim_cap}; "
                "lower n_max or the number of modes"
            )
        # -i sum_m nu_m n_m is diagonal on the ladder index
        occ = space.occupations
        self._damping = occ @ np.array([t.nu for t in self.terms], dtype=float)

    def apply(self, amplitudes: np.ndarray, xi_values) -> np.ndarray:
        """H(t) |psi> for amplitudes (dim_s, dim_h); xi_values has one entry per bath."""
        if len(xi_values) != len(self.f_ops):
            raise ValueError("need one noise value per bath")
        out = self.h_s @ amplitudes
        out += (-1j * self._damping)[None, :] * amplitudes
        for f, xi in zip(self.f_ops, xi_values):
            if xi != 0.0:
                out += xi * (f @ amplitudes)
        for mode, term in enumerate(self.terms):
            if term.d == 0.0:
                continue
            ladder = apply_ladder(self.space, amplitudes, mode, "raise")
            ladder -= apply_ladder(self.space, amplitudes, mode, "lower")
            out += (-1j * np.sqrt(complex(term.d))) * (self.f_ops[term.bath] @ ladder)
        return out

    def dense_parts(self):
        """(H0, [F_b]) as dense matrices on the flattened index.

        H(t) = H0 + sum_b xi_b(t) F_b.  Built from the same ladder matrices
        the structural route uses.
        """
        dim_h = self.space.dim
        eye_h = np.eye(dim_h)
        h0 = np.kron(self.h_s, eye_h).astype(complex)
        h0 += np.kron(np.eye(self.dim_s), np.diag(-1j * self._damping))
        for mode, term in enumerate(self.terms):
            if term.d == 0.0:
                continue
            pm = self.space.raise_matrix(mode) - self.space.lower_matrix(mode)
            h0 += (-1j * np.sqrt(complex(term.d))) * np.kron(self.f_ops[term.bath], pm)
        f_parts = [np.kron(f, eye_h).astype(complex) for f in self.f_ops]
        return h0, f_parts


def system_projection(fwd: StochasticState, bwd: StochasticState) -> np.ndarray:
    """Reduced-density contribution |vac fwd><vac bwd| of one trajectory pair."""
    if fwd.flavor != "forward" or bwd.flavor != "backward":
        raise ValueError("system_projection needs a (forward, backward) pair")
    if fwd.t != bwd.t:
        raise ValueError(f"time stamps differ: {fwd.t} vs {bwd.t}")
    return np.outer(fwd.vacuum_amplitude, np.conj(bwd.vacuum_amplitude))
