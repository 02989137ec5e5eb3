"""Trajectory integration and ensemble statistics.

Forward and backward states share one noise realization per seed and are
stepped together with classic fourth-order Runge-Kutta.  Each recorded point
contributes the outer product of the two vacuum-component system vectors,
and the ensemble keeps running sums of those matrices and of their real
observable components so the mean and its standard error are cheap at any
count.

Reproducibility contract: growing an ensemble from n to n + k trajectories
gives bit-for-bit the same sums as a fresh run of n + k.  Two things make
that hold.  Trajectories are integrated in fixed-size blocks aligned to
absolute seed indices (a partially needed block is still computed whole and
the surplus discarded), so every matrix product sees the same operand shapes
no matter where a run starts or stops.  And block results are folded into
the accumulators one trajectory at a time in seed order, never through
shape-dependent reductions.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .bath import NoiseScheme
from .dataset import vectorize_series
from .hierarchy import EffectiveHamiltonian

__all__ = [
    "TimeGrid",
    "NumericalError",
    "Trajectory",
    "integrate_trajectory",
    "EnsembleStats",
    "run_ensemble",
    "extend_ensemble",
    "TrajectoryStore",
    "DEFAULT_BLOCK",
]

DEFAULT_BLOCK = 128

# Cache the trigonometric basis across blocks only while it stays modest;
# beyond this many bytes per matrix it is rebuilt in row chunks instead.
_BASIS_CACHE_BYTES = 200_000_000
_BASIS_CHUNK_ROWS = 2048


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0 + i*dt for i in 0..n_steps (n_steps + 1 points)."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    @classmethod
    def from_span(cls, t0: float, t1: float, dt: float) -> "TimeGrid":
        if not dt > 0:
            raise ValueError("dt must be positive")
        n = int(round((t1 - t0) / dt))
        if n < 1 or abs(t0 + n * dt - t1) > 1e-9 * max(1.0, abs(t1)):
            raise ValueError(f"span [{t0}, {t1}] is not an integer number of dt={dt} steps")
        return cls(t0=t0, dt=dt, n_steps=n)

    @property
    def t1(self) -> float:
        return self.t0 + self.n_steps * self.dt

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def half_times(self) -> np.ndarray:
        """All integration abscissae: step edges plus midpoints."""
        return self.t0 + (0.5 * self.dt) * np.arange(2 * self.n_steps + 1)

    def with_stride(self, stride: int) -> "TimeGrid":
        if stride < 1 or self.n_steps % stride != 0:
            raise ValueError(f"stride {stride} does not divide {self.n_steps} steps")
        return TimeGrid(t0=self.t0, dt=self.dt * stride, n_steps=self.n_steps // stride)


class NumericalError(RuntimeError):
    """Integration produced a non-finite state; carries the seed at fault."""

    def __init__(self, seed: int, step: int):
        super().__init__(
            f"trajectory with seed {seed} left the finite range at step {step}; "
            "reduce dt or check the model scales"
        )
        self.seed = seed
        self.step = step


@dataclass(frozen=True)
class Trajectory:
    """One seed's recorded outer-product series (not Hermitian pointwise)."""

    grid: TimeGrid
    seed: int
    rho: np.ndarray  # (n_points, d_s, d_s) complex


def _initial_block(model, n_traj: int) -> np.ndarray:
    """Stacked flat states |psi_sys> x |vacuum> for both flavors."""
    space = model.hamiltonian.space
    d_s = model.hamiltonian.dim_s
    psi = np.zeros((n_traj, d_s * space.dim), dtype=complex)
    psi[:, :: space.dim] = np.asarray(model.initial_state, dtype=complex)
    return psi


def _synthesize_block_noise(
    model, seeds: np.ndarray, eval_times: np.ndarray, exact_substeps: bool
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per bath: (xi_forward, xi_backward) arrays of shape (B, len(eval_times)).

    The backward drive is the conjugate of the sampled second process.  One
    generator per seed feeds every bath in declaration order, so a single
    integer pins the whole realization.
    """
    schemes: Sequence[NoiseScheme] = model.noise_schemes
    n_traj = seeds.size
    if exact_substeps:
        synth_times = eval_times
    else:
        synth_times = eval_times[::2]

    coefs = []  # per bath: (cos (n_k, 4B), sin (n_k, 4B))
    for scheme in schemes:
        coefs.append((np.empty((scheme.n_k, 4 * n_traj)), np.empty((scheme.n_k, 4 * n_traj))))
    for j, seed in enumerate(seeds):
        rng = np.random.default_rng(int(seed))
        for b, scheme in enumerate(schemes):
            cos_c, sin_c = scheme.coefficients(scheme.draw(rng))
            coefs[b][0][:, 4 * j : 4 * j + 4] = cos_c
            coefs[b][1][:, 4 * j : 4 * j + 4] = sin_c

    out = []
    for scheme, (cos_c, sin_c) in zip(schemes, coefs):
        small = synth_times.size * scheme.n_k * 8 <= _BASIS_CACHE_BYTES
        step = synth_times.size if small else _BASIS_CHUNK_ROWS
        chans = np.empty((synth_times.size, 4 * n_traj))
        for lo in range(0, synth_times.size, step):
            hi = min(lo + step, synth_times.size)
            cos_b, sin_b = scheme.basis(synth_times[lo:hi])
            chans[lo:hi] = cos_b @ cos_c + sin_b @ sin_c
        xi1, xi2_star = NoiseScheme.combine(chans.reshape(synth_times.size, n_traj, 4))
        xi1 = np.ascontiguousarray(xi1.T)
        xi2 = np.conj(np.ascontiguousarray(xi2_star.T))
        if not exact_substeps:
            xi1 = _interpolate_midpoints(xi1)
            xi2 = _interpolate_midpoints(xi2)
        out.append((xi1, xi2))
    return out


def _interpolate_midpoints(values: np.ndarray) -> np.ndarray:
    """(B, n+1) on step edges -> (B, 2n+1) with averaged midpoints."""
    n_traj, n_pts = values.shape
    full = np.empty((n_traj, 2 * n_pts - 1), dtype=values.dtype)
    full[:, ::2] = values
    full[:, 1::2] = 0.5 * (values[:, :-1] + values[:, 1:])
    return full


def _propagate_block(
    model, seeds: np.ndarray, grid: TimeGrid, stride: int, exact_substeps: bool
) -> np.ndarray:
    """Integrate a block of seeds; returns (B, n_recorded, d_s, d_s)."""
    ham: EffectiveHamiltonian = model.hamiltonian
    h0, f_parts = model.dense_parts()
    h0_t = np.ascontiguousarray(h0.T)
    f_ts = [np.ascontiguousarray(f.T) for f in f_parts]
    d_s = ham.dim_s
    dim_h = ham.space.dim
    n_traj = seeds.size

    noise = _synthesize_block_noise(model, seeds, grid.half_times(), exact_substeps)
    psi_f = _initial_block(model, n_traj)
    psi_b = psi_f.copy()

    n_rec = grid.n_steps // stride + 1
    rho = np.empty((n_traj, n_rec, d_s, d_s), dtype=complex)

    def record(slot: int, step: int) -> None:
        vac_f = psi_f.reshape(n_traj, d_s, dim_h)[:, :, 0]
        vac_b = psi_b.reshape(n_traj, d_s, dim_h)[:, :, 0]
        np.einsum("bi,bj->bij", vac_f, np.conj(vac_b), out=rho[:, slot])
        bad = ~np.isfinite(rho[:, slot]).all(axis=(1, 2))
        if bad.any():
            raise NumericalError(seed=int(seeds[np.argmax(bad)]), step=step)

    def deriv(psi: np.ndarray, idx: int, forward: bool) -> np.ndarray:
        out = psi @ h0_t
        for (xi_f, xi_b), f_t in zip(noise, f_ts):
            xi = xi_f[:, idx] if forward else xi_b[:, idx]
            out += xi[:, None] * (psi @ f_t)
        out *= -1j
        return out

    record(0, 0)
    dt = grid.dt
    slot = 1
    for step in range(grid.n_steps):
        i0, i1, i2 = 2 * step, 2 * step + 1, 2 * step + 2
        for forward in (True, False):
            psi = psi_f if forward else psi_b
            k1 = deriv(psi, i0, forward)
            k2 = deriv(psi + (0.5 * dt) * k1, i1, forward)
            k3 = deriv(psi + (0.5 * dt) * k2, i1, forward)
            k4 = deriv(psi + dt * k3, i2, forward)
            psi += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if (step + 1) % stride == 0:
            record(slot, step + 1)
            slot += 1
    return rho


def integrate_trajectory(
    model, seed: int, grid: TimeGrid, stride: int = 1, exact_substeps: bool = True
) -> Trajectory:
    """Single-seed integration; exact resampling of the same realization."""
    rho = _propagate_block(model, np.asarray([seed]), grid, stride, exact_substeps)
    return Trajectory(grid=grid.with_stride(stride), seed=seed, rho=rho[0])


class EnsembleStats:
    """Running mean and standard error of the trajectory average.

    Holds exact sums, so extending is just more folding.  The standard
    error is the sample standard deviation of each real observable
    component divided by sqrt(n); the scalar summary takes the worst
    component at each time.
    """

    def __init__(self, grid: TimeGrid, d_s: int, seed0: int):
        self.grid = grid
        self.d_s = d_s
        self.seed0 = seed0
        self.n = 0
        n_pts = grid.n_points
        n_comp = d_s * d_s - 1
        self._sum_rho = np.zeros((n_pts, d_s, d_s), dtype=complex)
        self._sum_w = np.zeros((n_pts, n_comp))
        self._sum_w2 = np.zeros((n_pts, n_comp))

    def fold(self, rho_series: np.ndarray) -> None:
        """Accumulate one trajectory (callers keep seed order)."""
        w = vectorize_series(rho_series)
        np.add(self._sum_rho, rho_series, out=self._sum_rho)
        np.add(self._sum_w, w, out=self._sum_w)
        np.add(self._sum_w2, w * w, out=self._sum_w2)
        self.n += 1

    @property
    def next_seed(self) -> int:
        return self.seed0 + self.n

    def mean(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no trajectories folded yet")
        return self._sum_rho / self.n

    def se_components(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("standard error needs at least two trajectories")
        var = (self._sum_w2 - self._sum_w * self._sum_w / self.n) / (self.n - 1)
        np.clip(var, 0.0, None, out=var)
        return np.sqrt(var / self.n)

    def se_summary(self) -> np.ndarray:
        return self.se_components().max(axis=1)

    def mean_components(self) -> np.ndarray:
        return self._sum_w / self.n

    def hermiticity_defect(self) -> np.ndarray:
        """Relative Frobenius asymmetry of the mean at each time."""
        mean = self.mean()
        anti = mean - np.conj(np.swapaxes(mean, -1, -2))
        num = np.linalg.norm(anti, axis=(-2, -1))
        den = np.linalg.norm(mean, axis=(-2, -1))
        return num / np.where(den == 0, 1.0, den)

    def copy(self) -> "EnsembleStats":
        dup = EnsembleStats(self.grid, self.d_s, self.seed0)
        dup.n = self.n
        dup._sum_rho = self._sum_rho.copy()
        dup._sum_w = self._sum_w.copy()
        dup._sum_w2 = self._sum_w2.copy()
        return dup


def _aligned_blocks(start: int, stop: int, block: int) -> Iterator[tuple[int, int, int]]:
    """(block_start, keep_from, keep_to) covering [start, stop) on a fixed lattice."""
    first = (start // block) * block
    for b0 in range(first, stop, block):
        yield b0, max(start, b0), min(stop, b0 + block)


def _block_task(args):
    model, seeds, grid, stride, exact_substeps = args
    return _propagate_block(model, seeds, grid, stride, exact_substeps)


def _accumulate(
    model,
    stats: EnsembleStats,
    start: int,
    stop: int,
    grid: TimeGrid,
    stride: int,
    exact_substeps: bool,
    block: int,
    workers: int,
    store: "TrajectoryStore | None",
) -> None:
    specs = []
    for b0, keep_from, keep_to in _aligned_blocks(start, stop, block):
        seeds = np.arange(b0, b0 + block, dtype=np.int64)
        specs.append((seeds, keep_from - b0, keep_to - b0))

    def fold_block(seeds, lo, hi, rho_block):
        for j in range(lo, hi):
            stats.fold(rho_block[j])
            if store is not None:
                store.append(int(seeds[j]), rho_block[j])

    if workers <= 1:
        for seeds, lo, hi in specs:
            fold_block(seeds, lo, hi, _propagate_block(model, seeds, grid, stride, exact_substeps))
    else:
        tasks = [(model, seeds, grid, stride, exact_substeps) for seeds, _, _ in specs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (seeds, lo, hi), rho_block in zip(specs, pool.map(_block_task, tasks)):
                fold_block(seeds, lo, hi, rho_block)


def run_ensemble(
    model,
    n_traj: int,
    grid: TimeGrid,
    seed0: int = 0,
    stride: int = 1,
    exact_substeps: bool = True,
    block: int = DEFAULT_BLOCK,
    workers: int = 1,
    store_path: "str | Path | None" = None,
) -> EnsembleStats:
    """Average n_traj seeded trajectories; optionally persist each one."""
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    recorded = grid.with_stride(stride)
    stats = EnsembleStats(recorded, model.hamiltonian.dim_s, seed0)
    store = None
    if store_path is not None:
        store = TrajectoryStore.create(
            store_path, model_hash=model.model_hash(), grid=recorded, d_s=stats.d_s, seed0=seed0
        )
    try:
        _accumulate(
            model, stats, seed0, seed0 + n_traj, grid, stride, exact_substeps, block, workers, store
        )
    finally:
        if store is not None:
            store.close()
    return stats


def extend_ensemble(
    model,
    stats: EnsembleStats,
    extra: int,
    grid: TimeGrid,
    stride: int = 1,
    exact_substeps: bool = True,
    block: int = DEFAULT_BLOCK,
    workers: int = 1,
    store_path: "str | Path | None" = None,
) -> EnsembleStats:
    """Fold `extra` further seeds into a copy of `stats` and return it.

    Matches a fresh run of stats.n + extra trajectories bit for bit.  When a
    store is given it must already hold exactly the seeds in `stats`, which
    guards against folding one seed twice.
    """
    if extra < 1:
        raise ValueError("need at least one extra trajectory")
    if grid.with_stride(stride) != stats.grid:
        raise ValueError("extension grid does not match the accumulated grid")
    grown = stats.copy()
    store = None
    if store_path is not None:
        store = TrajectoryStore.open(store_path, mode="a")
        store.check_matches(model_hash=model.model_hash(), grid=stats.grid, d_s=stats.d_s)
        if store.seed0 != stats.seed0 or store.n != stats.n:
            raise ValueError(
                f"store holds seeds [{store.seed0}, {store.seed0 + store.n}) but the "
                f"statistics cover [{stats.seed0}, {stats.seed0 + stats.n})"
            )
    start = stats.seed0 + stats.n
    try:
        _accumulate(
            model, grown, start, start + extra, grid, stride, exact_substeps, block, workers, store
        )
    finally:
        if store is not None:
            store.close()
    return grown


_MAGIC = b"NMSSTRAJ"
_HEADER = struct.Struct("<8sI32sqqiqdd")  # magic, version, hash, seed0, n, d_s, n_steps, t0, dt


class TrajectoryStore:
    """Append-only single-file archive of recorded trajectories.

    Little-endian layout: a fixed header holding the format version, the
    model hash, the seed origin, the trajectory count, the system dimension
    and the recorded grid; then one record per trajectory, a signed 64-bit
    seed followed by the complex128 series, time-major then row-major.  The
    count field is rewritten only after a record is fully on disk, so a
    truncated append never corrupts earlier records.
    """

    VERSION = 1

    def __init__(self, path, handle, model_hash, grid, d_s, seed0, n):
        self.path = Path(path)
        self._fh = handle
        self.model_hash = model_hash
        self.grid = grid
        self.d_s = d_s
        self.seed0 = seed0
        self.n = n
        self._record_bytes = 8 + grid.n_points * d_s * d_s * 16

    @classmethod
    def create(cls, path, model_hash: str, grid: TimeGrid, d_s: int, seed0: int) -> "TrajectoryStore":
        raw = bytes.fromhex(model_hash)
        if len(raw) != 32:
            raise ValueError("model hash must be 32 bytes of hex")
        fh = open(path, "w+b")
        fh.write(
            _HEADER.pack(_MAGIC, cls.VERSION, raw, seed0, 0, d_s, grid.n_steps, grid.t0, grid.dt)
        )
        fh.flush()
        return cls(path, fh, model_hash, grid, d_s, seed0, 0)

    @classmethod
    def open(cls, path, mode: str = "r") -> "TrajectoryStore":
        fh = open(path, "r+b" if mode == "a" else "rb")
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            fh.close()
            raise ValueError(f"{path}: truncated header")
        magic, version, raw, seed0, n, d_s, n_steps, t0, dt = _HEADER.unpack(header)
        if magic != _MAGIC:
            fh.close()
            raise ValueError(f"{path}: not a trajectory store")
        if version != cls.VERSION:
            fh.close()
            raise ValueError(f"{path}: unsupported store version {version}")
        grid = TimeGrid(t0=t0, dt=dt, n_steps=n_steps)
        return cls(path, fh, raw.hex(), grid, d_s, seed0, n)

    def check_matches(self, model_hash: str, grid: TimeGrid, d_s: int) -> None:
        if self.model_hash != model_hash:
            raise ValueError(f"{self.path}: store was written by a different model")
        if self.d_s != d_s:
            raise ValueError(f"{self.path}: system dimension mismatch")
        same = (
            self.grid.n_steps == grid.n_steps
            and abs(self.grid.t0 - grid.t0) <= 1e-12
            and abs(self.grid.dt - grid.dt) <= 1e-12 * grid.dt
        )
        if not same:
            raise ValueError(f"{self.path}: time grid mismatch")

    def append(self, seed: int, rho_series: np.ndarray) -> None:
        expected = (self.grid.n_points, self.d_s, self.d_s)
        if rho_series.shape != expected:
            raise ValueError(f"series shape {rho_series.shape} != {expected}")
        self._fh.seek(_HEADER.size + self.n * self._record_bytes)
        self._fh.write(struct.pack("<q", seed))
        self._fh.write(np.ascontiguousarray(rho_series, dtype="<c16").tobytes())
        self._fh.flush()
        self.n += 1
        self._fh.seek(0)
        self._fh.write(
            _HEADER.pack(
                _MAGIC,
                self.VERSION,
                bytes.fromhex(self.model_hash),
                self.seed0,
                self.n,
                self.d_s,
                self.grid.n_steps,
                self.grid.t0,
                self.grid.dt,
            )
        )
        self._fh.flush()

    def read(self, index: int) -> Trajectory:
        if not 0 <= index < self.n:
            raise IndexError(f"record {index} out of range [0, {self.n})")
        self._fh.seek(_HEADER.size + index * self._record_bytes)
        blob = self._fh.read(self._record_bytes)
        (seed,) = struct.unpack_from("<q", blob, 0)
        rho = np.frombuffer(blob, dtype="<c16", offset=8).astype(complex)
        rho = rho.reshape(self.grid.n_points, self.d_s, self.d_s)
        return Trajectory(grid=self.grid, seed=seed, rho=rho)

    def seeds(self) -> np.ndarray:
        return np.asarray([self.read(i).seed for i in range(self.n)], dtype=np.int64)

    def mean(self) -> np.ndarray:
        """Offline recomputation of the ensemble mean from the records."""
        if self.n == 0:
            raise ValueError("empty store")
        total = np.zeros((self.grid.n_points, self.d_s, self.d_s), dtype=complex)
        for i in range(self.n):
            np.add(total, self.read(i).rho, out=total)
        return total / self.n

    def export_csv(self, path) -> None:
        from .report import write_trajectory_csv

        write_trajectory_csv(path, self)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "TrajectoryStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def grid_signature(grid: TimeGrid, stride: int, exact_substeps: bool) -> str:
    """Stable digest of the integration setup, for model hashes and manifests."""
    payload = struct.pack("<ddqq?", grid.t0, grid.dt, grid.n_steps, stride, exact_substeps)
    return hashlib.sha256(payload).hexdigest()
