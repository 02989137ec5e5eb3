"""Closed simulate / train / forecast loop with trajectory refinement.

The loop runs in rounds.  A round builds ten nested ensembles (each group
reuses every trajectory of the previous one), trains a forecaster per
group on that group's mean series, rolls each forecaster out to the
horizon, and measures the spread of the ten stitched predictions.  A
round whose worst per-time, per-component standard deviation stays below
the acceptance threshold ends the loop; otherwise every group count is
scaled up and the round repeats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import find_converged_prefix, make_windows, split_windows
from .nn.model import ForecastNet, ModelConfig
from .nn.train import SearchError, TrainConfig, forecast, grid_search, train
from .propagator import DEFAULT_BLOCK, TimeGrid, extend_ensemble, run_ensemble

__all__ = [
    "PipelineConfig",
    "PredictionEnsemble",
    "RoundResult",
    "ConvergenceReport",
    "PipelineError",
    "NMSSESource",
    "SyntheticSource",
    "geometric_group_counts",
    "assess_prediction_stability",
    "stitch",
    "StitchResult",
    "run_pipeline",
]


class PipelineError(RuntimeError):
    pass


def geometric_group_counts(n_total: int, n_groups: int = 10) -> tuple:
    """Roughly geometric ladder from n_total/n_groups up to n_total."""
    if n_total < 2 * n_groups:
        raise ValueError(f"need at least {2 * n_groups} trajectories, got {n_total}")
    ratio = float(n_groups) ** (1.0 / (n_groups - 1))
    counts = []
    for i in range(n_groups):
        raw = int(round(n_total / n_groups * ratio**i))
        if counts:
            raw = max(raw, counts[-1] + 1)
        counts.append(raw)
    counts[-1] = max(n_total, counts[-2] + 1)
    return tuple(counts)


@dataclass(frozen=True)
class PipelineConfig:
    grid: tuple
    horizon: float
    group_counts: tuple
    eps1: float = 0.01
    eps2: float = 0.05
    max_rounds: int = 3
    growth: float = 1.5
    grid_per_group: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    split_seed: int = 0
    # simulation knobs, consumed when the source is built from a model
    time_grid: "TimeGrid | None" = None
    stride: int = 1
    seed0: int = 0
    workers: int = 1
    exact_substeps: bool = True
    block: int = DEFAULT_BLOCK

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "group_counts", tuple(int(c) for c in self.group_counts))
        if not self.grid:
            raise ValueError("need at least one architecture to search")
        if not all(isinstance(c, ModelConfig) for c in self.grid):
            raise ValueError("grid entries must be model configurations")
        counts = self.group_counts
        if len(counts) != 10:
            raise ValueError(f"need exactly 10 group counts, got {len(counts)}")
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError("group counts must increase strictly")
        if counts[0] < 1:
            raise ValueError("group counts must be positive")
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("thresholds must be positive")
        if self.max_rounds < 1:
            raise ValueError("need at least one round")
        if self.growth <= 1.0:
            raise ValueError("growth factor must exceed 1")


@dataclass(frozen=True)
class PredictionEnsemble:
    """Aligned forecast series of the trajectory groups plus their spread."""

    times: np.ndarray
    predictions: np.ndarray  # (n_groups, n_times, n_components)
    sd: np.ndarray  # (n_times, n_components), sample standard deviation

    @classmethod
    def from_series(cls, times: np.ndarray, series: Sequence[np.ndarray]) -> "PredictionEnsemble":
        series = [np.asarray(s, dtype=float) for s in series]
        if len(series) < 2:
            raise ValueError("need at least two prediction series for a spread")
        shape = series[0].shape
        if any(s.shape != shape for s in series):
            raise ValueError("prediction series are not aligned on a common grid")
        times = np.asarray(times, dtype=float)
        if shape[0] != times.size:
            raise ValueError(f"series have {shape[0]} points but the grid has {times.size}")
        stacked = np.stack(series)
        return cls(times=times, predictions=stacked, sd=np.std(stacked, axis=0, ddof=1))


def assess_prediction_stability(pe: PredictionEnsemble, eps2: float) -> tuple:
    """Largest spread anywhere decides acceptance."""
    max_sd = float(np.max(pe.sd))
    return bool(np.isfinite(max_sd) and max_sd <= eps2), max_sd


@dataclass(frozen=True)
class StitchResult:
    series: np.ndarray
    tc: int
    continuity: float


def stitch(stats, tc: int, forecast_values: np.ndarray, start: "int | None" = None) -> StitchResult:
    """Join the trusted ensemble-mean prefix with a model forecast.

    `stats` is either the ensemble accumulator or a plain (time, component)
    array of its mean.  The forecast must begin on the grid point right
    after the prefix; the continuity figure is the largest jump between the
    last trusted value and the first predicted one.
    """
    series = stats.mean_components() if hasattr(stats, "mean_components") else np.asarray(stats)
    forecast_values = np.asarray(forecast_values, dtype=float)
    if forecast_values.size == 0:
        forecast_values = forecast_values.reshape(0, series.shape[1])
    if not 1 <= tc <= series.shape[0]:
        raise ValueError(f"prefix length {tc} outside the series of {series.shape[0]} points")
    if start is None:
        start = tc
    if start > tc:
        raise ValueError(f"gap between prefix end {tc} and forecast start {start}")
    if start < tc:
        raise ValueError(f"forecast start {start} overlaps the prefix ending at {tc}")
    if forecast_values.ndim != 2 or forecast_values.shape[1] != series.shape[1]:
        raise ValueError("forecast components do not match the series")
    stitched = np.concatenate([series[:tc], forecast_values], axis=0)
    if forecast_values.shape[0]:
        continuity = float(np.abs(series[tc - 1] - forecast_values[0]).max())
    else:
        continuity = 0.0
    return StitchResult(series=stitched, tc=tc, continuity=continuity)


class NMSSESource:
    """Nested ensemble means computed on demand from the stochastic solver."""

    def __init__(
        self,
        model,
        grid: TimeGrid,
        stride: int = 1,
        seed0: int = 0,
        workers: int = 1,
        exact_substeps: bool = True,
        block: int = DEFAULT_BLOCK,
        store_path=None,
    ):
        self.model = model
        self.grid = grid
        self.stride = stride
        self.seed0 = seed0
        self.workers = workers
        self.exact_substeps = exact_substeps
        self.block = block
        self.store_path = store_path
        self._stats = None
        self._snapshots = {}

    @property
    def times(self) -> np.ndarray:
        return self.grid.with_stride(self.stride).times()

    @property
    def n_components(self) -> int:
        d = self.model.d_s
        return d * d - 1

    @property
    def n_trajectories(self) -> int:
        return 0 if self._stats is None else self._stats.n

    def group_stats(self, count: int) -> tuple:
        """Mean series and worst-component standard error over seeds [seed0, seed0+count).

        Results are cached per count.  Later rounds revisit counts between
        old snapshots; those prefixes are recomputed with a fresh run,
        which reproduces the accumulated statistics bit for bit because
        trajectory seeds are absolute.
        """
        if count < 1:
            raise ValueError("need at least one trajectory")
        if count not in self._snapshots:
            kwargs = dict(
                stride=self.stride,
                exact_substeps=self.exact_substeps,
                block=self.block,
                workers=self.workers,
            )
            if self._stats is None:
                self._stats = run_ensemble(
                    self.model, count, self.grid, seed0=self.seed0,
                    store_path=self.store_path, **kwargs
                )
                stats = self._stats
            elif count > self._stats.n:
                self._stats = extend_ensemble(
                    self.model, self._stats, count - self._stats.n, self.grid,
                    store_path=self.store_path, **kwargs
                )
                stats = self._stats
            else:
                # prefix of trajectories already folded; rebuild it without
                # touching the persistent store, which holds these seeds
                stats = run_ensemble(
                    self.model, count, self.grid, seed0=self.seed0, **kwargs
                )
            self._snapshots[count] = (stats.mean_components(), stats.se_summary())
        mean, se = self._snapshots[count]
        return mean.copy(), se.copy()


class SyntheticSource:
    """Ground-truth series plus independent per-trajectory noise.

    Trajectory k is truth + scale(t) * z_k with standard normal draws
    seeded by (seed, k), so any prefix mean is reproducible and group
    nesting holds exactly.  Mirrors the solver-source interface.
    """

    def __init__(self, times: np.ndarray, truth: np.ndarray, noise_scale, seed: int = 0):
        self._times = np.asarray(times, dtype=float)
        self.truth = np.asarray(truth, dtype=float)
        if self.truth.ndim != 2 or self.truth.shape[0] != self._times.size:
            raise ValueError("truth must be (time, component) on the given grid")
        scale = np.asarray(noise_scale, dtype=float)
        if scale.ndim == 0:
            scale = np.full(self._times.size, float(scale))
        if scale.shape != self._times.shape:
            raise ValueError("noise scale must be scalar or per time point")
        self.scale = scale
        self.seed = seed
        self._sum = np.zeros_like(self.truth)
        self._sumsq = np.zeros_like(self.truth)
        self.n = 0
        self._snapshots = {}

    @property
    def times(self) -> np.ndarray:
        return self._times.copy()

    @property
    def n_components(self) -> int:
        return self.truth.shape[1]

    def _trajectory(self, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, index])
        return self.truth + self.scale[:, None] * rng.standard_normal(self.truth.shape)

    def group_stats(self, count: int) -> tuple:
        """Prefix mean and worst-component standard error over trajectories 0..count-1.

        Counts below the running total (later rounds restart the group
        ladder) are rebuilt from scratch; per-index seeding makes the
        rebuild agree exactly with the accumulated version.
        """
        if count < 1:
            raise ValueError("need at least one trajectory")
        if count not in self._snapshots:
            if count >= self.n:
                for k in range(self.n, count):
                    vec = self._trajectory(k)
                    self._sum += vec
                    self._sumsq += vec * vec
                self.n = count
                total, totalsq = self._sum, self._sumsq
            else:
                total = np.zeros_like(self.truth)
                totalsq = np.zeros_like(self.truth)
                for k in range(count):
                    vec = self._trajectory(k)
                    total += vec
                    totalsq += vec * vec
            mean = total / count
            if count < 2:
                se = np.full(self._times.size, np.inf)
            else:
                var = (totalsq - total * total / count) / (count - 1)
                se = np.sqrt(np.clip(var, 0.0, None) / count).max(axis=1)
            self._snapshots[count] = (mean, se)
        mean, se = self._snapshots[count]
        return mean.copy(), se.copy()


@dataclass
class RoundResult:
    round_index: int
    counts: tuple
    t_c: int
    max_sd: float
    accepted: bool
    note: str = ""
    sd: "np.ndarray | None" = None
    predictions: "np.ndarray | None" = None
    stitched: "np.ndarray | None" = None
    continuity: float = float("nan")
    config: "ModelConfig | None" = None
    diverged_groups: tuple = ()

    def row(self) -> tuple:
        return (self.counts[-1], self.t_c, self.max_sd, self.accepted)


@dataclass
class ConvergenceReport:
    rounds: list
    accepted: bool
    times: np.ndarray
    final_series: "np.ndarray | None"
    tc_index: int
    continuity: float
    eps1: float
    eps2: float
    config: "ModelConfig | None" = None

    @property
    def provisional(self) -> bool:
        return not self.accepted and self.final_series is not None

    @property
    def best_round(self) -> "RoundResult | None":
        usable = [r for r in self.rounds if r.stitched is not None]
        if not usable:
            return None
        return min(usable, key=lambda r: (not r.accepted, r.max_sd, r.round_index))


def _grow_counts(counts: Iterable[int], growth: float) -> tuple:
    grown = []
    for c in counts:
        raised = int(np.ceil(c * growth))
        if grown:
            raised = max(raised, grown[-1] + 1)
        grown.append(raised)
    return tuple(grown)


def _fit_group(config: ModelConfig, series: np.ndarray, prefix: np.ndarray, cfg: PipelineConfig) -> ForecastNet:
    """Pretrain on the whole mean series, then fine-tune on the trusted prefix."""
    net = ForecastNet(config)
    x, y = make_windows(series, config.window)
    if len(x) == 0:
        raise ValueError("series too short to cut a single training window")
    train(net, x, y, split_windows(len(x), cfg.split_seed), cfg.train, mode="pretrain")
    xp, yp = make_windows(prefix, config.window)
    if len(xp) == 0:
        raise ValueError("converged prefix too short to cut a training window")
    train(net, xp, yp, split_windows(len(xp), cfg.split_seed), cfg.train, mode="finetune")
    return net


def _run_round(source, cfg: PipelineConfig, counts: tuple, total_len: int, round_index: int) -> RoundResult:
    groups = []
    for count in counts:
        mean, se = source.group_stats(count)
        prefix = find_converged_prefix(se, cfg.eps1)
        groups.append((mean, prefix.count))
    t_c = groups[-1][1]
    result = RoundResult(round_index=round_index, counts=counts, t_c=t_c, max_sd=float("inf"), accepted=False)

    shared_config = None
    if not cfg.grid_per_group:
        mean10, tc10 = groups[-1]
        try:
            best, _ = grid_search(cfg.grid, mean10[:tc10], cfg.train, cfg.split_seed)
        except SearchError as err:
            result.note = f"architecture search failed: {err}"
            return result
        shared_config = best.config

    predictions = []
    stitches = []
    diverged = []
    for i, (mean, tc) in enumerate(groups):
        if cfg.grid_per_group:
            try:
                best, _ = grid_search(cfg.grid, mean[:tc], cfg.train, cfg.split_seed)
            except SearchError as err:
                result.note = f"group {i + 1}: architecture search failed: {err}"
                return result
            config = best.config
        else:
            config = shared_config
        prefix_len = min(tc, total_len)
        try:
            net = _fit_group(config, mean, mean[:tc], cfg)
        except ValueError as err:
            result.note = f"group {i + 1}: {err}"
            return result
        steps = total_len - prefix_len
        if steps > 0:
            rolled = forecast(net, mean[tc - config.window : tc], steps)
            diverged.append(bool(rolled.diverged))
            values = rolled.values
        else:
            diverged.append(False)
            values = np.zeros((0, mean.shape[1]))
        stitched = stitch(mean[:prefix_len], prefix_len, values)
        predictions.append(stitched.series)
        stitches.append(stitched)
        if i == len(groups) - 1:
            result.config = config
            result.stitched = stitched.series
            result.continuity = stitched.continuity

    times_full = _full_times(source.times, total_len)
    pe = PredictionEnsemble.from_series(times_full, predictions)
    accepted, max_sd = assess_prediction_stability(pe, cfg.eps2)
    result.sd = pe.sd
    result.predictions = pe.predictions
    result.max_sd = max_sd
    result.accepted = accepted
    result.diverged_groups = tuple(diverged)
    return result


def _full_times(times: np.ndarray, total_len: int) -> np.ndarray:
    delta = times[1] - times[0] if times.size > 1 else 1.0
    return times[0] + delta * np.arange(total_len)


def run_pipeline(source, cfg: PipelineConfig, store_path=None) -> ConvergenceReport:
    """Refine trajectory counts until the forecast spread is acceptable.

    `source` is either a prepared physical model (simulated on demand with
    the config's grid settings) or any object with the group-stats
    interface, such as the synthetic source.
    """
    if not hasattr(source, "group_stats"):
        if cfg.time_grid is None:
            raise PipelineError("running from a model needs a time grid in the config")
        source = NMSSESource(
            source,
            cfg.time_grid,
            stride=cfg.stride,
            seed0=cfg.seed0,
            workers=cfg.workers,
            exact_substeps=cfg.exact_substeps,
            block=cfg.block,
            store_path=store_path,
        )
    for config in cfg.grid:
        if config.n_components != source.n_components:
            raise PipelineError(
                f"architecture expects {config.n_components} components, "
                f"the source provides {source.n_components}"
            )

    times = source.times
    if times.size < 2:
        raise PipelineError("source grid must hold at least two points")
    delta = times[1] - times[0]
    horizon_idx = int(round((cfg.horizon - times[0]) / delta))
    total_len = horizon_idx + 1
    if total_len < 2:
        raise PipelineError(f"horizon {cfg.horizon} lies before the grid start")

    rounds = []
    counts = cfg.group_counts
    for round_index in range(cfg.max_rounds):
        record = _run_round(source, cfg, counts, total_len, round_index)
        rounds.append(record)
        if record.accepted:
            break
        counts = _grow_counts(counts, cfg.growth)

    chosen = None
    for record in rounds:
        if record.accepted:
            chosen = record
            break
    if chosen is None:
        usable = [r for r in rounds if r.stitched is not None]
        chosen = min(usable, key=lambda r: (r.max_sd, r.round_index)) if usable else None

    times_full = _full_times(times, total_len)
    return ConvergenceReport(
        rounds=rounds,
        accepted=chosen.accepted if chosen else False,
        times=times_full,
        final_series=None if chosen is None else chosen.stitched,
        tc_index=chosen.t_c if chosen else 0,
        continuity=chosen.continuity if chosen else float("nan"),
        eps1=cfg.eps1,
        eps2=cfg.eps2,
        config=chosen.config if chosen else None,
    )
