"""Training, model selection, and autoregressive rollout.

Optimization is adaptive moment estimation over mean squared error.  Early
stopping watches the held-out T2 loss and restores the best weights seen.
A training run is fully determined by the parameter seed, the split seed,
and the data; batches are reshuffled every epoch from one generator seeded
by the split.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..dataset import DatasetSplit, make_windows, split_windows
from .autodiff import Tensor
from .model import ForecastNet, ModelConfig

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainedModel",
    "SearchError",
    "train",
    "grid_search",
    "forecast",
    "ForecastResult",
    "mse",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    patience: int = 10
    finetune_lr_factor: float = 0.1
    finetune_epoch_factor: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.finetune_lr_factor <= 1 or not 0 < self.finetune_epoch_factor <= 1:
            raise ValueError("finetune factors must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch size, and patience must be positive")


class AdaptiveMoments:
    """First/second moment gradient steps with bias correction."""

    def __init__(self, params: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def _eval_loss(model: ForecastNet, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    pred = model.predict(x)
    return float(np.mean((pred - y) ** 2))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (epoch, train_loss, t2_loss)
    best_t2: float = float("inf")
    stopped_epoch: int = 0
    diverged: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "t2_loss"])
            for epoch, train_loss, t2_loss in self.history:
                writer.writerow([epoch, f"{train_loss:.17g}", f"{t2_loss:.17g}"])


def train(
    model: ForecastNet,
    x: np.ndarray,
    y: np.ndarray,
    split: DatasetSplit,
    tc: TrainConfig,
    mode: str = "train",
) -> TrainResult:
    """Fit in place; returns the epoch history.

    mode "train" fits the shuffled T1 windows, "pretrain" fits every
    window, and "finetune" is "train" with the reduced learning rate and
    epoch budget.  All modes stop early on the T2 loss and finish holding
    the best weights that loss selected.
    """
    if mode not in ("train", "pretrain", "finetune"):
        raise ValueError(f"unknown mode {mode!r}")
    lr = tc.learning_rate
    epochs = tc.epochs
    if mode == "finetune":
        lr *= tc.finetune_lr_factor
        epochs = max(1, int(round(epochs * tc.finetune_epoch_factor)))
    train_idx = np.arange(len(x)) if mode == "pretrain" else np.asarray(split.t1)
    if train_idx.size == 0:
        raise ValueError("no training windows for this mode")
    t2_idx = np.asarray(split.t2)

    opt = AdaptiveMoments(
        model.params(), lr=lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps
    )
    rng = np.random.default_rng(split.seed)
    result = TrainResult()
    best_state = model.clone_state()
    stale = 0

    for epoch in range(epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        total = 0.0
        for lo in range(0, order.size, tc.batch_size):
            batch = order[lo : lo + tc.batch_size]
            loss = mse(model.forward(Tensor(x[batch]), training=True), y[batch])
            loss.backward()
            opt.step()
            total += float(loss.data) * batch.size
        train_loss = total / order.size
        t2_loss = _eval_loss(model, x[t2_idx], y[t2_idx])
        result.history.append((epoch, train_loss, t2_loss))
        result.stopped_epoch = epoch

        if not np.isfinite(train_loss):
            result.diverged = True
            break
        if t2_idx.size == 0:
            best_state = model.clone_state()
            continue
        if t2_loss < result.best_t2:
            result.best_t2 = t2_loss
            best_state = model.clone_state()
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                break

    model.load_state(best_state)
    if not result.history:
        raise ValueError("no epochs ran")
    return result


class SearchError(RuntimeError):
    pass


@dataclass
class TrainedModel:
    model: ForecastNet
    config: ModelConfig
    v_loss: float
    result: TrainResult


def grid_search(
    configs,
    series: np.ndarray,
    tc: TrainConfig,
    split_seed: int,
    mode: str = "train",
) -> tuple[TrainedModel, list]:
    """Train every config on windows cut from `series`; best V-loss wins.

    Window sets are rebuilt per config because the window length is part
    of the config.  Ties break toward fewer parameters, then the shorter
    window.  Returns the winner plus a per-config score table.
    """
    configs = list(configs)
    if not configs:
        raise SearchError("no configurations to search")
    table = []
    best = None
    best_key = None
    for i, cfg in enumerate(configs):
        x, y = make_windows(series, cfg.window)
        if len(x) < 8:
            table.append((cfg, float("inf"), "too few windows"))
            continue
        split = split_windows(len(x), split_seed)
        model = ForecastNet(cfg)
        result = train(model, x, y, split, tc, mode=mode)
        if result.diverged:
            table.append((cfg, float("inf"), "diverged"))
            continue
        v_loss = _eval_loss(model, x[split.v], y[split.v])
        table.append((cfg, v_loss, ""))
        key = (v_loss, model.n_params(), cfg.window, i)
        if np.isfinite(v_loss) and (best_key is None or key < best_key):
            best_key = key
            best = TrainedModel(model=model, config=cfg, v_loss=v_loss, result=result)
    if best is None:
        raise SearchError("every configuration failed or diverged")
    return best, table


@dataclass
class ForecastResult:
    values: np.ndarray  # (steps, n_components)
    diverged: bool
    first_bad: int | None

    _BOUND = 1.5


def forecast(model: ForecastNet, seed_window: np.ndarray, steps: int) -> ForecastResult:
    """Autoregressive rollout; flags the first physically impossible step.

    The window always slides over model output, so error can compound;
    any component beyond +-1.5 marks the rollout diverged, though the
    remaining steps are still produced for inspection.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    window = np.array(seed_window, dtype=float)
    expected = (model.config.window, model.config.n_components)
    if window.shape != expected:
        raise ValueError(f"seed window must have shape {expected}, got {window.shape}")
    out = np.empty((steps, window.shape[1]))
    first_bad = None
    with np.errstate(all="ignore"):
        for k in range(steps):
            pred = model.predict(window[None, :, :])[0]
            out[k] = pred
            if first_bad is None and not np.all(np.abs(pred) <= ForecastResult._BOUND):
                first_bad = k
            window = np.vstack([window[1:], pred])
    return ForecastResult(values=out, diverged=first_bad is not None, first_bad=first_bad)
