"""Sectioned run configuration.

A run is described by an INI file; every key is schema-checked before
any computation starts, and unknown sections or keys are hard errors so
a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .models import PreparedModel, build_fmo, build_sbm
from .nn.model import ModelConfig
from .nn.train import TrainConfig
from .pipeline import PipelineConfig, geometric_group_counts
from .propagator import DEFAULT_BLOCK, TimeGrid

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Malformed, incomplete or unknown configuration input."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple:
    return tuple(int(tok) for tok in text.split())


def _parse_unit_stacks(text: str) -> tuple:
    """Space-separated stacks, comma-separated widths inside a stack."""
    stacks = []
    for token in text.split():
        stacks.append(tuple(int(part) for part in token.split(",")))
    if not stacks:
        raise ValueError("no unit stacks given")
    return tuple(stacks)


# section -> key -> (parser, default); _REQUIRED means the key must appear
_REQUIRED = object()

_SCHEMA = {
    "model": {
        "kind": (str.strip, _REQUIRED),
        "epsilon": (float, 1.0),
        "v": (float, 0.0),
        "eta": (float, 0.5),
        "gamma": (float, 1.0),
        "beta": (float, 1.0),
        "n_max": (int, 2),
        "initial": (str.strip, "plus"),
        "temperature_k": (float, 300.0),
        "reorganization_cm": (float, 35.0),
        "bath_rate_per_fs": (float, 0.02),
        "initial_site": (int, 1),
        "n_sites": (int, 7),
    },
    "grid": {
        "t0": (float, 0.0),
        "dt": (float, _REQUIRED),
        "t1": (float, None),
        "n_steps": (int, None),
        "stride": (int, 1),
    },
    "ensemble": {
        "n": (int, 100),
        "seed0": (int, 0),
        "workers": (int, 1),
        "block": (int, DEFAULT_BLOCK),
    },
    "noise": {
        "exact_substeps": (_parse_bool, True),
        "scheme": (str.strip, "direct-omega"),
    },
    "bath": {
        "n_k": (int, 2000),
        "k_max": (float, 0.0),
    },
    "nn": {
        "windows": (_parse_ints, (20, 30, 40, 50, 60)),
        "units": (_parse_unit_stacks, ((16,), (32,), (64,), (128,))),
        "seed": (int, 0),
        "split_seed": (int, 0),
        "learning_rate": (float, 1e-3),
        "epochs": (int, 200),
        "batch_size": (int, 32),
        "patience": (int, 10),
        "finetune_lr_factor": (float, 0.1),
        "finetune_epoch_factor": (float, 0.3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
    },
    "pipeline": {
        "horizon": (float, None),
        "eps1": (float, 0.01),
        "eps2": (float, 0.05),
        "max_rounds": (int, 3),
        "growth": (float, 1.5),
        "groups": (_parse_ints, None),
        "grid_per_group": (_parse_bool, False),
    },
    "io": {
        "out_dir": (str.strip, "."),
        "basename": (str.strip, "run"),
        "store": (str.strip, ""),
    },
}

_SBM_KEYS = {"epsilon", "v", "eta", "gamma", "beta", "n_max", "initial"}
_FMO_KEYS = {
    "temperature_k",
    "n_max",
    "reorganization_cm",
    "bath_rate_per_fs",
    "initial_site",
    "n_sites",
}


@dataclass
class RunConfig:
    """Typed view of one configuration file."""

    values: dict
    source_text: str = ""
    path: "Path | None" = None

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def build_model(self) -> PreparedModel:
        m = self.values["model"]
        bath = self.values["bath"]
        kind = m["kind"]
        if kind == "sbm":
            return build_sbm(
                epsilon=m["epsilon"],
                v=m["v"],
                eta=m["eta"],
                gamma=m["gamma"],
                beta=m["beta"],
                n_max=m["n_max"],
                initial=m["initial"],
                n_k=bath["n_k"],
                k_max=bath["k_max"],
            )
        if kind == "fmo":
            return build_fmo(
                temperature_k=m["temperature_k"],
                n_max=m["n_max"],
                reorganization_cm=m["reorganization_cm"],
                bath_rate_per_fs=m["bath_rate_per_fs"],
                initial_site=m["initial_site"],
                n_sites=m["n_sites"],
                n_k=bath["n_k"],
                k_max=bath["k_max"],
            )
        raise ConfigError(f"model.kind must be 'sbm' or 'fmo', got {kind!r}")

    def time_grid(self) -> TimeGrid:
        g = self.values["grid"]
        if g["n_steps"] is not None:
            return TimeGrid(t0=g["t0"], dt=g["dt"], n_steps=g["n_steps"])
        if g["t1"] is None:
            raise ConfigError("grid needs either t1 or n_steps")
        return TimeGrid.from_span(g["t0"], g["t1"], g["dt"])

    def train_config(self) -> TrainConfig:
        nn = self.values["nn"]
        try:
            return TrainConfig(
                learning_rate=nn["learning_rate"],
                epochs=nn["epochs"],
                batch_size=nn["batch_size"],
                patience=nn["patience"],
                finetune_lr_factor=nn["finetune_lr_factor"],
                finetune_epoch_factor=nn["finetune_epoch_factor"],
                beta1=nn["beta1"],
                beta2=nn["beta2"],
                eps=nn["eps"],
            )
        except ValueError as err:
            raise ConfigError(f"nn section: {err}") from None

    def architecture_grid(self, d_s: int) -> tuple:
        nn = self.values["nn"]
        grid = []
        for window in nn["windows"]:
            for units in nn["units"]:
                try:
                    grid.append(ModelConfig.for_window(window, d_s, units, nn["seed"]))
                except ValueError as err:
                    raise ConfigError(f"nn grid entry (window {window}): {err}") from None
        return tuple(grid)

    def pipeline_config(self, d_s: int) -> PipelineConfig:
        p = self.values["pipeline"]
        e = self.values["ensemble"]
        if p["horizon"] is None:
            raise ConfigError("pipeline.horizon is required for forecasting commands")
        counts = p["groups"]
        if counts is None:
            try:
                counts = geometric_group_counts(e["n"])
            except ValueError as err:
                raise ConfigError(f"ensemble.n: {err}") from None
        try:
            return PipelineConfig(
                grid=self.architecture_grid(d_s),
                horizon=p["horizon"],
                group_counts=counts,
                eps1=p["eps1"],
                eps2=p["eps2"],
                max_rounds=p["max_rounds"],
                growth=p["growth"],
                grid_per_group=p["grid_per_group"],
                train=self.train_config(),
                split_seed=self.values["nn"]["split_seed"],
                time_grid=self.time_grid(),
                stride=self.values["grid"]["stride"],
                seed0=e["seed0"],
                workers=e["workers"],
                exact_substeps=self.values["noise"]["exact_substeps"],
                block=e["block"],
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def echo(self, out_dir) -> Path:
        """Copy the parsed configuration text next to the outputs."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        target = out_dir / "config.ini"
        target.write_text(self.source_text)
        return target


def parse_config(text: str, path=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse configuration: {err}") from None

    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown section [{section}]; expected one of {sorted(_SCHEMA)}"
            )
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {section}.{key}; allowed: {sorted(_SCHEMA[section])}"
                )

    for section, keys in _SCHEMA.items():
        out = {}
        for key, (convert, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    out[key] = convert(raw)
                except ValueError as err:
                    raise ConfigError(f"{section}.{key}: {err}") from None
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key {section}.{key}")
            else:
                out[key] = default
        values[section] = out

    _validate(values)
    return RunConfig(values=values, source_text=text, path=path)


def _validate(values: dict) -> None:
    kind = values["model"]["kind"]
    if kind not in ("sbm", "fmo"):
        raise ConfigError(f"model.kind must be 'sbm' or 'fmo', got {kind!r}")
    grid = values["grid"]
    if grid["dt"] <= 0:
        raise ConfigError("grid.dt must be positive")
    if grid["t1"] is not None and grid["n_steps"] is not None:
        raise ConfigError("give grid.t1 or grid.n_steps, not both")
    if grid["stride"] < 1:
        raise ConfigError("grid.stride must be at least 1")
    e = values["ensemble"]
    if e["n"] < 1:
        raise ConfigError("ensemble.n must be at least 1")
    if e["workers"] < 1 or e["block"] < 1:
        raise ConfigError("ensemble.workers and ensemble.block must be at least 1")
    if e["seed0"] < 0:
        raise ConfigError("ensemble.seed0 must be non-negative")
    scheme = values["noise"]["scheme"]
    if scheme != "direct-omega":
        raise ConfigError(
            f"noise.scheme {scheme!r} is not implemented; only 'direct-omega' "
            "(identify k with the bath frequency axis) is available"
        )
    bath = values["bath"]
    if bath["n_k"] < 2:
        raise ConfigError("bath.n_k must be at least 2")
    if bath["k_max"] < 0:
        raise ConfigError("bath.k_max must be non-negative (0 selects the default span)")
    p = values["pipeline"]
    if p["groups"] is not None:
        if len(p["groups"]) != 10 or any(
            b <= a for a, b in zip(p["groups"], p["groups"][1:])
        ):
            raise ConfigError("pipeline.groups must be 10 strictly increasing counts")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    return parse_config(text, path=path)
