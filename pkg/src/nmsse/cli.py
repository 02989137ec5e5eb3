"""Command-line front end.

Verbs cover the full workflow: `simulate` runs an ensemble and writes
statistics, `assess` segments them by standard error, `train` fits the
forecasting network on the trusted prefix, `predict` rolls a trained
network forward, `pipeline` runs the whole refinement loop, and
`export` flattens a finished run into per-panel tables.

Exit codes: 0 success, 2 configuration or input problem, 3 numeric
failure, 4 finished without reaching the convergence target.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .bath import BathCorrelation
from .config import ConfigError, RunConfig, load_config
from .dataset import component_names, devectorize, find_converged_prefix, make_windows, split_windows
from .models import pure_dephasing_coherence
from .nn.model import ForecastNet, load_checkpoint, save_checkpoint
from .nn.train import SearchError, forecast, grid_search, train
from .pipeline import PipelineError, run_pipeline
from .propagator import NumericalError, run_ensemble
from .report import (
    plot_forecast,
    plot_populations,
    plot_standard_error,
    read_forecast_csv,
    read_stats_csv,
    render_report,
    write_delimited,
    write_forecast_csv,
    write_stats_csv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_UNCONVERGED = 4


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError(f"'{args.verb}' needs --config")
    cfg = load_config(args.config)
    if args.n is not None:
        cfg.values["ensemble"]["n"] = args.n
    if args.seed is not None:
        cfg.values["ensemble"]["seed0"] = args.seed
    if args.workers is not None:
        cfg.values["ensemble"]["workers"] = args.workers
    if args.out is not None:
        cfg.values["io"]["out_dir"] = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.values["io"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stats_with_se(path):
    times, mean, se = read_stats_csv(path)
    if se is None:
        raise ConfigError(f"{path} has no standard-error columns; rerun simulate")
    return times, mean, se


def cmd_simulate(args) -> int:
    cfg = _load(args)
    model = cfg.build_model()
    grid = cfg.time_grid()
    out = _out_dir(cfg)
    cfg.echo(out)
    e = cfg.values["ensemble"]
    store_name = cfg.values["io"]["store"]
    store_path = out / store_name if store_name else None
    stats = run_ensemble(
        model,
        e["n"],
        grid,
        seed0=e["seed0"],
        stride=cfg.values["grid"]["stride"],
        exact_substeps=cfg.values["noise"]["exact_substeps"],
        block=e["block"],
        workers=e["workers"],
        store_path=store_path,
    )
    stats_path = write_stats_csv(out / "stats.csv", stats)
    times = stats.grid.times()
    plot_populations(out / "population.png", times, stats.mean())
    plot_standard_error(
        out / "se.png", times, stats.se_summary(), eps1=cfg.values["pipeline"]["eps1"]
    )
    print(f"simulated {stats.n} trajectories of {model.name} on {times.size} points")
    print(f"statistics: {stats_path}")
    if store_path is not None:
        print(f"trajectory store: {store_path}")
    return EXIT_OK


def cmd_assess(args) -> int:
    eps1 = 0.01
    if args.config:
        eps1 = load_config(args.config).values["pipeline"]["eps1"]
    times, mean, se = _stats_with_se(args.stats)
    summary = se.max(axis=1)
    if eps1 > 0:
        count = find_converged_prefix(summary, eps1).count
    else:
        # a zero threshold keeps only the leading exactly-noise-free span
        bad = np.nonzero(summary > 0.0)[0]
        count = int(bad[0]) if bad.size else summary.size
    print(f"threshold: {eps1:g}")
    if count == 0:
        print("no converged prefix (standard error above threshold from the start)")
    else:
        t_c = times[count - 1]
        print(f"converged prefix: {count} of {times.size} points (t_c = {t_c:g})")
        if count == 1:
            print("no converged prefix beyond the deterministic start")
    print(f"converged fraction: {count / times.size:.4f}")
    marks = [0, times.size // 4, times.size // 2, 3 * times.size // 4, times.size - 1]
    profile = "  ".join(f"t={times[k]:g}: {summary[k]:.3e}" for k in sorted(set(marks)))
    print(f"standard-error profile: {profile}")
    return EXIT_OK


def _fit_best(cfg: RunConfig, mean, tc) -> tuple:
    """Architecture search on the prefix, then pretrain + fine-tune."""
    d = int(round(np.sqrt(mean.shape[1] + 1)))
    train_cfg = cfg.train_config()
    split_seed = cfg.values["nn"]["split_seed"]
    best, table = grid_search(cfg.architecture_grid(d), mean[:tc], train_cfg, split_seed)
    net = ForecastNet(best.config)
    x, y = make_windows(mean, best.config.window)
    train(net, x, y, split_windows(len(x), split_seed), train_cfg, mode="pretrain")
    xp, yp = make_windows(mean[:tc], best.config.window)
    result = train(net, xp, yp, split_windows(len(xp), split_seed), train_cfg, mode="finetune")
    return net, best, table, result


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    times, mean, se = _stats_with_se(args.stats)
    eps1 = cfg.values["pipeline"]["eps1"]
    prefix = find_converged_prefix(se.max(axis=1), eps1)
    if prefix.count == 0:
        print("no converged prefix to train on", file=sys.stderr)
        return EXIT_UNCONVERGED
    net, best, table, result = _fit_best(cfg, mean, prefix.count)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, net)
    result.write_csv(out / "train_history.csv")
    rows = [
        [c.window, "x".join(str(u) for u in c.lstm_units), v, note or "-"]
        for c, v, note in table
    ]
    write_delimited(out / "grid.csv", ["window", "units", "v_loss", "note"], rows)
    print(f"prefix: {prefix.count} of {times.size} points at threshold {eps1:g}")
    print(
        "selected window %d, units %s, validation loss %.6g"
        % (best.config.window, "x".join(str(u) for u in best.config.lstm_units), best.v_loss)
    )
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    net = load_checkpoint(args.checkpoint)
    times, mean, se = _stats_with_se(args.stats)
    eps1 = cfg.values["pipeline"]["eps1"]
    horizon = cfg.values["pipeline"]["horizon"]
    if horizon is None:
        raise ConfigError("pipeline.horizon is required for predict")
    window = net.config.window
    if mean.shape[1] != net.config.n_components:
        raise ConfigError(
            f"checkpoint expects {net.config.n_components} components, "
            f"statistics provide {mean.shape[1]}"
        )
    tc = find_converged_prefix(se.max(axis=1), eps1).count
    if tc < window:
        raise ConfigError(
            f"converged prefix ({tc} points) is shorter than the model window ({window})"
        )
    delta = times[1] - times[0]
    total_len = int(round((horizon - times[0]) / delta)) + 1
    steps = total_len - tc
    if steps <= 0:
        raise ConfigError("horizon lies inside the converged prefix; nothing to forecast")
    rolled = forecast(net, mean[tc - window : tc], steps)
    stitched = np.concatenate([mean[:tc], rolled.values], axis=0)
    full_times = times[0] + delta * np.arange(total_len)
    path = write_forecast_csv(out / "forecast.csv", full_times, stitched, tc)
    plot_forecast(out / "forecast.png", full_times, stitched, tc)
    print(f"forecast: {tc} averaged + {steps} predicted points -> {path}")
    if rolled.diverged:
        print(f"forecast diverged at step {rolled.first_bad}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    model = cfg.build_model()
    pcfg = cfg.pipeline_config(model.d_s)
    out = _out_dir(cfg)
    cfg.echo(out)
    store_name = cfg.values["io"]["store"]
    store_path = out / store_name if store_name else None
    report = run_pipeline(model, pcfg, store_path=store_path)
    written = render_report(out, report)
    status = "accepted" if report.accepted else (
        "provisional" if report.provisional else "failed"
    )
    last = report.rounds[-1]
    print(f"{status} after {len(report.rounds)} round(s); final spread {last.max_sd:g}")
    for kind in sorted(written):
        print(f"{kind}: {written[kind]}")
    return EXIT_OK if report.accepted else EXIT_UNCONVERGED


def _oracle_deviation(run_dir: Path, times, series):
    """|coherence| error against the closed form, when one exists (V=0)."""
    config_path = run_dir / "config.ini"
    if not config_path.exists():
        return None
    cfg = load_config(config_path)
    m = cfg.values["model"]
    if m["kind"] != "sbm" or m["v"] != 0.0 or series.shape[1] != 3:
        return None
    model = cfg.build_model()
    bc = BathCorrelation(sd=model.spectral_densities[0], beta=model.beta)
    rho12_0 = complex(model.initial_state[0] * np.conj(model.initial_state[1]))
    oracle = np.abs(pure_dephasing_coherence(bc, m["epsilon"], times, rho12_0=rho12_0))
    measured = np.hypot(series[:, 1], series[:, 2])
    return np.abs(measured - oracle)


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    stats_path = run_dir / "stats.csv"
    forecast_path = run_dir / "forecast.csv"
    missing = [p.name for p in (stats_path, forecast_path) if not p.exists()]
    if missing:
        raise ConfigError(f"{run_dir} is not a completed run; missing {', '.join(missing)}")
    times, mean, se = read_stats_csv(stats_path)
    d = int(round(np.sqrt(mean.shape[1] + 1)))

    populations = np.stack([np.diag(devectorize(row)).real for row in mean])
    pop_header = ["t"] + [f"pop_{i + 1}" for i in range(d)]
    write_delimited(run_dir / "population.csv", pop_header, np.column_stack([times, populations]))
    written = ["population.csv"]

    if se is not None:
        se_header = ["t"] + [f"se_{n}" for n in component_names(d)] + ["se_max"]
        write_delimited(
            run_dir / "se.csv", se_header, np.column_stack([times, se, se.max(axis=1)])
        )
        written.append("se.csv")

    f_times, f_series, _ = read_forecast_csv(forecast_path)
    deviation = _oracle_deviation(run_dir, f_times, f_series)
    if deviation is not None:
        write_delimited(
            run_dir / "deviation.csv",
            ["t", "abs_coherence_error"],
            np.column_stack([f_times, deviation]),
        )
        written.append("deviation.csv")

    written.append("forecast.csv")
    print(f"panels in {run_dir}: " + ", ".join(written))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmsse",
        description="stochastic open-system propagation with learned long-time forecasts",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--out", help="output directory (overrides io.out_dir)")
        p.add_argument("--seed", type=int, help="ensemble seed origin override")
        p.add_argument("--workers", type=int, help="worker process count override")
        p.add_argument("--n", type=int, help="trajectory count override")

    p = sub.add_parser("simulate", help="run an ensemble, write statistics and store")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("assess", help="segment a statistics table by standard error")
    p.add_argument("stats", help="stats.csv from a simulate run")
    common(p)
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("train", help="architecture search and fit on the trusted prefix")
    p.add_argument("stats", help="stats.csv from a simulate run")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="roll a trained network to the horizon")
    p.add_argument("stats", help="stats.csv from a simulate run")
    p.add_argument("checkpoint", help="trained network checkpoint")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("pipeline", help="full refinement loop to a stable forecast")
    common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("export", help="flatten a finished run into per-panel tables")
    p.add_argument("run_dir", help="directory produced by simulate/pipeline")
    common(p)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PipelineError, SearchError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
