"""Delimited output and figure rendering for runs, forecasts and reports.

Every writer keeps its output deterministic: floats are printed with
repr-faithful precision (%.17g), rows follow storage order and nothing
embeds a timestamp, so rerunning a seeded job reproduces files byte for
byte.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .dataset import component_names  # noqa: E402

__all__ = [
    "write_delimited",
    "write_stats_csv",
    "read_stats_csv",
    "write_forecast_csv",
    "read_forecast_csv",
    "write_trajectory_csv",
    "plot_populations",
    "plot_standard_error",
    "plot_forecast",
    "plot_deviation",
    "render_report",
]


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return "%.17g" % float(value)


def write_delimited(path, header, rows) -> Path:
    """Comma-separated table with %.17g floats and a fixed newline."""
    path = Path(path)
    header = list(header)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [_fmt(v) for v in row]
            if len(cells) != len(header):
                raise ValueError(f"row width {len(cells)} != header width {len(header)}")
            fh.write(",".join(cells) + "\n")
    return path


def _stats_arrays(stats):
    """Accept an ensemble accumulator or a (times, mean, se) triple."""
    if hasattr(stats, "mean_components"):
        times = stats.grid.times()
        return times, stats.mean_components(), stats.se_components()
    times, mean, se = stats
    return np.asarray(times, float), np.asarray(mean, float), se


def write_stats_csv(path, stats) -> Path:
    """Mean components and their standard errors against time."""
    times, mean, se = _stats_arrays(stats)
    if mean.shape[0] != times.size:
        raise ValueError("mean series and time grid disagree in length")
    d = int(round(np.sqrt(mean.shape[1] + 1)))
    names = component_names(d)
    header = ["t"] + names
    columns = [times, mean]
    if se is not None:
        se = np.asarray(se, float)
        if se.shape != mean.shape:
            raise ValueError("standard errors must match the mean series shape")
        header += [f"se_{n}" for n in names]
        columns.append(se)
    table = np.column_stack(columns)
    return write_delimited(path, header, table)


def write_forecast_csv(path, times, series, tc_index, sd=None) -> Path:
    """Stitched series with a column separating averaged and forecast parts.

    When the spread of the group forecasts is known, one standard
    deviation column per component follows the values.
    """
    times = np.asarray(times, float)
    series = np.asarray(series, float)
    if series.ndim != 2 or series.shape[0] != times.size:
        raise ValueError("series must be (time, component) on the given grid")
    if not 0 <= tc_index <= times.size:
        raise ValueError(f"prefix index {tc_index} outside [0, {times.size}]")
    d = int(round(np.sqrt(series.shape[1] + 1)))
    names = component_names(d)
    header = ["t"] + names
    if sd is not None:
        sd = np.asarray(sd, float)
        if sd.shape != series.shape:
            raise ValueError("spread columns must match the series shape")
        header += [f"sd_{n}" for n in names]
    header += ["segment"]
    rows = []
    for k in range(times.size):
        segment = "mean" if k < tc_index else "forecast"
        row = [times[k], *series[k]]
        if sd is not None:
            row += list(sd[k])
        rows.append(row + [segment])
    return write_delimited(path, header, rows)


def read_forecast_csv(path):
    """Parse a forecast table into (times, series, segments).

    The trailing segment column marks each row as averaged or predicted;
    spread columns, when present, are skipped.
    """
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "t" or header[-1] != "segment":
        raise ValueError(f"{path}: not a forecast table")
    names = header[1:-1]
    n_values = len([n for n in names if not n.startswith("sd_")])
    rows = []
    segments = []
    for line in lines[1:]:
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise ValueError(f"{path}: ragged rows")
        rows.append([float(c) for c in cells[:-1]])
        segments.append(cells[-1])
    data = np.asarray(rows, dtype=float)
    times = data[:, 0]
    series = data[:, 1 : 1 + n_values]
    return times, series, segments


def read_stats_csv(path):
    """Parse a statistics table back into (times, mean, se).

    The standard-error block is optional; a file without it returns
    se=None.  Raises ValueError on any malformed layout.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "t" or len(header) < 2:
        raise ValueError(f"{path}: not a statistics table (header starts {header[:2]})")
    se_cols = [i for i, name in enumerate(header) if name.startswith("se_")]
    n_mean = (min(se_cols) - 1) if se_cols else len(header) - 1
    if se_cols and len(se_cols) != n_mean:
        raise ValueError(f"{path}: {len(se_cols)} error columns for {n_mean} components")
    try:
        data = np.array(
            [[float(c) for c in line.split(",")] for line in lines[1:] if line],
            dtype=float,
        )
    except ValueError as err:
        raise ValueError(f"{path}: non-numeric cell ({err})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    times = data[:, 0]
    mean = data[:, 1 : 1 + n_mean]
    se = data[:, 1 + n_mean :] if se_cols else None
    return times, mean, se


def write_trajectory_csv(path, store) -> Path:
    """Flatten a trajectory archive: one row per stored point in time.

    Columns carry the real and imaginary parts of every density matrix
    entry, 1-based row/column indices.
    """
    d = store.d_s
    header = ["trajectory", "seed", "t"]
    for i in range(d):
        for j in range(d):
            header += [f"re_{i + 1}_{j + 1}", f"im_{i + 1}_{j + 1}"]
    times = store.grid.times()

    def rows():
        for k in range(store.n):
            record = store.read(k)
            flat = record.rho.reshape(times.size, d * d)
            for step in range(times.size):
                row = [k, record.seed, times[step]]
                for entry in flat[step]:
                    row += [entry.real, entry.imag]
                yield row

    return write_delimited(path, header, rows())


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_populations(path, times, mean_rho) -> Path:
    """Diagonal occupations of the averaged density matrix against time."""
    mean_rho = np.asarray(mean_rho)
    fig, ax = plt.subplots(figsize=(7, 4))
    d = mean_rho.shape[1]
    for i in range(d):
        ax.plot(times, mean_rho[:, i, i].real, label=f"site {i + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("population")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_standard_error(path, times, se_summary, eps1=None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(times, np.asarray(se_summary, float), color="tab:blue")
    if eps1 is not None:
        ax.axhline(eps1, color="tab:red", linestyle="--", label=f"threshold {eps1:g}")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("t")
    ax.set_ylabel("max standard error")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    return _save(fig, path)


def plot_forecast(path, times, series, tc_index, sd=None) -> Path:
    """Stitched components with the handover point marked."""
    times = np.asarray(times, float)
    series = np.asarray(series, float)
    d = int(round(np.sqrt(series.shape[1] + 1)))
    names = component_names(d)
    fig, ax = plt.subplots(figsize=(7, 4))
    for c in range(series.shape[1]):
        line, = ax.plot(times[:tc_index], series[:tc_index, c], label=names[c])
        ax.plot(times[tc_index - 1 :], series[tc_index - 1 :, c],
                linestyle="--", color=line.get_color())
        if sd is not None and tc_index < times.size:
            tail = series[tc_index:, c]
            ax.fill_between(times[tc_index:], tail - sd[:, c], tail + sd[:, c],
                            color=line.get_color(), alpha=0.15, linewidth=0)
    if 0 < tc_index < times.size:
        ax.axvline(times[tc_index - 1], color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("t")
    ax.set_ylabel("component value")
    ax.legend(loc="best", fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_deviation(path, times, deviations, labels=None, threshold=None) -> Path:
    """One or several deviation traces on a log scale."""
    deviations = np.atleast_2d(np.asarray(deviations, float))
    labels = labels or [f"series {k + 1}" for k in range(deviations.shape[0])]
    fig, ax = plt.subplots(figsize=(7, 4))
    for row, label in zip(deviations, labels):
        ax.semilogy(times, np.maximum(row, 1e-300), label=label)
    if threshold is not None:
        ax.axhline(threshold, color="tab:red", linestyle="--")
    ax.set_xlabel("t")
    ax.set_ylabel("deviation")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    return _save(fig, path)


def _round_table(rounds) -> list:
    lines = ["round  largest  prefix  max spread    accepted  note"]
    for r in rounds:
        spread = "inf" if not np.isfinite(r.max_sd) else "%.6g" % r.max_sd
        lines.append(
            "%5d  %7d  %6d  %-12s  %-8s  %s"
            % (r.round_index + 1, r.counts[-1], r.t_c, spread,
               "yes" if r.accepted else "no", r.note or "-")
        )
    return lines


def render_report(out_dir, report, basename: str = "") -> dict:
    """Write the text summary, the forecast table and the figures.

    Returns a mapping from artifact kind to path.  Figures cover the
    final stitched series and, when a round completed, the spread of the
    group forecasts.  An empty basename keeps the canonical file names
    (forecast.csv, report.txt); otherwise names are prefixed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    prefix = f"{basename}_" if basename else ""

    if report.final_series is not None:
        best = report.best_round
        full_sd = best.sd if best is not None else None
        forecast_path = out_dir / f"{prefix}forecast.csv"
        write_forecast_csv(
            forecast_path, report.times, report.final_series, report.tc_index, sd=full_sd
        )
        written["forecast"] = forecast_path
        sd_tail = None
        if full_sd is not None:
            sd_tail = full_sd[report.tc_index :]
        written["forecast_figure"] = plot_forecast(
            out_dir / f"{prefix}forecast.png",
            report.times,
            report.final_series,
            report.tc_index,
            sd=sd_tail,
        )
        if best is not None and best.sd is not None:
            written["spread_figure"] = plot_deviation(
                out_dir / f"{prefix}spread.png",
                report.times,
                best.sd.max(axis=1),
                labels=["group spread"],
                threshold=report.eps2,
            )

    lines = []
    lines.append("prediction convergence report")
    lines.append("=" * 29)
    status = "accepted" if report.accepted else (
        "provisional (spread above threshold)" if report.provisional else "failed"
    )
    lines.append(f"status: {status}")
    lines.append(f"thresholds: se {report.eps1:g}, forecast spread {report.eps2:g}")
    lines.append(f"rounds run: {len(report.rounds)}")
    if report.final_series is not None:
        lines.append(f"trusted prefix: {report.tc_index} of {report.times.size} points")
        lines.append(f"handover mismatch: {report.continuity:.6g}")
    if report.config is not None:
        c = report.config
        lines.append(
            "architecture: window %d, lstm units %s, %d outputs"
            % (c.window, "x".join(str(u) for u in c.lstm_units), c.n_components)
        )
    lines.append("")
    lines.extend(_round_table(report.rounds))
    lines.append("")
    for kind in sorted(written):
        lines.append(f"{kind}: {written[kind].name}")
    text_path = out_dir / f"{prefix}report.txt"
    text_path.write_text("\n".join(lines) + "\n")
    written["report"] = text_path
    return written
