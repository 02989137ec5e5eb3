"""End-to-end acceptance checks, one test per release criterion.

Each test prints a single PASS/FAIL line with its headline numbers so a
verbose run doubles as the release report.  Budgeted wall-clock limits are
asserted alongside the quantitative tolerances.  Everything is seeded; the
heavy cases reuse one process-wide cache so reruns inside a session stay
cheap.
"""

import time

import numpy as np

from nmsse.bath import (
    BathCorrelation,
    NoiseScheme,
    SpectralDensity,
    fit_expansion,
    sample_noise,
    verify_noise_statistics,
)
from nmsse.dataset import find_converged_prefix, make_windows, split_windows
from nmsse.models import build_sbm, pure_dephasing_coherence
from nmsse.nn.autodiff import Tensor, gradient_check
from nmsse.nn.layers import (
    AFF,
    IAFF,
    BatchNorm,
    Conv1d,
    Downsample,
    LSTMLayer,
    MSCAM,
    PWConv,
)
from nmsse.nn.model import ForecastNet, ModelConfig
from nmsse.nn.train import TrainConfig, forecast, grid_search, train
from nmsse.pipeline import (
    PipelineConfig,
    PredictionEnsemble,
    SyntheticSource,
    assess_prediction_stability,
    run_pipeline,
)
from nmsse.propagator import TimeGrid, integrate_trajectory, run_ensemble


def report(name: str, ok: bool, detail: str) -> None:
    print(f"criterion {name}: {'PASS' if ok else 'FAIL'} ({detail})")


# ---------------------------------------------------------------- 1


def test_criterion_01_pure_dephasing_oracle():
    budget = 15 * 60.0
    t0 = time.monotonic()
    model = build_sbm(
        epsilon=1.0, v=0.0, eta=0.5, gamma=5.0, beta=0.5, n_max=6, initial="plus"
    )
    grid = TimeGrid.from_span(0.0, 5.0, 1e-3)
    stats = run_ensemble(model, 2000, grid, seed0=0, stride=5)
    times = stats.grid.times()
    mean = stats.mean_components()
    se = stats.se_components()

    bc = BathCorrelation(sd=model.spectral_densities[0], beta=model.beta)
    oracle = np.abs(pure_dephasing_coherence(bc, 1.0, times, rho12_0=0.5))
    measured = np.hypot(mean[:, 1], mean[:, 2])
    worst = float(np.abs(measured - oracle).max())

    # populations: delta stays at its initial zero within three standard
    # errors of the delta component (the plus state splits 50/50)
    pop_excess = np.abs(mean[:, 0]) - 3.0 * se[:, 0]
    pop_ok = bool(np.all(pop_excess <= 0.0))
    elapsed = time.monotonic() - t0

    ok = worst <= 0.03 and pop_ok and elapsed <= budget
    report(
        "1 pure dephasing",
        ok,
        f"max |rho12| error {worst:.4f} <= 0.03, populations within 3 SE: "
        f"{pop_ok}, {elapsed:.0f}s <= {budget:.0f}s",
    )
    assert worst <= 0.03
    assert pop_ok
    assert elapsed <= budget


# ---------------------------------------------------------------- 2


def test_criterion_02_noise_moment_statistics():
    budget = 5 * 60.0
    t0 = time.monotonic()
    scheme = NoiseScheme(SpectralDensity(eta=0.5, gamma=5.0), beta=0.5)
    grid = TimeGrid.from_span(0.0, 2.0, 0.25)
    realizations = [sample_noise(scheme, grid, seed) for seed in range(10_000)]
    rep = verify_noise_statistics(realizations, scheme_correlation(scheme))
    frac = rep.fraction_within(3.0)
    elapsed = time.monotonic() - t0

    ok = frac >= 0.95 and elapsed <= budget
    report(
        "2 noise statistics",
        ok,
        f"{frac * 100.0:.1f}% of {len(rep.pairs)} pairs within 3 SE, "
        f"{elapsed:.0f}s <= {budget:.0f}s",
    )
    assert frac >= 0.95
    assert elapsed <= budget


def scheme_correlation(scheme: NoiseScheme) -> BathCorrelation:
    return BathCorrelation(sd=scheme.sd, beta=scheme.beta)


# ---------------------------------------------------------------- 3

PARAM_GRID = [(5.0, 5.0), (5.0, 1.0), (5.0, 0.25), (0.5, 5.0), (0.5, 1.0), (0.5, 0.25)]


def test_criterion_03_expansion_exactness():
    worst_res = 0.0
    worst_par = 0.0
    for beta, gamma in PARAM_GRID:
        bc = BathCorrelation(sd=SpectralDensity(eta=0.5, gamma=gamma), beta=beta)
        terms, residual = fit_expansion(bc)
        d_target = -0.5j * 0.5 * gamma
        worst_res = max(worst_res, residual)
        worst_par = max(
            worst_par,
            abs(terms[0].d - d_target) / abs(d_target),
            abs(terms[0].nu - gamma) / gamma,
        )
    ok = worst_res <= 1e-10 and worst_par <= 1e-10
    report(
        "3 expansion exactness",
        ok,
        f"six parameter sets, max residual {worst_res:.2e}, "
        f"max parameter error {worst_par:.2e} <= 1e-10",
    )
    assert worst_res <= 1e-10
    assert worst_par <= 1e-10


# ---------------------------------------------------------------- 4


def probe_loss(out: Tensor, probe_seed: int) -> Tensor:
    probe = Tensor(np.random.default_rng(probe_seed).standard_normal(out.shape))
    return (out * probe).sum()


def test_criterion_04_gradient_suite():
    budget = 2 * 60.0
    t0 = time.monotonic()
    n_instances = 10
    worst = {}

    for i in range(n_instances):
        rng = np.random.default_rng(1000 + i)

        conv = Conv1d(kernel=3, c_in=2, c_out=2, stride=2, rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 2)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(conv(x), i), [x] + list(conv.params().values())
        )
        worst["conv1d"] = max(worst.get("conv1d", 0.0), err)

        down = Downsample(length=24, c_in=2, c_out=3, rng=rng)
        x = Tensor(rng.standard_normal((2, 24, 2)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(down(x), i), [x] + list(down.params().values())
        )
        worst["downsample"] = max(worst.get("downsample", 0.0), err)

        cell = LSTMLayer(c_in=3, units=4, rng=rng)
        x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(cell(x), i), [x] + list(cell.params().values())
        )
        worst["lstm cell"] = max(worst.get("lstm cell", 0.0), err)

        bn = BatchNorm(3)
        x = Tensor(rng.standard_normal((4, 5, 3)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(bn(x, training=True), i),
            [x] + list(bn.params().values()),
        )
        worst["batch norm"] = max(worst.get("batch norm", 0.0), err)

        pw = PWConv(c_in=3, c_out=2, rng=rng)
        x = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(pw(x), i), [x] + list(pw.params().values())
        )
        worst["pwconv"] = max(worst.get("pwconv", 0.0), err)

        # attention composites run in inference mode: biases ahead of a
        # training-mode batch norm have exactly zero gradient, which the
        # relative comparison cannot distinguish from rounding noise
        cam = MSCAM(4, rng)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(cam(x, training=False), i),
            [x] + list(cam.params().values()),
        )
        worst["ms-cam"] = max(worst.get("ms-cam", 0.0), err)

        aff = AFF(4, rng)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        y = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(aff(x, y, training=False), i),
            [x, y] + list(aff.params().values()),
        )
        worst["aff"] = max(worst.get("aff", 0.0), err)

        fuse = IAFF(4, rng)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        y = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(fuse(x, y, training=False), i),
            [x, y] + list(fuse.params().values()),
        )
        worst["iaff"] = max(worst.get("iaff", 0.0), err)

        net = ForecastNet(ModelConfig.for_window(10, 2, (2,), seed=2000 + i))
        x = Tensor(rng.standard_normal((2, 10, 3)), requires_grad=True)
        err = gradient_check(
            lambda *_: probe_loss(net.forward(x, training=False), i),
            [x] + list(net.params().values()),
        )
        worst["assembled model"] = max(worst.get("assembled model", 0.0), err)

    elapsed = time.monotonic() - t0
    overall = max(worst.values())
    ok = overall <= 1e-4 and elapsed <= budget
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(
        "4 gradient suite",
        ok,
        f"{n_instances} instances each, worst {detail}, {elapsed:.0f}s <= {budget:.0f}s",
    )
    assert overall <= 1e-4, worst
    assert elapsed <= budget


# ---------------------------------------------------------------- 5


def test_criterion_05_integrator_order():
    model = build_sbm(epsilon=1.0, v=0.7, eta=0.0, gamma=5.0, beta=0.5, n_max=4, n_k=64)
    evals, evecs = np.linalg.eigh(model.h_s)
    u = (evecs * np.exp(-1j * evals * 2.0)) @ np.conj(evecs.T)
    psi = u @ model.initial_state
    expected = np.outer(psi, np.conj(psi))
    errors = []
    for dt in (0.05, 0.025):
        grid = TimeGrid.from_span(0.0, 2.0, dt)
        traj = integrate_trajectory(model, seed=0, grid=grid)
        errors.append(np.abs(traj.rho[-1] - expected).max())
    order = float(np.log2(errors[0] / errors[1]))
    ok = 3.8 <= order <= 4.2
    report(
        "5 integrator order",
        ok,
        f"halving dt shrinks the error {errors[0]:.2e} -> {errors[1]:.2e}, "
        f"observed order {order:.2f} within 4.0 +/- 0.2",
    )
    assert 3.8 <= order <= 4.2


# ---------------------------------------------------------------- 6


def test_criterion_06_se_scaling():
    model = build_sbm(
        epsilon=1.0, v=1.0, eta=0.5, gamma=5.0, beta=0.5, n_max=4, initial="up"
    )
    grid = TimeGrid.from_span(0.0, 2.0, 2e-3)
    ns = (250, 500, 1000, 2000)
    means = []
    for i, n in enumerate(ns):
        # disjoint seed blocks keep the four ensembles independent
        stats = run_ensemble(model, n, grid, seed0=50_000 * (i + 1), stride=10)
        means.append(float(stats.se_summary()[1:].mean()))
    slope = float(np.polyfit(np.log(ns), np.log(means), 1)[0])
    ok = -0.6 <= slope <= -0.4
    report(
        "6 SE scaling",
        ok,
        f"mean SE {', '.join(f'{m:.4f}' for m in means)} over n={ns}, "
        f"log-log slope {slope:.3f} within -0.5 +/- 0.1",
    )
    assert -0.6 <= slope <= -0.4


# ---------------------------------------------------------------- 7


def test_criterion_07_forecast_benchmark():
    budget = 10 * 60.0
    t0 = time.monotonic()
    t = np.arange(400) * 0.25
    series = np.stack(
        [
            0.8 * np.exp(-t / 60.0) * np.cos(1.1 * t),
            0.5 * np.exp(-t / 45.0) * np.cos(0.7 * t + 0.4),
            0.3 * np.exp(-t / 75.0) * np.sin(0.9 * t),
        ],
        axis=1,
    )
    cut = 240

    configs = [ModelConfig.for_window(w, 2, (32,), 0) for w in (20, 30)]
    search_tc = TrainConfig(epochs=400, patience=40)
    fit_tc = TrainConfig(epochs=1500, patience=200)
    best, _ = grid_search(configs, series[:cut], search_tc, split_seed=0)
    w = best.config.window
    net = ForecastNet(best.config)
    x, y = make_windows(series[:cut], w)
    split = split_windows(len(x), 0)
    train(net, x, y, split, fit_tc, mode="pretrain")
    train(net, x, y, split, fit_tc, mode="finetune")

    rolled = forecast(net, series[cut - w : cut], 400 - cut)
    rmse = float(np.sqrt(np.mean((rolled.values - series[cut:]) ** 2)))
    elapsed = time.monotonic() - t0

    ok = rmse <= 0.05 and not rolled.diverged and elapsed <= budget
    report(
        "7 forecast benchmark",
        ok,
        f"window {w} selected, 160-step rollout RMSE {rmse:.4f} <= 0.05, "
        f"{elapsed:.0f}s <= {budget:.0f}s",
    )
    assert rmse <= 0.05
    assert not rolled.diverged
    assert elapsed <= budget


# ---------------------------------------------------------------- 9


def synthetic_truth(times: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            0.6 * np.exp(-times / 14.0) * np.cos(1.8 * times),
            0.4 * np.exp(-times / 11.0) * np.sin(1.3 * times),
            0.5 * np.exp(-times / 18.0) * np.cos(0.9 * times + 0.3),
        ],
        axis=1,
    )


def test_criterion_09_pipeline_contract():
    # contract examples first: identical series are accepted with zero
    # spread, one offset series among ten is rejected at 0.05
    times = np.linspace(0.0, 1.0, 8)
    flat = [np.full((8, 2), 0.2) for _ in range(10)]
    pe = PredictionEnsemble.from_series(times, flat)
    accepted, max_sd = assess_prediction_stability(pe, 0.05)
    assert accepted and max_sd <= 1e-15

    bumped = [s.copy() for s in flat]
    bumped[3] = bumped[3] + 0.2
    pe = PredictionEnsemble.from_series(times, bumped)
    accepted, max_sd = assess_prediction_stability(pe, 0.05)
    sd_oracle = float(np.std([0.2] + [0.0] * 9, ddof=1))
    assert not accepted
    assert abs(max_sd - sd_oracle) < 1e-12

    # growing synthetic noise: the pipeline must converge within 3 rounds
    # in at least 4 of 5 repetitions
    times = np.arange(80) * 0.25
    truth = synthetic_truth(times)
    scale = 0.004 + 0.35 * (times / times[-1]) ** 6
    grid = [ModelConfig.for_window(15, 2, (16,), 0)]
    wins = 0
    rows = []
    for rep in range(5):
        source = SyntheticSource(times, truth, scale, seed=rep)
        cfg = PipelineConfig(
            grid=grid,
            horizon=float(times[-1]),
            group_counts=tuple(60 * (i + 1) for i in range(10)),
            eps1=0.01,
            eps2=0.05,
            max_rounds=3,
            train=TrainConfig(epochs=120, patience=120, batch_size=8),
            split_seed=rep,
        )
        rep_report = run_pipeline(source, cfg)
        ok = rep_report.accepted and len(rep_report.rounds) <= 3
        wins += int(ok)
        rows.append(
            f"rep {rep}: {'accepted' if ok else 'rejected'} after "
            f"{len(rep_report.rounds)} round(s), max SD "
            f"{rep_report.rounds[-1].max_sd:.4f}"
        )
    ok = wins >= 4
    report(
        "9 pipeline contract",
        ok,
        f"{wins}/5 repetitions converged within 3 rounds at eps2=0.05; "
        + "; ".join(rows),
    )
    assert wins >= 4


# ---------------------------------------------------------------- 10

DETERMINISM_CONFIG = """
[model]
kind = sbm
epsilon = 1.0
v = 0.0
eta = 0.5
gamma = 5.0
beta = 0.5
n_max = 2

[bath]
n_k = 64

[grid]
dt = 0.02
t1 = 1.2

[ensemble]
n = 24
seed0 = 0

[nn]
windows = 15
units = 8
epochs = 4
patience = 4
seed = 0
split_seed = 0

[pipeline]
horizon = 1.5
eps1 = 0.2
eps2 = 0.5
groups = 8 10 12 14 16 20 24 28 32 40
max_rounds = 1
"""


def run_cli(args):
    from nmsse.cli import main

    code = main([str(a) for a in args])
    assert code in (0, 4)
    return code


def test_criterion_10_determinism(tmp_path):
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(DETERMINISM_CONFIG)
    artifacts = {}
    for label in ("first", "second"):
        out = tmp_path / label
        run_cli(["simulate", "--config", cfg_path, "--out", out])
        run_cli(["train", out / "stats.csv", "--config", cfg_path, "--out", out])
        run_cli(["pipeline", "--config", cfg_path, "--out", out / "pipe"])
        artifacts[label] = {
            "stats.csv": (out / "stats.csv").read_bytes(),
            "checkpoint.npz": (out / "checkpoint.npz").read_bytes(),
            "forecast.csv": (out / "pipe" / "forecast.csv").read_bytes(),
        }
    same = {
        name: artifacts["first"][name] == artifacts["second"][name]
        for name in artifacts["first"]
    }
    ok = all(same.values())
    sizes = ", ".join(
        f"{name} {len(artifacts['first'][name])} bytes" for name in sorted(same)
    )
    report(
        "10 determinism",
        ok,
        f"two end-to-end runs byte-identical ({sizes})",
    )
    assert same == {"stats.csv": True, "checkpoint.npz": True, "forecast.csv": True}
