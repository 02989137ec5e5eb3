"""Integration, ensemble accumulation, and trajectory persistence."""

import numpy as np
import pytest

from nmsse.bath import NoiseScheme
from nmsse.models import build_sbm
from nmsse.propagator import (
    EnsembleStats,
    NumericalError,
    TimeGrid,
    TrajectoryStore,
    extend_ensemble,
    integrate_trajectory,
    run_ensemble,
)


def small_model(eta=0.5, v=0.0, n_max=4, n_k=64, epsilon=1.0, gamma=5.0, beta=0.5):
    return build_sbm(
        epsilon=epsilon, v=v, eta=eta, gamma=gamma, beta=beta, n_max=n_max, n_k=n_k
    )


class TestTimeGrid:
    def test_points_and_span(self):
        g = TimeGrid.from_span(0.0, 1.0, 0.25)
        assert g.n_steps == 4
        assert g.n_points == 5
        np.testing.assert_allclose(g.times(), [0.0, 0.25, 0.5, 0.75, 1.0])
        assert g.t1 == 1.0

    def test_half_times_interleave(self):
        g = TimeGrid(t0=0.0, dt=0.5, n_steps=2)
        np.testing.assert_allclose(g.half_times(), [0.0, 0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(g.half_times()[::2], g.times())

    def test_ragged_span_rejected(self):
        with pytest.raises(ValueError, match="integer number"):
            TimeGrid.from_span(0.0, 1.0, 0.3)

    def test_bad_dt_rejected(self):
        with pytest.raises(ValueError):
            TimeGrid(t0=0.0, dt=0.0, n_steps=5)

    def test_stride_divides(self):
        g = TimeGrid(t0=0.0, dt=0.1, n_steps=10)
        coarse = g.with_stride(5)
        assert coarse.n_steps == 2
        assert coarse.dt == 0.5
        with pytest.raises(ValueError, match="stride"):
            g.with_stride(3)


def exact_noise_integrals(model, seed, times):
    """Analytic time integrals of the two drives from the seeded mode draws.

    Rebuilds the same normal draws the integrator consumes (one generator
    per seed, baths in order) and integrates each trig mode in closed form,
    giving an oracle that shares no quadrature with the code under test.
    """
    scheme: NoiseScheme = model.noise_schemes[0]
    rng = np.random.default_rng(seed)
    cosc, sinc = scheme.coefficients(scheme.draw(rng))
    k = scheme.k
    int_cos = np.sin(np.outer(times, k)) / k  # integral of cos(ks)
    int_sin = (1.0 - np.cos(np.outer(times, k))) / k  # integral of sin(ks)

    def channel_sum(c_re, c_chi, conj_im):
        sign = -1.0 if conj_im else 1.0
        ccomb = cosc[:, 0] + cosc[:, c_chi] + sign * 1j * cosc[:, 1]
        scomb = sinc[:, 0] + sinc[:, c_chi] + sign * 1j * sinc[:, 1]
        return int_cos @ ccomb + int_sin @ scomb

    int_xi1 = channel_sum(0, 2, conj_im=False)
    int_xi2_star = channel_sum(0, 3, conj_im=True)
    return int_xi1, np.conj(int_xi2_star)


class TestDephasingOracle:
    """With no tunneling each branch integrates in closed form.

    For sigma_z eigenvalue s the vacuum amplitude is
        psi_s(t) = psi_s(0) exp(-i s (eps t + int_0^t xi)) * f(t),
        f(t) = exp(-(d/nu) t + (d/nu^2)(1 - exp(-nu t))),
    with xi the forward drive on the forward branch and the conjugated
    second process on the backward one.  This pins the noise wiring, the
    ladder coupling, and the stepper all at once.
    """

    @pytest.mark.parametrize("seed", [0, 7, 12345])
    def test_trajectory_matches_closed_form(self, seed):
        model = small_model(eta=0.5, n_max=10, n_k=2000)
        grid = TimeGrid.from_span(0.0, 1.0, 1e-3)
        traj = integrate_trajectory(model, seed=seed, grid=grid)

        term = model.hamiltonian.terms[0]
        times = grid.times()
        decay = np.exp(
            -(term.d / term.nu) * times
            + (term.d / term.nu**2) * (1.0 - np.exp(-term.nu * times))
        )
        int_f, int_b = exact_noise_integrals(model, seed, times)
        eps = 1.0
        amp0 = model.initial_state
        psi_f = amp0[None, :] * np.exp(
            -1j * np.array([1.0, -1.0])[None, :] * (eps * times + int_f)[:, None]
        )
        psi_b = amp0[None, :] * np.exp(
            -1j * np.array([1.0, -1.0])[None, :] * (eps * times + int_b)[:, None]
        )
        expected = np.einsum(
            "ti,tj->tij", psi_f * decay[:, None], np.conj(psi_b * decay[:, None])
        )
        np.testing.assert_allclose(traj.rho, expected, rtol=0, atol=1e-4)

    def test_same_seed_is_bitwise_reproducible(self):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.2, 1e-2)
        a = integrate_trajectory(model, seed=11, grid=grid)
        b = integrate_trajectory(model, seed=11, grid=grid)
        assert np.array_equal(a.rho, b.rho)


class TestClosedSystem:
    def exact_rho(self, model, t):
        evals, evecs = np.linalg.eigh(model.h_s)
        u = (evecs * np.exp(-1j * evals * t)) @ np.conj(evecs.T)
        psi = u @ model.initial_state
        return np.outer(psi, np.conj(psi))

    def test_zero_coupling_is_unitary(self):
        model = small_model(eta=0.0, v=0.7)
        grid = TimeGrid.from_span(0.0, 2.0, 1e-3)
        traj = integrate_trajectory(model, seed=0, grid=grid)
        for idx in [0, 500, 2000]:
            expected = self.exact_rho(model, grid.times()[idx])
            np.testing.assert_allclose(traj.rho[idx], expected, atol=1e-9)

    def test_stepper_order_is_four(self):
        model = small_model(eta=0.0, v=0.7)
        errors = []
        for dt in (0.05, 0.025):
            grid = TimeGrid.from_span(0.0, 2.0, dt)
            traj = integrate_trajectory(model, seed=0, grid=grid)
            expected = self.exact_rho(model, 2.0)
            errors.append(np.abs(traj.rho[-1] - expected).max())
        order = np.log2(errors[0] / errors[1])
        assert 3.8 <= order <= 4.2

    def test_interpolated_substeps_stay_close(self):
        model = small_model(eta=0.5)
        grid = TimeGrid.from_span(0.0, 0.5, 1e-3)
        exact = integrate_trajectory(model, seed=5, grid=grid, exact_substeps=True)
        lerp = integrate_trajectory(model, seed=5, grid=grid, exact_substeps=False)
        assert not np.array_equal(exact.rho, lerp.rho)
        np.testing.assert_allclose(lerp.rho, exact.rho, atol=5e-3)


class TestEnsemble:
    def test_initial_point_is_pure_state(self):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        stats = run_ensemble(model, 4, grid, block=4)
        np.testing.assert_allclose(stats.mean()[0], np.full((2, 2), 0.5), atol=1e-14)

    def test_extension_is_bitwise_identical(self):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.2, 1e-2)
        fresh = run_ensemble(model, 7, grid, block=4)
        grown = extend_ensemble(model, run_ensemble(model, 3, grid, block=4), 4, grid, block=4)
        assert np.array_equal(fresh._sum_rho, grown._sum_rho)
        assert np.array_equal(fresh._sum_w, grown._sum_w)
        assert np.array_equal(fresh._sum_w2, grown._sum_w2)
        assert fresh.n == grown.n == 7

    def test_extension_leaves_source_untouched(self):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        base = run_ensemble(model, 3, grid, block=4)
        n_before = base.n
        sums_before = base._sum_rho.copy()
        extend_ensemble(model, base, 2, grid, block=4)
        assert base.n == n_before
        assert np.array_equal(base._sum_rho, sums_before)

    def test_block_size_does_not_change_values(self):
        # same seeds, same per-trajectory results; only batching differs
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        a = run_ensemble(model, 6, grid, block=2)
        b = run_ensemble(model, 6, grid, block=8)
        np.testing.assert_allclose(a._sum_rho, b._sum_rho, rtol=1e-12)

    def test_workers_match_serial(self):
        model = small_model(n_k=32)
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        serial = run_ensemble(model, 6, grid, block=2, workers=1)
        parallel = run_ensemble(model, 6, grid, block=2, workers=2)
        assert np.array_equal(serial._sum_rho, parallel._sum_rho)
        assert np.array_equal(serial._sum_w2, parallel._sum_w2)

    def test_noise_free_ensemble_has_zero_error(self):
        model = small_model(eta=0.0, v=0.3)
        grid = TimeGrid.from_span(0.0, 0.2, 1e-2)
        stats = run_ensemble(model, 3, grid, block=4)
        assert stats.se_summary().max() < 1e-8
        traj = integrate_trajectory(model, seed=0, grid=grid)
        np.testing.assert_allclose(stats.mean(), traj.rho, atol=1e-13)

    def test_standard_error_shrinks_with_n(self):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.2, 1e-2)
        small = run_ensemble(model, 16, grid, block=8)
        big = extend_ensemble(model, small, 48, grid, block=8)
        # factor 2 expected from quadrupling n; allow sampling slack
        assert big.se_summary()[-1] < 0.75 * small.se_summary()[-1]

    def test_recording_stride(self):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.2, 1e-2)
        full = run_ensemble(model, 3, grid, block=4)
        coarse = run_ensemble(model, 3, grid, stride=5, block=4)
        assert coarse.grid.n_points == 5
        np.testing.assert_allclose(coarse.mean(), full.mean()[::5], atol=1e-14)

    def test_hermiticity_defect_small_for_real_pairing(self):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.2, 1e-2)
        stats = run_ensemble(model, 32, grid, block=8)
        defect = stats.hermiticity_defect()
        assert defect[0] < 1e-14
        assert defect.max() < 0.5  # finite-sample value, must stay modest

    def test_mean_requires_data(self):
        stats = EnsembleStats(TimeGrid(0.0, 0.1, 2), d_s=2, seed0=0)
        with pytest.raises(ValueError):
            stats.mean()
        stats.fold(np.zeros((3, 2, 2), dtype=complex))
        with pytest.raises(ValueError):
            stats.se_components()

    def test_divergence_reports_seed(self):
        model = small_model(eta=4.0, gamma=1e4, beta=1.0, n_max=4, n_k=32)
        grid = TimeGrid(t0=0.0, dt=1.0, n_steps=40)
        with pytest.raises(NumericalError, match="seed 2"):
            integrate_trajectory(model, seed=2, grid=grid)


class TestTrajectoryStore:
    def test_round_trip(self, tmp_path):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        path = tmp_path / "traj.bin"
        stats = run_ensemble(model, 5, grid, block=4, store_path=path)
        with TrajectoryStore.open(path) as store:
            assert store.n == 5
            assert store.model_hash == model.model_hash()
            np.testing.assert_array_equal(store.seeds(), np.arange(5))
            direct = integrate_trajectory(model, seed=3, grid=grid)
            rec = store.read(3)
            assert rec.seed == 3
            np.testing.assert_allclose(rec.rho, direct.rho, rtol=1e-12)
            np.testing.assert_allclose(store.mean(), stats.mean(), atol=1e-15)

    def test_append_extends_records(self, tmp_path):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        path = tmp_path / "traj.bin"
        stats = run_ensemble(model, 3, grid, block=4, store_path=path)
        extend_ensemble(model, stats, 2, grid, block=4, store_path=path)
        with TrajectoryStore.open(path) as store:
            assert store.n == 5
            np.testing.assert_array_equal(store.seeds(), np.arange(5))

    def test_seed_collision_rejected(self, tmp_path):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        path = tmp_path / "traj.bin"
        stats = run_ensemble(model, 3, grid, block=4, store_path=path)
        stale = run_ensemble(model, 2, grid, block=4)  # fewer seeds than the store
        with pytest.raises(ValueError, match="store holds seeds"):
            extend_ensemble(model, stale, 2, grid, block=4, store_path=path)

    def test_model_mismatch_rejected(self, tmp_path):
        model = small_model()
        other = small_model(epsilon=2.0)
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        path = tmp_path / "traj.bin"
        stats = run_ensemble(model, 3, grid, block=4, store_path=path)
        with pytest.raises(ValueError, match="different model"):
            extend_ensemble(other, stats, 2, grid, block=4, store_path=path)

    def test_grid_mismatch_rejected(self, tmp_path):
        model = small_model()
        grid = TimeGrid.from_span(0.0, 0.1, 1e-2)
        path = tmp_path / "traj.bin"
        run_ensemble(model, 2, grid, block=4, store_path=path)
        with TrajectoryStore.open(path) as store:
            with pytest.raises(ValueError, match="grid"):
                store.check_matches(model.model_hash(), TimeGrid(0.0, 2e-2, 10), d_s=2)

    def test_non_store_file_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a store at all, just bytes" * 4)
        with pytest.raises(ValueError, match="not a trajectory store"):
            TrajectoryStore.open(path)
