import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trialtensor import (
    DataError,
    Hyperprior,
    NumericalError,
    SamplerSchedule,
    SparseTensor,
    gibbs_step,
    init_model,
    load_checkpoint,
    predict_cell,
    predict_cells,
    row_posterior,
    run,
    sample_mode_hyperparams,
    sample_mode_latents,
    sample_mvn,
    sample_wishart,
    save_checkpoint,
)
from trialtensor.rng import StreamTree


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestInitModel:
    def test_latent_shapes(self):
        state = init_model((3, 2, 4), 32, seed=0)
        assert state.latents[0].shape == (3, 32)
        assert state.latents[1].shape == (2, 32)
        assert state.latents[2].shape == (4, 32)
        assert state.params[0].mean.shape == (32,)

    def test_deterministic(self):
        a = init_model((5, 4, 3), 8, seed=9)
        b = init_model((5, 4, 3), 8, seed=9)
        for mat_a, mat_b in zip(a.latents, b.latents):
            assert np.array_equal(mat_a, mat_b)

    def test_column_means_near_zero(self):
        # Monte Carlo check of the standard-normal initializer.
        state = init_model((10_000, 2, 2), 4, seed=3)
        means = state.latents[0].mean(axis=0)
        assert np.all(np.abs(means) < 4.0 / np.sqrt(10_000))

    def test_bad_args(self):
        with pytest.raises(ValueError):
            init_model((2, 2, 2), 0)
        with pytest.raises(ValueError):
            init_model((2, 2, 2), 4, alpha=-1.0)


class TestSampleWishart:
    def test_samples_are_spd(self):
        rng = _rng(1)
        scale = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 1.5]])
        for _ in range(200):
            sample = sample_wishart(scale, 6.0, rng)
            np.linalg.cholesky(sample)  # raises if not SPD

    def test_identity_moments_d2(self):
        rng = _rng(2)
        n = 20_000
        total = np.zeros((2, 2))
        for _ in range(n):
            total += sample_wishart(np.eye(2), 5.0, rng)
        mean = total / n
        # Var(W_ij) = nu * (W0_ij^2 + W0_ii * W0_jj)
        se_diag = np.sqrt(2 * 5.0 / n)
        se_off = np.sqrt(5.0 / n)
        assert abs(mean[0, 0] - 5.0) < 3 * se_diag
        assert abs(mean[1, 1] - 5.0) < 3 * se_diag
        assert abs(mean[0, 1]) < 3 * se_off

    def test_scalar_chi_square_moments(self):
        rng = _rng(3)
        n = 20_000
        draws = np.array([sample_wishart(np.array([[2.0]]), 3.0, rng)[0, 0] for _ in range(n)])
        # scalar Wishart(2, 3) = 2 * chi2(3): mean 6, variance 2 * 3 * 4 = 24
        assert abs(draws.mean() - 6.0) < 3 * np.sqrt(24.0 / n)
        assert abs(draws.var() - 24.0) < 0.15 * 24.0

    def test_not_spd(self):
        with pytest.raises(NumericalError, match="scale matrix not SPD"):
            sample_wishart(np.array([[1.0, 2.0], [2.0, 1.0]]), 5.0, _rng())

    def test_dof_below_dim(self):
        with pytest.raises(ValueError):
            sample_wishart(np.eye(3), 2.0, _rng())


class TestSampleMvn:
    def test_identity_covariance(self):
        rng = _rng(4)
        draws = np.array([sample_mvn(np.zeros(2), np.eye(2), rng) for _ in range(20_000)])
        cov = np.cov(draws.T)
        se = 3.0 / np.sqrt(20_000)
        assert np.all(np.abs(cov - np.eye(2)) < 3 * se + 0.01)
        assert np.all(np.abs(draws.mean(axis=0)) < 3.0 / np.sqrt(20_000))

    def test_correlated_precision(self):
        rng = _rng(5)
        precision = np.array([[2.0, 1.0], [1.0, 2.0]])
        expected = np.linalg.inv(precision)  # [[2/3, -1/3], [-1/3, 2/3]]
        draws = np.array([sample_mvn(np.zeros(2), precision, rng) for _ in range(20_000)])
        cov = np.cov(draws.T)
        assert np.all(np.abs(cov - expected) < 0.02)

    def test_concentration_at_high_precision(self):
        rng = _rng(6)
        mean = np.array([0.4, -0.2])
        draws = np.array([sample_mvn(mean, 1e6 * np.eye(2), rng) for _ in range(5_000)])
        within = np.all(np.abs(draws - mean) < 0.005, axis=1)
        assert within.mean() >= 0.99

    def test_not_spd(self):
        with pytest.raises(NumericalError, match="precision not SPD"):
            sample_mvn(np.zeros(2), np.array([[1.0, 3.0], [3.0, 1.0]]), _rng())


class TestModeHyperparams:
    def test_empty_mode_rejected(self):
        with pytest.raises(ValueError, match="empty mode"):
            sample_mode_hyperparams(np.empty((0, 3)), Hyperprior.default(3), _rng())

    def test_mean_collapses_onto_prior_mean(self):
        # All rows equal to the prior mean and a huge prior strength pin the
        # posterior mean at the prior mean exactly; the draw then has
        # negligible spread.
        prior_mean = np.array([0.7, -1.2])
        hyper = Hyperprior(
            mean=prior_mean, mean_strength=1e12, precision_scale=np.eye(2), dof=2.0
        )
        latents = np.tile(prior_mean, (50, 1))
        params = sample_mode_hyperparams(latents, hyper, _rng(7))
        assert np.allclose(params.mean, prior_mean, atol=1e-4)

    def test_posterior_consistency(self):
        # With many rows from a known Gaussian, the sampled precision
        # concentrates on the generating precision.
        rng = _rng(8)
        true_precision = np.array([[2.0, 0.5], [0.5, 1.5]])
        cov = np.linalg.inv(true_precision)
        rows = rng.multivariate_normal(np.zeros(2), cov, size=10_000)
        hyper = Hyperprior.default(2)
        draws = np.zeros((2, 2))
        n_draws = 200
        for _ in range(n_draws):
            draws += sample_mode_hyperparams(rows, hyper, rng).precision
        mean_precision = draws / n_draws
        assert np.all(np.abs(mean_precision - true_precision) <= 0.1 * np.abs(true_precision) + 0.02)


class TestRowPosterior:
    def test_dense_algebra_oracle(self):
        # Brute-force dense construction of the same conditional.
        lam = np.array([[1.5, 0.2], [0.2, 2.0]])
        mu = np.array([0.3, -0.1])
        alpha = 7.0
        q = np.array([[0.5, -1.0], [1.25, 0.75]])
        y = np.array([0.9, 0.2])
        precision, mean = row_posterior(lam, mu, alpha, q, y)
        expected_p = lam + alpha * (np.outer(q[0], q[0]) + np.outer(q[1], q[1]))
        expected_m = np.linalg.inv(expected_p) @ (lam @ mu + alpha * (y[0] * q[0] + y[1] * q[1]))
        assert np.allclose(precision, expected_p, atol=1e-12)
        assert np.allclose(mean, expected_m, atol=1e-12)


def _make_state(tensor, n_latent=2, alpha=5.0, seed=0):
    return init_model(tensor.dims, n_latent, alpha=alpha, seed=seed)


class TestModeLatents:
    def test_unobserved_entity_draws_from_prior(self):
        # Entity 0 of mode 0 has no cells; its redraw should follow the mode
        # prior. Averaging over many sweeps checks the prior mean.
        tensor = SparseTensor.from_entries((3, 2, 2), [(1, 0, 0, 0.5), (2, 1, 1, 0.25)])
        state = _make_state(tensor, n_latent=2, seed=1)
        prior_mean = np.array([1.0, -0.5])
        state.params[0].mean = prior_mean
        state.params[0].precision = 4.0 * np.eye(2)
        tree = StreamTree(state.seed)
        total = np.zeros(2)
        n = 3000
        for sweep in range(n):
            state.sweep = sweep
            total += sample_mode_latents(state, tensor, 0, tree)[0]
        avg = total / n
        se = 0.5 / np.sqrt(n)
        assert np.all(np.abs(avg - prior_mean) < 4 * se)

    def test_high_alpha_pins_single_observation(self):
        # D=1, one observation y with other-mode product q: the draw
        # approaches y / q as alpha grows.
        tensor = SparseTensor.from_entries((1, 1, 1), [(0, 0, 0, 0.8)])
        state = _make_state(tensor, n_latent=1, alpha=1e8, seed=2)
        state.latents[1][0, 0] = 2.0
        state.latents[2][0, 0] = 1.0
        new_rows = sample_mode_latents(state, tensor, 0, StreamTree(2))
        assert abs(new_rows[0, 0] - 0.8 / 2.0) < 1e-3


class TestGibbsStep:
    def test_state_changes_and_is_deterministic(self, tiny_tensor):
        state_a = _make_state(tiny_tensor, n_latent=3, seed=5)
        before = [m.copy() for m in state_a.latents]
        tree = StreamTree(5)
        gibbs_step(state_a, tiny_tensor, tree)
        assert any(not np.array_equal(b, m) for b, m in zip(before, state_a.latents))
        assert state_a.sweep == 1

        state_b = _make_state(tiny_tensor, n_latent=3, seed=5)
        for _ in range(3):
            gibbs_step(state_b, tiny_tensor, tree)
        state_c = _make_state(tiny_tensor, n_latent=3, seed=5)
        for _ in range(3):
            gibbs_step(state_c, tiny_tensor, tree)
        for mat_b, mat_c in zip(state_b.latents, state_c.latents):
            assert np.array_equal(mat_b, mat_c)

    def test_parallel_equals_serial(self, tiny_tensor):
        serial = _make_state(tiny_tensor, n_latent=4, seed=6)
        threaded = _make_state(tiny_tensor, n_latent=4, seed=6)
        tree = StreamTree(6)
        for _ in range(3):
            gibbs_step(serial, tiny_tensor, tree, n_threads=1)
            gibbs_step(threaded, tiny_tensor, tree, n_threads=4)
        for mat_s, mat_t in zip(serial.latents, threaded.latents):
            assert np.array_equal(mat_s, mat_t)

    def test_dims_mismatch(self, tiny_tensor):
        state = init_model((4, 2, 4), 2, seed=0)
        with pytest.raises(DataError):
            gibbs_step(state, tiny_tensor, StreamTree(0))


class TestPredict:
    def test_rank_one_product(self):
        state = init_model((1, 1, 1), 3, seed=0)
        state.latents[0][0] = [1.0, 0.0, 0.0]
        state.latents[1][0] = [1.0, 0.0, 0.0]
        state.latents[2][0] = [0.6, 0.0, 0.0]
        assert predict_cell(state, 0, 0, 0) == pytest.approx(0.6)

    @pytest.mark.parametrize("w,expected", [(1.4, 1.0), (-0.2, 0.0)])
    def test_clamp(self, w, expected):
        state = init_model((1, 1, 1), 1, seed=0)
        state.latents[0][0] = [1.0]
        state.latents[1][0] = [1.0]
        state.latents[2][0] = [w]
        assert predict_cell(state, 0, 0, 0) == expected

    def test_out_of_range(self):
        state = init_model((2, 2, 2), 1, seed=0)
        with pytest.raises(DataError):
            predict_cell(state, 2, 0, 0)

    def test_sign_flip_invariance(self):
        # Negating one latent column in exactly two modes leaves every
        # prediction unchanged.
        state = init_model((6, 5, 4), 3, seed=11)
        coords = np.array([(i, j, k) for i in range(6) for j in range(5) for k in range(4)])
        baseline = predict_cells(state, coords)
        for first, second in [(0, 1), (0, 2), (1, 2)]:
            flipped = copy.deepcopy(state)
            flipped.latents[first][:, 1] *= -1.0
            flipped.latents[second][:, 1] *= -1.0
            assert np.max(np.abs(predict_cells(flipped, coords) - baseline)) <= 1e-12


class TestSchedule:
    @given(samples=st.integers(1, 10_000), thin=st.integers(1, 500))
    def test_retained_law(self, samples, thin):
        assert SamplerSchedule(0, samples, thin).retained == samples // thin

    def test_invalid(self):
        with pytest.raises(ValueError):
            SamplerSchedule(-1, 10, 1)
        with pytest.raises(ValueError):
            SamplerSchedule(0, 10, 0)

    def test_paper_defaults_retain_ten(self):
        assert SamplerSchedule().retained == 10


class TestRun:
    def test_single_sample_schedule_equals_one_step(self, tiny_tensor):
        state = _make_state(tiny_tensor, n_latent=2, seed=13)
        queries = [(0, 0, 0), (2, 1, 3)]
        result = run(state, tiny_tensor, SamplerSchedule(0, 1, 1), queries)
        assert result.retained == 1

        replay = _make_state(tiny_tensor, n_latent=2, seed=13)
        gibbs_step(replay, tiny_tensor, StreamTree(13))
        expected = predict_cells(replay, np.array(queries))
        assert result.predictions[(0, 0, 0)] == pytest.approx(expected[0], abs=1e-15)
        assert result.predictions[(2, 1, 3)] == pytest.approx(expected[1], abs=1e-15)

    def test_retained_count(self, tiny_tensor):
        state = _make_state(tiny_tensor, seed=3)
        result = run(state, tiny_tensor, SamplerSchedule(2, 10, 3), [(0, 0, 0)])
        assert result.retained == 3

    def test_predictions_clamped(self, tiny_tensor):
        state = _make_state(tiny_tensor, seed=3)
        result = run(state, tiny_tensor, SamplerSchedule(1, 4, 2), [(0, 0, 0), (1, 1, 1)])
        assert all(0.0 <= v <= 1.0 for v in result.predictions.values())

    def test_empty_retention_rejected(self, tiny_tensor):
        state = _make_state(tiny_tensor)
        with pytest.raises(ValueError):
            run(state, tiny_tensor, SamplerSchedule(0, 3, 5), [(0, 0, 0)])

    def test_query_out_of_range(self, tiny_tensor):
        state = _make_state(tiny_tensor)
        with pytest.raises(DataError):
            run(state, tiny_tensor, SamplerSchedule(0, 1, 1), [(9, 0, 0)])

    def test_noiseless_rank_one_recovery(self):
        # Fully observed rank-1 tensor, alpha = 100: averaged predictions
        # after 200 total sweeps reproduce the table of products closely.
        rng = np.random.default_rng(21)
        u = rng.uniform(0.4, 0.95, size=10)
        v = rng.uniform(0.4, 0.95, size=8)
        w = rng.uniform(0.4, 0.95, size=3)
        values = np.einsum("i,j,k->ijk", u, v, w)
        entries = [
            (i, j, k, values[i, j, k])
            for i in range(10)
            for j in range(8)
            for k in range(3)
        ]
        tensor = SparseTensor.from_entries((10, 8, 3), entries)
        state = init_model(tensor.dims, 2, alpha=100.0, seed=1)
        queries = [(i, j, k) for i in range(10) for j in range(8) for k in range(3)]
        result = run(state, tensor, SamplerSchedule(150, 50, 10), queries)
        predicted = np.array([result.predictions[c] for c in queries])
        observed = np.array([values[c] for c in queries])
        rmse = float(np.sqrt(np.mean((predicted - observed) ** 2)))
        assert result.retained == 5
        assert rmse <= 0.05


class TestCheckpoint:
    def test_roundtrip(self, tiny_tensor, tmp_path):
        state = _make_state(tiny_tensor, n_latent=3, seed=17)
        schedule = SamplerSchedule(1, 4, 2)
        run(state, tiny_tensor, schedule, [(0, 0, 0)])
        save_checkpoint(tmp_path / "ckpt", state, schedule, retained=2)
        loaded, manifest = load_checkpoint(tmp_path / "ckpt")
        for mat_a, mat_b in zip(state.latents, loaded.latents):
            assert np.allclose(mat_a, mat_b, atol=1e-15)
        assert manifest["retained"] == 2
        assert manifest["n_latent"] == 3
        assert manifest["thin"] == 2
        assert manifest["seed"] == 17
