import numpy as np
import pytest

from udit import diffusion as D
from udit import tensor as T
from udit.model import build, named_parameters, preset
from udit.tensor import Tensor


@pytest.fixture(autouse=True)
def float64():
    with T.precision("float64"):
        yield


@pytest.fixture
def schedule():
    return D.NoiseSchedule.linear()


class TestSchedule:
    def test_endpoints(self, schedule):
        assert schedule.T == 1000
        assert schedule.betas[0] == pytest.approx(1e-4) and schedule.betas[-1] == pytest.approx(2e-2)
        assert schedule.alpha_bars[-1] < 0.01
        assert np.all(np.diff(schedule.alpha_bars) < 0)

    def test_alpha_bar_is_cumulative_product(self, schedule):
        assert schedule.alpha_bars[9] == pytest.approx(np.prod(1 - schedule.betas[:10]), rel=1e-12)

    def test_rejects_bad_betas(self):
        with pytest.raises(ValueError):
            D.NoiseSchedule(np.array([0.1, 1.0]), np.arange(2))

    def test_respace_keeps_alpha_bars(self, schedule):
        r = schedule.respace(50)
        assert r.T == 50 and r.timesteps[0] == 0 and r.timesteps[-1] == 999
        np.testing.assert_allclose(r.alpha_bars, schedule.alpha_bars[r.timesteps], rtol=1e-12)

    def test_respace_full_is_identity(self, schedule):
        assert schedule.respace(1000) is schedule

    @pytest.mark.parametrize("steps", [0, 1001])
    def test_respace_range(self, schedule, steps):
        with pytest.raises(ValueError):
            schedule.respace(steps)


class TestForwardProcess:
    def test_closed_form(self, schedule):
        rng = np.random.default_rng(0)
        x0, eps = rng.standard_normal((3, 2, 2, 2)), rng.standard_normal((3, 2, 2, 2))
        t = np.array([0, 400, 999])
        ab = np.cumprod(1 - np.linspace(1e-4, 2e-2, 1000))[t][:, None, None, None]
        np.testing.assert_allclose(D.q_sample(schedule, x0, t, eps), np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)

    def test_zero_noise_scales_signal(self, schedule):
        x0 = np.ones((1, 1, 2, 2))
        out = D.q_sample(schedule, x0, 500, np.zeros_like(x0))
        np.testing.assert_allclose(out, np.sqrt(schedule.alpha_bars[500]))

    def test_validation(self, schedule):
        x0 = np.zeros((2, 1, 2, 2))
        with pytest.raises(ValueError, match="timesteps"):
            D.q_sample(schedule, x0, 1000, x0)
        with pytest.raises(ValueError, match="eps shape"):
            D.q_sample(schedule, x0, 0, np.zeros((2, 1, 2, 1)))

    def test_monte_carlo_moments(self, schedule):
        rng = np.random.default_rng(1)
        n = 100_000
        x0 = np.full((n, 1, 1, 1), 1.5)
        for t in (10, 300, 999):
            xt = D.q_sample(schedule, x0, t, rng.standard_normal(x0.shape))
            assert xt.mean() == pytest.approx(1.5 * schedule.sqrt_alpha_bars[t], abs=0.01)
            assert xt.var() == pytest.approx(1 - schedule.alpha_bars[t], rel=0.02)

    def test_posterior_mean_matches_ancestral_mean_given_true_noise(self, schedule):
        rng = np.random.default_rng(2)
        x0, eps = rng.standard_normal((4, 1, 3, 3)), rng.standard_normal((4, 1, 3, 3))
        for i in (1, 50, 999):
            xt = D.q_sample(schedule, x0, i, eps)
            step = D.p_sample_step(None, xt, i, None, None, np.random.default_rng(7), schedule, eps_hat=eps)
            noise = np.sqrt(schedule.posterior_variance[i]) * np.random.default_rng(7).standard_normal(xt.shape)
            np.testing.assert_allclose(step - noise, D.posterior_mean(schedule, x0, xt, i), atol=1e-10)

    def test_final_step_is_noise_free_and_recovers_x0(self, schedule):
        rng = np.random.default_rng(3)
        x0, eps = rng.standard_normal((2, 1, 2, 2)), rng.standard_normal((2, 1, 2, 2))
        xt = D.q_sample(schedule, x0, 0, eps)
        out = D.p_sample_step(None, xt, 0, None, None, rng, schedule, eps_hat=eps)
        np.testing.assert_allclose(out, x0, atol=1e-12)


class TestLabelDropout:
    def test_extremes(self):
        y = np.array([0, 1, 1, 0])
        rng = np.random.default_rng(0)
        assert D.drop_labels(y, 0.0, 2, rng) == (y, 0)
        out, n = D.drop_labels(y, 1.0, 2, rng)
        assert n == 4 and np.all(out == 2)

    def test_rate(self):
        out, n = D.drop_labels(np.zeros(20_000, np.int64), 0.1, 5, np.random.default_rng(1))
        assert n == int((out == 5).sum())
        assert n / 20_000 == pytest.approx(0.1, abs=0.01)


class TestLoss:
    def test_untrained_model_loss_is_noise_power(self, schedule):
        p = build(preset("udit-t"))
        x0 = np.random.default_rng(0).standard_normal((64, 4, 8, 8))
        loss, info = D.diffusion_loss(p, x0, np.zeros(64, np.int64), np.random.default_rng(1), schedule)
        assert loss.item() == pytest.approx(1.0, abs=0.02)
        assert info["t"].shape == (64,)

    def test_perfect_predictor_gives_zero(self, schedule):
        p = build(preset("udit-t"))
        rng = np.random.default_rng(2)
        x0, eps = rng.standard_normal((4, 4, 8, 8)), rng.standard_normal((4, 4, 8, 8))
        loss, _ = D.diffusion_loss(
            p, x0, np.zeros(4, np.int64), rng, schedule, t=np.array([1, 2, 3, 4]), eps=eps,
            predict=lambda *a: Tensor(eps),
        )
        assert loss.item() == 0.0

    def test_dropout_override(self, schedule):
        p = build(preset("udit-t", cfg_dropout_prob=1.0))
        x0 = np.zeros((8, 4, 8, 8))
        _, info = D.diffusion_loss(p, x0, np.zeros(8, np.int64), np.random.default_rng(0), schedule)
        assert info["dropped"] == 8 and np.all(info["labels"] == 2)
        _, info = D.diffusion_loss(p, x0, np.zeros(8, np.int64), np.random.default_rng(0), schedule, dropout=0.0)
        assert info["dropped"] == 0


class TestTraining:
    def test_adamw_first_step_is_sign_step(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        opt = D.AdamW(lr=0.1, weight_decay=0.0, eps=0.0)
        m, v = [np.zeros(2)], [np.zeros(2)]
        opt.step([p], m, v, 1)
        np.testing.assert_allclose(p.data, [0.9, -1.9])

    def test_adamw_weight_decay_is_decoupled(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        D.AdamW(lr=0.1, weight_decay=0.5).step([p], [np.zeros(1)], [np.zeros(1)], 1)
        np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])

    def test_steps_reduce_loss_and_count_labels(self, schedule):
        state = D.init_train_state(build(preset("udit-t", cfg_dropout_prob=1.0)), D.AdamW(lr=1e-3))
        x = np.random.default_rng(0).standard_normal((16, 4, 8, 8)) + 2.0
        y = np.zeros(16, np.int64)
        for k in range(30):
            state, _ = D.training_step(state, x, y, np.random.default_rng(k % 2), schedule)
        assert state.step == 30
        assert state.dropped_labels == state.seen_labels == 30 * 16
        assert np.mean(state.losses[-2:]) < np.mean(state.losses[:2])

    def test_ema_tracks_parameters(self, schedule):
        state = D.init_train_state(build(preset("udit-t")), D.AdamW(lr=1e-3), ema_decay=0.5)
        before = [e.copy() for e in state.ema]
        x = np.random.default_rng(1).standard_normal((4, 4, 8, 8))
        state, _ = D.training_step(state, x, np.zeros(4, np.int64), np.random.default_rng(0), schedule)
        for e, b, p in zip(state.ema, before, state.leaves):
            np.testing.assert_allclose(e, 0.5 * b + 0.5 * p.data)

    def test_non_finite_loss_raises(self, schedule):
        state = D.init_train_state(build(preset("udit-t")))
        x = np.full((2, 4, 8, 8), np.nan)
        with pytest.raises(D.NumericalError, match="step 1"):
            D.training_step(state, x, np.zeros(2, np.int64), np.random.default_rng(0), schedule)


class TestSampling:
    def test_shape_and_determinism(self):
        p = build(preset("udit-t"))
        a = D.sample(p, 3, 1, steps=5, seed=4)
        assert a.shape == (3, 4, 8, 8)
        np.testing.assert_array_equal(a, D.sample(p, 3, 1, steps=5, seed=4))
        assert not np.array_equal(a, D.sample(p, 3, 1, steps=5, seed=5))

    def test_unit_guidance_equals_conditional(self):
        p = build(preset("udit-t"))
        for _, t in named_parameters(p):
            t.data = t.data + 0.02 * np.random.default_rng(t.size).standard_normal(t.shape)
        np.testing.assert_array_equal(D.sample(p, 2, 0, w=1.0, steps=4), D.sample(p, 2, 0, w=None, steps=4))

    def test_optimal_denoiser_recovers_gaussian(self, schedule):
        # x0 ~ N(m, I) has E[eps | x_t] = sqrt(1 - abar) (x_t - sqrt(abar) m)
        m = 1.5
        r = schedule.respace(100)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4000, 1, 2, 2))
        for i in reversed(range(r.T)):
            ab = r.alpha_bars[i]
            eps = np.sqrt(1 - ab) * (x - np.sqrt(ab) * m)
            x = D.p_sample_step(None, x, i, None, None, rng, r, eps_hat=eps)
        assert x.mean() == pytest.approx(m, abs=0.05)
        assert x.std() == pytest.approx(1.0, abs=0.05)

    def test_index_range(self, schedule):
        with pytest.raises(ValueError, match="index"):
            D.p_sample_step(None, np.zeros((1, 1, 1, 1)), 1000, None, None, np.random.default_rng(0), schedule, eps_hat=0)
