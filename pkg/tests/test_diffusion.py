import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ccreid.diffusion import (Denoiser, GaussianDenoiser, NoiseSchedule, TrainConfig,
                              forward_sample, inpaint, make_schedule, predict_mean, reverse_step,
                              sample, train_denoiser, train_step)
from ccreid.errors import ConfigError, NumericalError
from ccreid.guidance import GuidanceHook
from ccreid.nn import SGD, finite_difference, relative_error
from ccreid.synthdata import one_hot, region_correlation

import oracles

# alpha_bar_200 of the linear 1e-4..0.02 and 1e-4..0.04 schedules, from a
# 50-digit Decimal product (tests/oracles.alpha_bar_decimal), frozen here
ALPHA_BAR_200_002 = 0.13218275425061779
ALPHA_BAR_200_004 = 0.017168111654940889


def test_single_step_schedule():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bar[0] == pytest.approx(0.7, abs=1e-15)


def test_alpha_bar_against_frozen_oracle():
    assert make_schedule(200, 1e-4, 0.02).alpha_bar[-1] == pytest.approx(ALPHA_BAR_200_002, rel=1e-12)
    assert make_schedule().alpha_bar[-1] == pytest.approx(ALPHA_BAR_200_004, rel=1e-12)


def test_frozen_values_match_oracle():
    assert float(oracles.alpha_bar_decimal(200, "1e-4", "0.02")) == pytest.approx(ALPHA_BAR_200_002, rel=1e-15)


def test_default_schedule_invariants():
    s = make_schedule()
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] <= 0.05
    assert s.sigma[-1] >= 0.97
    assert np.all((s.beta > 0) & (s.beta < 1))
    np.testing.assert_array_equal(s.sigma, np.sqrt(1 - s.alpha_bar))


@given(st.integers(1, 400), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_sigma_identity(T, b0, extra):
    s = make_schedule(T, b0, min(b0 + extra, 0.9))
    np.testing.assert_allclose(s.sigma ** 2 + s.alpha_bar, 1.0, atol=1e-14)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_forward_examples():
    x = np.ones((4, 4))
    s = NoiseSchedule.from_beta(np.array([0.0, 0.75]))
    np.testing.assert_array_equal(forward_sample(x, 1, np.random.randn(4, 4), s), x)
    np.testing.assert_allclose(forward_sample(x, 2, np.zeros((4, 4)), s), 0.5)
    sch = make_schedule()
    eps = np.random.default_rng(0).standard_normal((4, 4))
    np.testing.assert_allclose(forward_sample(np.zeros((4, 4)), 50, eps, sch), sch.sigma[49] * eps)


def test_forward_t_out_of_range():
    s = make_schedule(10, 1e-4, 0.02)
    for t in (0, 11):
        with pytest.raises(ConfigError):
            forward_sample(np.zeros(3), t, np.zeros(3), s)


def test_predict_mean_examples():
    s = make_schedule()
    x = np.random.default_rng(1).standard_normal((3, 3))
    np.testing.assert_allclose(predict_mean(np.zeros_like(x), x, 10, s), x / np.sqrt(s.alpha[9]))
    unit = NoiseSchedule.from_beta(np.array([0.0, 0.1]))
    np.testing.assert_array_equal(predict_mean(np.ones_like(x), x, 1, unit), x)


@given(st.integers(2, 200), st.integers(0, 2**16))
def test_predict_mean_is_posterior_mean(t, seed):
    s = make_schedule()
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((5,))
    x0 = np.zeros(5)
    x_t = forward_sample(x0, t, eps, s)
    want = oracles.gaussian_posterior_mean(x_t, x0, t, s.alpha, s.alpha_bar)
    np.testing.assert_allclose(predict_mean(eps, x_t, t, s), want, atol=1e-12)


def _mini_denoiser(schedule, data_std=0.5, hidden=(1,), seed=0):
    return Denoiser((2, 2), 3, hidden=hidden, time_dim=4, rng=np.random.default_rng(seed),
                    data_std=data_std, schedule=schedule)


@pytest.mark.parametrize("data_std, hidden", [(None, (1,)), (0.5, (1,)), (0.5, (5, 4))])
def test_denoiser_gradients_match_finite_differences(data_std, hidden):
    s = make_schedule(20, 1e-3, 0.2)
    den = _mini_denoiser(s, data_std, hidden)
    rng = np.random.default_rng(3)
    x_t = rng.standard_normal((3, 2, 2))
    t = np.array([1, 7, 20])
    y = one_hot([0, 2, 1], 3)
    eps = rng.standard_normal((3, 2, 2))
    _, grads = den.loss_and_grads(x_t, t, y, eps)
    fd = finite_difference(lambda: den.loss_and_grads(x_t, t, y, eps)[0], den.params)
    for g, f in zip(grads, fd):
        assert relative_error(g, f) < 1e-4


class _ExactNoiseStub:
    """Recovers eps exactly when x0 = 0 (x_t = sigma_t eps)."""

    def __init__(self, schedule):
        self.schedule = schedule
        self.params = [np.zeros(1)]

    def loss_and_grads(self, x_t, t, y, eps):
        pred = x_t / self.schedule.sigma[np.asarray(t) - 1][:, None, None]
        return float(np.sum((pred - eps) ** 2) / len(x_t)), [np.zeros(1)]


def test_train_step_oracle_and_zero_predictor():
    s = make_schedule()
    x0 = np.zeros((64, 16, 16))
    rng = np.random.default_rng(0)
    stub = _ExactNoiseStub(s)
    assert train_step(stub, x0, None, s, SGD(stub.params, 0.1), rng) == pytest.approx(0.0, abs=1e-18)
    den = Denoiser((16, 16), 0, hidden=(8,), time_dim=4, rng=rng, data_std=None, schedule=s)
    for p in den.params:
        p[...] = 0.0
    losses = [train_step(den, x0, None, s, SGD(den.params, 0.0), rng) for _ in range(20)]
    assert np.mean(losses) == pytest.approx(256, rel=0.05)


def test_train_step_non_finite_raises():
    s = make_schedule(10, 1e-4, 0.02)
    den = _mini_denoiser(s, None)
    den.params[0][...] = np.nan
    with pytest.raises(NumericalError):
        train_step(den, np.zeros((2, 2, 2)), one_hot([0, 1], 3), s, SGD(den.params, 0.1),
                   np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0).validate()


def _small_setup(T=6):
    s = make_schedule(T, 1e-3, 0.3)
    den = Denoiser((4, 4), 3, hidden=(16,), time_dim=8, rng=np.random.default_rng(1), schedule=s)
    return s, den


def test_w0_guidance_bit_identical():
    s, den = _small_setup()

    class _Disc:
        def logit_and_input_grad(self, x, t):
            return np.zeros(len(x)), np.full(x.shape, 3.0)

    x = np.random.default_rng(0).standard_normal((2, 4, 4))
    y = one_hot([0, 1], 3)
    a = reverse_step(den, x, 4, y, s, np.random.default_rng(5))
    b = reverse_step(den, x, 4, y, s, np.random.default_rng(5), GuidanceHook(_Disc(), 0.0))
    assert a.tobytes() == b.tobytes()


def test_last_step_deterministic():
    s, den = _small_setup()
    x = np.random.default_rng(0).standard_normal((2, 4, 4))
    y = one_hot([0, 1], 3)
    a = reverse_step(den, x, 1, y, s, np.random.default_rng(1))
    b = reverse_step(den, x, 1, y, s, np.random.default_rng(2))
    assert a.tobytes() == b.tobytes()


def test_small_beta_step_approaches_posterior_mean():
    # a tiny beta at the step means the injected noise is negligible
    T = 50
    s = NoiseSchedule.from_beta(np.r_[np.full(T - 1, 0.02), 1e-10])
    den = GaussianDenoiser((3,), 0.0, 1e-6, s)
    x0 = np.zeros(3)
    eps = np.random.default_rng(4).standard_normal(3)
    x_t = forward_sample(x0, T, eps, s)
    out = reverse_step(den, x_t[None], T, None, s, np.random.default_rng(0))[0]
    want = oracles.gaussian_posterior_mean(x_t, x0, T, s.alpha, s.alpha_bar)
    np.testing.assert_allclose(out, want, atol=1e-4)


def test_sample_shape_and_determinism():
    s, den = _small_setup()
    code = one_hot(2, 3)
    a = sample(den, code, s, np.random.default_rng(9))
    b = sample(den, code, s, np.random.default_rng(9))
    assert a.shape == (4, 4)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= -1 and a.max() <= 1


def test_point_mass_training_recovers_target():
    s = make_schedule()
    target = np.linspace(-0.6, 0.6, 4).reshape(2, 2)
    images = np.repeat(target[None], 64, axis=0)
    rng = np.random.default_rng(0)
    den = Denoiser((2, 2), 0, hidden=(32, 32), time_dim=16, rng=rng, schedule=s, data_std=0.5)
    train_denoiser(den, images, None, s, TrainConfig(steps=1500, lr=1e-3), rng=rng)
    draws = sample(den, None, s, np.random.default_rng(1), n=1000)
    assert np.abs(draws.mean(axis=0) - target).max() < 0.1


def test_inpaint_zero_mask_returns_input():
    s, den = _small_setup()
    x = np.random.default_rng(0).uniform(-1, 1, (4, 4)).astype(np.float32)
    out = inpaint(den, x, np.zeros((4, 4), bool), one_hot(1, 3), s, np.random.default_rng(0))
    assert out.tobytes() == x.tobytes()


def test_inpaint_full_mask_matches_sample_distribution():
    s, den = _small_setup(T=4)
    y = np.repeat(one_hot(0, 3)[None], 2000, axis=0)
    x = np.zeros((2000, 4, 4))
    a = inpaint(den, x, np.ones((4, 4), bool), y, s, np.random.default_rng(0))
    b = sample(den, y, s, np.random.default_rng(1))
    assert np.abs(a.mean(0) - b.mean(0)).max() < 0.08
    assert np.abs(a.std(0) - b.std(0)).max() < 0.08


@given(hnp.arrays(np.bool_, (4, 4)), st.integers(0, 2**16))
def test_inpaint_preserves_unmasked_cells(mask, seed):
    s, den = _small_setup(T=3)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (4, 4)).astype(np.float32)
    out = inpaint(den, x, mask, one_hot(int(rng.integers(3)), 3), s, rng)
    assert np.array_equal(out[~mask], x[~mask])


def test_per_row_generators_equal_single_calls():
    s, den = _small_setup()
    x = np.random.default_rng(0).uniform(-1, 1, (3, 4, 4))
    m = np.zeros((3, 4, 4), bool)
    m[:, 1:3] = True
    y = one_hot([0, 1, 2], 3)
    batch = inpaint(den, x, m, y, s, [np.random.default_rng(i) for i in range(3)])
    for i in range(3):
        single = inpaint(den, x[i], m[i], y[i], s, np.random.default_rng(i))
        np.testing.assert_allclose(batch[i], single, atol=1e-12)


def test_conditional_samples_follow_code(trained_toy):
    ds, den, s, _ = trained_toy
    rng = np.random.default_rng(7)
    ids = rng.choice(ds.n_clothes, size=100)
    x = sample(den, one_hot(ids, ds.n_clothes), s, rng)
    masks = np.repeat(ds.train.masks[:1], 100, axis=0) & False
    masks[:, 5:14] = True
    corr = region_correlation(x, ds.clothes_prototypes[:ds.n_clothes], masks)
    assert np.mean(corr.argmax(axis=1) == ids) >= 0.9


def test_training_loss_decreases(trained_toy):
    losses = trained_toy[3]
    assert losses[-200:].mean() < 0.7 * losses[:50].mean()
