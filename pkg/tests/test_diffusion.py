import numpy as np
import pytest

from tcpdm.diffusion import (
    NoiseSchedule,
    forward_sample,
    make_linear_schedule,
    reverse_step,
    training_loss,
)
from tcpdm.errors import EmptyBatch, InvalidSchedule, ShapeMismatch, StepOutOfRange

# Independent high-precision product over betas linspace(1e-4, 0.02, 1000),
# computed with 50-digit arithmetic before the implementation existed.
ALPHA_BAR_1000 = 4.0358297653756833e-05


def test_two_step_constant_schedule():
    s = make_linear_schedule(2, 0.5, 0.5)
    assert np.allclose(s.alpha_bars, [0.5, 0.25])


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.001, 0.001)
    assert s.betas.shape == (1,)
    assert np.isclose(s.alpha_bars[0], 0.999)


def test_standard_schedule_matches_product_oracle():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bars[-1] < 1e-3
    assert np.isclose(s.alpha_bars[-1], ALPHA_BAR_1000, rtol=1e-12)


@pytest.mark.parametrize(
    "T,b0,b1",
    [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0), (10, -0.1, 0.5)],
)
def test_invalid_schedule_bounds(T, b0, b1):
    with pytest.raises(InvalidSchedule):
        make_linear_schedule(T, b0, b1)


def test_alpha_bar_strictly_decreasing():
    rng = np.random.default_rng(7)
    for _ in range(5):
        T = int(rng.integers(2, 200))
        b0 = float(rng.uniform(1e-5, 0.01))
        b1 = float(rng.uniform(b0, 0.3))
        s = make_linear_schedule(T, b0, b1)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[0] < 1.0


def test_sigma_modes():
    s = make_linear_schedule(10, 1e-3, 0.1, sigma_mode="beta")
    assert np.allclose(s.sigmas, np.sqrt(s.betas))
    st = make_linear_schedule(10, 1e-3, 0.1, sigma_mode="beta_tilde")
    expect = np.sqrt((1 - s.alpha_bars_prev) / (1 - s.alpha_bars) * s.betas)
    assert np.allclose(st.sigmas, expect)
    # the first reverse-step variance vanishes under beta_tilde
    assert st.sigmas[0] == 0.0


def test_forward_sample_zero_noise():
    s = make_linear_schedule(5, 0.01, 0.2)
    x0 = np.full((4, 4, 3), 0.7, dtype=np.float64)
    out = forward_sample(x0, 3, np.zeros_like(x0), s)
    assert np.allclose(out, np.sqrt(s.alpha_bars[2]) * 0.7)


def test_forward_sample_zero_signal():
    s = make_linear_schedule(5, 0.01, 0.2)
    eps = np.ones((4, 4, 3))
    out = forward_sample(np.zeros_like(eps), 5, eps, s)
    assert np.allclose(out, np.sqrt(1 - s.alpha_bars[4]))


def test_forward_sample_hand_value():
    s = make_linear_schedule(2, 0.5, 0.5)
    out = forward_sample(np.ones((1, 1, 1)), 2, np.ones((1, 1, 1)), s)
    # 0.5 * 1 + sqrt(0.75) * 1
    assert np.isclose(out[0, 0, 0], 1.3660254037844386, atol=1e-12)


def test_forward_sample_errors():
    s = make_linear_schedule(3, 0.01, 0.1)
    x = np.zeros((2, 2, 3))
    with pytest.raises(ShapeMismatch):
        forward_sample(x, 1, np.zeros((2, 2, 1)), s)
    with pytest.raises(StepOutOfRange):
        forward_sample(x, 4, x.copy(), s)
    with pytest.raises(StepOutOfRange):
        forward_sample(x, 0, x.copy(), s)


def test_forward_sample_marginal_moments():
    s = make_linear_schedule(20, 1e-3, 0.08)
    rng = np.random.default_rng(123)
    t = 12
    x0 = np.full((1,), 0.4)
    n = 10_000
    eps = rng.standard_normal((n, 1))
    draws = np.array([forward_sample(x0, t, e, s)[0] for e in eps])
    ab = s.alpha_bars[t - 1]
    se_mean = np.sqrt((1 - ab) / n)
    assert abs(draws.mean() - np.sqrt(ab) * 0.4) < 3 * se_mean
    var = draws.var(ddof=1)
    se_var = (1 - ab) * np.sqrt(2.0 / (n - 1))
    assert abs(var - (1 - ab)) < 3 * se_var


def test_reverse_step_identity_when_beta_zero():
    # beta ~ 0 gives alpha ~ 1: the step reduces to the identity
    s = make_linear_schedule(1, 1e-12, 1e-12)
    x = np.random.default_rng(0).standard_normal((3, 3, 3))
    out = reverse_step(x, np.zeros_like(x), 1, np.zeros_like(x), s)
    assert np.allclose(out, x, atol=1e-9)


def test_reverse_step_recovers_x0_at_t1():
    # with T=1, abar_1 = alpha_1, so supplying the true noise inverts exactly
    s = make_linear_schedule(1, 0.37, 0.37)
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((6, 5, 3))
    eps = rng.standard_normal(x0.shape)
    x1 = forward_sample(x0, 1, eps, s)
    rec = reverse_step(x1, eps, 1, np.zeros_like(x0), s)
    assert np.max(np.abs(rec - x0)) <= 1e-6


def test_reverse_step_zero_noise_prediction():
    s = make_linear_schedule(4, 0.1, 0.4)
    x = np.full((2, 2, 1), 0.3)
    out = reverse_step(x, np.zeros_like(x), 2, np.zeros_like(x), s)
    assert np.allclose(out, x / np.sqrt(s.alphas[1]))


def test_reverse_step_errors():
    s = make_linear_schedule(3, 0.01, 0.1)
    x = np.zeros((2, 2, 3))
    with pytest.raises(ShapeMismatch):
        reverse_step(x, np.zeros((2, 2, 1)), 1, np.zeros_like(x), s)
    with pytest.raises(StepOutOfRange):
        reverse_step(x, x, 5, np.zeros_like(x), s)


def test_linearity_of_primitives():
    s = make_linear_schedule(8, 0.01, 0.2)
    rng = np.random.default_rng(11)
    a, b = 1.7, -0.6
    x1, x2 = rng.standard_normal((2, 4, 4, 3))
    e1, e2 = rng.standard_normal((2, 4, 4, 3))
    lhs = forward_sample(a * x1 + b * x2, 4, a * e1 + b * e2, s)
    rhs = a * forward_sample(x1, 4, e1, s) + b * forward_sample(x2, 4, e2, s)
    assert np.allclose(lhs, rhs, atol=1e-12)
    z1, z2 = rng.standard_normal((2, 4, 4, 3))
    lhs = reverse_step(a * x1 + b * x2, a * e1 + b * e2, 3, a * z1 + b * z2, s)
    rhs = a * reverse_step(x1, e1, 3, z1, s) + b * reverse_step(x2, e2, 3, z2, s)
    assert np.allclose(lhs, rhs, atol=1e-12)


def _batch(rng, B=4, p=6, L=3):
    x0 = rng.standard_normal((B, p, p, 3))
    y = rng.standard_normal((B, p, p, 1))
    s = rng.standard_normal((B, p, p, L))
    return x0, y, s


def test_training_loss_zero_for_true_noise():
    s = make_linear_schedule(10, 0.01, 0.1)
    rng = np.random.default_rng(42)
    x0, y, sl = _batch(rng)
    # twin generator replays the same (t, eps) draws as training_loss
    twin = np.random.default_rng(99)
    twin.integers(1, 11, size=4)
    eps = twin.standard_normal(x0.shape)

    def oracle(x_t, y_, s_, t_):
        return eps

    loss = training_loss(x0, y, sl, oracle, s, np.random.default_rng(99))
    assert loss == 0.0


def test_training_loss_zero_denoiser_is_unit_mse():
    s = make_linear_schedule(10, 0.01, 0.1)
    rng = np.random.default_rng(3)
    # >= 1e4 standard-normal draws in total across elements
    x0 = rng.standard_normal((40, 10, 10, 3))
    y = rng.standard_normal((40, 10, 10, 1))
    sl = rng.standard_normal((40, 10, 10, 2))

    def zero(x_t, y_, s_, t_):
        return np.zeros_like(x_t)

    loss = training_loss(x0, y, sl, zero, s, np.random.default_rng(8))
    assert abs(loss - 1.0) < 0.05


def test_training_loss_constant_denoiser_replay():
    s = make_linear_schedule(10, 0.01, 0.1)
    rng = np.random.default_rng(21)
    x0, y, sl = _batch(rng, B=1)
    c = 0.25

    def const(x_t, y_, s_, t_):
        return np.full_like(x_t, c)

    loss = training_loss(x0, y, sl, const, s, np.random.default_rng(77))
    twin = np.random.default_rng(77)
    twin.integers(1, 11, size=1)
    eps = twin.standard_normal(x0.shape)
    assert np.isclose(loss, np.mean((eps - c) ** 2))


def test_training_loss_errors():
    s = make_linear_schedule(5, 0.01, 0.1)
    empty = np.zeros((0, 4, 4, 3))
    with pytest.raises(EmptyBatch):
        training_loss(empty, empty, empty, lambda *a: None, s, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    x0, y, sl = _batch(rng)
    with pytest.raises(ShapeMismatch):
        training_loss(x0, y[:, :2], sl, lambda *a: None, s, rng)
