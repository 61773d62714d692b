import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catw.diffusion import (
    DenoiserConfig,
    FinetuneHParams,
    ScheduleError,
    build_denoiser,
    denoise_loss,
    finetune,
    make_linear_schedule,
    predict_eps,
    q_sample,
    sample,
    schedule_from_betas,
)
from catw.nn.tensor import Tensor

SMALL = DenoiserConfig(latent_shape=(2, 4, 4), channels=8, concept_vocab=4, temb_dim=8)


# ------------------------------------------------------------------ schedule


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.1, 0.1)
    assert s.alpha_bars[0] == pytest.approx(0.9)


def test_two_step_schedule():
    s = make_linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=1e-12)


def test_default_schedule_against_cumprod_oracle():
    s = make_linear_schedule(200, 1e-4, 0.02)
    betas = [1e-4 + (0.02 - 1e-4) * i / 199 for i in range(200)]
    ab, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        ab.append(acc)
    np.testing.assert_allclose(s.alpha_bars, ab, rtol=1e-12)
    assert np.all(np.diff(s.alpha_bars) < 0)
    # exp(-sum beta) = exp(-2.01); the end point keeps ~13% of the signal at T=200
    assert s.alpha_bars[-1] == pytest.approx(0.1321827542506, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 300), b0=st.floats(1e-5, 0.1), span=st.floats(0.0, 0.5))
def test_schedule_monotone(T, b0, span):
    s = make_linear_schedule(T, b0, min(b0 + span, 0.99))
    assert np.all(np.diff(s.alpha_bars) < 0) if T > 1 else True
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert all(s.posterior_variance(t) >= 0 for t in range(1, T + 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_args(args):
    with pytest.raises(ScheduleError):
        make_linear_schedule(*args)


# ------------------------------------------------------------------ q_sample


def test_q_sample_no_noise_limit():
    s = schedule_from_betas([1e-300])
    z0 = np.random.default_rng(0).normal(size=(2, 3))
    eps = np.random.default_rng(1).normal(size=(2, 3))
    np.testing.assert_allclose(q_sample(z0, 1, eps, s).data, z0, atol=1e-12)


def test_q_sample_pure_noise_limit():
    s = schedule_from_betas([1.0 - 1e-12])
    z0 = np.random.default_rng(0).normal(size=(2, 3))
    eps = np.random.default_rng(1).normal(size=(2, 3))
    np.testing.assert_allclose(q_sample(z0, 1, eps, s).data, eps, atol=1e-5)


def test_q_sample_hand_value():
    s = schedule_from_betas([0.75])
    out = q_sample(np.array([1.0]), 1, np.array([-1.0]), s).data
    assert out[0] == pytest.approx(-0.3660, abs=5e-5)


def test_q_sample_rejects_bad_timestep():
    s = make_linear_schedule(5)
    with pytest.raises(ScheduleError):
        q_sample(np.zeros(2), 6, np.zeros(2), s)
    with pytest.raises(ScheduleError):
        q_sample(np.zeros(2), 0, np.zeros(2), s)


# ------------------------------------------------------------------ loss


def test_perfect_predictor_has_zero_loss():
    s = make_linear_schedule(50)
    z0 = np.random.default_rng(0).normal(size=(6, 2, 4, 4))

    def oracle(z_t, t, token):
        ab = s.alpha_bars[np.asarray(t) - 1].reshape(-1, 1, 1, 1)
        return Tensor((z_t.data - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab))

    assert denoise_loss(oracle, z0, 0, s, np.random.default_rng(1)).item() < 1e-20


def test_zero_predictor_loss_is_unit():
    s = make_linear_schedule(50)
    n = 10_000
    z0 = np.zeros((n, 1, 1, 1))
    loss = denoise_loss(lambda z, t, k: Tensor(np.zeros_like(z.data)), z0, 0, s, np.random.default_rng(2)).item()
    assert abs(loss - 1.0) < 3 * np.sqrt(2.0 / n)


def test_loss_is_reproducible():
    s = make_linear_schedule(20)
    g = build_denoiser(SMALL, seed=0)
    z0 = np.random.default_rng(3).normal(size=(3, 2, 4, 4)).astype(np.float32)
    a = denoise_loss(g, z0, 1, s, np.random.default_rng(4)).item()
    b = denoise_loss(g, z0, 1, s, np.random.default_rng(4)).item()
    assert a == b


def test_token_range_checked():
    g = build_denoiser(SMALL, seed=0)
    with pytest.raises(ValueError, match="token"):
        predict_eps(g, np.zeros((1, 2, 4, 4), dtype=np.float32), 1, 4)


# ------------------------------------------------------------------ fine-tune


def test_finetune_zero_steps_is_noop():
    g = build_denoiser(SMALL, seed=1)
    ft, curve = finetune(g, np.zeros((1, 2, 4, 4), dtype=np.float32), 3, make_linear_schedule(10), FinetuneHParams(steps=0))
    assert curve == [] and ft.digest() == g.digest()


@pytest.mark.parametrize("mode", ["full", "adapter"])
def test_finetune_is_deterministic(mode):
    g = build_denoiser(SMALL, seed=2)
    z = np.random.default_rng(5).normal(size=(2, 2, 4, 4)).astype(np.float32)
    hp = FinetuneHParams(steps=5, lr=1e-3, batch=2, mode=mode, rank=2)
    a, ca = finetune(g, z, 3, make_linear_schedule(10), hp, seed=9)
    b, cb = finetune(g, z, 3, make_linear_schedule(10), hp, seed=9)
    assert a.digest() == b.digest() and ca == cb
    assert a.digest() != g.digest()
    if mode == "adapter":
        # base weights frozen: only adapters moved
        assert all(np.array_equal(a[n].data, g[n].data) for n in g.params)


def test_finetune_does_not_touch_input_graph():
    g = build_denoiser(SMALL, seed=3)
    before = g.digest()
    finetune(g, np.ones((1, 2, 4, 4), dtype=np.float32), 0, make_linear_schedule(10), FinetuneHParams(steps=3, batch=1))
    assert g.digest() == before


def test_finetune_memorizes_single_latent():
    s = make_linear_schedule(20)
    g = build_denoiser(SMALL, seed=4)
    z = np.random.default_rng(6).normal(size=(1, 2, 4, 4)).astype(np.float32)
    ft, curve = finetune(g, z, 3, s, FinetuneHParams(steps=400, lr=2e-3, batch=8), seed=1)
    assert np.mean(curve[-50:]) < 0.5 * np.mean(curve[:50])


# ------------------------------------------------------------------ sampling


def test_zero_predictor_sampler_matches_unrolled_oracle():
    s = make_linear_schedule(8, 0.01, 0.2)
    out = sample(lambda z, t, k: Tensor(np.zeros_like(z.data)), 0, s, np.random.default_rng(7), n=3, shape=(2, 2, 2))
    rng = np.random.default_rng(7)
    z = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
    for t in range(8, 0, -1):
        a = 1.0 - s.betas[t - 1]
        z = z / np.sqrt(a)
        if t > 1:
            ab, ab_prev = s.alpha_bars[t - 1], s.alpha_bars[t - 2]
            var = s.betas[t - 1] * (1 - ab_prev) / (1 - ab)
            z = z + np.sqrt(var) * rng.standard_normal(z.shape)
        z = z.astype(np.float32)
    np.testing.assert_allclose(out, z, rtol=1e-6)


def test_sampling_is_reproducible():
    g = build_denoiser(SMALL, seed=5)
    s = make_linear_schedule(10)
    a = sample(g, 3, s, np.random.default_rng(8), n=2)
    b = sample(g, 3, s, np.random.default_rng(8), n=2)
    assert a.shape == (2, 2, 4, 4) and a.tobytes() == b.tobytes()
