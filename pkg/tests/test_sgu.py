import numpy as np
import pytest

from timi.errors import TimiError
from timi.fields import field_max_abs, field_std
from timi.pipeline import ConditionSet, DenoiserConfig, InstanceMaskSet, denoiser_forward, init_noise
from timi.rng import Rng
from timi.sgu import (
    GuidanceConfig,
    adaptive_scale,
    apply_guided_step,
    momentum_update,
    new_state,
    regularize_gradient,
)


def rand_field(seed, shape=(4, 5, 5, 5)):
    return Rng(seed).normals(int(np.prod(shape))).reshape(shape)


# ---------------------------------------------------------------------------
# gradient regularization
# ---------------------------------------------------------------------------


def test_regularize_off_is_identity_copy():
    g = rand_field(0)
    cfg = GuidanceConfig(use_sr=False)
    out = regularize_gradient(g, cfg)
    assert np.array_equal(out, g)
    assert out is not g


def test_regularize_constant_unchanged():
    g = np.full((4, 6, 6, 6), -2.5)
    out = regularize_gradient(g, GuidanceConfig())
    assert np.max(np.abs(out - g)) < 1e-12


def test_regularize_impulse_strictly_shrinks():
    g = np.zeros((1, 11, 11, 11))
    g[0, 5, 5, 5] = 1.0
    out = regularize_gradient(g, GuidanceConfig(sigma=1.5))
    assert field_max_abs(out) < 1.0


# ---------------------------------------------------------------------------
# adaptive scaling
# ---------------------------------------------------------------------------


def test_adaptive_scale_direct_substitution():
    # std(z) = 1 and mu_max = 1: lambda = 0.1 / (1 + 1e-6)
    z = np.tile(np.array([-1.0, 1.0]), 32).reshape(1, 4, 4, 4)
    g = np.zeros_like(z)
    g[0, 0, 0, 0] = 1.0
    lam, delta = adaptive_scale(g, z, GuidanceConfig())
    assert abs(lam - 0.1 / (1.0 + 1e-6)) < 1e-15
    assert abs(lam - 0.0999999) < 1e-7
    assert np.array_equal(delta, lam * g)


def test_adaptive_scale_zero_gradient():
    z = rand_field(1)
    g = np.zeros_like(z)
    lam, delta = adaptive_scale(g, z, GuidanceConfig())
    assert lam == 0.1 * field_std(z) / 1e-6  # large scale
    assert np.all(delta == 0.0)  # but a zero update


def test_adaptive_scale_peak_bound_identity():
    for seed in range(10):
        z, g = rand_field(seed), rand_field(seed + 100)
        cfg = GuidanceConfig()
        lam, delta = adaptive_scale(g, z, cfg)
        mu = field_max_abs(g)
        expected_peak = cfg.alpha * field_std(z) * mu / (mu + cfg.eps)
        assert abs(field_max_abs(delta) - expected_peak) < 1e-9
        assert field_max_abs(delta) <= cfg.alpha * field_std(z) + 1e-9


def test_adaptive_scale_gm_off_constant_alpha():
    z, g = rand_field(2), rand_field(3)
    lam, delta = adaptive_scale(g, z, GuidanceConfig(use_gm=False))
    assert lam == 0.1
    assert np.array_equal(delta, 0.1 * g)


def test_adaptive_scale_shape_mismatch():
    with pytest.raises(TimiError) as e:
        adaptive_scale(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 3, 3)), GuidanceConfig())
    assert e.value.code == "shape"


# ---------------------------------------------------------------------------
# momentum
# ---------------------------------------------------------------------------


def test_momentum_geometric_recursion():
    cfg = GuidanceConfig(beta=0.9)
    state = new_state((1, 2, 2, 2))
    ones = np.ones((1, 2, 2, 2))
    expected = [0.1, 0.19, 0.271]
    for step in range(3):
        m = momentum_update(state, ones, cfg)
        assert abs(m[0, 0, 0, 0] - expected[step]) < 1e-12


def test_momentum_beta_zero_passthrough():
    cfg = GuidanceConfig(beta=0.0)
    state = new_state((1, 2, 2, 2))
    delta = rand_field(4, (1, 2, 2, 2))
    m = momentum_update(state, delta, cfg)
    assert np.array_equal(m, delta)


def test_momentum_alternating_bounded():
    cfg = GuidanceConfig(beta=0.9)
    state = new_state((1, 1, 1, 1))
    sign = 1.0
    for t in range(1, 60):
        m = momentum_update(state, np.full((1, 1, 1, 1), sign), cfg)
        assert abs(m[0, 0, 0, 0]) < 0.1
        sign = -sign


def test_momentum_disabled_leaves_buffer_zero():
    cfg = GuidanceConfig(use_momentum=False)
    state = new_state((1, 2, 2, 2))
    delta = rand_field(5, (1, 2, 2, 2))
    m = momentum_update(state, delta, cfg)
    assert np.array_equal(m, delta)
    assert np.all(state.momentum == 0.0)


def test_momentum_zero_delta_geometric_decay():
    cfg = GuidanceConfig(beta=0.9)
    state = new_state((1, 2, 2, 2))
    momentum_update(state, rand_field(6, (1, 2, 2, 2)), cfg)
    zero = np.zeros((1, 2, 2, 2))
    prev = field_max_abs(state.momentum)
    for _ in range(20):
        momentum_update(state, zero, cfg)
        cur = field_max_abs(state.momentum)
        assert cur == 0.9 * prev  # exact elementwise scaling
        prev = cur


def test_momentum_shape_mismatch():
    state = new_state((1, 2, 2, 2))
    with pytest.raises(TimiError) as e:
        momentum_update(state, np.zeros((1, 3, 3, 3)), GuidanceConfig())
    assert e.value.code == "shape"


# ---------------------------------------------------------------------------
# full guided step
# ---------------------------------------------------------------------------


def guided_setup(seed=0, dims=(4, 4, 4), gh=4, gw=4):
    m = gh * gw
    rng = Rng(seed)
    z = init_noise(dims, 4, rng)
    pos = np.stack(
        np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij"),
        axis=-1,
    ).reshape(m, 2)
    tokens = rng.normals(m * 4).reshape(m, 4)
    cond = ConditionSet((gh, gw), tokens, pos)
    masks = np.zeros((2, m))
    masks[0, : m // 2] = 1
    masks[1, m // 2 :] = 1
    dcfg = DenoiserConfig(weight_seed=seed + 7)
    _, caps = denoiser_forward(z, cond, dcfg, capture_layers=(1, 2, 3, 4))
    return z, caps, InstanceMaskSet(masks)


def test_guided_step_window_contract():
    z, caps, masks = guided_setup()
    state = new_state(z.shape)
    cfg = GuidanceConfig(guided_step_max=15)
    with pytest.raises(TimiError) as e:
        apply_guided_step(z, caps, masks, state, cfg, step=15)
    assert e.value.code == "window"
    with pytest.raises(TimiError) as e:
        apply_guided_step(z, caps, masks, state, GuidanceConfig(use_isg=False), step=0)
    assert e.value.code == "window"


def test_guided_step_logs_and_bound():
    z, caps, masks = guided_setup(1)
    state = new_state(z.shape)
    cfg = GuidanceConfig()
    z1, state = apply_guided_step(z, caps, masks, state, cfg, step=0)
    assert len(state.log) == 1
    e = state.log[0]
    assert e.step == 0
    assert e.max_delta <= cfg.alpha * e.std_z + 1e-9
    assert abs(e.max_delta - cfg.alpha * e.std_z * e.mu_max / (e.mu_max + cfg.eps)) < 1e-9
    assert z1.shape == z.shape
    assert not np.array_equal(z1, z)  # a real update happened


def test_guided_step_zero_gradient_is_noop():
    # twin tokens share a position; with a constant latent every row prefers
    # the high-payload twin, and at saturation temperature the cold twins'
    # attention underflows to exactly zero.  A mask over the cold twins then
    # has an exactly-zero loss gradient and the latent is unchanged.
    gh, gw = 4, 8
    m = gh * gw
    half = m // 2
    base_pos = np.stack(
        np.meshgrid((np.arange(4) + 0.5) / 4, (np.arange(4) + 0.5) / 4, indexing="ij"),
        axis=-1,
    ).reshape(half, 2)
    pos = np.vstack([base_pos, base_pos])
    tokens = np.zeros((m, 4))
    tokens[:half, 0] = 5.0  # hot twins
    tokens[half:, 0] = -5.0  # cold twins
    cond = ConditionSet((gh, gw), tokens, pos)
    z = np.ones((4, 4, 4, 4))  # constant content: every row favors the hot twin
    dcfg = DenoiserConfig(attn_temperature=0.001, weight_seed=3)
    _, caps = denoiser_forward(z, cond, dcfg, capture_layers=(1,))
    # losing twins underflow to exactly zero on every row
    starved = np.flatnonzero(caps[0].a_zc.max(axis=0) == 0.0)
    assert len(starved) >= 4
    masks = np.zeros((2, m))
    masks[0, starved[: len(starved) // 2]] = 1
    masks[1, starved[len(starved) // 2 :]] = 1
    z1, state = apply_guided_step(
        z, caps, InstanceMaskSet(masks), new_state(z.shape), GuidanceConfig(), step=0
    )
    assert state.log[0].max_delta == 0.0
    assert state.log[0].loss == 0.0
    assert np.array_equal(z1, z)


def test_guided_step_sr_off_keeps_raw_gradient():
    z, caps, masks = guided_setup(3)
    cfg = GuidanceConfig(use_sr=False)
    _, state = apply_guided_step(z, caps, masks, new_state(z.shape), cfg, step=0)
    e = state.log[0]
    assert e.mu_max == e.raw_grad_max
    cfg_sr = GuidanceConfig(use_sr=True)
    _, state_sr = apply_guided_step(z, caps, masks, new_state(z.shape), cfg_sr, step=0)
    assert state_sr.log[0].mu_max < state_sr.log[0].raw_grad_max


def test_guided_step_gm_off_lambda_is_alpha():
    z, caps, masks = guided_setup(4)
    cfg = GuidanceConfig(use_gm=False)
    _, state = apply_guided_step(z, caps, masks, new_state(z.shape), cfg, step=0)
    assert state.log[0].lambda_adap == cfg.alpha


def test_config_validation():
    with pytest.raises(TimiError):
        GuidanceConfig(alpha=0.0).validate()
    with pytest.raises(TimiError):
        GuidanceConfig(beta=1.0).validate()
    with pytest.raises(TimiError):
        GuidanceConfig(sigma=-1.0, use_sr=True).validate()
    GuidanceConfig(sigma=-1.0, use_sr=False).validate()  # sigma unused
