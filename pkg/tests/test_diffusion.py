import math

import numpy as np
import pytest

from tokenwarp.attention import BASELINE, AttentionConfig, cross_frame_attention, project_qkv, self_attention
from tokenwarp.diffusion import (
    ContractError,
    LinearDenoiser,
    ToyAttentionDenoiser,
    TranslationConfig,
    ddim_invert_step,
    ddim_step,
    initial_latent,
    invert_frame,
    sample_frame,
    translate_clips,
    translate_video,
)
from tokenwarp.synth import default_scene, gen_scene
from tokenwarp.types import (
    DiffusionSchedule,
    FlowField,
    LayerTokens,
    OcclusionMask,
    ParameterError,
    TokenGrid,
    make_schedule,
)


def _grid(seed, shape=(4, 4, 3)):
    return TokenGrid(np.random.default_rng(seed).normal(size=shape))


def ddim_scalar(z, e, a_t, a_p):
    x0 = (z - math.sqrt(1 - a_t) * e) / math.sqrt(a_t)
    return math.sqrt(a_p) * x0 + math.sqrt(1 - a_p) * e


# --- single steps -------------------------------------------------------------


def test_step_with_zero_eps_rescales():
    s = make_schedule()
    z = _grid(0)
    out = ddim_step(z, TokenGrid(np.zeros(z.shape)), 500, 480, s)
    np.testing.assert_allclose(out.data, math.sqrt(s.abar(480) / s.abar(500)) * z.data, rtol=1e-6)


def test_step_equal_abar_returns_input():
    s = DiffusionSchedule(np.array([0.1, 0.0, 0.2]))
    z = _grid(1)
    assert ddim_step(z, _grid(2), 2, 1, s) is z
    assert ddim_invert_step(z, _grid(2), 1, 2, s) is z


def test_step_matches_scalar_oracle():
    s = make_schedule(10, 0.01, 0.2, "linear")
    z, e = _grid(3), _grid(4)
    out = ddim_step(z, e, 7, 3, s)
    for idx in np.ndindex(z.shape):
        ref = ddim_scalar(float(z.data[idx]), float(e.data[idx]), s.abar(7), s.abar(3))
        assert abs(out.data[idx] - ref) <= 1e-6 * max(1.0, abs(ref))


def test_invert_zero_eps_and_roundtrip():
    s = make_schedule()
    z, e = _grid(5), _grid(6)
    up = ddim_invert_step(z, TokenGrid(np.zeros(z.shape)), 300, 320, s)
    np.testing.assert_allclose(up.data, math.sqrt(s.abar(320) / s.abar(300)) * z.data, rtol=1e-6)
    for t, tp in [(1000, 980), (20, 0), (500, 1)]:
        back = ddim_invert_step(ddim_step(z, e, t, tp, s), e, tp, t, s)
        np.testing.assert_allclose(back.data, z.data, atol=1e-5)


def test_step_order_errors():
    s = make_schedule(10)
    z = _grid(0)
    for t, tp in [(3, 3), (3, 5), (11, 2), (2, -1)]:
        with pytest.raises(ParameterError):
            ddim_step(z, z, t, tp, s)
    with pytest.raises(ParameterError):
        ddim_step(z, _grid(0, (2, 2, 3)), 3, 1, s)


# --- sampling -------------------------------------------------------------


def test_zero_denoiser_telescopes():
    cfg = TranslationConfig(steps=50)
    z = _grid(7)
    out = sample_frame(z, LinearDenoiser(0.0), cfg)
    a_T = cfg.schedule.abar(cfg.schedule.timesteps(50)[0])
    np.testing.assert_allclose(out.data, z.data / math.sqrt(a_T), rtol=1e-5)


def test_single_step_sampling():
    cfg = TranslationConfig(steps=1)
    z = _grid(8)
    den = LinearDenoiser(0.1)
    expect = ddim_step(z, den.predict(z, 1000), 1000, 0, cfg.schedule)
    np.testing.assert_array_equal(sample_frame(z, den, cfg).data, expect.data)


def roundtrip_gain(s, ts, c):
    """With eps = c * z every step is a scalar map, so invert-then-sample is a scalar gain."""
    gain = 1.0
    for t, tp in zip(ts[:-1], ts[1:]):
        a_t, a_p = s.abar(t), s.abar(tp)
        down = math.sqrt(a_p / a_t) * (1 - math.sqrt(1 - a_t) * c) + math.sqrt(1 - a_p) * c
        up = math.sqrt(a_t / a_p) * (1 - math.sqrt(1 - a_p) * c) + math.sqrt(1 - a_t) * c
        gain *= down * up
    return gain


@pytest.mark.parametrize("steps,c", [(50, 0.1), (100, 0.1), (20, 0.05), (50, 0.0)])
def test_inversion_roundtrip_matches_closed_form(steps, c):
    cfg = TranslationConfig(steps=steps)
    z0 = _grid(9, (8, 8, 4))
    den = LinearDenoiser(c)
    rec = sample_frame(invert_frame(z0, den, cfg), den, cfg)
    gain = roundtrip_gain(cfg.schedule, cfg.schedule.timesteps(steps) + [0], c)
    np.testing.assert_allclose(rec.data, gain * z0.data, rtol=1e-5, atol=1e-6)


def test_inversion_roundtrip_error_shrinks_with_steps():
    z0 = _grid(9, (8, 8, 4))
    den = LinearDenoiser(0.1)
    errs = []
    for steps in (25, 50, 100, 200):
        cfg = TranslationConfig(steps=steps)
        rec = sample_frame(invert_frame(z0, den, cfg), den, cfg)
        errs.append(np.linalg.norm(rec.data - z0.data) / np.linalg.norm(z0.data))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-2] < 1e-2


class _BadDenoiser:
    def predict(self, z, t, context=None):
        return TokenGrid(np.zeros((1, 1, 1)))


def test_contract_violation():
    with pytest.raises(ContractError):
        sample_frame(_grid(0), _BadDenoiser(), TranslationConfig(steps=2))


def test_toy_denoiser_is_deterministic():
    cfg = TranslationConfig(steps=5)
    z = _grid(10, (6, 6, 3))
    a = sample_frame(z, ToyAttentionDenoiser(seed=3), cfg)
    b = sample_frame(z, ToyAttentionDenoiser(seed=3), cfg)
    assert np.array_equal(a.data, b.data)
    c = sample_frame(z, ToyAttentionDenoiser(seed=4), cfg)
    assert not np.array_equal(a.data, c.data)


def test_config_validation():
    with pytest.raises(ParameterError):
        TranslationConfig(steps=2000)
    with pytest.raises(ParameterError):
        TranslationConfig(clip_len=0)
    with pytest.raises(ParameterError):
        TranslationConfig(noise_mode="other")
    with pytest.raises(ParameterError):
        ToyAttentionDenoiser(gate=0.0)


def test_initial_latent_noise_modes():
    src = _grid(11)
    shared = TranslationConfig(noise_mode="shared_seed", seed=5)
    per = TranslationConfig(noise_mode="per_frame_seed", seed=5)
    assert np.array_equal(initial_latent(src, 0, shared).data, initial_latent(src, 3, shared).data)
    assert np.array_equal(initial_latent(src, 3, per).data, initial_latent(src, 0, TranslationConfig(seed=8)).data)


# --- translation loop -------------------------------------------------------------


def _static_inputs(n, shape=(6, 6, 3)):
    g = _grid(12, shape)
    h, w = shape[:2]
    return [g] * n, [FlowField.zeros(h, w)] * (n - 1), [OcclusionMask.ones(h, w)] * (n - 1)


def test_single_frame_translation():
    lat, fl, ms = _static_inputs(1)
    den = ToyAttentionDenoiser()
    cfg = TranslationConfig(steps=4)
    outs, cache = translate_video(lat, fl, ms, den, cfg)
    np.testing.assert_array_equal(outs[0].data, sample_frame(initial_latent(lat[0], 0, cfg), den, cfg).data)
    for layer, ak, av in zip(cache.prev, cache.anchor_k, cache.anchor_v):
        assert layer.k is ak and layer.v is av


def test_identical_frames_fixed_point_per_timestep():
    lat, fl, ms = _static_inputs(3)
    cfg = TranslationConfig(steps=6, noise_mode="shared_seed", cache_mode="per_timestep")
    outs, _ = translate_video(lat, fl, ms, ToyAttentionDenoiser(), cfg)
    for o in outs[1:]:
        np.testing.assert_allclose(o.data, outs[0].data, atol=1e-5)


def test_identical_frames_settle_from_frame_two_with_final_step_cache():
    # frame 2 reuses frame 1's last-step tokens at every step, so it differs from
    # frame 1; its fused tokens equal those it consumed, so frame 3 repeats frame 2
    lat, fl, ms = _static_inputs(4)
    cfg = TranslationConfig(steps=6, noise_mode="shared_seed")
    outs, _ = translate_video(lat, fl, ms, ToyAttentionDenoiser(), cfg)
    for o in outs[2:]:
        np.testing.assert_allclose(o.data, outs[1].data, atol=1e-5)


def test_length_mismatch():
    lat, fl, ms = _static_inputs(3)
    with pytest.raises(ParameterError):
        translate_video(lat, fl[:1], ms, ToyAttentionDenoiser(), TranslationConfig(steps=2))
    with pytest.raises(ParameterError):
        translate_video(lat, [FlowField.zeros(3, 3)] * 2, ms, ToyAttentionDenoiser(), TranslationConfig(steps=2))


@pytest.fixture(scope="module")
def small_scene():
    return gen_scene(default_scene(n=8, size=16))


@pytest.mark.parametrize("clip_len,cache_mode", [(1, "final_step"), (3, "final_step"), (8, "final_step"),
                                                 (3, "per_timestep")])
def test_clips_match_unsplit(small_scene, clip_len, cache_mode):
    b = small_scene
    den = ToyAttentionDenoiser()
    cfg = TranslationConfig(steps=5, clip_len=clip_len, cache_mode=cache_mode)
    ref, _ = translate_video(b.video.grids(), b.bwd_flows, b.occlusion, den, cfg)
    outs, handoffs = translate_clips(b.video.grids(), b.bwd_flows, b.occlusion, den, cfg, return_handoffs=True)
    for o, r in zip(outs, ref):
        assert np.max(np.abs(o.data - r.data)) <= 1e-6
    assert len({h.nbytes() for h in handoffs}) == 1


def test_cache_size_constant(small_scene):
    b = small_scene
    den = ToyAttentionDenoiser()
    cfg = TranslationConfig(steps=3)
    sizes = [translate_video(b.video.grids()[:n], b.bwd_flows[:n - 1], b.occlusion[:n - 1], den, cfg)[1].nbytes()
             for n in (2, 4, 8)]
    assert len(set(sizes)) == 1


class _CrossFrameReference(ToyAttentionDenoiser):
    """Same weights, but the anchor attention is called directly, block by block."""

    anchors = None

    def forward(self, z_t, t, context=None):
        tt = np.float32(t / self.schedule.T)
        g = np.float32(self.gate)
        h = z_t.data
        pos = self.positional(z_t.h, z_t.w)
        toks = []
        for li, blk in enumerate(self.blocks):
            x = TokenGrid(np.concatenate([h + tt * blk.t_scale + blk.t_shift, pos], axis=-1))
            q, k, v = project_qkv(x, blk.proj)
            if context is None:
                out = self_attention(q, k, v)
            else:
                out = cross_frame_attention(q, context.cache.anchor_k[li], context.cache.anchor_v[li])
            toks.append(LayerTokens(q, k, v))
            h = h + g * (out.data @ blk.w_out - h)
        a = self.schedule.abar(t)
        eps = (z_t.data.astype(np.float64) - math.sqrt(a) * h) / max(math.sqrt(1 - a), 1e-8)
        return TokenGrid(eps), tuple(toks)


def test_cross_frame_loop_reproduces_baseline(small_scene):
    b = small_scene
    cfg = TranslationConfig(steps=4, attention=BASELINE)
    outs, _ = translate_video(b.video.grids(), b.bwd_flows, b.occlusion, ToyAttentionDenoiser(), cfg)
    ref, _ = translate_video(b.video.grids(), b.bwd_flows, b.occlusion, _CrossFrameReference(), cfg)
    for o, r in zip(outs, ref):
        assert np.max(np.abs(o.data - r.data)) <= 1e-6
