"""DDIM sampling/inversion, toy denoisers and the frame-by-frame translation loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attention import (
    FULL,
    AttentionConfig,
    ProjectionWeights,
    attend_fused,
    fuse_inputs,
    orthogonal,
    project_qkv,
    scaled_dot_attention,
)
from .types import (
    DiffusionSchedule,
    FlowField,
    LayerTokens,
    OcclusionMask,
    ParameterError,
    TokenCache,
    TokenGrid,
    make_schedule,
)

NOISE_MODES = ("shared_seed", "per_frame_seed")
CACHE_MODES = ("final_step", "per_timestep")


class ContractError(RuntimeError):
    """A denoiser returned something that breaks its contract."""


def _check_order(t: int, t_prev: int, s: DiffusionSchedule):
    if not (0 <= t_prev < t <= s.T):
        raise ParameterError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}, T={s.T}")


def ddim_step(z_t: TokenGrid, eps: TokenGrid, t: int, t_prev: int, s: DiffusionSchedule) -> TokenGrid:
    """Deterministic (eta = 0) DDIM update from ``t`` down to ``t_prev``."""
    _check_order(t, t_prev, s)
    if z_t.shape != eps.shape:
        raise ParameterError(f"z {z_t.shape} and eps {eps.shape} differ")
    a_t, a_p = s.abar(t), s.abar(t_prev)
    if a_t == a_p:
        return z_t
    z = z_t.data.astype(np.float64)
    e = eps.data.astype(np.float64)
    x0 = (z - math.sqrt(1.0 - a_t) * e) / math.sqrt(a_t)
    return TokenGrid(math.sqrt(a_p) * x0 + math.sqrt(1.0 - a_p) * e)


def ddim_invert_step(z_prev: TokenGrid, eps: TokenGrid, t_prev: int, t: int,
                     s: DiffusionSchedule) -> TokenGrid:
    """Inverse of :func:`ddim_step` for the same ``eps``: moves ``t_prev`` up to ``t``."""
    _check_order(t, t_prev, s)
    if z_prev.shape != eps.shape:
        raise ParameterError(f"z {z_prev.shape} and eps {eps.shape} differ")
    a_t, a_p = s.abar(t), s.abar(t_prev)
    if a_t == a_p:
        return z_prev
    z = z_prev.data.astype(np.float64)
    e = eps.data.astype(np.float64)
    x0 = (z - math.sqrt(1.0 - a_p) * e) / math.sqrt(a_p)
    return TokenGrid(math.sqrt(a_t) * x0 + math.sqrt(1.0 - a_t) * e)


# ---------------------------------------------------------------------------
# denoisers


@dataclass(frozen=True)
class LinearDenoiser:
    """Predicts ``eps = c * z_t`` and ignores any attention context.

    Keep ``|c| < 1 / max_t sqrt(1 - abar_t)`` for bounded updates.
    """

    c: float = 0.1

    def predict(self, z_t: TokenGrid, t: int, context=None) -> TokenGrid:
        return TokenGrid(np.float32(self.c) * z_t.data)


@dataclass(frozen=True)
class AttentionContext:
    """Everything a denoiser needs to run cross-frame attention for one frame."""

    cache: TokenCache
    flow: FlowField
    mask: OcclusionMask
    config: AttentionConfig = FULL


@dataclass(frozen=True, eq=False)
class Block:
    proj: ProjectionWeights
    w_out: np.ndarray
    t_scale: np.ndarray
    t_shift: np.ndarray


class ToyAttentionDenoiser:
    """Stack of attention blocks predicting the clean latent; returns it as eps.

    Each block adds a timestep embedding ``(t / T) * a + b`` to its input,
    projects to Q/K/V, attends, maps back with ``w_out`` and applies a gated
    residual ``h <- h + gate * (out - h)``. The clean estimate is converted to
    a noise prediction with the schedule so DDIM sees an ordinary eps model.
    ``w_out`` is the pseudo-inverse of ``Wv`` so a block's attention output is
    a convex combination of its own input tokens.
    """

    def __init__(self, d_in: int = 3, d_model: int = 8, heads: int = 1, blocks: int = 3,
                 seed: int = 0, gate: float = 0.3, qk_gain: float = 2.0, pos_gain: float = 1.0,
                 pos_freqs: int = 2, t_embed: float = 0.05,
                 schedule: Optional[DiffusionSchedule] = None):
        if blocks < 1:
            raise ParameterError("need at least one block")
        if not (0.0 < gate <= 1.0):
            raise ParameterError(f"gate must lie in (0, 1], got {gate}")
        self.d_in, self.d_model, self.heads, self.gate = d_in, d_model, heads, gate
        self.seed = seed
        self.pos_gain, self.pos_freqs = pos_gain, pos_freqs
        self.schedule = schedule if schedule is not None else make_schedule()
        d_aug = d_in + 4 * pos_freqs
        rng = np.random.default_rng(seed)
        made = []
        for _ in range(blocks):
            wqk = orthogonal(rng, d_aug, d_model)
            wqk[:d_in] *= qk_gain
            wv = np.zeros((d_aug, d_model))
            wv[:d_in] = orthogonal(rng, d_in, d_model)
            proj = ProjectionWeights(wqk, wqk, wv, heads)
            w_out = np.linalg.pinv(wv[:d_in]).astype(np.float32)
            made.append(Block(proj, w_out,
                              (t_embed * rng.standard_normal(d_in)).astype(np.float32),
                              (t_embed * rng.standard_normal(d_in)).astype(np.float32)))
        self.blocks = tuple(made)
        self._pos = {}

    def positional(self, h: int, w: int) -> np.ndarray:
        """Sinusoidal position features of shape ``(h, w, 4 * pos_freqs)``."""
        if (h, w) not in self._pos:
            ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
            feats = []
            for f in range(self.pos_freqs):
                for c, n in ((xs, w), (ys, h)):
                    ang = np.pi * c / n * 2.0 ** f
                    feats += [np.sin(ang), np.cos(ang)]
            pe = self.pos_gain * np.stack(feats, axis=-1) if feats else np.zeros((h, w, 0))
            self._pos[(h, w)] = pe.astype(np.float32)
        return self._pos[(h, w)]

    @property
    def layers(self) -> int:
        return len(self.blocks)

    def _layer_prev(self, cache: TokenCache, layer: int, t: int) -> LayerTokens:
        if cache.per_step is not None and t in cache.per_step:
            return cache.per_step[t][layer]
        return cache.prev[layer]

    def _layer_anchor(self, cache: TokenCache, layer: int, t: int):
        if cache.anchor_steps is not None and t in cache.anchor_steps:
            tk = cache.anchor_steps[t][layer]
            return tk.k, tk.v
        return cache.anchor_k[layer], cache.anchor_v[layer]

    def forward(self, z_t: TokenGrid, t: int, context: Optional[AttentionContext] = None):
        """Return ``(eps, tokens)`` where ``tokens`` are the per-layer Q/K/V attended to."""
        if z_t.d != self.d_in:
            raise ParameterError(f"latent has {z_t.d} channels, denoiser expects {self.d_in}")
        if context is not None and context.cache.layers != self.layers:
            raise ParameterError(f"cache has {context.cache.layers} layers, denoiser has {self.layers}")
        tt = np.float32(t / self.schedule.T)
        g = np.float32(self.gate)
        h = z_t.data
        pos = self.positional(z_t.h, z_t.w)
        tokens = []
        for li, blk in enumerate(self.blocks):
            x = TokenGrid(np.concatenate([h + tt * blk.t_scale + blk.t_shift, pos], axis=-1))
            q, k, v = project_qkv(x, blk.proj)
            mech = "self" if context is None else context.config.mechanism_for(li)
            if mech == "self":
                out = scaled_dot_attention(q, k, v, self.heads)
            elif mech == "cross_frame":
                ak, av = self._layer_anchor(context.cache, li, t)
                out = scaled_dot_attention(q, ak, av, self.heads)
            else:
                cache = context.cache
                prev = self._layer_prev(cache, li, t)
                fused = fuse_inputs(q, k, v, (prev.q, prev.k, prev.v), context.flow, context.mask,
                                    context.config)
                q, k, v = fused.q, fused.k, fused.v
                out = attend_fused(fused, self._layer_anchor(cache, li, t), context.config, self.heads)
            tokens.append(LayerTokens(q, k, v))
            h = h + g * (out.data @ blk.w_out - h)
        a = self.schedule.abar(t)
        sig = max(math.sqrt(1.0 - a), 1e-8)
        eps = (z_t.data.astype(np.float64) - math.sqrt(a) * h) / sig
        return TokenGrid(eps), tuple(tokens)

    def predict(self, z_t: TokenGrid, t: int, context: Optional[AttentionContext] = None) -> TokenGrid:
        return self.forward(z_t, t, context)[0]


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class TranslationConfig:
    steps: int = 50
    schedule: DiffusionSchedule = field(default_factory=make_schedule)
    noise_mode: str = "per_frame_seed"
    clip_len: int = 8
    attention: AttentionConfig = FULL
    seed: int = 0
    cache_mode: str = "final_step"

    def __post_init__(self):
        if self.steps < 1 or self.steps > self.schedule.T:
            raise ParameterError(f"steps must be in [1, {self.schedule.T}], got {self.steps}")
        if self.clip_len < 1:
            raise ParameterError(f"clip_len must be >= 1, got {self.clip_len}")
        if self.noise_mode not in NOISE_MODES:
            raise ParameterError(f"unknown noise_mode {self.noise_mode!r}")
        if self.cache_mode not in CACHE_MODES:
            raise ParameterError(f"unknown cache_mode {self.cache_mode!r}")


@dataclass
class FrameResult:
    latent: TokenGrid
    tokens: Optional[tuple] = None
    per_step: Optional[Dict[int, tuple]] = None


def _denoise(denoiser, z, t, context):
    if hasattr(denoiser, "forward"):
        eps, tokens = denoiser.forward(z, t, context)
    else:
        eps, tokens = denoiser.predict(z, t, context), None
    if not isinstance(eps, TokenGrid) or eps.shape != z.shape:
        got = eps.shape if isinstance(eps, TokenGrid) else type(eps).__name__
        raise ContractError(f"denoiser returned {got} for input of shape {z.shape}")
    return eps, tokens


def run_sampler(z_T: TokenGrid, denoiser, cfg: TranslationConfig, context=None,
                record_steps: bool = False) -> FrameResult:
    s = cfg.schedule
    ts = s.timesteps(cfg.steps) + [0]
    z = z_T
    tokens = None
    per_step = {} if record_steps else None
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps, tokens = _denoise(denoiser, z, t, context)
        if record_steps and tokens is not None:
            per_step[t] = tokens
        z = ddim_step(z, eps, t, t_prev, s)
    return FrameResult(z, tokens, per_step)


def sample_frame(z_T: TokenGrid, denoiser, cfg: TranslationConfig, context=None) -> TokenGrid:
    """Run ``cfg.steps`` DDIM steps from ``T`` to the clean terminal."""
    return run_sampler(z_T, denoiser, cfg, context).latent


def invert_frame(z_0: TokenGrid, denoiser, cfg: TranslationConfig, context=None) -> TokenGrid:
    """DDIM inversion over the sampling timesteps in reverse, eps taken at the current latent."""
    s = cfg.schedule
    ts = [0] + s.timesteps(cfg.steps)[::-1]
    z = z_0
    for t_prev, t in zip(ts[:-1], ts[1:]):
        eps, _ = _denoise(denoiser, z, t_prev, context)
        z = ddim_invert_step(z, eps, t_prev, t, s)
    return z


def initial_latent(source: TokenGrid, frame_index: int, cfg: TranslationConfig) -> TokenGrid:
    """Noise the source latent to ``t = T`` with a seeded Gaussian code."""
    seed = cfg.seed if cfg.noise_mode == "shared_seed" else cfg.seed + frame_index
    noise = np.random.default_rng(seed).standard_normal(source.shape).astype(np.float32)
    a = cfg.schedule.abar(cfg.schedule.timesteps(cfg.steps)[0])
    return TokenGrid(math.sqrt(a) * source.data.astype(np.float64) + math.sqrt(1.0 - a) * noise)


def _check_inputs(latents, flows, masks):
    n = len(latents)
    if n < 1:
        raise ParameterError("need at least one frame")
    if len(flows) != n - 1 or len(masks) != n - 1:
        raise ParameterError(f"{n} frames need {n - 1} flows and masks, got {len(flows)} and {len(masks)}")
    shape = latents[0].shape
    for z in latents:
        if z.shape != shape:
            raise ParameterError(f"latent shapes differ: {z.shape} vs {shape}")
    for f, m in zip(flows, masks):
        if f.shape != shape[:2] or m.shape != shape[:2]:
            raise ParameterError(f"flow {f.shape} / mask {m.shape} not at token resolution {shape[:2]}")


def _translate_range(latents, flows, masks, start: int, cache: Optional[TokenCache], denoiser,
                     cfg: TranslationConfig):
    """Translate frames ``start .. start + len(latents) - 1`` (global indices, 0-based).

    ``flows[j]`` / ``masks[j]`` connect local frame ``j`` to the frame before it;
    ``flows[0]`` is unused when ``start == 0``.
    """
    per_step = cfg.cache_mode == "per_timestep"
    outputs = []
    for j, src in enumerate(latents):
        idx = start + j
        z_T = initial_latent(src, idx, cfg)
        if idx == 0:
            res = run_sampler(z_T, denoiser, cfg, None, per_step)
            if res.tokens is None:
                raise ContractError("translation needs a denoiser that exposes its attention tokens")
            cache = TokenCache(res.tokens, tuple(tk.k for tk in res.tokens),
                               tuple(tk.v for tk in res.tokens), idx, res.per_step, res.per_step)
        else:
            if cache is None:
                raise ParameterError(f"frame {idx} needs the cache of frame {idx - 1}")
            ctx = AttentionContext(cache, flows[j], masks[j], cfg.attention)
            res = run_sampler(z_T, denoiser, cfg, ctx, per_step)
            cache = cache.advance(res.tokens, idx, res.per_step)
        outputs.append(res.latent)
    return outputs, cache


def translate_video(video_latents: Sequence[TokenGrid], flows: Sequence[FlowField],
                    masks: Sequence[OcclusionMask], denoiser, cfg: TranslationConfig):
    """Translate every frame in order; returns ``(outputs, cache)``.

    ``flows[i]`` and ``masks[i]`` map frame ``i + 1`` back to frame ``i`` and
    must already be at token resolution.
    """
    latents = list(video_latents)
    _check_inputs(latents, flows, masks)
    return _translate_range(latents, [None] + list(flows), [None] + list(masks), 0, None, denoiser, cfg)


def handoff(cache: TokenCache) -> TokenCache:
    """Keep only what crosses a clip boundary: last-frame tokens and the anchors."""
    steps = None if cache.per_step is None else dict(cache.per_step)
    anchors = None if cache.anchor_steps is None else dict(cache.anchor_steps)
    return TokenCache(tuple(cache.prev), tuple(cache.anchor_k), tuple(cache.anchor_v),
                      cache.frame_index, steps, anchors)


def translate_clips(video_latents, flows, masks, denoiser, cfg: TranslationConfig,
                    return_handoffs: bool = False):
    """Clip-by-clip translation; identical to :func:`translate_video` frame for frame."""
    latents = list(video_latents)
    _check_inputs(latents, flows, masks)
    flows = [None] + list(flows)
    masks = [None] + list(masks)
    outputs: List[TokenGrid] = []
    handoffs = []
    cache = None
    for start in range(0, len(latents), cfg.clip_len):
        stop = min(start + cfg.clip_len, len(latents))
        clip_out, cache = _translate_range(latents[start:stop], flows[start:stop], masks[start:stop],
                                           start, cache, denoiser, cfg)
        outputs.extend(clip_out)
        cache = handoff(cache)
        handoffs.append(cache)
    if return_handoffs:
        return outputs, handoffs
    return outputs
