"""Strict JSON run configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

from .attention import AttentionConfig
from .diffusion import TranslationConfig
from .synth import ObjectSpec, SceneSpec
from .types import ParameterError, make_schedule
from .warp import OcclusionParams


class ConfigError(ValueError):
    pass


def _strict(cls, raw: Any, where: str):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")
    return raw


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    spacing: str = "scaled_linear"


@dataclass
class AttentionSection:
    mechanism: str = "flow_guided"
    use_anchor: bool = True
    warp_q: bool = True
    warp_kv: bool = True
    layer_selection: Optional[List[int]] = None


@dataclass
class DenoiserSection:
    seed: int = 0
    blocks: int = 3
    d_model: int = 8
    heads: int = 1
    gate: float = 0.3
    qk_gain: float = 2.0
    pos_gain: float = 1.0
    pos_freqs: int = 2
    t_embed: float = 0.05


@dataclass
class ObjectSection:
    shape: str = "rect"
    size: List[int] = field(default_factory=lambda: [10, 10])
    color: List[float] = field(default_factory=lambda: [0.9, 0.2, 0.1])
    velocity: List[float] = field(default_factory=lambda: [1.0, 0.0])
    position: List[float] = field(default_factory=lambda: [2.0, 10.0])
    texture: float = 0.0


@dataclass
class SceneSection:
    h: int = 32
    w: int = 32
    n: int = 16
    channels: int = 3
    background: str = "gradient"
    seed: int = 0
    clamp: bool = False
    objects: List[ObjectSection] = field(default_factory=lambda: [ObjectSection()])


@dataclass
class OcclusionSection:
    alpha: float = 0.01
    beta: float = 0.5
    soft: bool = False


@dataclass
class PathsSection:
    video: Optional[str] = None
    flows_dir: Optional[str] = None
    masks_dir: Optional[str] = None
    out: Optional[str] = None
    out_dir: Optional[str] = None


@dataclass
class RunConfig:
    seed: Optional[int] = None
    steps: int = 50
    noise_mode: str = "per_frame_seed"
    clip_len: int = 8
    cache_mode: str = "final_step"
    masked_warp_err: bool = False
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    attention: AttentionSection = field(default_factory=AttentionSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    scene: SceneSection = field(default_factory=SceneSection)
    occlusion: OcclusionSection = field(default_factory=OcclusionSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- builders -----------------------------------------------------------

    def require_seed(self, command: str) -> int:
        if self.seed is None:
            raise ConfigError(f"'seed' is required for {command}")
        return self.seed

    def attention_config(self) -> AttentionConfig:
        a = self.attention
        sel = None if a.layer_selection is None else frozenset(a.layer_selection)
        return AttentionConfig(a.mechanism, a.use_anchor, a.warp_q, a.warp_kv, sel)

    def translation_config(self) -> TranslationConfig:
        s = self.schedule
        return TranslationConfig(
            steps=self.steps,
            schedule=make_schedule(s.T, s.beta_start, s.beta_end, s.spacing),
            noise_mode=self.noise_mode,
            clip_len=self.clip_len,
            attention=self.attention_config(),
            seed=self.seed if self.seed is not None else 0,
            cache_mode=self.cache_mode,
        )

    def scene_spec(self) -> SceneSpec:
        s = self.scene
        objs = tuple(
            ObjectSpec(o.shape, tuple(o.size), tuple(o.color), tuple(o.velocity), tuple(o.position), o.texture)
            for o in s.objects
        )
        return SceneSpec(s.h, s.w, s.n, s.channels, s.background, objs, s.seed, s.clamp)

    def occlusion_params(self) -> OcclusionParams:
        o = self.occlusion
        return OcclusionParams(o.alpha, o.beta, o.soft)

    def denoiser_kwargs(self) -> Dict[str, Any]:
        d = self.denoiser
        return dict(d_model=d.d_model, heads=d.heads, blocks=d.blocks, seed=d.seed, gate=d.gate,
                    qk_gain=d.qk_gain, pos_gain=d.pos_gain, pos_freqs=d.pos_freqs, t_embed=d.t_embed)


_SECTIONS = {
    "schedule": ScheduleSection,
    "attention": AttentionSection,
    "denoiser": DenoiserSection,
    "occlusion": OcclusionSection,
    "paths": PathsSection,
}


def _check_types(obj, where: str):
    for f in fields(obj):
        val = getattr(obj, f.name)
        default = type(obj)().__getattribute__(f.name)
        if val is None or default is None or isinstance(default, (list, dict)) or hasattr(default, "__dataclass_fields__"):
            continue
        if isinstance(default, bool):
            ok = isinstance(val, bool)
        elif isinstance(default, int):
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif isinstance(default, float):
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        else:
            ok = isinstance(val, type(default))
        if not ok:
            raise ConfigError(f"{where}.{f.name}: expected {type(default).__name__}, got {val!r}")


def _section(cls, raw, where):
    obj = cls(**_strict(cls, raw, where))
    _check_types(obj, where)
    return obj


def parse_config(raw: Dict[str, Any]) -> RunConfig:
    body = dict(_strict(RunConfig, raw, "config"))
    for key, cls in _SECTIONS.items():
        body[key] = _section(cls, body.get(key), key)
    scene = dict(_strict(SceneSection, body.get("scene"), "scene"))
    if "objects" in scene:
        if not isinstance(scene["objects"], list):
            raise ConfigError("scene.objects: expected a list")
        scene["objects"] = [_section(ObjectSection, o, f"scene.objects[{i}]")
                            for i, o in enumerate(scene["objects"])]
    body["scene"] = SceneSection(**scene)
    _check_types(body["scene"], "scene")
    cfg = RunConfig(**body)
    _check_types(cfg, "config")
    if cfg.seed is not None and (not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool)):
        raise ConfigError(f"config.seed: expected int, got {cfg.seed!r}")
    try:
        cfg.translation_config()
        cfg.scene_spec()
        cfg.occlusion_params()
    except (ParameterError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(raw)
