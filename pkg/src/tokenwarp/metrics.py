"""Temporal-consistency metrics and the ablation harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import BASELINE, FULL, KV_WARP, Q_WARP, AttentionConfig
from .diffusion import ToyAttentionDenoiser, TranslationConfig, translate_video
from .synth import SceneBundle
from .types import FlowField, OcclusionMask, ParameterError, VideoTensor
from .warp import resample_plane, warp_array

EMBED_CELLS = 16


def _check_pairs(video: VideoTensor, flows, masks):
    if len(flows) != video.n - 1:
        raise ParameterError(f"{video.n} frames need {video.n - 1} flows, got {len(flows)}")
    if masks is not None and len(masks) != video.n - 1:
        raise ParameterError(f"{video.n} frames need {video.n - 1} masks, got {len(masks)}")
    for f in flows:
        if f.shape != (video.h, video.w):
            raise ParameterError(f"flow {f.shape} is not at frame resolution {(video.h, video.w)}")
    for m in masks or ():
        if m.shape != (video.h, video.w):
            raise ParameterError(f"mask {m.shape} is not at frame resolution {(video.h, video.w)}")


def warp_error(video: VideoTensor, bwd_flows: Sequence[FlowField],
               masks: Optional[Sequence[OcclusionMask]] = None, masked: bool = False) -> float:
    """Mean over consecutive pairs of the MSE between frame i and frame i-1 warped onto it.

    With ``masked`` only pixels whose mask exceeds 0.5 count; a pair with no
    such pixel contributes zero.
    """
    if masked and masks is None:
        raise ParameterError("masked warp error needs occlusion masks")
    _check_pairs(video, bwd_flows, masks)
    if video.n < 2:
        return 0.0
    total = 0.0
    for i in range(1, video.n):
        warped = warp_array(video.frame(i - 1), bwd_flows[i - 1])
        sq = (video.frame(i).astype(np.float64) - warped) ** 2
        if masked:
            keep = masks[i - 1].m > 0.5
            cnt = int(keep.sum()) * video.c
            total += float(sq[keep].sum()) / cnt if cnt else 0.0
        else:
            total += float(sq.mean())
    return total / (video.n - 1)


def frame_embedding(frame: np.ndarray) -> np.ndarray:
    """Average-pool a frame to at most 16x16 cells and flatten."""
    h, w = frame.shape[:2]
    return resample_plane(frame, min(h, EMBED_CELLS), min(w, EMBED_CELLS)).reshape(-1)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def temporal_consistency(video: VideoTensor) -> float:
    """Mean cosine similarity of consecutive frame embeddings."""
    if video.n < 2:
        raise ParameterError("temporal consistency needs at least two frames")
    emb = [frame_embedding(video.frame(i)) for i in range(video.n)]
    return float(np.mean([_cosine(emb[i - 1], emb[i]) for i in range(1, video.n)]))


# ---------------------------------------------------------------------------
# ablations

CANONICAL_VARIANTS: Dict[str, AttentionConfig] = {
    "baseline": BASELINE,
    "q_warp": Q_WARP,
    "kv_warp": KV_WARP,
    "full": FULL,
}


def block_variants(blocks: int = 3) -> Dict[str, AttentionConfig]:
    """Full flow-guided attention restricted to every non-empty subset of blocks."""
    out = {}
    for mask in range(1, 2 ** blocks):
        sel = frozenset(b + 1 for b in range(blocks) if mask >> b & 1)
        name = "blocks_" + "".join(str(b) for b in sorted(sel))
        out[name] = AttentionConfig("flow_guided", True, True, True, frozenset(b - 1 for b in sel))
    return out


@dataclass(frozen=True)
class ReportRow:
    variant: str
    warp_err: float
    tem_con: float


Variants = Union[Mapping[str, AttentionConfig], Sequence[AttentionConfig]]


def _named(variants: Variants) -> List[Tuple[str, AttentionConfig]]:
    if isinstance(variants, Mapping):
        items = list(variants.items())
    else:
        items = [(f"variant_{i}", v) for i, v in enumerate(variants)]
    if not items:
        raise ParameterError("need at least one variant")
    return items


def evaluate(outputs, bundle: SceneBundle, masked: bool = False) -> Tuple[float, float]:
    video = VideoTensor.from_frames(outputs)
    return (warp_error(video, bundle.bwd_flows, bundle.occlusion, masked),
            temporal_consistency(video))


def ablation_report(bundle: SceneBundle, denoiser_seed: int, variants: Variants,
                    cfg: TranslationConfig, masked: bool = False, **denoiser_kw) -> List[ReportRow]:
    """Translate the scene once per attention variant and score each output video.

    Every variant uses the same denoiser weights, noise codes and flows; the
    flows and masks are the scene's analytic ones at frame resolution.
    """
    items = _named(variants)
    latents = bundle.video.grids()
    den = ToyAttentionDenoiser(d_in=bundle.video.c, seed=denoiser_seed, schedule=cfg.schedule,
                               **denoiser_kw)
    rows = []
    for name, att in items:
        run_cfg = TranslationConfig(cfg.steps, cfg.schedule, cfg.noise_mode, cfg.clip_len, att,
                                    cfg.seed, cfg.cache_mode)
        outputs, _ = translate_video(latents, bundle.bwd_flows, bundle.occlusion, den, run_cfg)
        we, tc = evaluate(outputs, bundle, masked)
        rows.append(ReportRow(name, we, tc))
    return rows


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["variant", "warp_err", "tem_con"])
    for r in rows:
        wr.writerow([r.variant, f"{r.warp_err:.6f}", f"{r.tem_con:.6f}"])
    return buf.getvalue()
