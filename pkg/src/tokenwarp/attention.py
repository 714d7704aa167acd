"""Token projections and the self / cross-frame / flow-guided attention variants."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Optional, Tuple

import numpy as np

from .types import FlowField, OcclusionMask, ParameterError, TokenGrid
from .warp import backward_warp, fuse_tokens

MECHANISMS = ("self", "cross_frame", "flow_guided")


@dataclass(frozen=True, eq=False)
class ProjectionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int = 1

    def __post_init__(self):
        mats = [np.array(m, dtype=np.float32) for m in (self.wq, self.wk, self.wv)]
        shape = mats[0].shape
        if len(shape) != 2 or any(m.shape != shape for m in mats):
            raise ParameterError("Wq, Wk, Wv must be equal-shaped 2-D matrices")
        if not all(np.all(np.isfinite(m)) for m in mats):
            raise ParameterError("projection weights must be finite")
        if self.heads < 1 or shape[1] % self.heads:
            raise ParameterError(f"heads={self.heads} must divide d_model={shape[1]}")
        for name, m in zip(("wq", "wk", "wv"), mats):
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def d_in(self) -> int:
        return self.wq.shape[0]

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def identity(cls, d: int, heads: int = 1) -> "ProjectionWeights":
        eye = np.eye(d)
        return cls(eye, eye, eye, heads)

    @classmethod
    def random(cls, d_in: int, d_model: int, heads: int = 1, seed: int = 0,
               gain: float = 1.0) -> "ProjectionWeights":
        rng = np.random.default_rng(seed)
        return cls(*(gain * orthogonal(rng, d_in, d_model) for _ in range(3)), heads=heads)


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Matrix with orthonormal rows or columns (whichever is shorter)."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


@dataclass(frozen=True)
class AttentionConfig:
    """Which attention each layer runs.

    ``layer_selection`` lists the layers that use the configured mechanism;
    ``None`` selects every layer. Unselected layers fall back to cross-frame
    attention when ``use_anchor`` is set, else to plain self-attention.
    """

    mechanism: str = "flow_guided"
    use_anchor: bool = True
    warp_q: bool = True
    warp_kv: bool = True
    layer_selection: Optional[FrozenSet[int]] = None

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ParameterError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "cross_frame" and not self.use_anchor:
            raise ParameterError("cross_frame attention requires use_anchor")
        if self.layer_selection is not None:
            object.__setattr__(self, "layer_selection", frozenset(int(i) for i in self.layer_selection))

    def mechanism_for(self, layer: int) -> str:
        if self.layer_selection is None or layer in self.layer_selection:
            return self.mechanism
        return "cross_frame" if self.use_anchor else "self"


BASELINE = AttentionConfig("cross_frame", use_anchor=True, warp_q=False, warp_kv=False)
Q_WARP = AttentionConfig("flow_guided", use_anchor=True, warp_q=True, warp_kv=False)
KV_WARP = AttentionConfig("flow_guided", use_anchor=True, warp_q=False, warp_kv=True)
FULL = AttentionConfig("flow_guided", use_anchor=True, warp_q=True, warp_kv=True)


def project_qkv(z: TokenGrid, w: ProjectionWeights) -> Tuple[TokenGrid, TokenGrid, TokenGrid]:
    if z.d != w.d_in:
        raise ParameterError(f"token dim {z.d} != projection input dim {w.d_in}")
    x = z.data
    return TokenGrid(x @ w.wq), TokenGrid(x @ w.wk), TokenGrid(x @ w.wv)


def _token_matrix(t) -> np.ndarray:
    if isinstance(t, TokenGrid):
        return t.tokens()
    a = np.asarray(t, dtype=np.float32)
    if a.ndim == 3:
        a = a.reshape(-1, a.shape[-1])
    if a.ndim != 2:
        raise ParameterError(f"expected a token grid or (n, d) token list, got shape {a.shape}")
    return a


# exp() of float32 values below about -87 lands in the subnormal range, which is
# very slow on most CPUs; such weights are < 1e-35 relative to the row maximum.
_LOGIT_FLOOR = -80.0


def _unnormalised(logits: np.ndarray) -> np.ndarray:
    """In-place ``exp(logits - rowmax)``; rows are not yet normalised."""
    logits -= logits.max(axis=-1, keepdims=True)
    np.maximum(logits, _LOGIT_FLOOR, out=logits)
    np.exp(logits, out=logits)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    p = _unnormalised(np.array(logits, dtype=np.float32))
    p /= p.sum(axis=-1, keepdims=True)
    return p


def scaled_dot_attention(Q: TokenGrid, K, V, heads: int = 1, return_weights: bool = False,
                         logit_shift: float = 0.0):
    """Multi-head softmax attention of Q's tokens over the K/V token list.

    ``K`` and ``V`` may be grids or ``(n, d)`` token lists and may hold a
    different number of tokens than ``Q``. ``logit_shift`` is added to every
    logit before the softmax (debug hook). With ``return_weights`` the
    per-head weight matrices ``(heads, n_q, n_kv)`` are returned as well.
    """
    q = Q.tokens()
    k = _token_matrix(K)
    v = _token_matrix(V)
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise ParameterError(f"channel dims differ: Q {d}, K {k.shape[1]}, V {v.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ParameterError(f"K has {k.shape[0]} tokens but V has {v.shape[0]}")
    if heads < 1 or d % heads:
        raise ParameterError(f"heads={heads} must divide d_model={d}")
    dh = d // heads
    scale = np.float32(1.0 / np.sqrt(dh))
    out = np.empty((q.shape[0], d), dtype=np.float32)
    weights = []
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        logits = (q[:, sl] * scale) @ k[:, sl].T
        if logit_shift:
            logits += np.float32(logit_shift)
        p = _unnormalised(logits)
        norm = p.sum(axis=-1, keepdims=True)
        out[:, sl] = (p @ v[:, sl]) / norm
        if return_weights:
            weights.append(p / norm)
    result = TokenGrid(out.reshape(Q.h, Q.w, d))
    if return_weights:
        return result, np.stack(weights)
    return result


def self_attention(Q: TokenGrid, K: TokenGrid, V: TokenGrid, heads: int = 1) -> TokenGrid:
    return scaled_dot_attention(Q, K, V, heads)


def cross_frame_attention(Q_i: TokenGrid, K_anc: TokenGrid, V_anc: TokenGrid, heads: int = 1) -> TokenGrid:
    return scaled_dot_attention(Q_i, K_anc, V_anc, heads)


@dataclass(frozen=True)
class FusedTokens:
    q: TokenGrid
    k: TokenGrid
    v: TokenGrid


def fuse_inputs(Q_i, K_i, V_i, prev, flow: FlowField, mask: OcclusionMask,
                cfg: AttentionConfig) -> FusedTokens:
    """Warp the previous frame's tokens and blend them with the current ones."""
    Q_p, K_p, V_p = prev
    hw = (Q_i.h, Q_i.w)
    for g in (K_i, V_i, Q_p, K_p, V_p):
        if (g.h, g.w) != hw:
            raise ParameterError(f"token grids must share (h, w) = {hw}, got {(g.h, g.w)}")
    if flow.shape != hw:
        raise ParameterError(f"flow {flow.shape} is not at token resolution {hw}; resize it first")
    if mask.shape != hw:
        raise ParameterError(f"mask {mask.shape} is not at token resolution {hw}")
    q = fuse_tokens(backward_warp(Q_p, flow), Q_i, mask) if cfg.warp_q else Q_i
    if cfg.warp_kv:
        k = fuse_tokens(backward_warp(K_p, flow), K_i, mask)
        v = fuse_tokens(backward_warp(V_p, flow), V_i, mask)
    else:
        k, v = K_i, V_i
    return FusedTokens(q, k, v)


def attend_fused(fused: FusedTokens, anchor, cfg: AttentionConfig, heads: int = 1) -> TokenGrid:
    if cfg.use_anchor:
        K_anc, V_anc = anchor
        k = np.concatenate([K_anc.tokens(), fused.k.tokens()], axis=0)
        v = np.concatenate([V_anc.tokens(), fused.v.tokens()], axis=0)
    else:
        k, v = fused.k, fused.v
    return scaled_dot_attention(fused.q, k, v, heads)


def flow_guided_attention(Q_i: TokenGrid, K_i: TokenGrid, V_i: TokenGrid, cache_prev,
                          anchor, flow: FlowField, mask: OcclusionMask,
                          cfg: AttentionConfig = FULL, heads: int = 1) -> TokenGrid:
    """Attention over flow-warped, occlusion-fused tokens plus the anchor tokens.

    Anchor K/V are prepended along the token axis when ``cfg.use_anchor``.
    ``cache_prev`` is the previous frame's ``(Q, K, V)``.
    """
    fused = fuse_inputs(Q_i, K_i, V_i, cache_prev, flow, mask, cfg)
    return attend_fused(fused, anchor, cfg, heads)


def first_frame_attention(Q_1: TokenGrid, K_1: TokenGrid, V_1: TokenGrid, heads: int = 1):
    out = scaled_dot_attention(Q_1, K_1, V_1, heads)
    return out, (K_1, V_1)
