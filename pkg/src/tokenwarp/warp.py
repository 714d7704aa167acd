"""Flow resizing, backward warping, occlusion estimation and block matching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .types import FlowField, OcclusionMask, ParameterError, TokenGrid


@dataclass(frozen=True)
class OcclusionParams:
    alpha: float = 0.01
    beta: float = 0.5
    soft: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ParameterError(f"{name} must be finite and non-negative, got {val}")


@dataclass(frozen=True)
class BlockMatchParams:
    block: int = 9
    radius: int = 8
    levels: int = 3

    def __post_init__(self):
        if self.block < 1 or self.block % 2 == 0:
            raise ParameterError(f"block must be an odd positive integer, got {self.block}")
        if self.radius < 1:
            raise ParameterError(f"radius must be >= 1, got {self.radius}")
        if self.levels < 1:
            raise ParameterError(f"levels must be >= 1, got {self.levels}")


# ---------------------------------------------------------------------------
# resampling


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows average the input cells overlapped by each output cell."""
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_in)
        for j in range(j0, j1):
            mat[i, j] = min(hi, j + 1) - max(lo, j)
    return mat / scale


def _linear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation with edge clamping."""
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        j0 = int(math.floor(src))
        j1 = min(j0 + 1, n_in - 1)
        frac = src - j0
        mat[i, j0] += 1.0 - frac
        mat[i, j1] += frac
    return mat


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_out == n_in:
        return np.eye(n_in)
    if n_out < n_in:
        return _area_matrix(n_in, n_out)
    return _linear_matrix(n_in, n_out)


def resample_plane(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resample a 2-D (or channels-last 3-D) array to ``(h, w)``, axis by axis."""
    if h < 1 or w < 1:
        raise ParameterError(f"target size must be positive, got {h}x{w}")
    a = np.asarray(a, dtype=np.float64)
    ry = _resample_matrix(a.shape[0], h)
    rx = _resample_matrix(a.shape[1], w)
    return np.einsum("ij,jk...,lk->il...", ry, a, rx)


def resize_flow(flow: FlowField, target_h: int, target_w: int) -> FlowField:
    """Resample a flow field and rescale its displacements to the target grid."""
    if target_h < 1 or target_w < 1:
        raise ParameterError(f"target size must be positive, got {target_h}x{target_w}")
    if (target_h, target_w) == flow.shape:
        return flow
    u = resample_plane(flow.u, target_h, target_w) * (target_w / flow.w)
    v = resample_plane(flow.v, target_h, target_w) * (target_h / flow.h)
    return FlowField(u, v)


def resize_mask(mask: OcclusionMask, target_h: int, target_w: int) -> OcclusionMask:
    if (target_h, target_w) == mask.shape:
        return mask
    return OcclusionMask(np.clip(resample_plane(mask.m, target_h, target_w), 0.0, 1.0))


# ---------------------------------------------------------------------------
# warping


def _bilinear_gather(src: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``src`` (h, w[, c]) at float coordinates with border clamping."""
    h, w = src.shape[:2]
    sx = np.clip(sx, 0.0, w - 1)
    sy = np.clip(sy, 0.0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    if src.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _sample_coords(flow: FlowField):
    ys, xs = np.mgrid[0:flow.h, 0:flow.w]
    return xs + flow.u.astype(np.float64), ys + flow.v.astype(np.float64)


def warp_array(src: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp a raw ``(h, w[, c])`` array; shared by token and pixel paths."""
    if src.shape[:2] != flow.shape:
        raise ParameterError(f"array {src.shape[:2]} and flow {flow.shape} sizes differ")
    sx, sy = _sample_coords(flow)
    return _bilinear_gather(np.asarray(src, dtype=np.float64), sx, sy)


def backward_warp(grid: TokenGrid, flow: FlowField) -> TokenGrid:
    """Gather ``grid`` at ``(x + u, y + v)`` with bilinear weights."""
    if (grid.h, grid.w) != flow.shape:
        raise ParameterError(f"grid {(grid.h, grid.w)} and flow {flow.shape} sizes differ")
    return TokenGrid(warp_array(grid.data, flow))


def fuse_tokens(warped: TokenGrid, current: TokenGrid, mask: OcclusionMask) -> TokenGrid:
    if warped.shape != current.shape:
        raise ParameterError(f"warped {warped.shape} and current {current.shape} differ")
    if mask.shape != (current.h, current.w):
        raise ParameterError(f"mask {mask.shape} does not match grid {(current.h, current.w)}")
    m = mask.m[..., None]
    return TokenGrid(m * warped.data + (1.0 - m) * current.data)


# ---------------------------------------------------------------------------
# occlusion


def estimate_occlusion(f_bwd: FlowField, f_fwd: FlowField,
                       params: OcclusionParams = OcclusionParams()) -> OcclusionMask:
    """Forward-backward consistency check on the backward flow ``i => i-1``.

    ``f_fwd`` is the flow ``i-1 => i`` defined on the previous frame's grid.
    """
    if f_bwd.shape != f_fwd.shape:
        raise ParameterError(f"flow shapes differ: {f_bwd.shape} vs {f_fwd.shape}")
    sx, sy = _sample_coords(f_bwd)
    fwd = _bilinear_gather(f_fwd.to_array().astype(np.float64), sx, sy)
    bu, bv = f_bwd.u.astype(np.float64), f_bwd.v.astype(np.float64)
    ru, rv = bu + fwd[..., 0], bv + fwd[..., 1]
    r2 = ru * ru + rv * rv
    tol = params.alpha * (bu * bu + bv * bv + fwd[..., 0] ** 2 + fwd[..., 1] ** 2) + params.beta
    if params.soft:
        m = np.exp(-r2 / np.maximum(tol, 1e-12))
    else:
        m = (r2 < tol).astype(np.float64)
    return OcclusionMask(np.clip(m, 0.0, 1.0))


# ---------------------------------------------------------------------------
# block matching


def _as_plane_stack(frame) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ParameterError(f"frame must be (h, w) or (h, w, c), got shape {a.shape}")
    return a


def _pool2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[0] // 2, a.shape[1] // 2
    a = a[: 2 * h, : 2 * w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def _box_sum(a: np.ndarray, block: int) -> np.ndarray:
    r = block // 2
    p = np.pad(a, r, mode="edge")
    p = sliding_window_view(p, block, axis=0).sum(axis=-1)
    return sliding_window_view(p, block, axis=1).sum(axis=-1)


def _sad_map(nxt: np.ndarray, prv: np.ndarray, du: int, dv: int, block: int) -> np.ndarray:
    """Block SAD between ``nxt`` around p and ``prv`` around ``p + (du, dv)``."""
    h, w = nxt.shape[:2]
    ys = np.clip(np.arange(h) + dv, 0, h - 1)
    xs = np.clip(np.arange(w) + du, 0, w - 1)
    diff = np.abs(nxt - prv[ys][:, xs]).sum(axis=-1)
    return _box_sum(diff, block)


def _match_level(nxt, prv, init_u, init_v, radius, block):
    """Per-pixel SAD search over ``init + [-radius, radius]^2``.

    Ties go to the smallest total displacement magnitude, then smallest (v, u).
    """
    h, w = nxt.shape[:2]
    offsets = [(dv, du) for dv in range(-radius, radius + 1) for du in range(-radius, radius + 1)]
    best_cost = np.full((h, w), np.inf)
    best_key = np.full((h, w, 3), np.inf)
    best_u = np.zeros((h, w), dtype=np.int64)
    best_v = np.zeros((h, w), dtype=np.int64)
    cache = {}
    inits = np.unique(np.stack([init_v, init_u], axis=-1).reshape(-1, 2), axis=0)
    for iv, iu in inits:
        sel = (init_v == iv) & (init_u == iu)
        for dv, du in offsets:
            tv, tu = int(iv + dv), int(iu + du)
            if (tv, tu) not in cache:
                cache[(tv, tu)] = _sad_map(nxt, prv, tu, tv, block)
            cost = cache[(tv, tu)]
            key = (tu * tu + tv * tv, tv, tu)
            better = sel & (
                (cost < best_cost)
                | ((cost == best_cost) & _key_less(key, best_key))
            )
            best_cost[better] = cost[better]
            best_key[better] = key
            best_u[better] = tu
            best_v[better] = tv
    return best_u, best_v


def _key_less(key, best_key):
    m, v, u = key
    bm, bv, bu = best_key[..., 0], best_key[..., 1], best_key[..., 2]
    return (m < bm) | ((m == bm) & ((v < bv) | ((v == bv) & (u < bu))))


def block_match_flow(prev, next, params: BlockMatchParams = BlockMatchParams()) -> FlowField:
    """Coarse-to-fine SAD block matching returning the backward flow ``next => prev``.

    Frames are ``(h, w)`` or ``(h, w, c)``; channel differences are summed.
    """
    prv, nxt = _as_plane_stack(prev), _as_plane_stack(next)
    if prv.shape != nxt.shape:
        raise ParameterError(f"frame shapes differ: {prv.shape} vs {nxt.shape}")
    h, w = nxt.shape[:2]
    if h < params.block or w < params.block:
        raise ParameterError(f"frame {h}x{w} is smaller than block {params.block}")

    pyramid = [(nxt, prv)]
    while len(pyramid) < params.levels:
        n_, p_ = pyramid[-1]
        if min(n_.shape[:2]) // 2 < params.block:
            break
        pyramid.append((_pool2(n_), _pool2(p_)))

    levels = len(pyramid)
    radius = max(1, math.ceil(params.radius / 2 ** (levels - 1)))
    n_, p_ = pyramid[-1]
    u = np.zeros(n_.shape[:2], dtype=np.int64)
    v = np.zeros(n_.shape[:2], dtype=np.int64)
    u, v = _match_level(n_, p_, u, v, radius, params.block)
    for lvl in range(levels - 2, -1, -1):
        n_, p_ = pyramid[lvl]
        lh, lw = n_.shape[:2]
        # nearest upsampling of the coarse estimate, doubled
        ys = np.minimum(np.arange(lh) // 2, u.shape[0] - 1)
        xs = np.minimum(np.arange(lw) // 2, u.shape[1] - 1)
        u0 = 2 * u[ys][:, xs]
        v0 = 2 * v[ys][:, xs]
        u, v = _match_level(n_, p_, u0, v0, 2, params.block)
    return FlowField(u.astype(np.float64), v.astype(np.float64))
