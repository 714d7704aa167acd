"""Synthetic moving-shape scenes with analytic flow and occlusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .types import FlowField, OcclusionMask, ParameterError, VideoTensor

BACKGROUNDS = ("flat", "gradient", "checker")
SHAPES = ("rect", "disc")


@dataclass(frozen=True)
class ObjectSpec:
    """A shape whose bounding box starts at ``position`` (top-left, px) and moves by ``velocity`` per frame.

    ``size`` is ``(width, height)``; a disc uses the smaller side as its diameter.
    ``texture`` adds a seeded pattern of that amplitude that moves with the object.
    """

    shape: str = "rect"
    size: Tuple[int, int] = (10, 10)
    color: Tuple[float, ...] = (0.9, 0.2, 0.1)
    velocity: Tuple[float, float] = (1.0, 0.0)
    position: Tuple[float, float] = (2.0, 10.0)
    texture: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}")
        if min(self.size) < 1:
            raise ParameterError(f"object size must be positive, got {self.size}")


@dataclass(frozen=True)
class SceneSpec:
    h: int = 32
    w: int = 32
    n: int = 16
    channels: int = 3
    background: str = "gradient"
    objects: Tuple[ObjectSpec, ...] = (ObjectSpec(),)
    seed: int = 0
    clamp: bool = False

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.n < 1 or self.channels < 1:
            raise ParameterError("scene dimensions must be positive")
        if self.background not in BACKGROUNDS:
            raise ParameterError(f"unknown background {self.background!r}")
        object.__setattr__(self, "objects", tuple(self.objects))
        for ob in self.objects:
            if len(ob.color) != self.channels:
                raise ParameterError(f"object color has {len(ob.color)} channels, scene has {self.channels}")
            x, y = ob.position
            if x < 0 or y < 0 or x + ob.size[0] > self.w or y + ob.size[1] > self.h:
                raise ParameterError(f"object at {ob.position} of size {ob.size} does not fit the canvas at frame 0")


@dataclass(frozen=True)
class SceneBundle:
    video: VideoTensor
    fwd_flows: List[FlowField]
    bwd_flows: List[FlowField]
    occlusion: List[OcclusionMask]
    labels: np.ndarray = field(repr=False, default=None)


def _background(spec: SceneSpec) -> np.ndarray:
    ys, xs = np.mgrid[0:spec.h, 0:spec.w].astype(np.float64)
    c = spec.channels
    if spec.background == "flat":
        img = np.full((spec.h, spec.w, c), 0.5)
    elif spec.background == "gradient":
        gx = xs / max(spec.w - 1, 1)
        gy = ys / max(spec.h - 1, 1)
        ramps = [0.2 + 0.6 * gx, 0.2 + 0.6 * gy, 0.8 - 0.3 * (gx + gy)]
        img = np.stack([ramps[k % 3] for k in range(c)], axis=-1)
    else:
        cell = 4
        board = ((xs // cell + ys // cell) % 2) * 0.5 + 0.25
        img = np.repeat(board[..., None], c, axis=-1)
    return img


def _footprint(ob: ObjectSpec) -> np.ndarray:
    sw, sh = ob.size
    if ob.shape == "rect":
        return np.ones((sh, sw))
    dia = min(sw, sh)
    yy, xx = np.mgrid[0:sh, 0:sw] + 0.5
    r = dia / 2.0
    return (((xx - sw / 2.0) ** 2 + (yy - sh / 2.0) ** 2) <= r * r).astype(np.float64)


def _splat(patch: np.ndarray, x: float, y: float, h: int, w: int) -> np.ndarray:
    """Bilinear splat of ``patch`` (ph, pw[, c]) with top-left at fractional ``(x, y)``."""
    ph, pw = patch.shape[:2]
    out = np.zeros((h + ph + 2, w + pw + 2) + patch.shape[2:])
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    fx, fy = x - x0, y - y0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            wgt = wy * wx
            if wgt == 0.0:
                continue
            oy, ox = y0 + dy + 1, x0 + dx + 1
            out[oy:oy + ph, ox:ox + pw] += wgt * patch
    return out[1:h + 1, 1:w + 1]


def _positions(spec: SceneSpec, ob: ObjectSpec) -> List[Tuple[float, float]]:
    pos = []
    for i in range(spec.n):
        x = ob.position[0] + i * ob.velocity[0]
        y = ob.position[1] + i * ob.velocity[1]
        if x < 0 or y < 0 or x + ob.size[0] > spec.w or y + ob.size[1] > spec.h:
            if not spec.clamp:
                raise ParameterError(f"object leaves the canvas at frame {i}")
            x = min(max(x, 0.0), spec.w - ob.size[0])
            y = min(max(y, 0.0), spec.h - ob.size[1])
        pos.append((x, y))
    return pos


def gen_scene(spec: SceneSpec) -> SceneBundle:
    """Render the scene and derive analytic flows and occlusion masks.

    Objects are composited in list order (later ones on top). A pixel belongs
    to the topmost object covering at least half of it; flow inside an object
    is its per-frame displacement, zero on the background. The backward mask is
    0 wherever the pixel's owner differs from the owner of its source pixel in
    the previous frame.
    """
    h, w, n = spec.h, spec.w, spec.n
    bg = _background(spec)
    rng = np.random.default_rng(spec.seed)
    paths = [_positions(spec, ob) for ob in spec.objects]
    patches = []
    for ob in spec.objects:
        fp = _footprint(ob)
        col = np.broadcast_to(np.asarray(ob.color, dtype=np.float64), fp.shape + (spec.channels,)).copy()
        if ob.texture:
            col += ob.texture * rng.uniform(-1.0, 1.0, col.shape)
        patches.append((fp, col))

    frames = np.empty((n, h, w, spec.channels))
    labels = np.zeros((n, h, w), dtype=np.int64)
    for i in range(n):
        img = bg.copy()
        lab = labels[i]
        for k, ((fp, col), path) in enumerate(zip(patches, paths), start=1):
            x, y = path[i]
            cover = np.clip(_splat(fp, x, y, h, w), 0.0, 1.0)
            paint = _splat(col * fp[..., None], x, y, h, w)
            img = paint + (1.0 - cover[..., None]) * img
            lab[cover >= 0.5] = k
        frames[i] = img

    fwd, bwd, occ = [], [], []
    ys, xs = np.mgrid[0:h, 0:w]
    for i in range(1, n):
        disp = [(0.0, 0.0)] + [
            (path[i][0] - path[i - 1][0], path[i][1] - path[i - 1][1]) for path in paths
        ]
        du = np.array([d[0] for d in disp])
        dv = np.array([d[1] for d in disp])
        cur, prv = labels[i], labels[i - 1]
        bwd.append(FlowField(-du[cur], -dv[cur]))
        fwd.append(FlowField(du[prv], dv[prv]))
        sx = np.clip(np.rint(xs - du[cur]).astype(np.int64), 0, w - 1)
        sy = np.clip(np.rint(ys - dv[cur]).astype(np.int64), 0, h - 1)
        inside = (xs - du[cur] > -0.5) & (xs - du[cur] < w - 0.5) & (ys - dv[cur] > -0.5) & (ys - dv[cur] < h - 0.5)
        ok = (prv[sy, sx] == cur) & inside
        occ.append(OcclusionMask(ok.astype(np.float64)))
    return SceneBundle(VideoTensor(frames), fwd, bwd, occ, labels)


def default_scene(n: int = 16, size: int = 32, seed: int = 0) -> SceneSpec:
    """Single square translating one pixel per frame over a gradient background."""
    return SceneSpec(h=size, w=size, n=n, seed=seed,
                     objects=(ObjectSpec(size=(size // 3, size // 3), velocity=(1.0, 0.0),
                                         position=(2.0, float(size // 3))),))
