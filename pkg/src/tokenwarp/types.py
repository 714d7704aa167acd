"""Value types shared by every stage of the pipeline.

All arrays are stored row-major with the spatial layout first, so a
``TokenGrid`` of shape ``(h, w, d)`` has element ``(y, x, ch)`` at flat
offset ``(y * w + x) * d + ch``. Instances are frozen and their arrays are
marked read-only after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

DATA_DTYPE = np.float32


class ParameterError(ValueError):
    """Raised for invalid shapes, ranges or arguments."""


def _frozen(arr, dtype, shape=None, name="array") -> np.ndarray:
    a = np.array(arr, dtype=dtype, copy=True)
    if shape is not None and a.shape != shape:
        if a.size != int(np.prod(shape)):
            raise ParameterError(f"{name}: expected {int(np.prod(shape))} values, got {a.size}")
        a = a.reshape(shape)
    if not np.all(np.isfinite(a)):
        raise ParameterError(f"{name}: contains non-finite values")
    a.setflags(write=False)
    return a


def _positive(name, value):
    if int(value) != value or value < 1:
        raise ParameterError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """One frame of tokens laid out as ``(h, w, d)``."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3:
            raise ParameterError(f"TokenGrid expects a 3-D array (h, w, d), got shape {a.shape}")
        for n, v in zip("hwd", a.shape):
            _positive(n, v)
        object.__setattr__(self, "data", _frozen(a, DATA_DTYPE, name="TokenGrid"))

    @classmethod
    def from_flat(cls, h: int, w: int, d: int, values) -> "TokenGrid":
        values = np.asarray(values)
        if values.size != h * w * d:
            raise ParameterError(f"TokenGrid: data length {values.size} != h*w*d = {h * w * d}")
        return cls(values.reshape(h, w, d))

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def offset(self, y: int, x: int, ch: int) -> int:
        return (y * self.w + x) * self.d + ch

    def get(self, y: int, x: int, ch: int) -> float:
        return float(self.flat[self.offset(y, x, ch)])

    def with_value(self, y: int, x: int, ch: int, value: float) -> "TokenGrid":
        out = self.flat.copy()
        out[self.offset(y, x, ch)] = value
        return TokenGrid(out.reshape(self.shape))

    def tokens(self) -> np.ndarray:
        """Token matrix of shape ``(h * w, d)``."""
        return self.data.reshape(-1, self.d)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Backward flow: target pixel ``(x, y)`` samples the previous frame at ``(x + u, y + v)``.

    Displacements are in pixels of this field's own ``(h, w)`` grid.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u, v = np.asarray(self.u), np.asarray(self.v)
        if u.ndim != 2 or u.shape != v.shape:
            raise ParameterError(f"FlowField: u {u.shape} and v {v.shape} must be equal 2-D shapes")
        _positive("h", u.shape[0])
        _positive("w", u.shape[1])
        object.__setattr__(self, "u", _frozen(u, DATA_DTYPE, name="FlowField.u"))
        object.__setattr__(self, "v", _frozen(v, DATA_DTYPE, name="FlowField.v"))

    @classmethod
    def zeros(cls, h: int, w: int) -> "FlowField":
        return cls(np.zeros((h, w)), np.zeros((h, w)))

    @classmethod
    def constant(cls, h: int, w: int, u: float, v: float) -> "FlowField":
        return cls(np.full((h, w), u), np.full((h, w), v))

    @classmethod
    def from_array(cls, arr) -> "FlowField":
        """Build from an ``(h, w, 2)`` array holding ``(u, v)`` in the last axis."""
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ParameterError(f"flow array must have shape (h, w, 2), got {arr.shape}")
        return cls(arr[..., 0], arr[..., 1])

    def to_array(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    @property
    def h(self) -> int:
        return self.u.shape[0]

    @property
    def w(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self):
        return self.u.shape


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    """Per-pixel weight of the backward correspondence (1 = valid, 0 = occluded)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 2:
            raise ParameterError(f"OcclusionMask expects a 2-D array, got shape {m.shape}")
        _positive("h", m.shape[0])
        _positive("w", m.shape[1])
        m = _frozen(m, DATA_DTYPE, name="OcclusionMask")
        if m.size and (m.min() < 0.0 or m.max() > 1.0):
            raise ParameterError("OcclusionMask values must lie in [0, 1]")
        object.__setattr__(self, "m", m)

    @classmethod
    def ones(cls, h: int, w: int) -> "OcclusionMask":
        return cls(np.ones((h, w)))

    @classmethod
    def zeros(cls, h: int, w: int) -> "OcclusionMask":
        return cls(np.zeros((h, w)))

    @property
    def h(self) -> int:
        return self.m.shape[0]

    @property
    def w(self) -> int:
        return self.m.shape[1]

    @property
    def shape(self):
        return self.m.shape


@dataclass(frozen=True, eq=False)
class VideoTensor:
    """Frames stacked as ``(n, h, w, c)``."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 4:
            raise ParameterError(f"VideoTensor expects a 4-D array (n, h, w, c), got shape {a.shape}")
        for n, v in zip("nhwc", a.shape):
            _positive(n, v)
        object.__setattr__(self, "data", _frozen(a, DATA_DTYPE, name="VideoTensor"))

    @classmethod
    def from_frames(cls, frames) -> "VideoTensor":
        return cls(np.stack([f.data if isinstance(f, TokenGrid) else np.asarray(f) for f in frames]))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @property
    def c(self) -> int:
        return self.data.shape[3]

    def frame(self, i: int) -> np.ndarray:
        return self.data[i]

    def grids(self):
        return [TokenGrid(f) for f in self.data]


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Noise schedule indexed by timestep ``t`` in ``1..T``; ``t = 0`` is the clean terminal."""

    beta: np.ndarray
    alpha_bar: np.ndarray = field(default=None)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ParameterError("beta must be a non-empty 1-D array")
        if not np.all(np.isfinite(beta)) or np.any(beta < 0.0) or np.any(beta >= 1.0):
            raise ParameterError("beta values must lie in [0, 1)")
        expected = np.cumprod(1.0 - beta)
        if self.alpha_bar is None:
            alpha_bar = expected
        else:
            alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
            if alpha_bar.shape != beta.shape or not np.allclose(alpha_bar, expected, rtol=1e-12, atol=0.0):
                raise ParameterError("alpha_bar must equal the running product of (1 - beta)")
        beta = beta.copy()
        alpha_bar = alpha_bar.copy()
        beta.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @classmethod
    def zero_noise(cls, T: int) -> "DiffusionSchedule":
        _positive("T", T)
        return cls(np.zeros(T))

    @property
    def T(self) -> int:
        return self.beta.size

    def abar(self, t: int) -> float:
        """Cumulative signal level at timestep ``t`` (``abar(0) == 1``)."""
        if t < 0 or t > self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def timesteps(self, steps: int):
        """Uniformly strided sampling timesteps over ``[1, T]``, largest first."""
        if steps < 1 or steps > self.T:
            raise ParameterError(f"steps must be in [1, {self.T}], got {steps}")
        return [int(round(k * self.T / steps)) for k in range(steps, 0, -1)]


def make_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012,
                  spacing: str = "scaled_linear") -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if spacing == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif spacing == "scaled_linear":
        beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
    else:
        raise ParameterError(f"unknown spacing {spacing!r}")
    return DiffusionSchedule(beta)


@dataclass(frozen=True)
class LayerTokens:
    q: TokenGrid
    k: TokenGrid
    v: TokenGrid


@dataclass(frozen=True)
class TokenCache:
    """Previous-frame tokens and first-frame anchors, one entry per attention layer.

    ``per_step`` and ``anchor_steps`` are only populated in per-timestep
    caching mode. They map a timestep to the layer tokens recorded at that
    step of the previous frame and of the first frame respectively.
    """

    prev: tuple
    anchor_k: tuple
    anchor_v: tuple
    frame_index: int
    per_step: Optional[Dict[int, tuple]] = None
    anchor_steps: Optional[Dict[int, tuple]] = None

    def __post_init__(self):
        if not (len(self.prev) == len(self.anchor_k) == len(self.anchor_v)):
            raise ParameterError("cache layer counts differ")
        for p, ak, av in zip(self.prev, self.anchor_k, self.anchor_v):
            if not (p.q.shape[:2] == p.k.shape[:2] == p.v.shape[:2]):
                raise ParameterError("prev Q/K/V must share (h, w)")
            if ak.shape != p.k.shape or av.shape != p.v.shape:
                raise ParameterError("anchor K/V must match prev K/V shapes")

    @property
    def layers(self) -> int:
        return len(self.prev)

    def advance(self, layer_tokens, frame_index: int, per_step=None) -> "TokenCache":
        """New cache with ``prev`` replaced; anchors are carried over untouched."""
        return TokenCache(tuple(layer_tokens), self.anchor_k, self.anchor_v, frame_index, per_step,
                          self.anchor_steps)

    def nbytes(self) -> int:
        n = 0
        for p, ak, av in zip(self.prev, self.anchor_k, self.anchor_v):
            n += p.q.data.nbytes + p.k.data.nbytes + p.v.data.nbytes + ak.data.nbytes + av.data.nbytes
        if self.per_step:
            for toks in self.per_step.values():
                n += sum(t.q.data.nbytes + t.k.data.nbytes + t.v.data.nbytes for t in toks)
        if self.anchor_steps:
            for toks in self.anchor_steps.values():
                n += sum(t.k.data.nbytes + t.v.data.nbytes for t in toks)
        return n
