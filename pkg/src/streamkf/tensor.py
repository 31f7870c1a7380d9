"""Small dense-array numerics used by the extractor.

Arrays are plain ``numpy.ndarray`` objects laid out channels-first
(``C, H, W``).  Everything defaults to float32; the functions preserve the
dtype of their inputs so gradient checks can run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def check_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contains non-finite values")
    return arr


@dataclass
class ConvParams:
    """Weights ``(out, in, k, k)`` and bias ``(out,)`` of a 2-D convolution."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (out, in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels")

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, out_channels: int, in_channels: int, k: int,
             scale: float | None = None, dtype=DTYPE) -> "ConvParams":
        """He-style random init; ``scale`` overrides the weight std."""
        if scale is None:
            scale = math.sqrt(2.0 / (in_channels * k * k))
        w = rng.normal(0.0, scale, size=(out_channels, in_channels, k, k))
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype))

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), self.bias.copy())

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (c, h, w, k, k)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """'Same' cross-correlation with zero padding.

    ``out[o, i, j] = bias[o] + sum_{c,a,b} weight[o, c, a, b] * x[c, i+a-p, j+b-p]``
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != params.in_channels:
        raise ShapeError(
            f"conv2d input shape {x.shape} incompatible with weight shape {params.weight.shape}")
    c, h, w = x.shape
    if h < params.k or w < params.k:
        raise ShapeError(
            f"conv2d input shape {x.shape} smaller than kernel {params.weight.shape}")
    cols = _im2col(x, params.k)
    out = params.weight.reshape(params.out_channels, -1) @ cols
    out = out.reshape(params.out_channels, h, w) + params.bias[:, None, None]
    return check_finite(out.astype(np.result_type(x, params.weight), copy=False), "conv2d output")


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Gradients of :func:`conv2d` given ``dL/d(output)``.

    Returns ``(grad_x, grad_weight, grad_bias)``.
    """
    o = params.out_channels
    if grad_out.shape != (o,) + x.shape[1:]:
        raise ShapeError(f"grad shape {grad_out.shape} does not match output {(o,) + x.shape[1:]}")
    cols = _im2col(x, params.k)
    g2 = grad_out.reshape(o, -1)
    grad_w = (g2 @ cols.T).reshape(params.weight.shape)
    grad_b = g2.sum(axis=1)
    # stride-1 same-padding: input grad is a correlation with the flipped, transposed kernel
    flipped = params.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    back = ConvParams(np.ascontiguousarray(flipped), np.zeros(params.in_channels, dtype=flipped.dtype))
    grad_x = conv2d(grad_out, back)
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


# -- bilinear sampling -------------------------------------------------------

@dataclass
class BilinearTaps:
    """Corner indices and weights of a batch of bilinear lookups."""

    y0: np.ndarray
    x0: np.ndarray
    wy: np.ndarray
    wx: np.ndarray
    inside_y: np.ndarray  # False where the row coordinate was clamped
    inside_x: np.ndarray


def bilinear_taps(rows: np.ndarray, cols: np.ndarray, height: int, width: int) -> BilinearTaps:
    ry = np.clip(rows, 0, height - 1)
    rx = np.clip(cols, 0, width - 1)
    y0 = np.minimum(np.floor(ry).astype(np.int64), max(height - 2, 0))
    x0 = np.minimum(np.floor(rx).astype(np.int64), max(width - 2, 0))
    wy = (ry - y0).astype(rows.dtype, copy=False)
    wx = (rx - x0).astype(cols.dtype, copy=False)
    inside_y = (rows >= 0) & (rows <= height - 1)
    inside_x = (cols >= 0) & (cols <= width - 1)
    return BilinearTaps(y0, x0, wy, wx, inside_y, inside_x)


def gather_bilinear(fmap: np.ndarray, taps: BilinearTaps):
    """Sample every channel of ``fmap`` (C, H, W) at the tap positions.

    Returns ``(values, d_values/d_row, d_values/d_col)``, each shaped
    ``(C,) + taps.y0.shape``.  Derivatives are zero along clamped axes.
    """
    c, h, w = fmap.shape
    flat = fmap.reshape(c, h * w)
    y1 = np.minimum(taps.y0 + 1, h - 1)
    x1 = np.minimum(taps.x0 + 1, w - 1)
    shape = (c,) + taps.y0.shape
    v00 = np.take(flat, (taps.y0 * w + taps.x0).ravel(), axis=1).reshape(shape)
    v01 = np.take(flat, (taps.y0 * w + x1).ravel(), axis=1).reshape(shape)
    v10 = np.take(flat, (y1 * w + taps.x0).ravel(), axis=1).reshape(shape)
    v11 = np.take(flat, (y1 * w + x1).ravel(), axis=1).reshape(shape)
    wy, wx = taps.wy, taps.wx
    dx_top = v01 - v00
    dx_bot = v11 - v10
    # weighted form is exact at lattice points (w in {0, 1})
    top = (1 - wx) * v00 + wx * v01
    bot = (1 - wx) * v10 + wx * v11
    values = (1 - wy) * top + wy * bot
    d_row = (bot - top) * taps.inside_y
    d_col = (dx_top + wy * (dx_bot - dx_top)) * taps.inside_x
    return values, d_row, d_col


def _corners(taps: BilinearTaps, h: int, w: int):
    """Flat corner indices and bilinear weights, plane-major over ``taps``' first axis."""
    planes = taps.y0.shape[0]
    base = (np.arange(planes) * (h * w)).reshape((planes,) + (1,) * (taps.y0.ndim - 1))
    y1 = np.minimum(taps.y0 + 1, h - 1)
    x1 = np.minimum(taps.x0 + 1, w - 1)
    wy, wx = taps.wy, taps.wx
    return ((base + taps.y0 * w + taps.x0, (1 - wy) * (1 - wx)),
            (base + taps.y0 * w + x1, (1 - wy) * wx),
            (base + y1 * w + taps.x0, wy * (1 - wx)),
            (base + y1 * w + x1, wy * wx))


def sample_planes(planes: np.ndarray, taps: BilinearTaps):
    """Sample plane ``i`` of ``planes`` (K, H, W) at the positions in ``taps[i]``.

    Returns ``(values, d/d_row, d/d_col)`` shaped like the tap arrays.
    """
    k, h, w = planes.shape
    flat = planes.reshape(-1)
    (i00, _), (i01, _), (i10, _), (i11, _) = _corners(taps, h, w)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    wy, wx = taps.wy, taps.wx
    dx_top = v01 - v00
    dx_bot = v11 - v10
    # weighted form is exact at lattice points (w in {0, 1})
    top = (1 - wx) * v00 + wx * v01
    bot = (1 - wx) * v10 + wx * v11
    values = (1 - wy) * top + wy * bot
    d_row = (bot - top) * taps.inside_y
    d_col = (dx_top + wy * (dx_bot - dx_top)) * taps.inside_x
    return values, d_row, d_col


def scatter_planes(grad_values: np.ndarray, taps: BilinearTaps, shape) -> np.ndarray:
    """Adjoint of :func:`sample_planes` with respect to ``planes``."""
    k, h, w = shape
    idx, wts = zip(*_corners(taps, h, w))
    out = np.bincount(np.concatenate([i.ravel() for i in idx]),
                      weights=np.concatenate([(grad_values * wt).ravel() for wt in wts]),
                      minlength=k * h * w)
    return out.astype(grad_values.dtype, copy=False).reshape(shape)


def bilinear_sample(fmap: np.ndarray, points: Sequence[tuple[float, float]]) -> list[float]:
    """Bilinear interpolation of a single-channel map at ``(row, col)`` points.

    Points outside the map are clamped to the border.
    """
    fmap = np.asarray(fmap)
    if fmap.ndim == 2:
        fmap = fmap[None]
    if fmap.ndim != 3 or fmap.shape[0] != 1:
        raise ShapeError(f"bilinear_sample expects a (1, H, W) map, got {fmap.shape}")
    if len(points) == 0:
        return []
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    taps = bilinear_taps(pts[:, 0], pts[:, 1], *fmap.shape[1:])
    values, _, _ = gather_bilinear(fmap.astype(np.float64), taps)
    return [float(v) for v in values[0]]


# -- optimisation ------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    """Momentum SGD with step decay of the learning rate."""

    learning_rate: float = 1e-4
    momentum: float = 0.9
    decay_factor: float = 0.96
    decay_every_epochs: int = 10
    total_epochs: int = 30

    def __post_init__(self):
        # lr == 0 is allowed so a training run can be frozen
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")

    def effective_lr(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every_epochs)


def sgd_momentum_step(params: np.ndarray, velocity: np.ndarray, grads: np.ndarray,
                      config: OptimizerConfig, epoch: int):
    """One momentum update; returns new ``(params, velocity)`` arrays."""
    if not (params.shape == velocity.shape == grads.shape):
        raise ShapeError(
            f"params {params.shape}, velocity {velocity.shape} and grads {grads.shape} differ")
    lr = config.effective_lr(epoch)
    new_velocity = (config.momentum * velocity - lr * grads).astype(params.dtype, copy=False)
    return params + new_velocity, new_velocity


def finite_diff_grad(objective: Callable[[np.ndarray], float], params: np.ndarray,
                     eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar objective. Testing oracle only."""
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    p = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = float(objective(p.astype(params.dtype)))
        flat[i] = old - eps
        down = float(objective(p.astype(params.dtype)))
        flat[i] = old
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericalError(f"objective is not finite near coordinate {i}")
        gflat[i] = (up - down) / (2 * eps)
    return grad
