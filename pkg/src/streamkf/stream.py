"""Online keyframe extraction over a stream of frames.

Each frame goes through a small conv backbone and a deformable convolution
that collapses it to a single-channel receptive-field map.  The difference
between consecutive maps is scored against a learnable threshold map and a
hard gate decides whether the frame is a keyframe.  The state carried from
frame to frame is exactly one previous map and one previous appearance map,
so memory does not grow with the length of the video.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .tensor import (
    DTYPE,
    ConvParams,
    ShapeError,
    bilinear_taps,
    check_finite,
    conv2d,
    conv2d_backward,
    relu,
    sample_planes,
    scatter_planes,
)

NEVER_KEYFRAME = "never_keyframe"
ALWAYS_KEYFRAME = "always_keyframe"
FIRST_FRAME_POLICIES = (NEVER_KEYFRAME, ALWAYS_KEYFRAME)


class OnlineContractError(RuntimeError):
    """Frames were combined out of order."""


@dataclass(frozen=True)
class OkfemConfig:
    input_shape: tuple = (3, 32, 32)
    backbone_layers: int = 2
    backbone_channels: int = 16
    deform_kernel_size: int = 3
    first_frame_policy: str = NEVER_KEYFRAME
    appearance_kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        k = self.deform_kernel_size
        if k < 1 or k % 2 == 0:
            raise ValueError(f"deform_kernel_size must be odd, got {k}")
        if self.appearance_kernel_size < 1 or self.appearance_kernel_size % 2 == 0:
            raise ValueError(f"appearance_kernel_size must be odd, got {self.appearance_kernel_size}")
        _, h, w = self.input_shape
        if h < max(k, 3) or w < max(k, 3):
            raise ValueError(f"frame {h}x{w} is smaller than the kernels")
        if self.backbone_layers < 0 or self.backbone_channels < 1:
            raise ValueError("backbone_layers must be >= 0 and backbone_channels >= 1")
        if self.first_frame_policy not in FIRST_FRAME_POLICIES:
            raise ValueError(
                f"first_frame_policy must be one of {FIRST_FRAME_POLICIES}, got {self.first_frame_policy!r}")

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels if self.backbone_layers > 0 else self.input_shape[0]


@dataclass
class DeformableConvParams:
    offset_predictor: ConvParams
    response_kernel: ConvParams
    backbone: list = field(default_factory=list)

    def __post_init__(self):
        k = self.response_kernel.k
        if self.response_kernel.out_channels != 1:
            raise ShapeError("response kernel must produce exactly one channel")
        if self.offset_predictor.out_channels != 2 * k * k:
            raise ShapeError(
                f"offset predictor must produce {2 * k * k} channels, "
                f"got {self.offset_predictor.out_channels}")


@dataclass
class ReceptiveFieldMap:
    map: np.ndarray  # (1, H, W)
    frame_index: int


@dataclass
class MotionDiffMap:
    r: np.ndarray  # (1, H, W)
    frame_index: int


@dataclass
class FrameScore:
    s_map: np.ndarray
    total: float


@dataclass
class GateDecision:
    selected: bool
    frame_index: int = -1


@dataclass
class KeyframeRecord:
    frame_index: int
    score: float
    k_fm: np.ndarray  # (1, H, W)
    k_fa: np.ndarray  # (C, H, W)


@dataclass
class OkfemState:
    prev_receptive_field: Optional[ReceptiveFieldMap] = None
    prev_appearance: Optional[np.ndarray] = None
    frame_index: int = 0

    def to_bytes(self) -> bytes:
        """Serialized form; its length depends only on the frame shape."""
        from .data_io import write_fts

        parts = [np.uint64(self.frame_index).tobytes()]
        if self.prev_receptive_field is not None:
            parts.append(np.uint64(self.prev_receptive_field.frame_index).tobytes())
            parts.append(write_fts(self.prev_receptive_field.map))
        if self.prev_appearance is not None:
            parts.append(write_fts(self.prev_appearance))
        return b"".join(parts)


@dataclass
class OkfemModel:
    """All trainable pieces of the extractor."""

    config: OkfemConfig
    deform: DeformableConvParams
    threshold: np.ndarray  # (1, H, W)
    appearance: ConvParams

    def __post_init__(self):
        _, h, w = self.config.input_shape
        if self.threshold.shape != (1, h, w):
            raise ShapeError(f"threshold shape {self.threshold.shape} != {(1, h, w)}")
        if self.appearance.in_channels != self.config.input_shape[0]:
            raise ShapeError("appearance kernel input channels must match frame channels")

    def _slots(self):
        slots = {"threshold": (self, "threshold")}
        for name, conv in (("appearance", self.appearance),
                           ("response", self.deform.response_kernel),
                           ("offset", self.deform.offset_predictor)):
            slots[f"{name}.weight"] = (conv, "weight")
            slots[f"{name}.bias"] = (conv, "bias")
        for i, conv in enumerate(self.deform.backbone):
            slots[f"backbone.{i}.weight"] = (conv, "weight")
            slots[f"backbone.{i}.bias"] = (conv, "bias")
        return slots

    def parameters(self) -> dict:
        return {name: getattr(obj, attr) for name, (obj, attr) in self._slots().items()}

    def set_parameters(self, values: dict) -> None:
        slots = self._slots()
        for name, value in values.items():
            obj, attr = slots[name]
            old = getattr(obj, attr)
            if value.shape != old.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {old.shape}")
            setattr(obj, attr, value)

    def copy(self) -> "OkfemModel":
        return OkfemModel(
            self.config,
            DeformableConvParams(self.deform.offset_predictor.copy(),
                                 self.deform.response_kernel.copy(),
                                 [c.copy() for c in self.deform.backbone]),
            self.threshold.copy(),
            self.appearance.copy(),
        )

    def astype(self, dtype) -> "OkfemModel":
        m = self.copy()
        m.set_parameters({k: v.astype(dtype) for k, v in m.parameters().items()})
        return m

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, value in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()


def init_model(config: OkfemConfig | None = None, seed: int = 0, response_scale: float = 0.02,
               offset_scale: float = 0.01, threshold_init: float = 0.0, dtype=DTYPE) -> OkfemModel:
    """Random model for ``config``.

    The response kernel is initialised small so frame scores start out in the
    sensitive range of the gate surrogate, and non-negative: with bias-free
    ReLU layers the map sum then grows with frame brightness, so an untrained
    model already scores brightening frames above dimming ones.
    """
    config = config or OkfemConfig()
    rng = np.random.default_rng(seed)
    c, h, w = config.input_shape
    k = config.deform_kernel_size
    backbone = []
    in_ch = c
    for _ in range(config.backbone_layers):
        backbone.append(ConvParams.init(rng, config.backbone_channels, in_ch, 3, dtype=dtype))
        in_ch = config.backbone_channels
    offset = ConvParams.init(rng, 2 * k * k, in_ch, k, scale=offset_scale, dtype=dtype)
    offset.bias = rng.normal(0.0, 0.1, size=2 * k * k).astype(dtype)
    response = ConvParams.init(rng, 1, in_ch, k, scale=response_scale, dtype=dtype)
    response.weight = np.abs(response.weight)
    ak = config.appearance_kernel_size
    appearance = ConvParams.init(rng, c, c, ak, scale=1.0 / math.sqrt(c * ak * ak), dtype=dtype)
    threshold = np.full((1, h, w), threshold_init / (h * w), dtype=dtype)
    return OkfemModel(config, DeformableConvParams(offset, response, backbone), threshold, appearance)


def init_state(config: OkfemConfig) -> OkfemState:
    if not isinstance(config, OkfemConfig):
        raise TypeError("init_state expects an OkfemConfig")
    return OkfemState()


# -- receptive field ---------------------------------------------------------

@dataclass
class _RFCache:
    backbone_inputs: list
    backbone_pre: list
    feats: np.ndarray
    offsets: np.ndarray
    padded: np.ndarray  # (C, (H+2p)*(W+2p))
    taps: object
    d_rows: np.ndarray  # (k*k, H, W), already mixed over channels
    d_cols: np.ndarray


def _check_frame(frame: np.ndarray, channels: int, height: int, width: int) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.shape != (channels, height, width):
        raise ShapeError(f"frame shape {frame.shape} != expected {(channels, height, width)}")
    return frame


def deformable_conv(feats: np.ndarray, offsets: np.ndarray, response: ConvParams,
                    keep: bool = False):
    """Deformable convolution producing one channel.

    ``offsets`` holds ``(d_row, d_col)`` pairs per kernel tap, tap-major.  The
    feature map is zero-padded by ``k // 2`` and samples beyond the padded
    border are clamped onto it, so zero offsets reproduce :func:`conv2d`.

    The response is linear in the features, so channels are mixed first (one
    plane per tap) and each plane is sampled once.
    """
    c, h, w = feats.shape
    k = response.k
    p = k // 2
    if response.in_channels != c:
        raise ShapeError(f"features {feats.shape} incompatible with response {response.weight.shape}")
    if offsets.shape != (2 * k * k, h, w):
        raise ShapeError(f"offsets shape {offsets.shape} != {(2 * k * k, h, w)}")
    fp = np.pad(feats, ((0, 0), (p, p), (p, p))).reshape(c, -1)
    weight = response.weight[0].reshape(c, k * k)
    planes = (weight.T @ fp).reshape(k * k, h + 2 * p, w + 2 * p)
    aa, bb, ii, jj = np.meshgrid(np.arange(k), np.arange(k), np.arange(h), np.arange(w), indexing="ij")
    rows = (aa + ii).reshape(k * k, h, w).astype(feats.dtype) + offsets[0::2]
    cols = (bb + jj).reshape(k * k, h, w).astype(feats.dtype) + offsets[1::2]
    taps = bilinear_taps(rows, cols, h + 2 * p, w + 2 * p)
    vals, d_rows, d_cols = sample_planes(planes, taps)  # (k*k, h, w)
    out = vals.sum(axis=0) + response.bias[0]
    cache = (fp, taps, d_rows, d_cols) if keep else None
    return out[None], cache


def _rf_forward(frame: np.ndarray, params: DeformableConvParams, keep: bool = False):
    x = frame
    inputs, pre = [], []
    for conv in params.backbone:
        inputs.append(x)
        z = conv2d(x, conv)
        pre.append(z)
        x = relu(z)
    offsets = conv2d(x, params.offset_predictor)
    d, dc = deformable_conv(x, offsets, params.response_kernel, keep)
    check_finite(d, "receptive field")
    cache = _RFCache(inputs, pre, x, offsets, *dc) if keep else None
    return d, cache


def receptive_field(frame: np.ndarray, params: DeformableConvParams,
                    frame_index: int = 0) -> ReceptiveFieldMap:
    """Single-channel adaptive receptive-field map for one frame."""
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise ShapeError(f"frame must be (C, H, W), got {frame.shape}")
    in_ch = params.backbone[0].in_channels if params.backbone else params.response_kernel.in_channels
    if frame.shape[0] != in_ch:
        raise ShapeError(f"frame shape {frame.shape} has {frame.shape[0]} channels, model expects {in_ch}")
    d, _ = _rf_forward(frame, params)
    return ReceptiveFieldMap(d, frame_index)


def receptive_field_grads(frame: np.ndarray, params: DeformableConvParams,
                          grad_map: np.ndarray) -> dict:
    """Gradients of ``sum(grad_map * D)`` w.r.t. every receptive-field parameter.

    Keys follow :meth:`OkfemModel.parameters` naming.
    """
    _, cache = _rf_forward(frame, params, keep=True)
    resp = params.response_kernel
    k = resp.k
    p = k // 2
    c, h, w = cache.feats.shape
    g = grad_map.reshape(h, w)
    grads = {"response.bias": np.array([g.sum()], dtype=g.dtype)}
    weight = resp.weight[0].reshape(c, k * k)
    shape = (k * k, h + 2 * p, w + 2 * p)
    g_planes = scatter_planes(np.broadcast_to(g, (k * k, h, w)), cache.taps, shape).reshape(k * k, -1)
    grads["response.weight"] = (cache.padded @ g_planes.T).reshape(resp.weight.shape)
    g_fp = (weight @ g_planes).reshape(c, h + 2 * p, w + 2 * p)
    g_off = np.empty_like(cache.offsets)
    g_off[0::2] = cache.d_rows * g
    g_off[1::2] = cache.d_cols * g
    g_feats = g_fp[:, p:p + h, p:p + w]
    g_x, grads["offset.weight"], grads["offset.bias"] = conv2d_backward(
        cache.feats, params.offset_predictor, g_off)
    g_feats = g_feats + g_x
    for i in reversed(range(len(params.backbone))):
        g_z = g_feats * (cache.backbone_pre[i] > 0)
        g_feats, grads[f"backbone.{i}.weight"], grads[f"backbone.{i}.bias"] = conv2d_backward(
            cache.backbone_inputs[i], params.backbone[i], g_z)
    return grads


# -- per-frame equations -----------------------------------------------------

def motion_diff(d_t: ReceptiveFieldMap, d_prev: ReceptiveFieldMap) -> MotionDiffMap:
    if d_t.frame_index != d_prev.frame_index + 1:
        raise OnlineContractError(
            f"motion_diff needs consecutive frames, got {d_prev.frame_index} -> {d_t.frame_index}")
    if d_t.map.shape != d_prev.map.shape:
        raise ShapeError(f"receptive fields differ in shape: {d_t.map.shape} vs {d_prev.map.shape}")
    return MotionDiffMap(d_t.map - d_prev.map, d_t.frame_index)


def frame_score(r: MotionDiffMap, th: np.ndarray) -> FrameScore:
    th = np.asarray(th)
    if r.r.shape != th.shape:
        raise ShapeError(f"motion map {r.r.shape} and threshold {th.shape} differ")
    s = r.r - th
    return FrameScore(s, float(np.sum(s, dtype=np.float64)))


def gate(score: FrameScore, frame_index: int = -1) -> GateDecision:
    return GateDecision(score.total > 0, frame_index)


def appearance(frame: np.ndarray, d_t: ReceptiveFieldMap, params: ConvParams) -> np.ndarray:
    """Appearance map: the frame plus the receptive field (broadcast over channels), convolved."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[1:] != d_t.map.shape[1:]:
        raise ShapeError(f"frame {frame.shape} and receptive field {d_t.map.shape} differ spatially")
    return conv2d(frame + d_t.map, params)


@dataclass
class StepOutput:
    state: OkfemState
    record: Optional[KeyframeRecord]
    score: Optional[float]  # None for the first frame


def _advance(state: OkfemState, d_t: ReceptiveFieldMap, y_t: np.ndarray,
             model: OkfemModel) -> StepOutput:
    record = None
    score = None
    if state.prev_receptive_field is None:
        if model.config.first_frame_policy == ALWAYS_KEYFRAME:
            zero = ReceptiveFieldMap(np.zeros_like(d_t.map), d_t.frame_index - 1)
            r = motion_diff(d_t, zero)
            score = frame_score(r, model.threshold).total
            record = KeyframeRecord(d_t.frame_index, score, r.r, y_t.copy())
    else:
        r = motion_diff(d_t, state.prev_receptive_field)
        fs = frame_score(r, model.threshold)
        score = fs.total
        if gate(fs, d_t.frame_index).selected:
            record = KeyframeRecord(d_t.frame_index, fs.total, r.r, y_t + state.prev_appearance)
    new_state = OkfemState(d_t, y_t, state.frame_index + 1)
    return StepOutput(new_state, record, score)


def step_scored(state: OkfemState, frame: np.ndarray, model: OkfemModel) -> StepOutput:
    """Like :func:`step` but also reports the frame score."""
    c, h, w = model.config.input_shape
    frame = _check_frame(frame, c, h, w)
    d_t = receptive_field(frame, model.deform, state.frame_index)
    y_t = appearance(frame, d_t, model.appearance)
    return _advance(state, d_t, y_t, model)


def step(state: OkfemState, frame: np.ndarray, model: OkfemModel):
    """Consume one frame; returns ``(new_state, record_or_None)``."""
    out = step_scored(state, frame, model)
    return out.state, out.record


def step_map(state: OkfemState, d_map: np.ndarray, model: OkfemModel,
             frame: np.ndarray | None = None) -> StepOutput:
    """Consume a precomputed receptive-field map instead of a raw frame.

    Without ``frame`` the appearance path sees an all-zero frame.
    """
    c, h, w = model.config.input_shape
    d_map = np.asarray(d_map, dtype=model.threshold.dtype).reshape(-1, h, w)
    if d_map.shape[0] != 1:
        raise ShapeError(f"receptive-field map must be (1, {h}, {w}), got {d_map.shape}")
    if frame is None:
        frame = np.zeros((c, h, w), dtype=d_map.dtype)
    frame = _check_frame(frame, c, h, w)
    d_t = ReceptiveFieldMap(d_map, state.frame_index)
    y_t = appearance(frame, d_t, model.appearance)
    return _advance(state, d_t, y_t, model)


def scan(frames: Iterable[np.ndarray], model: OkfemModel,
         precomputed: bool = False) -> Iterator[StepOutput]:
    """Stream a whole sequence, yielding one :class:`StepOutput` per frame."""
    state = init_state(model.config)
    for frame in frames:
        out = step_map(state, frame, model) if precomputed else step_scored(state, frame, model)
        state = out.state
        yield out
