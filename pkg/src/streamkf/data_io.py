"""File formats and the synthetic video generator.

FTS1 tensor layout (all little-endian)::

    b"FTS1" | ndims: u32 | dims: ndims x u32 | payload: prod(dims) x f32, row-major
"""

from __future__ import annotations

import json
import base64
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from .summarize import Summary
from .training import GroundTruthKeyframes

MAGIC = b"FTS1"
MAX_DIMS = 16
MAX_ELEMENTS = 1 << 31
W2V_DIM = 300


class FormatError(ValueError):
    """Base class for malformed input files."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimsOverflowError(FormatError):
    pass


class AnnotationError(FormatError):
    pass


class WordVectorError(FormatError):
    pass


# -- FTS1 --------------------------------------------------------------------

def write_fts(tensor) -> bytes:
    arr = np.array(tensor, dtype="<f4", order="C")  # keeps 0-d tensors 0-d
    if arr.ndim > MAX_DIMS:
        raise DimsOverflowError(f"{arr.ndim} dims exceeds the limit of {MAX_DIMS}")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def read_fts(data: bytes) -> np.ndarray:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise TruncatedPayloadError("header ends before ndims")
    (ndims,) = struct.unpack_from("<I", data, 4)
    if ndims > MAX_DIMS:
        raise DimsOverflowError(f"ndims={ndims} exceeds the limit of {MAX_DIMS}")
    end = 8 + 4 * ndims
    if len(data) < end:
        raise TruncatedPayloadError(f"header declares {ndims} dims but ends early")
    dims = struct.unpack_from(f"<{ndims}I", data, 8)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimsOverflowError(f"dims {dims} describe more than {MAX_ELEMENTS} elements")
    need = end + 4 * count
    if len(data) < need:
        raise TruncatedPayloadError(f"payload has {len(data) - end} bytes, dims {dims} need {4 * count}")
    if len(data) > need:
        raise FormatError(f"{len(data) - need} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=end)
    return arr.astype(np.float32).reshape(dims)


def load_fts(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_fts(fh.read())


def atomic_write(path, data) -> None:
    """Write ``data`` (bytes or str) to a temp file next to ``path``, then rename."""
    path = os.fspath(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_fts(path, tensor) -> None:
    atomic_write(path, write_fts(tensor))


# -- annotations -------------------------------------------------------------

def annotation_schema() -> dict:
    text = resources.files("streamkf").joinpath("annotation.schema.json").read_text()
    return json.loads(text)


@dataclass
class AnnotationDoc:
    num_frames: int
    keyframe_indices: list | None = None
    importance_scores: list | None = None
    reference_summaries: list | None = None
    class_label: str | None = None

    def references(self) -> list:
        return [Summary(self.num_frames, [tuple(s) for s in shots])
                for shots in (self.reference_summaries or [])]

    def to_json(self) -> dict:
        doc = {"num_frames": self.num_frames}
        for key in ("keyframe_indices", "importance_scores", "reference_summaries", "class_label"):
            value = getattr(self, key)
            if value is not None:
                doc[key] = value
        return doc


def read_annotations(text: str) -> AnnotationDoc:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        jsonschema.validate(doc, annotation_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise AnnotationError(f"field {where}: {exc.message}") from exc
    n = doc["num_frames"]
    kf = doc.get("keyframe_indices")
    if kf is not None:
        if sorted(set(kf)) != kf:
            raise AnnotationError("field keyframe_indices: must be sorted and unique")
        if kf and (kf[0] < 0 or kf[-1] >= n):
            raise AnnotationError(f"field keyframe_indices: indices must lie in [0, {n})")
    scores = doc.get("importance_scores")
    if scores is not None and len(scores) != n:
        raise AnnotationError(
            f"field importance_scores: length {len(scores)} != num_frames {n}")
    for i, shots in enumerate(doc.get("reference_summaries") or []):
        try:
            Summary(n, [tuple(s) for s in shots])
        except ValueError as exc:
            raise AnnotationError(f"field reference_summaries/{i}: {exc}") from exc
    return AnnotationDoc(n, kf, scores, doc.get("reference_summaries"), doc.get("class_label"))


def read_word_vectors(text: str, dim: int = W2V_DIM) -> dict:
    """Parse ``label v1 ... v<dim>`` lines into ``{label: float32 vector}``."""
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != dim + 1:
            raise WordVectorError(
                f"line {lineno}: expected {dim + 1} tokens (label + {dim} values), got {len(tokens)}")
        label = tokens[0]
        if label in table:
            raise WordVectorError(f"line {lineno}: duplicate label {label!r}")
        try:
            vec = np.array([float(t) for t in tokens[1:]], dtype=np.float32)
        except ValueError as exc:
            raise WordVectorError(f"line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(vec)):
            raise WordVectorError(f"line {lineno}: non-finite value")
        table[label] = vec
    if not table:
        raise WordVectorError("no word vectors found")
    return table


def format_word_vectors(table: dict) -> str:
    return "".join(f"{label} " + " ".join(repr(float(v)) for v in vec) + "\n"
                   for label, vec in table.items())


# -- synthetic videos --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_frames: int = 64
    frame_shape: tuple = (3, 32, 32)
    num_events: int = 3
    noise_level: float = 0.0
    seed: int = 0
    min_gap: int = 4
    fade: float = 0.93
    floor: float = 0.4  # brightness a regime fades towards
    ambient: float = 0.35  # scene light outside the spot
    level: float = 0.5  # mean intensity of the first frame of every regime
    budget: float = 0.15
    num_classes: int = 0  # > 0 tints every regime with the colour of class_index
    class_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frame_shape", tuple(int(v) for v in self.frame_shape))
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if not 0 <= self.num_events < self.num_frames:
            raise ValueError(f"num_events must be in [0, num_frames), got {self.num_events}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if not (0 < self.fade <= 1 and 0 <= self.floor < 1 and self.ambient >= 0 and self.level > 0):
            raise ValueError("need 0 < fade <= 1, 0 <= floor < 1, ambient >= 0 and level > 0")
        if len(self.frame_shape) != 3 or min(self.frame_shape) < 1:
            raise ValueError(f"frame_shape must be (C, H, W), got {self.frame_shape}")
        if self.num_classes < 0 or (self.num_classes and not 0 <= self.class_index < self.num_classes):
            raise ValueError(f"class_index {self.class_index} out of range for {self.num_classes} classes")
        if (self.num_events + 1) * self.min_gap > self.num_frames and self.num_events > 0:
            raise ValueError(
                f"{self.num_events} events with min gap {self.min_gap} do not fit in "
                f"{self.num_frames} frames")


@dataclass
class SynthVideo:
    frames: np.ndarray  # (F, C, H, W)
    gt: GroundTruthKeyframes  # first frame of each new regime
    reference: Summary
    features: np.ndarray  # (F, d)


def frame_features(frames: np.ndarray, grid: int = 4, hist_weight: float = 0.3,
                   level_weight: float = 0.3) -> np.ndarray:
    """Per-frame descriptor: chromaticity, a coarse spatial intensity histogram and mean level.

    Chromaticity (mean colour over its channel sum) and the histogram (cell
    means over their sum) ignore global brightness, so a fading scene keeps a
    stable signature; the weighted mean level keeps the fade itself visible.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, c, h, w = frames.shape
    gh, gw = min(grid, h), min(grid, w)
    mean_color = frames.mean(axis=(2, 3))
    total = mean_color.sum(axis=1, keepdims=True)
    chroma = mean_color / np.maximum(total, 1e-12)
    gray = frames.mean(axis=1)
    hs = np.array_split(np.arange(h), gh)
    ws = np.array_split(np.arange(w), gw)
    cells = np.stack([gray[:, r][:, :, cc].mean(axis=(1, 2)) for r in hs for cc in ws], axis=1)
    hist = cells / np.maximum(cells.sum(axis=1, keepdims=True), 1e-12)
    level = total / c
    return np.concatenate([chroma, hist_weight * hist, level_weight * level], axis=1).astype(np.float32)


def _event_positions(rng, n_frames, n_events, gap):
    if n_events == 0:
        return []
    slack = n_frames - (n_events + 1) * gap
    u = np.sort(rng.integers(0, slack + 1, size=n_events))
    return [int(u[i] + (i + 1) * gap) for i in range(n_events)]


def reference_shots(events, n_frames, budget=0.15) -> Summary:
    """Equal-length shots centred on the events, together within the budget."""
    if not events:
        return Summary(n_frames, [])
    length = int(math.floor(budget * n_frames)) // len(events)
    if length == 0:
        return Summary(n_frames, [])
    shots = []
    for e in events:
        start = max(0, e - length // 2)
        end = min(n_frames, start + length)
        if shots and start < shots[-1][1]:
            shots[-1] = (shots[-1][0], end)
        else:
            shots.append((start, end))
    return Summary(n_frames, shots)


def class_palette(num_classes: int, channels: int) -> np.ndarray:
    """Fixed, seed-independent scene tint per class, shape (num_classes, channels)."""
    return np.random.default_rng(7919).uniform(0.3, 1.0, size=(num_classes, channels))


def _regime_color(rng, cfg, channels, prev):
    if cfg.num_classes:
        return class_palette(cfg.num_classes, channels)[cfg.class_index] * rng.uniform(0.85, 1.0)
    # consecutive regimes must differ in hue, not only in brightness
    while True:
        color = rng.uniform(0.15, 1.0, size=channels)
        if prev is None or channels == 1 or np.linalg.norm(color / color.sum() - prev / prev.sum()) >= 0.15:
            return color


def synth_video(cfg: SynthConfig) -> SynthVideo:
    """Deterministic synthetic clip with abrupt scene changes.

    Each regime is a tinted scene lit by a drifting bright spot.  The scene
    dims towards ``floor`` until the next cut brings a fresh, fully lit one
    in a different tint.
    """
    rng = np.random.default_rng(cfg.seed)
    n, (c, h, w) = cfg.num_frames, cfg.frame_shape
    events = _event_positions(rng, n, cfg.num_events, cfg.min_gap)
    starts = [0] + events
    ends = events + [n]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    frames = np.zeros((n, c, h, w), dtype=np.float64)
    color = None
    for start, end in zip(starts, ends):
        color = _regime_color(rng, cfg, c, color)
        radius = rng.uniform(0.18, 0.24) * min(h, w)
        pos = rng.uniform([0.25 * h, 0.25 * w], [0.75 * h, 0.75 * w])
        vel = rng.uniform(-0.6, 0.6, size=2) * min(h, w) / 32
        gain = None
        for t in range(start, end):
            age = t - start
            cy, cx = pos + vel * age
            light = cfg.ambient + np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
            if gain is None:
                # every regime opens at the same mean level, so a cut always brightens the frame
                gain = cfg.level / (color.mean() * light.mean())
            amp = cfg.floor + (1 - cfg.floor) * cfg.fade ** age
            frames[t] = amp * gain * color[:, None, None] * light[None]
    if cfg.noise_level > 0:
        frames += rng.normal(0.0, cfg.noise_level, size=frames.shape)
    frames = frames.astype(np.float32)
    return SynthVideo(frames, GroundTruthKeyframes(list(events), n),
                      reference_shots(events, n, cfg.budget), frame_features(frames))


def synth_classification(n_samples: int, num_classes: int = 5, d_vis: int = 8,
                         spread: float = 0.3, seed: int = 0, prototypes=None):
    """Gaussian clusters around per-class prototypes; returns ``(samples, prototypes)``.

    ``samples`` is a list of ``(feature, "c<k>")`` pairs.  Pass the returned
    prototypes back in to draw a test set from the same classes.
    """
    rng = np.random.default_rng(seed)
    if prototypes is None:
        prototypes = 2.0 * rng.normal(size=(num_classes, d_vis))
    labels = rng.integers(0, len(prototypes), size=n_samples)
    samples = [(prototypes[k] + spread * rng.normal(size=prototypes.shape[1]), f"c{k}") for k in labels]
    return samples, prototypes


def synth_word_vectors(labels, seed: int = 0, dim: int = W2V_DIM) -> dict:
    """Random unit-scale vectors, one per label, in a fixed label order."""
    rng = np.random.default_rng(seed)
    return {label: (3.0 / math.sqrt(dim) * rng.normal(size=dim)).astype(np.float32) for label in labels}


# -- model bundles -----------------------------------------------------------
# A bundle is a JSON document whose arrays are base64-encoded FTS1 blobs, so
# identical models serialise to identical bytes.

def _pack(arr) -> str:
    return base64.b64encode(write_fts(arr)).decode("ascii")


def _unpack(text: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except ValueError as exc:
        raise FormatError(f"bad base64 array: {exc}") from exc
    return read_fts(raw)


def dump_json(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def model_to_json(model) -> dict:
    cfg = model.config
    return {
        "kind": "okfem",
        "config": {"input_shape": list(cfg.input_shape), "backbone_layers": cfg.backbone_layers,
                   "backbone_channels": cfg.backbone_channels,
                   "deform_kernel_size": cfg.deform_kernel_size,
                   "first_frame_policy": cfg.first_frame_policy,
                   "appearance_kernel_size": cfg.appearance_kernel_size},
        "params": {name: _pack(v) for name, v in sorted(model.parameters().items())},
    }


def model_from_json(doc: dict):
    from .stream import OkfemConfig, init_model

    if not isinstance(doc, dict) or doc.get("kind") != "okfem":
        raise FormatError("not an extractor model bundle")
    try:
        model = init_model(OkfemConfig(**doc["config"]))
        params = {name: _unpack(v) for name, v in doc["params"].items()}
        if set(params) != set(model.parameters()):
            raise FormatError(f"bundle parameters {sorted(params)} do not match the config")
        model.set_parameters(params)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad extractor bundle: {exc}") from exc
    return model


def classifier_to_json(model) -> dict:
    return {
        "kind": "itts",
        "classes": list(model.classes),
        "d_vis": model.params.d_vis,
        "params": {name: _pack(v) for name, v in sorted(model.params.arrays().items())},
    }


def classifier_from_json(doc: dict):
    from .recognizer import IttsModel, init_plugin

    if not isinstance(doc, dict) or doc.get("kind") != "itts":
        raise FormatError("not a classifier bundle")
    try:
        params = init_plugin(int(doc["d_vis"]), len(doc["classes"]))
        arrays = {name: _unpack(v).astype(np.float64) for name, v in doc["params"].items()}
        expected = params.arrays()
        if set(arrays) != set(expected) or any(arrays[k].shape != expected[k].shape for k in arrays):
            raise FormatError("classifier bundle arrays do not match its declared sizes")
        params.set_arrays(arrays)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad classifier bundle: {exc}") from exc
    return IttsModel(params, list(doc["classes"]))
