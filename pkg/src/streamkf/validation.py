"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .tensor import ShapeError


def check_video(frames, frame_shape=None, name: str = "video") -> np.ndarray:
    """One video as a finite float32 ``(F, C, H, W)`` array."""
    arr = check_array(np.asarray(frames), ensure_2d=False, allow_nd=True, dtype=np.float32,
                      input_name=name)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected (frames, channels, height, width), got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ShapeError(f"{name}: no frames")
    if frame_shape is not None and tuple(arr.shape[1:]) != tuple(frame_shape):
        raise ShapeError(f"{name}: frame shape {tuple(arr.shape[1:])} != expected {tuple(frame_shape)}")
    return arr


def check_videos(videos, frame_shape=None) -> list:
    videos = list(videos)
    if not videos:
        raise ValueError("need at least one video")
    out = [check_video(v, frame_shape, f"video {i}") for i, v in enumerate(videos)]
    if frame_shape is None:
        shapes = {v.shape[1:] for v in out}
        if len(shapes) > 1:
            raise ShapeError(f"videos have mixed frame shapes {sorted(shapes)}")
    return out


def check_keyframe_targets(y, videos) -> list:
    """Keyframe index lists, one per video, each sorted, unique and in range."""
    from .training import GroundTruthKeyframes

    y = list(y)
    if len(y) != len(videos):
        raise ValueError(f"{len(y)} targets for {len(videos)} videos")
    out = []
    for target, video in zip(y, videos):
        if isinstance(target, GroundTruthKeyframes):
            target = target.keyframe_indices
        out.append(GroundTruthKeyframes(sorted(set(int(i) for i in target)), len(video)))
    return out


def check_features(X, n_features: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=np.float64)
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} features per sample, got {X.shape[1]}")
    return X


def check_fraction(value: float, name: str, low_open: bool = True) -> float:
    value = float(value)
    ok = (0 < value <= 1) if low_open else (0 <= value <= 1)
    if not ok:
        raise ValueError(f"{name} must be in {'(0, 1]' if low_open else '[0, 1]'}, got {value}")
    return value
