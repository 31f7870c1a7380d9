"""End-to-end helpers: stream a video, turn keyframes into key-shots, score them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stream import KeyframeRecord, OkfemModel, ReceptiveFieldMap, appearance, motion_diff, \
    receptive_field, scan
from .summarize import DEFAULT_BUDGET, Summary, f_score, keyframes_to_keyshots, kts_segment

# KTS settings for key-shot conversion: roughly one candidate shot every
# `segment_length` frames, with no penalty on extra change points
SEGMENT_LENGTH = 3
KTS_PENALTY = 0.0


@dataclass
class Extraction:
    records: list
    scores: list  # per-frame S(t); None for the first frame
    num_frames: int

    @property
    def keyframes(self) -> list:
        return [r.frame_index for r in self.records]

    @property
    def ratio(self) -> float:
        return len(self.records) / self.num_frames if self.num_frames else 0.0

    def best_frame(self) -> int | None:
        scored = [(s, -i) for i, s in enumerate(self.scores) if s is not None]
        return -max(scored)[1] if scored else None


def extract(model: OkfemModel, frames, precomputed: bool = False) -> Extraction:
    records, scores = [], []
    for out in scan(frames, model, precomputed=precomputed):
        scores.append(out.score)
        if out.record is not None:
            records.append(out.record)
    return Extraction(records, scores, len(scores))


def fallback_record(model: OkfemModel, frames, extraction: Extraction) -> KeyframeRecord | None:
    """Record for the highest-scoring frame, used when nothing passed the gate."""
    best = extraction.best_frame()
    if best is None:
        return None
    if best == 0:
        d_prev = ReceptiveFieldMap(np.zeros((1,) + model.config.input_shape[1:], dtype=model.threshold.dtype), -1)
        y_prev = 0
    else:
        d_prev = receptive_field(frames[best - 1], model.deform, best - 1)
        y_prev = appearance(frames[best - 1], d_prev, model.appearance)
    d_t = receptive_field(frames[best], model.deform, best)
    y_t = appearance(frames[best], d_t, model.appearance)
    r = motion_diff(d_t, d_prev)
    return KeyframeRecord(best, float(extraction.scores[best]), r.r, y_t + y_prev)


def segment_video(features, segment_length: int = SEGMENT_LENGTH, penalty: float = KTS_PENALTY):
    features = np.asarray(features)
    n = features.shape[0]
    return kts_segment(features, max(1, min(n, n // segment_length)), penalty)


def summarize_keyframes(keyframes, features, budget: float = DEFAULT_BUDGET,
                        segment_length: int = SEGMENT_LENGTH, penalty: float = KTS_PENALTY) -> Summary:
    segments = segment_video(features, segment_length, penalty)
    return keyframes_to_keyshots(segments, keyframes, budget)


@dataclass
class SummaryReport:
    f_scores: list = field(default_factory=list)
    keyframe_ratios: list = field(default_factory=list)
    summaries: list = field(default_factory=list)

    @property
    def mean_f_score(self) -> float:
        return float(np.mean(self.f_scores)) if self.f_scores else 0.0

    @property
    def mean_keyframe_ratio(self) -> float:
        return float(np.mean(self.keyframe_ratios)) if self.keyframe_ratios else 0.0


def evaluate_videos(model: OkfemModel, videos, budget: float = DEFAULT_BUDGET,
                    aggregation: str = "mean", segment_length: int = SEGMENT_LENGTH,
                    penalty: float = KTS_PENALTY) -> SummaryReport:
    """Extract, summarise and score every video (items need frames/features/reference)."""
    report = SummaryReport()
    for video in videos:
        ext = extract(model, video.frames)
        summary = summarize_keyframes(ext.keyframes, video.features, budget, segment_length, penalty)
        refs = getattr(video, "references", None) or [video.reference]
        report.f_scores.append(f_score(summary, refs, aggregation))
        report.keyframe_ratios.append(ext.ratio)
        report.summaries.append(summary)
    return report
