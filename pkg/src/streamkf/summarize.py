"""Key-shot summaries: temporal segmentation, budgeted shot selection, F-score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BUDGET = 0.15


@dataclass(frozen=True)
class Segments:
    """Boundaries ``0 = b0 < b1 < ... < bm = F``; segment i is ``[b_i, b_{i+1})``."""

    boundaries: tuple

    def __post_init__(self):
        b = tuple(int(v) for v in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0:
            raise ValueError(f"boundaries must start at 0 and contain an end, got {b}")
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ValueError(f"boundaries must be strictly increasing, got {b}")

    @property
    def num_frames(self) -> int:
        return self.boundaries[-1]

    def intervals(self) -> list:
        return list(zip(self.boundaries[:-1], self.boundaries[1:]))

    def lengths(self) -> list:
        return [e - s for s, e in self.intervals()]

    def change_points(self) -> list:
        return list(self.boundaries[1:-1])


@dataclass(frozen=True)
class Summary:
    """Sorted, non-overlapping half-open shots ``[start, end)`` within ``[0, F)``."""

    num_frames: int
    shots: list = field(default_factory=list)

    def __post_init__(self):
        shots = [(int(s), int(e)) for s, e in self.shots]
        object.__setattr__(self, "shots", shots)
        if self.num_frames < 0:
            raise ValueError("num_frames must be >= 0")
        prev_end = 0
        for s, e in shots:
            if not (0 <= s < e <= self.num_frames):
                raise ValueError(f"shot [{s}, {e}) is empty or outside [0, {self.num_frames})")
            if s < prev_end:
                raise ValueError(f"shot [{s}, {e}) overlaps or is out of order")
            prev_end = e

    def total_length(self) -> int:
        return sum(e - s for s, e in self.shots)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.num_frames, dtype=bool)
        for s, e in self.shots:
            m[s:e] = True
        return m

    def to_json(self) -> dict:
        return {"num_frames": self.num_frames, "shots": [[s, e] for s, e in self.shots]}

    @classmethod
    def from_json(cls, doc: dict) -> "Summary":
        try:
            return cls(int(doc["num_frames"]), [tuple(s) for s in doc["shots"]])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"not a summary document: {exc}") from exc

    @classmethod
    def from_mask(cls, mask) -> "Summary":
        mask = np.asarray(mask, dtype=bool)
        shots, start = [], None
        for i, v in enumerate(mask):
            if v and start is None:
                start = i
            elif not v and start is not None:
                shots.append((start, i))
                start = None
        if start is not None:
            shots.append((start, len(mask)))
        return cls(len(mask), shots)


def budget_frames(budget: float, num_frames: int) -> int:
    if not 0 < budget:
        raise ValueError(f"budget must be > 0, got {budget}")
    return int(math.floor(min(budget, 1.0) * num_frames))


# -- kernel temporal segmentation -------------------------------------------

def segment_costs(features: np.ndarray) -> np.ndarray:
    """``cost[i, j]`` = within-segment scatter of frames ``[i, j)`` under a linear kernel.

    Computed from the Gram matrix as ``sum_t K[t, t] - sum_{s,t} K[s, t] / (j - i)``.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    gram = x @ x.T
    diag = np.concatenate([[0.0], np.cumsum(np.diag(gram))])
    block = np.zeros((n + 1, n + 1))
    block[1:, 1:] = np.cumsum(np.cumsum(gram, axis=0), axis=1)
    i = np.arange(n + 1)[:, None]
    j = np.arange(n + 1)[None, :]
    inner = block[j, j] - block[i, j] - block[j, i] + block[i, i]
    length = np.maximum(j - i, 1)
    cost = (diag[j] - diag[i]) - inner / length
    cost[j <= i] = np.inf
    return np.maximum(cost, 0.0)


def kts_penalty(num_frames: int, n_change_points: int, penalty: float) -> float:
    m = n_change_points
    if m == 0:
        return 0.0
    return penalty * m * (math.log(num_frames / m) + 1)


def kts_segment(features, max_segments: int, penalty: float = 1.0) -> Segments:
    """Kernel temporal segmentation with a linear kernel.

    For every number of change points ``m < max_segments`` a dynamic program
    finds the boundaries minimising total within-segment scatter; the final
    ``m`` minimises ``cost + penalty * m * (log(F / m) + 1)``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot segment an empty sequence")
    if not 1 <= max_segments <= n:
        raise ValueError(f"max_segments must be in [1, {n}], got {max_segments}")
    if penalty < 0:
        raise ValueError("penalty must be >= 0")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    cost = segment_costs(x)
    # best[m, j]: min cost of covering [0, j) with m + 1 segments
    best = np.full((max_segments, n + 1), np.inf)
    back = np.zeros((max_segments, n + 1), dtype=np.int64)
    best[0, 1:] = cost[0, 1:]
    for m in range(1, max_segments):
        for j in range(m + 1, n + 1):
            cand = best[m - 1, m:j] + cost[m:j, j]
            k = int(np.argmin(cand))
            best[m, j] = cand[k]
            back[m, j] = k + m
    totals = [best[m, n] + kts_penalty(n, m, penalty) for m in range(max_segments)]
    m = int(np.argmin(totals))
    bounds = [n]
    j = n
    for mm in range(m, 0, -1):
        j = int(back[mm, j])
        bounds.append(j)
    bounds.append(0)
    return Segments(tuple(reversed(bounds)))


def segmentation_cost(features, segments: Segments) -> float:
    cost = segment_costs(features)
    total = 0.0
    for s, e in segments.intervals():
        total += cost[s, e]
    return total


# -- key-shot selection ------------------------------------------------------

def keyframes_to_keyshots(segments: Segments, keyframes, budget: float = DEFAULT_BUDGET) -> Summary:
    """Greedy key-shot selection from keyframe density.

    Segments are ranked by keyframes-per-frame (ties: earlier first) and taken
    while the total stays within ``floor(budget * F)``; segments that would
    overflow are skipped.  Segments without keyframes are never taken.
    """
    n = segments.num_frames
    if not 0 < budget <= 1:
        raise ValueError(f"budget must be in (0, 1], got {budget}")
    kf = np.asarray(sorted(keyframes), dtype=np.int64)
    if kf.size and (kf[0] < 0 or kf[-1] >= n):
        raise ValueError(f"keyframe indices must lie in [0, {n})")
    limit = budget_frames(budget, n)
    ranked = []
    for idx, (s, e) in enumerate(segments.intervals()):
        count = int(np.count_nonzero((kf >= s) & (kf < e)))
        if count:
            ranked.append((-count / (e - s), idx, s, e))
    ranked.sort()
    chosen, used = [], 0
    for _, _, s, e in ranked:
        if used + (e - s) <= limit:
            chosen.append((s, e))
            used += e - s
    return Summary(n, sorted(chosen))


def importance_to_keyshots(scores, segments: Segments, budget: float = DEFAULT_BUDGET) -> Summary:
    """Exact 0/1 knapsack over segments valued by ``mean importance * length``."""
    scores = np.asarray(scores, dtype=np.float64)
    n = segments.num_frames
    if scores.shape != (n,):
        raise ValueError(f"expected {n} importance scores, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("importance scores contain non-finite values")
    limit = budget_frames(budget, n)
    items = segments.intervals()
    values = [float(scores[s:e].mean()) * (e - s) for s, e in items]
    weights = [e - s for s, e in items]
    table = np.zeros((len(items) + 1, limit + 1))
    for i, (v, w) in enumerate(zip(values, weights), start=1):
        table[i] = table[i - 1]
        if w <= limit:
            take = table[i - 1, :limit + 1 - w] + v
            better = take > table[i - 1, w:] + 1e-12 * max(1.0, abs(v))
            table[i, w:][better] = take[better]
    # walking back from the last item keeps earlier items on ties
    chosen, cap = [], limit
    for i in range(len(items), 0, -1):
        if table[i, cap] != table[i - 1, cap]:
            chosen.append(items[i - 1])
            cap -= weights[i - 1]
    return Summary(n, sorted(chosen))


# -- evaluation --------------------------------------------------------------

def _pair_f_score(pred: Summary, ref: Summary) -> float:
    p_len, r_len = pred.total_length(), ref.total_length()
    if p_len == 0 or r_len == 0:
        return 0.0
    overlap = int(np.count_nonzero(pred.mask() & ref.mask()))
    precision = overlap / p_len
    recall = overlap / r_len
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f_score(pred: Summary, refs, aggregation: str = "mean") -> float:
    """Frame-overlap F-score of ``pred`` against one or more references."""
    if isinstance(refs, Summary):
        refs = [refs]
    refs = list(refs)
    if not refs:
        raise ValueError("at least one reference summary is required")
    for ref in refs:
        if ref.num_frames != pred.num_frames:
            raise ValueError(
                f"frame count mismatch: prediction has {pred.num_frames}, reference {ref.num_frames}")
    scores = [_pair_f_score(pred, ref) for ref in refs]
    if aggregation == "mean":
        return float(np.mean(scores))
    if aggregation == "max":
        return float(np.max(scores))
    raise ValueError(f"aggregation must be 'mean' or 'max', got {aggregation!r}")
