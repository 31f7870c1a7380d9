"""Selection objective, its gradients, and the training / sweep loops.

The objective for one sequence is::

    alpha * sum_f err(f) - beta * sum_{f: Z(f)=1} tanh(S(f) / sigma)

where ``err`` counts missed ground-truth keyframes plus false positives.
The hard gate ``Z = [S > 0]`` has no useful derivative, so the backward pass
substitutes the slope of ``sigmoid(S / tau)`` (straight-through).  With
``gate_mode="soft"`` the sigmoid is also used in the forward pass, which
gives a smooth function whose gradient can be checked numerically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .stream import ALWAYS_KEYFRAME, OkfemModel, ReceptiveFieldMap, frame_score, motion_diff, \
    receptive_field, receptive_field_grads
from .tensor import NumericalError, OptimizerConfig, sgd_momentum_step

log = logging.getLogger(__name__)

# default (alpha, beta) sweep, in this order
DEFAULT_GRID = (
    (0.2, 0.8), (0.4, 0.6), (0.5, 0.5), (0.5, 0.45), (0.55, 0.45),
    (0.6, 0.42), (0.6, 0.4), (0.62, 0.42), (0.64, 0.42), (0.8, 0.2),
)


class TrainingDivergedError(NumericalError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.6
    beta: float = 0.42
    ste_temperature: float = 1.0
    score_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not self.ste_temperature > 0:
            raise ValueError("ste_temperature must be > 0")
        if not self.score_scale > 0:
            raise ValueError("score_scale must be > 0")


@dataclass(frozen=True)
class GroundTruthKeyframes:
    keyframe_indices: tuple
    num_frames: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.keyframe_indices)
        object.__setattr__(self, "keyframe_indices", idx)
        if list(idx) != sorted(set(idx)):
            raise ValueError("keyframe indices must be sorted and unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.num_frames):
            raise ValueError(f"keyframe indices must lie in [0, {self.num_frames})")

    def indicator(self) -> np.ndarray:
        """0 at ground-truth keyframes, 1 elsewhere."""
        y = np.ones(self.num_frames)
        y[list(self.keyframe_indices)] = 0
        return y


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def surrogate_slope(score, temperature: float):
    """d/dS of ``sigmoid(S / temperature)``."""
    s = sigmoid(np.asarray(score, dtype=np.float64) / temperature)
    return s * (1 - s) / temperature


def selection_loss(scores, gates, gt: GroundTruthKeyframes, config: LossConfig,
                   normalize: bool = False) -> float:
    """Objective value from per-frame scores and gate values.

    ``gates`` may be booleans, :class:`GateDecision` objects, or soft values
    in [0, 1].  Frames without a score (e.g. the first one) may carry ``nan``
    and must then be ungated.
    """
    gates = np.asarray([getattr(g, "selected", g) for g in gates], dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n = gt.num_frames
    if n == 0:
        raise ValueError("empty sequence")
    if scores.shape != (n,) or gates.shape != (n,):
        raise ValueError(f"scores ({scores.shape}) and gates ({gates.shape}) must have length {n}")
    y = gt.indicator()
    err = (1 - y) * (1 - gates) + y * gates
    bonus = np.where(gates != 0, gates * np.tanh(np.nan_to_num(scores) / config.score_scale), 0.0)
    loss = config.alpha * err.sum() - config.beta * bonus.sum()
    return float(loss / n if normalize else loss)


@dataclass
class SequenceForward:
    maps: list  # ReceptiveFieldMap per frame
    scores: np.ndarray  # nan where undefined
    gates: np.ndarray  # forward gate values
    slopes: np.ndarray  # d gate / d score used in the backward pass
    loss: float


def sequence_forward(model: OkfemModel, frames, gt: GroundTruthKeyframes, config: LossConfig,
                     gate_mode: str = "ste") -> SequenceForward:
    if gate_mode not in ("ste", "soft"):
        raise ValueError(f"gate_mode must be 'ste' or 'soft', got {gate_mode!r}")
    n = len(frames)
    if n != gt.num_frames:
        raise ValueError(f"sequence has {n} frames, ground truth expects {gt.num_frames}")
    maps = [receptive_field(frames[t], model.deform, t) for t in range(n)]
    scores = np.full(n, np.nan)
    gates = np.zeros(n)
    slopes = np.zeros(n)
    for t in range(n):
        if t == 0:
            if model.config.first_frame_policy != ALWAYS_KEYFRAME:
                continue
            prev = ReceptiveFieldMap(np.zeros_like(maps[0].map), -1)
        else:
            prev = maps[t - 1]
        scores[t] = frame_score(motion_diff(maps[t], prev), model.threshold).total
        if t == 0:
            gates[t] = 1.0  # forced by policy, no gate derivative
            continue
        if gate_mode == "ste":
            gates[t] = float(scores[t] > 0)
        else:
            gates[t] = float(sigmoid(scores[t] / config.ste_temperature))
        slopes[t] = surrogate_slope(scores[t], config.ste_temperature)
    loss = selection_loss(scores, gates, gt, config, normalize=True)
    return SequenceForward(maps, scores, gates, slopes, loss)


def score_gradients(fwd: SequenceForward, gt: GroundTruthKeyframes, config: LossConfig) -> np.ndarray:
    """dLoss/dS(f) for every frame (zero where S is undefined)."""
    n = gt.num_frames
    y = gt.indicator()
    has = ~np.isnan(fwd.scores)
    s = np.where(has, fwd.scores, 0.0) / config.score_scale
    th = np.tanh(s)
    sech2 = 1 - th ** 2
    g = (config.alpha * (2 * y - 1) * fwd.slopes
         - config.beta * (fwd.slopes * th + fwd.gates * sech2 / config.score_scale))
    return np.where(has, g, 0.0) / n


def loss_gradients(model: OkfemModel, frames, gt: GroundTruthKeyframes, config: LossConfig,
                   gate_mode: str = "ste"):
    """Loss value and gradients for every parameter of ``model``.

    Returns ``(loss, grads, forward)`` with ``grads`` keyed like
    :meth:`OkfemModel.parameters`.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    fwd = sequence_forward(model, frames, gt, config, gate_mode)
    if not math.isfinite(fwd.loss):
        raise NumericalError("loss is not finite")
    g_s = score_gradients(fwd, gt, config)
    grads = {name: np.zeros(p.shape, dtype=np.float64) for name, p in model.parameters().items()}
    grads["threshold"][:] = -g_s.sum()
    n = len(frames)
    dtype = model.threshold.dtype
    for t in range(n):
        # S(t) gains +sum(D(t)); S(t+1) gains -sum(D(t))
        coeff = g_s[t] - (g_s[t + 1] if t + 1 < n else 0.0)
        if coeff == 0.0:
            continue
        grad_map = np.full(fwd.maps[t].map.shape, coeff, dtype=dtype)
        for name, g in receptive_field_grads(frames[t], model.deform, grad_map).items():
            grads[name] += g
    out = {name: g.astype(model.parameters()[name].dtype) for name, g in grads.items()}
    for name, g in out.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"gradient for {name} is not finite")
    return fwd.loss, out, fwd


@dataclass
class TrainResult:
    model: OkfemModel
    losses: list = field(default_factory=list)  # mean loss per epoch
    keyframe_ratios: list = field(default_factory=list)  # mean ratio per epoch


def train(model: OkfemModel, dataset, opt: OptimizerConfig | None = None,
          loss_cfg: LossConfig | None = None, seed: int = 0, callback=None) -> TrainResult:
    """Momentum-SGD training, one update per sequence.

    ``dataset`` is a list of ``(frames, GroundTruthKeyframes)`` pairs.  The
    input model is not modified.
    """
    opt = opt or OptimizerConfig()
    loss_cfg = loss_cfg or LossConfig()
    if not dataset:
        raise ValueError("dataset is empty")
    model = model.copy()
    rng = np.random.default_rng(seed)
    velocity = {name: np.zeros_like(p) for name, p in model.parameters().items()}
    result = TrainResult(model)
    for epoch in range(opt.total_epochs):
        losses, ratios = [], []
        for i in rng.permutation(len(dataset)):
            frames, gt = dataset[i]
            try:
                loss, grads, fwd = loss_gradients(model, frames, gt, loss_cfg)
            except NumericalError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch}, sequence {i}: {exc}; last epoch losses {result.losses[-3:]}") from exc
            params = model.parameters()
            updated = {}
            for name, p in params.items():
                updated[name], velocity[name] = sgd_momentum_step(p, velocity[name], grads[name], opt, epoch)
                if not np.all(np.isfinite(updated[name])):
                    raise TrainingDivergedError(f"epoch {epoch}, sequence {i}: {name} diverged")
            model.set_parameters(updated)
            losses.append(loss)
            ratios.append(float(np.mean(fwd.gates > 0.5)))
        result.losses.append(float(np.mean(losses)))
        result.keyframe_ratios.append(float(np.mean(ratios)))
        log.info("epoch %d loss %.5f keyframe ratio %.3f", epoch, result.losses[-1],
                 result.keyframe_ratios[-1])
        if callback is not None:
            callback(epoch, result)
    return result


@dataclass
class SweepResult:
    alpha: float
    beta: float
    f_score: float
    mean_keyframe_ratio: float
    per_video: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "f_score": self.f_score,
                "keyframe_ratio": self.mean_keyframe_ratio}


def _sweep_point(alpha, beta, model, dataset, eval_set, opt, base, seed, summary_kwargs):
    from .pipeline import evaluate_videos

    cfg = LossConfig(alpha, beta, base.ste_temperature, base.score_scale)
    trained = train(model, dataset, opt, cfg, seed).model
    report = evaluate_videos(trained, eval_set, **summary_kwargs)
    return SweepResult(alpha, beta, report.mean_f_score, report.mean_keyframe_ratio,
                       report.f_scores)


def sweep_alpha_beta(grid, dataset, opt: OptimizerConfig | None = None, seed: int = 0,
                     model: OkfemModel | None = None, eval_set=None,
                     base_loss: LossConfig | None = None, n_jobs: int = 1,
                     **summary_kwargs) -> list:
    """Train one model per ``(alpha, beta)`` pair and score its summaries.

    Every grid point starts from the same initial model and shuffling seed.
    ``eval_set`` items need ``frames``, ``features`` and ``reference``
    attributes; when omitted, the training videos are used.
    """
    from joblib import Parallel, delayed

    from .stream import init_model

    grid = [tuple(map(float, g)) for g in (DEFAULT_GRID if grid is None else grid)]
    if not grid:
        raise ValueError("grid is empty")
    base = base_loss or LossConfig()
    model = model or init_model(seed=seed)
    if eval_set is None:
        eval_set = dataset
    pairs = [(item.frames, item.gt) if hasattr(item, "gt") else item for item in dataset]
    jobs = (delayed(_sweep_point)(a, b, model, pairs, eval_set, opt, base, seed, summary_kwargs)
            for a, b in grid)
    return list(Parallel(n_jobs=n_jobs)(jobs))


def format_sweep_table(results) -> str:
    lines = ["alpha\tbeta\tf_score\tkeyframe_ratio"]
    for r in results:
        lines.append(f"{r.alpha:g}\t{r.beta:g}\t{r.f_score:.4f}\t{r.mean_keyframe_ratio:.4f}")
    return "\n".join(lines) + "\n"
