"""Keyframe classifier with a word-vector refinement loop.

A two-layer plugin takes ``[visual features, word vector]`` and emits a
refined word vector of the same size.  The refined vector is fed back as the
next input and also drives the classification head.  Training and testing
both iterate that loop until the predicted label repeats ``stability_run``
times in a row, or ``max_iterations`` is reached.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import OptimizerConfig, sgd_momentum_step

W2V_DIM = 300
FC1_SIZE = 450


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __call__(self, x):
        return self.weight @ x + self.bias

    @classmethod
    def init(cls, rng, n_out, n_in, scale=None):
        scale = math.sqrt(1.0 / n_in) if scale is None else scale
        return cls(rng.normal(0, scale, size=(n_out, n_in)), np.zeros(n_out))


@dataclass
class PluginParams:
    fc1: Dense
    fc2: Dense
    head: Dense

    def __post_init__(self):
        d_in = self.fc1.weight.shape[1]
        if self.fc1.weight.shape[0] != FC1_SIZE:
            raise ValueError(f"fc1 must have {FC1_SIZE} outputs, got {self.fc1.weight.shape[0]}")
        if self.fc2.weight.shape != (W2V_DIM, FC1_SIZE):
            raise ValueError(f"fc2 must map {FC1_SIZE} -> {W2V_DIM}, got {self.fc2.weight.shape}")
        if self.head.weight.shape[1] != d_in or d_in <= W2V_DIM:
            raise ValueError("head and fc1 must both take visual + word-vector input")

    @property
    def d_vis(self) -> int:
        return self.fc1.weight.shape[1] - W2V_DIM

    @property
    def num_classes(self) -> int:
        return self.head.weight.shape[0]

    def arrays(self) -> dict:
        return {f"{layer}.{attr}": getattr(getattr(self, layer), attr)
                for layer in ("fc1", "fc2", "head") for attr in ("weight", "bias")}

    def set_arrays(self, values: dict) -> None:
        for name, value in values.items():
            layer, attr = name.split(".")
            setattr(getattr(self, layer), attr, value)

    def copy(self) -> "PluginParams":
        return PluginParams(*(Dense(l.weight.copy(), l.bias.copy()) for l in (self.fc1, self.fc2, self.head)))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, value in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()


def init_plugin(d_vis: int, num_classes: int, seed: int = 0) -> PluginParams:
    rng = np.random.default_rng(seed)
    d_in = d_vis + W2V_DIM
    return PluginParams(Dense.init(rng, FC1_SIZE, d_in), Dense.init(rng, W2V_DIM, FC1_SIZE),
                        Dense.init(rng, num_classes, d_in))


@dataclass(frozen=True)
class IttsConfig:
    max_iterations: int = 10
    stability_run: int = 3

    def __post_init__(self):
        if not self.max_iterations >= self.stability_run >= 1:
            raise ValueError(
                f"need max_iterations >= stability_run >= 1, got {self.max_iterations}, {self.stability_run}")


def softmax(z):
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def _forward(vis, w2v, params: PluginParams):
    z1 = np.concatenate([vis, w2v])
    a1 = params.fc1(z1)
    h = np.maximum(a1, 0)
    refined = params.fc2(h)
    z2 = np.concatenate([vis, refined])
    probs = softmax(params.head(z2))
    return probs, refined, (z1, a1, h, z2)


def plugin_forward(vis, w2v, params: PluginParams):
    """Returns ``(class probabilities, refined word vector)``."""
    vis = np.asarray(vis, dtype=np.float64).ravel()
    w2v = np.asarray(w2v, dtype=np.float64).ravel()
    if vis.shape != (params.d_vis,):
        raise ValueError(f"visual feature has {vis.size} values, model expects {params.d_vis}")
    if w2v.shape != (W2V_DIM,):
        raise ValueError(f"word vector has {w2v.size} values, expected {W2V_DIM}")
    probs, refined, _ = _forward(vis, w2v, params)
    return probs, refined


def cross_entropy_grads(vis, w2v, label: int, params: PluginParams):
    """Cross-entropy loss and parameter gradients for one sample."""
    probs, refined, (z1, a1, h, z2) = _forward(vis, w2v, params)
    loss = -math.log(max(probs[label], 1e-300))
    d_logits = probs.copy()
    d_logits[label] -= 1
    g = {"head.weight": np.outer(d_logits, z2), "head.bias": d_logits}
    d_refined = (params.head.weight.T @ d_logits)[params.d_vis:]
    g["fc2.weight"] = np.outer(d_refined, h)
    g["fc2.bias"] = d_refined
    d_a1 = (params.fc2.weight.T @ d_refined) * (a1 > 0)
    g["fc1.weight"] = np.outer(d_a1, z1)
    g["fc1.bias"] = d_a1
    return loss, g, probs, refined


def stable(labels, run: int) -> bool:
    return len(labels) >= run and len(set(labels[-run:])) == 1


# -- keyframe pooling --------------------------------------------------------

def _record_stats(record) -> np.ndarray:
    parts = []
    for arr in (record.k_fm, record.k_fa):
        a = np.asarray(arr, dtype=np.float64)
        flat = a.reshape(a.shape[0], -1)
        parts.append(flat.mean(axis=1))
        parts.append(flat.std(axis=1))
    return np.concatenate(parts)


def pool_keyframes(records) -> np.ndarray:
    """Mean over records of per-channel ``[mean, std]`` of the motion and appearance maps.

    Layout: ``[k_fm means, k_fm stds, k_fa means, k_fa stds]``.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot pool an empty keyframe list; fall back to the best-scoring frame")
    return np.mean([_record_stats(r) for r in records], axis=0)


# -- ITTS --------------------------------------------------------------------

@dataclass
class IterationLog:
    sample: int
    epoch: int
    labels: list
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.labels)


@dataclass
class IttsModel:
    params: PluginParams
    classes: list  # class labels, index == head output

    def index(self, label) -> int:
        return self.classes.index(label)


def _table_matrix(classes, w2v_table) -> dict:
    missing = [c for c in classes if c not in w2v_table]
    if missing:
        raise KeyError(f"no word vector for classes {missing}")
    out = {}
    for c in classes:
        v = np.asarray(w2v_table[c], dtype=np.float64)
        if v.shape != (W2V_DIM,):
            raise ValueError(f"word vector for {c!r} has shape {v.shape}, expected ({W2V_DIM},)")
        out[c] = v
    return out


def itts_train(model: IttsModel, dataset, w2v_table, cfg: IttsConfig | None = None,
               opt: OptimizerConfig | None = None, seed: int = 0):
    """Iterative training; returns ``(trained model, list of IterationLog)``.

    Each sample starts from its class word vector.  Every iteration takes one
    gradient step and replaces the working vector by the plugin's refined
    output; the shared table is never modified.
    """
    cfg = cfg or IttsConfig()
    opt = opt or OptimizerConfig()
    table = _table_matrix(model.classes, w2v_table)
    params = model.params.copy()
    velocity = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    rng = np.random.default_rng(seed)
    log = []
    for epoch in range(opt.total_epochs):
        for i in rng.permutation(len(dataset)):
            vis, label = dataset[i]
            vis = np.asarray(vis, dtype=np.float64).ravel()
            target = model.index(label)
            w2v = table[label].copy()
            labels = []
            for _ in range(cfg.max_iterations):
                loss, grads, probs, refined = cross_entropy_grads(vis, w2v, target, params)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"epoch {epoch}, sample {i}: loss is not finite")
                arrays = params.arrays()
                updated = {}
                for name, p in arrays.items():
                    updated[name], velocity[name] = sgd_momentum_step(p, velocity[name], grads[name], opt, epoch)
                params.set_arrays(updated)
                w2v = refined
                labels.append(int(np.argmax(probs)))
                if stable(labels, cfg.stability_run):
                    break
            log.append(IterationLog(int(i), epoch, labels, stable(labels, cfg.stability_run)))
    return IttsModel(params, list(model.classes)), log


@dataclass
class ClassRun:
    w2v_class: object
    label: object  # L_c
    probability: float  # P_c
    iterations: int
    converged: bool
    probabilities: list = field(default_factory=list)  # final-iteration distribution


@dataclass
class PredictionRecord:
    runs: list
    label: object  # L_kf
    converged: bool

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "converged": self.converged,
            "runs": [{"w2v_class": r.w2v_class, "label": r.label, "probability": r.probability,
                      "iterations": r.iterations, "converged": r.converged,
                      "probabilities": r.probabilities} for r in self.runs],
        }


def itts_test(model: IttsModel, vis, w2v_table, cfg: IttsConfig | None = None) -> PredictionRecord:
    """Iterative prediction over every class word vector (no parameter updates).

    The final label prefers self-consistent runs (a class vector that leads to
    predicting that same class) with the highest probability; if there are
    none, the run with the highest probability wins.
    """
    cfg = cfg or IttsConfig()
    table = _table_matrix(model.classes, w2v_table)
    vis = np.asarray(vis, dtype=np.float64).ravel()
    runs = []
    for c in model.classes:
        w2v = table[c]
        labels = []
        for _ in range(cfg.max_iterations):
            probs, refined = plugin_forward(vis, w2v, model.params)
            labels.append(int(np.argmax(probs)))
            w2v = refined
            if stable(labels, cfg.stability_run):
                break
        final = labels[-1]
        runs.append(ClassRun(c, model.classes[final], float(probs[final]), len(labels),
                             stable(labels, cfg.stability_run), [float(p) for p in probs]))
    consistent = [r for r in runs if r.label == r.w2v_class]
    pool = consistent or runs
    best = max(pool, key=lambda r: r.probability)  # first wins on ties
    return PredictionRecord(runs, best.label, all(r.converged for r in runs))


def evaluate(model: IttsModel, dataset, w2v_table, cfg: IttsConfig | None = None):
    """Accuracy of :func:`itts_test` over ``(vis, label)`` pairs."""
    records = [itts_test(model, vis, w2v_table, cfg) for vis, _ in dataset]
    if not records:
        return 0.0, []
    hits = sum(r.label == label for r, (_, label) in zip(records, dataset))
    return hits / len(records), records


SINGLE_PASS = IttsConfig(max_iterations=1, stability_run=1)
