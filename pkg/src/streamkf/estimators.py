"""scikit-learn style wrappers around the extractor, summariser and classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .pipeline import KTS_PENALTY, SEGMENT_LENGTH, extract, fallback_record, segment_video
from .recognizer import IttsConfig, IttsModel, evaluate, init_plugin, itts_test, itts_train, \
    pool_keyframes
from .stream import NEVER_KEYFRAME, OkfemConfig, init_model, scan
from .summarize import DEFAULT_BUDGET, Summary, f_score, importance_to_keyshots, keyframes_to_keyshots
from .tensor import OptimizerConfig
from .training import LossConfig, train
from .validation import check_features, check_fraction, check_keyframe_targets, check_videos


class OnlineKeyframeExtractor(BaseEstimator, TransformerMixin):
    """Learns the streaming keyframe gate from videos with labelled keyframes.

    ``X`` is a list of ``(F, C, H, W)`` arrays; ``y`` a list of keyframe index
    lists.  ``transform`` pools each video's keyframe records into a fixed
    length feature vector for the classifier.
    """

    def __init__(self, backbone_layers=2, backbone_channels=16, deform_kernel_size=3,
                 first_frame_policy=NEVER_KEYFRAME, alpha=0.6, beta=0.42, ste_temperature=1.0,
                 score_scale=1.0, learning_rate=1e-4, momentum=0.9, decay_factor=0.96,
                 decay_every_epochs=10, epochs=30, response_scale=0.02, random_state=0):
        self.backbone_layers = backbone_layers
        self.backbone_channels = backbone_channels
        self.deform_kernel_size = deform_kernel_size
        self.first_frame_policy = first_frame_policy
        self.alpha = alpha
        self.beta = beta
        self.ste_temperature = ste_temperature
        self.score_scale = score_scale
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_every_epochs = decay_every_epochs
        self.epochs = epochs
        self.response_scale = response_scale
        self.random_state = random_state

    def _init(self, frame_shape):
        cfg = OkfemConfig(tuple(frame_shape), self.backbone_layers, self.backbone_channels,
                          self.deform_kernel_size, self.first_frame_policy)
        return init_model(cfg, seed=self.random_state, response_scale=self.response_scale)

    def fit(self, X, y):
        videos = check_videos(X)
        gts = check_keyframe_targets(y, videos)
        model = self._init(videos[0].shape[1:])
        opt = OptimizerConfig(self.learning_rate, self.momentum, self.decay_factor,
                              self.decay_every_epochs, self.epochs)
        loss = LossConfig(self.alpha, self.beta, self.ste_temperature, self.score_scale)
        result = train(model, list(zip(videos, gts)), opt, loss, seed=self.random_state)
        self.model_ = result.model
        self.loss_curve_ = result.losses
        self.keyframe_ratio_curve_ = result.keyframe_ratios
        self.frame_shape_ = tuple(videos[0].shape[1:])
        return self

    def _videos(self, X):
        check_is_fitted(self, "model_")
        return check_videos(X, self.frame_shape_)

    def predict(self, X) -> list:
        """Keyframe indices per video."""
        return [extract(self.model_, v).keyframes for v in self._videos(X)]

    def decision_function(self, X) -> list:
        """Per-frame scores S(t) per video; the first frame is NaN when it has none."""
        return [np.array([np.nan if s is None else s for s in extract(self.model_, v).scores])
                for v in self._videos(X)]

    def transform(self, X) -> np.ndarray:
        rows = []
        for v in self._videos(X):
            ext = extract(self.model_, v)
            records = ext.records or [fallback_record(self.model_, v, ext)]
            rows.append(pool_keyframes(records))
        return np.stack(rows)

    def stream(self, frames):
        """Generator over per-frame outputs for a (possibly unbounded) frame iterable."""
        check_is_fitted(self, "model_")
        return scan(frames, self.model_)

    def keyframe_ratio(self, X) -> float:
        return float(np.mean([len(k) / len(v) for k, v in zip(self.predict(X), self._videos(X))]))


class KeyshotSummarizer(BaseEstimator):
    """Turns keyframes (or importance scores) into a budgeted key-shot summary.

    ``predict(features, keyframes)`` takes per-video feature sequences and,
    for ``selection="greedy"``, keyframe lists; for ``"knapsack"`` the second
    argument holds per-frame importance scores instead.
    """

    def __init__(self, budget=DEFAULT_BUDGET, segment_length=SEGMENT_LENGTH, penalty=KTS_PENALTY,
                 selection="greedy", aggregation="mean"):
        self.budget = budget
        self.segment_length = segment_length
        self.penalty = penalty
        self.selection = selection
        self.aggregation = aggregation

    def fit(self, X=None, y=None):
        check_fraction(self.budget, "budget")
        if self.selection not in ("greedy", "knapsack"):
            raise ValueError(f"selection must be 'greedy' or 'knapsack', got {self.selection!r}")
        if self.aggregation not in ("mean", "max"):
            raise ValueError(f"aggregation must be 'mean' or 'max', got {self.aggregation!r}")
        self.fitted_ = True
        return self

    def predict(self, features, signals) -> list:
        if not hasattr(self, "fitted_"):
            self.fit()
        out = []
        for feats, sig in zip(features, signals, strict=True):
            segs = segment_video(check_features(feats), self.segment_length, self.penalty)
            if self.selection == "greedy":
                out.append(keyframes_to_keyshots(segs, sig, self.budget))
            else:
                out.append(importance_to_keyshots(sig, segs, self.budget))
        return out

    def score(self, features, signals, references) -> float:
        """Mean F-score against per-video reference lists (or single summaries)."""
        preds = self.predict(features, signals)
        refs = [[r] if isinstance(r, Summary) else list(r) for r in references]
        return float(np.mean([f_score(p, r, self.aggregation) for p, r in zip(preds, refs, strict=True)]))


class IttsClassifier(BaseEstimator, ClassifierMixin):
    """Visual features plus class word vectors, trained and tested iteratively."""

    def __init__(self, word_vectors=None, max_iterations=10, stability_run=3, learning_rate=1e-4,
                 momentum=0.9, decay_factor=0.96, decay_every_epochs=10, epochs=30, random_state=0):
        self.word_vectors = word_vectors
        self.max_iterations = max_iterations
        self.stability_run = stability_run
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_every_epochs = decay_every_epochs
        self.epochs = epochs
        self.random_state = random_state

    def _cfg(self):
        return IttsConfig(self.max_iterations, self.stability_run)

    def fit(self, X, y):
        if not self.word_vectors:
            raise ValueError("word_vectors is required")
        X = check_features(X)
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"{len(y)} labels for {len(X)} samples")
        self.classes_ = np.array(sorted(set(y), key=str), dtype=object)
        model = IttsModel(init_plugin(X.shape[1], len(self.classes_), self.random_state), list(self.classes_))
        opt = OptimizerConfig(self.learning_rate, self.momentum, self.decay_factor,
                              self.decay_every_epochs, self.epochs)
        self.model_, self.iteration_log_ = itts_train(model, list(zip(X, y)), self.word_vectors,
                                                      self._cfg(), opt, self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def convergence_rate_(self) -> float:
        check_is_fitted(self, "model_")
        return float(np.mean([entry.converged for entry in self.iteration_log_]))

    def predict_records(self, X) -> list:
        check_is_fitted(self, "model_")
        X = check_features(X, self.n_features_in_)
        return [itts_test(self.model_, x, self.word_vectors, self._cfg()) for x in X]

    def predict(self, X) -> np.ndarray:
        return np.array([r.label for r in self.predict_records(X)], dtype=object)

    def score(self, X, y) -> float:
        check_is_fitted(self, "model_")
        X = check_features(X, self.n_features_in_)
        acc, _ = evaluate(self.model_, list(zip(X, y)), self.word_vectors, self._cfg())
        return acc
