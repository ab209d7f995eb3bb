"""scikit-learn style wrappers around the detectors.

Estimators take a graph as ``X`` (a :class:`TemporalHeteroGraph` or a
:class:`GraphView`) and per-node targets as ``y`` (1 illicit, 0 licit,
-1 unlabeled; defaults to the graph's own labels).
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .baselines import GCNConfig, RuleSet, default_ruleset, gcn_scores, gcn_train_and_score, normalized_adjacency
from .baselines import rulematch_scores
from .encoder import EncoderConfig, initial_features
from .graph import GraphView, TemporalHeteroGraph, as_view
from .metapath import MetaPath, default_metapaths
from .metrics import compute_f1
from .model import ModelConfig, forward, prepare, risk_scores
from .training import ContrastiveConfig, LossWeights, TrainConfig, TrainState, default_windows, train


def check_graph(X):
    """Return ``X`` as a view, rejecting anything that is not a graph."""
    if not isinstance(X, (TemporalHeteroGraph, GraphView)):
        raise TypeError(f"expected a TemporalHeteroGraph or GraphView, got {type(X).__name__}")
    return as_view(X)


def check_targets(view, y):
    if y is None:
        return view.targets
    y = np.asarray(y)
    if y.shape != (view.num_nodes,):
        raise ValueError(f"y must have one entry per node ({view.num_nodes}), got shape {y.shape}")
    if not np.isin(y, (-1, 0, 1)).all():
        raise ValueError("y entries must be 1 (illicit), 0 (licit) or -1 (unlabeled)")
    return y.astype(np.int64)


def check_mask(view, mask):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (view.num_nodes,):
        raise ValueError("train_mask must have one entry per node")
    return mask


def _labeled_f1(pred, y):
    rows = np.flatnonzero(y >= 0)
    return compute_f1({int(i): int(pred[i]) for i in rows}, {int(i): int(y[i]) for i in rows}).f1


class _GraphClassifier(ClassifierMixin, BaseEstimator):
    threshold: float = 0.5

    def predict_proba(self, X, now=None):
        p = self.decision_scores(X, now)
        return np.column_stack([1.0 - p, p])

    def predict(self, X, now=None):
        return (self.decision_scores(X, now) >= self.threshold).astype(np.int64)

    def score(self, X, y=None, sample_weight=None):
        """F1 on the labeled nodes (unlabeled ones are ignored)."""
        view = check_graph(X)
        return _labeled_f1(self.predict(view), check_targets(view, y))


class GCRMFDetector(_GraphClassifier):
    """Temporal dual-channel encoder + meta-path subgraph attention + risk head."""

    def __init__(
        self,
        hidden_dim=32,
        n_layers=2,
        gamma_init=0.1,
        lambda_init=0.5,
        use_temporal=True,
        use_metapath=True,
        use_contrastive=True,
        category_onehot=True,
        activation="leaky_relu",
        slope=0.2,
        direction="both",
        metapaths=None,
        max_per_hop=8,
        max_total=64,
        att_dim=16,
        tau=0.2,
        negatives=None,
        batch_size=64,
        augmentation="instance-resample",
        gamma_loss=0.1,
        eta=1.0,
        epochs_per_window=30,
        learning_rate=1e-3,
        optimizer="adam",
        weight_decay=0.0,
        class_weight=None,
        n_windows=5,
        threshold=0.5,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.gamma_init = gamma_init
        self.lambda_init = lambda_init
        self.use_temporal = use_temporal
        self.use_metapath = use_metapath
        self.use_contrastive = use_contrastive
        self.category_onehot = category_onehot
        self.activation = activation
        self.slope = slope
        self.direction = direction
        self.metapaths = metapaths
        self.max_per_hop = max_per_hop
        self.max_total = max_total
        self.att_dim = att_dim
        self.tau = tau
        self.negatives = negatives
        self.batch_size = batch_size
        self.augmentation = augmentation
        self.gamma_loss = gamma_loss
        self.eta = eta
        self.epochs_per_window = epochs_per_window
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.class_weight = class_weight
        self.n_windows = n_windows
        self.threshold = threshold
        self.random_state = random_state

    def _configs(self):
        mps = self.metapaths
        if mps is None:
            mps = default_metapaths()
        else:
            mps = [m if isinstance(m, MetaPath) else MetaPath.parse(m) for m in mps]
        enc = EncoderConfig(
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            gamma_init=self.gamma_init if self.use_temporal else 0.0,
            lambda_init=self.lambda_init,
            use_temporal=self.use_temporal,
            category_onehot=self.category_onehot,
            activation=self.activation,
            slope=self.slope,
            direction=self.direction,
        )
        model = ModelConfig(enc, mps, self.att_dim, self.max_per_hop, self.max_total, self.use_metapath,
                            self.random_state)
        tcfg = TrainConfig(
            contrastive=ContrastiveConfig(self.tau, self.negatives, self.batch_size, self.augmentation),
            weights=LossWeights(self.gamma_loss, self.eta),
            epochs_per_window=self.epochs_per_window,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            use_contrastive=self.use_contrastive and self.use_metapath,
            class_weight=self.class_weight,
            seed=self.random_state,
        )
        return model, tcfg

    def fit(self, X, y=None, train_mask=None, windows=None):
        view = check_graph(X)
        y = check_targets(view, y)
        mask = check_mask(view, train_mask)
        self.config_, self.train_config_ = self._configs()
        self.windows_ = list(windows) if windows is not None else default_windows(view, self.n_windows)
        self.state_ = train(view, self.windows_, self.config_, self.train_config_, y, mask)
        self.store_ = self.state_.store
        self.classes_ = np.array([0, 1])
        return self

    def load_window_stores(self, stores, windows):
        """Adopt per-window parameters trained elsewhere (e.g. read from checkpoints)."""
        if len(stores) != len(windows) or not stores:
            raise ValueError("need one parameter store per window")
        self.config_, self.train_config_ = self._configs()
        self.windows_ = list(windows)
        self.state_ = TrainState(stores[-1], None, window_stores=list(stores), windows=list(windows))
        self.store_ = stores[-1]
        self.classes_ = np.array([0, 1])
        return self

    def _store_for(self, window):
        return self.store_ if window is None else self.state_.window_stores[window]

    def transform(self, X, now=None, window=None):
        """Node representations ``[h || z]`` as of ``now`` (default: the graph horizon)."""
        check_is_fitted(self, "store_")
        view = check_graph(X)
        now = view.time_horizon if now is None else now
        ctx = prepare(view, self.config_, now)
        _, _, rep = forward(self._store_for(window), self.config_, ctx)
        nx.check_finite(rep, "representations")
        return rep.value

    def decision_scores(self, X, now=None, window=None):
        check_is_fitted(self, "store_")
        return risk_scores(self._store_for(window), self.transform(X, now, window))

    def window_scores(self, X):
        """Per-window risk scores, each from that window's parameters at its end time."""
        check_is_fitted(self, "store_")
        return [self.decision_scores(X, end, w) for w, (_, end) in enumerate(self.windows_)]

    def loss_trace(self):
        check_is_fitted(self, "state_")
        return list(self.state_.log)


def gat_amlp(**kwargs) -> GCRMFDetector:
    """Attention-only baseline: no temporal channel, no meta-paths, no contrastive term."""
    return GCRMFDetector(use_temporal=False, use_metapath=False, use_contrastive=False, **kwargs)


class SemiGCNClassifier(_GraphClassifier):
    """Two-layer GCN trained on the labeled nodes of one snapshot."""

    def __init__(self, hidden=16, epochs=200, learning_rate=0.01, weight_decay=5e-4, category_onehot=True,
                 threshold=0.5, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.category_onehot = category_onehot
        self.threshold = threshold
        self.random_state = random_state

    def _config(self):
        return GCNConfig(self.hidden, self.epochs, self.learning_rate, self.weight_decay, self.random_state,
                         self.category_onehot)

    def fit(self, X, y=None, train_mask=None, now=None):
        view = check_graph(X)
        y = check_targets(view, y)
        self.store_, _ = gcn_train_and_score(view, y, check_mask(view, train_mask), self._config(), now)
        self.classes_ = np.array([0, 1])
        return self

    def decision_scores(self, X, now=None):
        check_is_fitted(self, "store_")
        view = check_graph(X)
        X0 = initial_features(view, self.category_onehot)
        return gcn_scores(self.store_, normalized_adjacency(view, now), X0)


class RuleMatchDetector(_GraphClassifier):
    """Declarative rules; a node is flagged when any rule fires."""

    def __init__(self, rules: Optional[RuleSet] = None):
        self.rules = rules

    def fit(self, X=None, y=None):
        self.rules_ = self.rules if self.rules is not None else default_ruleset()
        self.classes_ = np.array([0, 1])
        return self

    def decision_scores(self, X, now=None):
        check_is_fitted(self, "rules_")
        view = check_graph(X)
        if now is not None:
            view = view.snapshot(view.start, now)
        return rulematch_scores(view, self.rules_)

    def predict(self, X, now=None):
        return (self.decision_scores(X, now) > 0).astype(np.int64)
