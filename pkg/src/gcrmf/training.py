"""Losses and the windowed training loop.

Objective per step: ``L_struct + gamma_loss * L_temp + eta * L_cls`` where

* ``L_struct`` is InfoNCE over cosine similarities: each anchor's subgraph
  embedding against a second, independently sampled view of itself
  (positive) and the other anchors of the batch (negatives);
* ``L_temp`` is the summed squared drift of subgraph embeddings against the
  previous window;
* ``L_cls`` is mean binary cross-entropy of the linear+sigmoid risk head on
  labeled nodes (Illicit=1, Licit=0, Unknown skipped).
"""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numerics as nx
from .errors import BatchError, DomainError, NumericError
from .graph import as_view, equal_windows
from .metapath import subgraph_tensor
from .model import ModelConfig, forward, init_model, prepare, risk_logits

log = logging.getLogger(__name__)

LOSS_TRACE_COLUMNS = ("window", "epoch", "l_struct", "l_temp", "l_cls", "l_total")


@dataclass
class ContrastiveConfig:
    tau: float = 0.2
    negatives: Optional[int] = None  # None: every other anchor in the batch
    batch_size: int = 64
    augmentation: str = "instance-resample"
    dropout_rate: float = 0.2

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if self.negatives is not None and self.negatives < 1:
            raise DomainError("negatives must be >= 1")
        if self.augmentation not in ("instance-resample", "edge-dropout"):
            raise DomainError(f"unknown augmentation {self.augmentation!r}")
        if not 0 <= self.dropout_rate < 1:
            raise DomainError("dropout rate must lie in [0, 1)")


@dataclass
class LossWeights:
    gamma_loss: float = 0.1
    eta: float = 1.0

    def __post_init__(self):
        if self.gamma_loss < 0 or self.eta < 0:
            raise DomainError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    epochs_per_window: int = 30
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    use_contrastive: bool = True
    retention: int = 2
    class_weight: Optional[str] = None  # None or "balanced"
    seed: int = 0

    def __post_init__(self):
        if self.class_weight not in (None, "balanced"):
            raise DomainError(f"unknown class_weight {self.class_weight!r}")


@dataclass
class TrainState:
    store: nx.ParamStore
    optimizer: nx.Optimizer
    epoch: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=2))
    log: list = field(default_factory=list)
    window_stores: list = field(default_factory=list)
    windows: list = field(default_factory=list)

    def loss_trace(self):
        return [tuple(row[c] for c in LOSS_TRACE_COLUMNS) for row in self.log]


def write_loss_trace(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_TRACE_COLUMNS)
        for r in rows:
            w.writerow([r["window"], r["epoch"]] + [repr(float(r[c])) for c in LOSS_TRACE_COLUMNS[2:]])


# -- loss terms ------------------------------------------------------------------


def infonce(sim_pos, sim_neg, tau):
    """Mean over anchors of ``-log softmax([s+, s-_1..s-_N] / tau)[0]``.

    ``sim_pos`` is (B,), ``sim_neg`` is (B, N).
    """
    if not tau > 0:
        raise DomainError("tau must be positive")
    sim_neg = nx.as_tensor(sim_neg)
    if sim_neg.ndim != 2 or sim_neg.shape[1] < 1:
        raise BatchError("every anchor needs at least one negative")
    logits = nx.scale(nx.concat([nx.reshape(sim_pos, (-1, 1)), sim_neg], axis=1), 1.0 / tau)
    return nx.neg(nx.mean(nx.index(nx.log_softmax(logits, axis=1), (slice(None), 0))))


def negative_index(batch_size, negatives, rng) -> np.ndarray:
    """(B, N) indices of in-batch negatives; row ``i`` never contains ``i``."""
    if batch_size < 2:
        raise BatchError("a batch of one anchor has no negatives")
    others = np.array([[j for j in range(batch_size) if j != i] for i in range(batch_size)])
    if negatives is None or negatives >= batch_size - 1:
        return others
    pick = np.array([rng.choice(batch_size - 1, size=negatives, replace=False) for _ in range(batch_size)])
    return np.take_along_axis(others, np.sort(pick, axis=1), axis=1)


def contrastive_tensor(z, z_pos, neg_idx, tau):
    sim_pos = nx.cosine_sim(z, z_pos)
    B, N = neg_idx.shape
    anchors = nx.gather_rows(z, np.repeat(np.arange(B), N))
    negs = nx.gather_rows(z, neg_idx.reshape(-1))
    sim_neg = nx.reshape(nx.cosine_sim(anchors, negs), (B, N))
    zero_norm = np.any(np.linalg.norm(z.value, axis=1) == 0) or np.any(np.linalg.norm(z_pos.value, axis=1) == 0)
    if zero_norm:
        log.warning("zero-norm embedding in contrastive loss; cosine guarded by eps")
    return infonce(sim_pos, sim_neg, tau)


def contrastive_loss(pairs, tau) -> float:
    """InfoNCE over explicit ``(z_i, z_pos, [z_neg, ...])`` triples (equal negative counts)."""
    pairs = list(pairs)
    if not pairs:
        raise BatchError("no pairs")
    counts = {len(negs) for _, _, negs in pairs}
    if len(counts) != 1 or 0 in counts:
        raise BatchError("every anchor needs the same positive number of negatives")
    z = np.array([p[0] for p in pairs], dtype=np.float64)
    zp = np.array([p[1] for p in pairs], dtype=np.float64)
    zn = np.array([p[2] for p in pairs], dtype=np.float64)  # (B, N, d)
    B, N, d = zn.shape
    sim_pos = nx.cosine_sim(z, zp)
    sim_neg = nx.reshape(nx.cosine_sim(np.repeat(z, N, axis=0), zn.reshape(B * N, d)), (B, N))
    return float(infonce(sim_pos, sim_neg, tau).value)


def temporal_tensor(z, previous, present):
    """``sum_i ||z_i - z_prev_i||^2`` over rows flagged in ``present``."""
    rows = np.flatnonzero(present)
    if len(rows) == 0:
        return nx.Tensor(0.0)
    return nx.l2_norm_sq(nx.sub(nx.gather_rows(z, rows), previous[rows]))


def temporal_loss(current, previous, present=None) -> float:
    current = np.asarray(getattr(current, "values", current), dtype=np.float64)
    previous = np.asarray(getattr(previous, "values", previous), dtype=np.float64)
    n = min(len(current), len(previous))
    mask = np.ones(n, dtype=bool) if present is None else np.asarray(present[:n], dtype=bool)
    return float(nx.l2_norm_sq(current[:n][mask] - previous[:n][mask]).value)


def classification_tensor(store, rep, targets, weights=None):
    return nx.bce_with_logits(risk_logits(store, rep), targets, weights)


def balanced_weights(targets) -> np.ndarray:
    """``n / (2 * n_class)`` per sample so both classes carry equal total weight."""
    targets = np.asarray(targets)
    n = len(targets)
    pos = int(np.sum(targets == 1))
    if pos in (0, n):
        return np.ones(n)
    return np.where(targets == 1, n / (2.0 * pos), n / (2.0 * (n - pos)))


def classification_loss(embeddings, labels, store) -> float:
    """Mean BCE of the risk head over nodes labeled 0/1 (``-1`` skipped); 0 if none."""
    labels = np.asarray(labels)
    rows = np.flatnonzero(labels >= 0)
    if len(rows) == 0:
        log.info("no labeled nodes; classification term skipped")
        return 0.0
    rep = nx.Tensor(np.asarray(getattr(embeddings, "values", embeddings))[rows])
    return float(classification_tensor(store, rep, labels[rows].astype(np.float64)).value)


def total_loss(l_struct, l_temp, l_cls, weights: LossWeights):
    for name, v in (("l_struct", l_struct), ("l_temp", l_temp), ("l_cls", l_cls)):
        val = v.value if isinstance(v, nx.Tensor) else v
        if not np.all(np.isfinite(val)):
            raise NumericError(f"non-finite loss component {name}")
    if any(isinstance(v, nx.Tensor) for v in (l_struct, l_temp, l_cls)):
        return nx.add(nx.add(l_struct, nx.scale(l_temp, weights.gamma_loss)), nx.scale(l_cls, weights.eta))
    return l_struct + weights.gamma_loss * l_temp + weights.eta * l_cls


# -- batch construction ------------------------------------------------------------


@dataclass
class Batch:
    anchors: np.ndarray
    neg_idx: np.ndarray
    view_b: list  # [(P_m rows, nonempty rows)] for anchors under the second sampling
    labeled: np.ndarray
    targets: np.ndarray
    previous: Optional[np.ndarray] = None
    present: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None


def second_view(graph, config: ModelConfig, tcfg: TrainConfig, now, seed):
    if tcfg.contrastive.augmentation == "edge-dropout":
        return prepare(graph, config, now, seed=seed, dropout=tcfg.contrastive.dropout_rate)
    return prepare(graph, config, now, seed=seed + 1)


def make_batch(anchors, ctx_b, rng, tcfg: TrainConfig, labeled=(), targets=(), previous=None, present=None):
    targets = np.asarray(targets, dtype=np.float64)
    weights = balanced_weights(targets) if tcfg.class_weight == "balanced" and len(targets) else None
    anchors = np.asarray(anchors, dtype=np.int64)
    neg_idx = negative_index(len(anchors), tcfg.contrastive.negatives, rng)
    view_b = [(P[anchors], ne[anchors]) for P, ne in ctx_b.poolings] if ctx_b is not None else []
    return Batch(anchors, neg_idx, view_b, np.asarray(labeled, dtype=np.int64),
                 targets, previous, present, weights)


def build_pairs(anchors, graph, store, config: ModelConfig, now, seed=0, tcfg: Optional[TrainConfig] = None):
    """Per-anchor ``(z_i, z_i_pos, [z_j_neg ...])`` from two independent samplings.

    Negatives are the first view's embeddings of the other anchors.
    """
    tcfg = tcfg or TrainConfig()
    anchors = list(anchors)
    if len(anchors) < 2:
        raise BatchError("a batch of one anchor has no negatives")
    ctx_a = prepare(graph, config, now, seed=seed)
    ctx_b = second_view(graph, config, tcfg, now, seed)
    _, z_a, _ = forward(store, config, ctx_a, rows=anchors)
    _, z_b, _ = forward(store, config, ctx_b, rows=anchors)
    neg = negative_index(len(anchors), tcfg.contrastive.negatives, np.random.default_rng(seed))
    za, zb = z_a.value, z_b.value
    return [(za[i], zb[i], [za[j] for j in neg[i]]) for i in range(len(anchors))]


def compute_losses(store, config: ModelConfig, tcfg: TrainConfig, ctx, batch: Batch):
    """Differentiable loss terms for one step; returns a dict of Tensors."""
    h, z_all, _ = forward(store, config, ctx)
    zero = nx.Tensor(0.0)
    l_struct = zero
    if tcfg.use_contrastive and len(batch.anchors) >= 2:
        z = nx.gather_rows(z_all, batch.anchors)
        if config.use_metapath:
            z_pos, _ = subgraph_tensor(h, batch.view_b, store, rows=batch.anchors)
        else:
            z_pos = z
        l_struct = contrastive_tensor(z, z_pos, batch.neg_idx, tcfg.contrastive.tau)
    l_temp = zero
    if batch.previous is not None:
        l_temp = temporal_tensor(z_all, batch.previous, batch.present)
    l_cls = zero
    if len(batch.labeled):
        rep_rows = _rep_rows(h, z_all, batch.labeled, config)
        l_cls = classification_tensor(store, rep_rows, batch.targets, batch.weights)
    return {
        "l_struct": l_struct,
        "l_temp": l_temp,
        "l_cls": l_cls,
        "l_total": total_loss(l_struct, l_temp, l_cls, tcfg.weights),
    }


def _rep_rows(h, z_all, rows, config):
    if not config.use_metapath:
        return nx.gather_rows(h, rows)
    return nx.concat([nx.gather_rows(h, rows), nx.gather_rows(z_all, rows)], axis=1)


# -- loop -------------------------------------------------------------------------------


def active_nodes(graph, start, end) -> np.ndarray:
    """Nodes with at least one incident edge timestamped in ``[start, end]``."""
    view = as_view(graph)
    ea = view.edge_arrays()
    keep = (ea.timestamp >= start) & (ea.timestamp <= end)
    mask = np.zeros(view.num_nodes, dtype=bool)
    mask[ea.src[keep]] = True
    mask[ea.dst[keep]] = True
    return mask


def default_windows(graph, n_windows=5):
    view = as_view(graph)
    ts = view.edge_arrays().timestamp
    lo = int(ts.min()) if len(ts) else 0
    hi = int(ts.max()) if len(ts) else 0
    return equal_windows(lo, hi, n_windows)


def train(
    graph,
    windows,
    config: ModelConfig,
    tcfg: TrainConfig,
    targets=None,
    train_mask=None,
    store: Optional[nx.ParamStore] = None,
    callback: Optional[Callable] = None,
) -> TrainState:
    """Optimize over ``windows`` in order; one context per window, cumulative view.

    ``targets`` defaults to the graph's labels; ``train_mask`` restricts which
    labeled nodes feed the classification term.
    """
    view = as_view(graph)
    if not windows:
        raise DomainError("need at least one window")
    targets = view.targets if targets is None else np.asarray(targets)
    train_mask = np.ones(view.num_nodes, dtype=bool) if train_mask is None else np.asarray(train_mask, bool)
    store = store or init_model(view, config, seed=tcfg.seed)
    store.zero_grad()
    opt = nx.Optimizer(tcfg.optimizer, tcfg.learning_rate, weight_decay=tcfg.weight_decay)
    state = TrainState(store, opt, history=deque(maxlen=max(1, tcfg.retention)))
    rng = np.random.default_rng(tcfg.seed)

    for w, (start, end) in enumerate(windows):
        ctx = prepare(view, config, end, seed=config.seed)
        ctx_b = second_view(view, config, tcfg, end, config.seed) if tcfg.use_contrastive and config.use_metapath else None
        active = active_nodes(view, start, end)
        pool = np.flatnonzero(active)
        if len(pool) < 2:
            pool = np.arange(view.num_nodes)
        labeled = np.flatnonzero(active & train_mask & (targets >= 0))
        if len(labeled) == 0:
            log.info("window %d: no labeled nodes; classification term skipped", w)
        previous, present = None, None
        if state.history:
            prev_end, prev_z = state.history[-1]
            previous = prev_z
            present = view.first_seen <= prev_end
        for epoch in range(tcfg.epochs_per_window):
            bsize = min(tcfg.contrastive.batch_size, len(pool))
            anchors = np.sort(rng.choice(pool, size=bsize, replace=False))
            batch = make_batch(anchors, ctx_b, rng, tcfg, labeled, targets[labeled], previous, present)
            losses = compute_losses(store, config, tcfg, ctx, batch)
            losses["l_total"].backward()
            nx.optimizer_step(store, opt)
            state.epoch += 1
            state.log.append(
                {"window": w, "epoch": epoch, **{k: float(v.value) for k, v in losses.items()}}
            )
        _, z_end, _ = forward(store, config, ctx)
        nx.check_finite(z_end, f"embeddings after window {w}")
        state.history.append((end, z_end.value.copy()))
        state.window_stores.append(store.copy())
        state.windows.append((start, end))
        if callback is not None:
            callback(w, (start, end), state)
    return state


def final_loss_summary(state: TrainState) -> dict:
    if not state.log:
        return {}
    last = state.log[-1]
    return {k: last[k] for k in LOSS_TRACE_COLUMNS[2:] if not math.isnan(last[k])}
