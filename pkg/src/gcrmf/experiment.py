"""Run configuration, experiment orchestration and report files.

A run is: load or generate a graph, split its labeled nodes into train and
test halves, fit the chosen method, score every evaluation window and
write the artifacts::

    report.json          sorted keys; per-window and per-threshold records
    per_window.csv       window,start,end,precision,recall,f1,fpr,tp,fp,fn,tn
    precision_at_k.csv   threshold,K,precision_at_k,flagged
    loss_trace.csv       window,epoch,l_struct,l_temp,l_cls,l_total
    alerts.csv           node_id,score

Window ``w`` covers ``[start_w, end_w]``. A method scores the nodes active in
that window (an incident edge inside it) using only edges up to ``end_w``;
the test nodes among them are compared with their labels. GCRMF uses the
parameters it held at the end of window ``w``; SEMI-GCN is refit on each
cumulative snapshot; RuleMatch evaluates its rules on the same snapshot.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.model_selection import train_test_split

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import GCNConfig, RuleSet, default_ruleset, rulematch_scores
from .data import (
    ProxyMapConfig,
    SyntheticSpec,
    elliptic_paths,
    generate_synthetic,
    import_graph,
    load_elliptic,
    motif_node_sets,
    read_ground_truth,
)
from .encoder import EncoderConfig
from .errors import ConfigError, GCRMFError, TrainingError
from .estimator import GCRMFDetector, SemiGCNClassifier
from .metapath import load_metapaths
from .metrics import DEFAULT_THRESHOLDS, compute_f1, precision_at_k, quartiles, rank_alerts
from .online import write_alerts
from .training import LOSS_TRACE_COLUMNS, active_nodes, default_windows, write_loss_trace

log = logging.getLogger(__name__)

METHODS = ("gcrmf", "gat-amlp", "semi-gcn", "rulematch")
SOURCES = ("synthetic", "elliptic", "graph")
PER_WINDOW_COLUMNS = ("window", "start", "end", "precision", "recall", "f1", "fpr", "tp", "fp", "fn", "tn")
PAK_COLUMNS = ("threshold", "K", "precision_at_k", "flagged")


def _fields(cls, drop=()):
    return {f.name for f in dataclasses.fields(cls)} - set(drop)


# allowed keys per config section; nested tables are listed by name
_SECTIONS = {
    "data": {"source", "path", "directory", "features", "edgelist", "classes", "ground_truth", "synthetic", "proxy"},
    "encoder": _fields(EncoderConfig),
    "metapath": {"enabled", "schema", "paths", "max_per_hop", "max_total", "att_dim"},
    "training": {
        "tau", "negatives", "batch_size", "augmentation", "gamma_loss", "eta", "epochs_per_window",
        "optimizer", "learning_rate", "weight_decay", "use_contrastive", "class_weight", "seed",
    },
    "online": {"alpha_smooth", "micro_batch", "radius", "stream"},
    "eval": {"windows", "thresholds", "train_fraction", "seeds", "decision_threshold"},
    "gcn": _fields(GCNConfig, drop=("seed",)),
    "rules": {"path"},
}
_TOP = {"method", "seed", "out"} | set(_SECTIONS)


@dataclass
class RunConfig:
    method: str = "gcrmf"
    seed: int = 0
    out: Optional[str] = None
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    encoder: dict = field(default_factory=dict)
    metapath: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    online: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    gcn: dict = field(default_factory=dict)
    rules: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        for name, allowed in _SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            unknown = set(section) - allowed
            if unknown:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
        if self.data.get("source", "synthetic") not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        src = self.data.get("source", "synthetic")
        if src == "graph" and "path" not in self.data:
            raise ConfigError("data.source = 'graph' needs data.path")
        if src == "elliptic" and "directory" not in self.data and not {"features", "edgelist", "classes"} <= set(self.data):
            raise ConfigError("data.source = 'elliptic' needs data.directory or features/edgelist/classes")
        syn = self.data.get("synthetic", {})
        unknown = set(syn) - _fields(SyntheticSpec)
        if unknown:
            raise ConfigError(f"unknown key(s) in [data.synthetic]: {sorted(unknown)}")
        n_windows = self.eval.get("windows", 5)
        if not isinstance(n_windows, int) or n_windows < 1:
            raise ConfigError("eval.windows must be a positive integer")
        frac = self.eval.get("train_fraction", 0.5)
        if not 0 < frac < 1:
            raise ConfigError("eval.train_fraction must lie in (0, 1)")
        if any(not 0 < t < 1 for t in self.eval.get("thresholds", DEFAULT_THRESHOLDS)):
            raise ConfigError("eval.thresholds must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        unknown = set(d) - _TOP
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        d = dict(d)
        d.setdefault("data", {"source": "synthetic"})
        try:
            return cls(**d, base_dir=Path(base_dir) if base_dir else Path("."))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "seed": self.seed, "data": self.data, "encoder": self.encoder,
            "metapath": self.metapath, "training": self.training, "online": self.online, "eval": self.eval,
            "gcn": self.gcn, "rules": self.rules,
        }

    def with_overrides(self, seed=None, out=None, method=None) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=self.seed if seed is None else seed,
            out=self.out if out is None else str(out),
            method=self.method if method is None else method,
        )

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- derived settings --------------------------------------------------------------

    @property
    def n_windows(self) -> int:
        return int(self.eval.get("windows", 5))

    @property
    def thresholds(self) -> tuple:
        return tuple(float(t) for t in self.eval.get("thresholds", DEFAULT_THRESHOLDS))

    @property
    def decision_threshold(self) -> float:
        return float(self.eval.get("decision_threshold", 0.5))

    @property
    def sweep_seeds(self) -> list:
        return list(self.eval.get("seeds", [0, 1, 2, 3, 4]))

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.data.get("synthetic", {}))
        d.setdefault("seed", self.seed)
        return SyntheticSpec.from_dict(d)

    def metapaths(self):
        mp = self.metapath
        if "schema" in mp:
            return load_metapaths(self.resolve(mp["schema"]))
        return mp.get("paths")

    def detector(self) -> GCRMFDetector:
        enc = self.encoder
        tr = self.training
        mp = self.metapath
        kwargs = dict(
            hidden_dim=enc.get("hidden_dim", 32),
            n_layers=enc.get("n_layers", 2),
            gamma_init=enc.get("gamma_init", 0.1),
            lambda_init=enc.get("lambda_init", 0.5),
            category_onehot=enc.get("category_onehot", True),
            activation=enc.get("activation", "leaky_relu"),
            slope=enc.get("slope", 0.2),
            direction=enc.get("direction", "both"),
            metapaths=self.metapaths(),
            max_per_hop=mp.get("max_per_hop", 8),
            max_total=mp.get("max_total", 64),
            att_dim=mp.get("att_dim", 16),
            tau=tr.get("tau", 0.2),
            negatives=tr.get("negatives"),
            batch_size=tr.get("batch_size", 64),
            augmentation=tr.get("augmentation", "instance-resample"),
            gamma_loss=tr.get("gamma_loss", 0.1),
            eta=tr.get("eta", 1.0),
            epochs_per_window=tr.get("epochs_per_window", 30),
            learning_rate=tr.get("learning_rate", 1e-3),
            optimizer=tr.get("optimizer", "adam"),
            weight_decay=tr.get("weight_decay", 0.0),
            class_weight=tr.get("class_weight"),
            n_windows=self.n_windows,
            threshold=self.decision_threshold,
            random_state=tr.get("seed", self.seed),
        )
        if self.method == "gat-amlp":
            kwargs.update(use_temporal=False, use_metapath=False, use_contrastive=False)
        else:
            kwargs.update(
                use_temporal=enc.get("use_temporal", True),
                use_metapath=mp.get("enabled", True),
                use_contrastive=tr.get("use_contrastive", True),
            )
        return GCRMFDetector(**kwargs)

    def gcn_classifier(self) -> SemiGCNClassifier:
        g = self.gcn
        return SemiGCNClassifier(
            hidden=g.get("hidden", 16), epochs=g.get("epochs", 200), learning_rate=g.get("learning_rate", 0.01),
            weight_decay=g.get("weight_decay", 5e-4), category_onehot=g.get("category_onehot", True),
            threshold=self.decision_threshold, random_state=self.seed,
        )

    def ruleset(self) -> RuleSet:
        if "path" in self.rules:
            return RuleSet.load(self.resolve(self.rules["path"]))
        return default_ruleset()


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical config, excluding seed and output location."""
    d = config.to_dict()
    d.pop("seed")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# -- data -----------------------------------------------------------------------------------


@dataclass
class Dataset:
    graph: object
    motifs: Optional[list] = None  # ground-truth dicts when known


def load_dataset(config: RunConfig) -> Dataset:
    d = config.data
    src = d.get("source", "synthetic")
    if src == "synthetic":
        g, motifs = generate_synthetic(config.synthetic_spec())
        return Dataset(g, [m.to_dict() for m in motifs])
    if src == "graph":
        g = import_graph(config.resolve(d["path"]))
        gt = read_ground_truth(config.resolve(d["ground_truth"])) if "ground_truth" in d else None
        return Dataset(g, gt)
    if "directory" in d:
        paths = elliptic_paths(config.resolve(d["directory"]))
    else:
        paths = tuple(config.resolve(d[k]) for k in ("features", "edgelist", "classes"))
    proxy = ProxyMapConfig.from_dict(d["proxy"]) if "proxy" in d else None
    return Dataset(load_elliptic(*paths, proxy=proxy))


def split_labels(targets, train_fraction, seed):
    """Stratified train/test masks over the labeled nodes."""
    targets = np.asarray(targets)
    labeled = np.flatnonzero(targets >= 0)
    train = np.zeros(len(targets), dtype=bool)
    test = np.zeros(len(targets), dtype=bool)
    if len(labeled) < 2:
        test[labeled] = True
        return train, test
    counts = np.bincount(targets[labeled], minlength=2)
    strat = targets[labeled] if counts.min() >= 2 else None
    tr, te = train_test_split(labeled, train_size=train_fraction, stratify=strat, random_state=seed)
    train[tr] = True
    test[te] = True
    return train, test


# -- per-method window scoring ----------------------------------------------------------------


@dataclass
class MethodRun:
    window_scores: list  # one score array (over all nodes) per window
    predictions: list  # one 0/1 array per window
    loss_trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    model: object = None


def _run_gcrmf(config, graph, targets, train_mask, windows, pretrained=None) -> MethodRun:
    det = config.detector()
    if pretrained is None:
        det.fit(graph, targets, train_mask, windows)
    else:
        stores, trained_windows = pretrained
        if list(trained_windows) != list(windows):
            raise ConfigError("checkpoint windows do not match the evaluation windows")
        det.load_window_stores(stores, windows)
    scores = det.window_scores(graph)
    preds = [(s >= det.threshold).astype(np.int64) for s in scores]
    return MethodRun(scores, preds, det.loss_trace(), model=det)


def _run_gcn(config, graph, targets, train_mask, windows, pretrained=None) -> MethodRun:
    scores, notes = [], []
    seen = np.zeros(graph.num_nodes, dtype=bool)
    clf = None
    t0 = windows[0][0]
    for w, (start, end) in enumerate(windows):
        seen |= active_nodes(graph, t0, end)
        snap = graph.snapshot(t0, end)
        mask = train_mask & seen
        try:
            clf = config.gcn_classifier().fit(snap, targets, mask)
            scores.append(clf.decision_scores(snap))
        except TrainingError as exc:
            notes.append(f"window {w}: {exc}; all nodes scored 0")
            scores.append(np.zeros(graph.num_nodes))
    preds = [(s >= config.decision_threshold).astype(np.int64) for s in scores]
    return MethodRun(scores, preds, notes=notes, model=clf)


def _run_rules(config, graph, targets, train_mask, windows, pretrained=None) -> MethodRun:
    rules = config.ruleset()
    t0 = windows[0][0]
    scores = [rulematch_scores(graph.snapshot(t0, end), rules) for _, end in windows]
    preds = [(s > 0).astype(np.int64) for s in scores]
    return MethodRun(scores, preds, model=rules)


_RUNNERS = {"gcrmf": _run_gcrmf, "gat-amlp": _run_gcrmf, "semi-gcn": _run_gcn, "rulematch": _run_rules}


# -- report ---------------------------------------------------------------------------------------


def _window_metrics(run: MethodRun, graph, targets, test_mask, windows):
    rows, totals = [], dict(tp=0, fp=0, fn=0, tn=0)
    for w, (start, end) in enumerate(windows):
        idx = np.flatnonzero(active_nodes(graph, start, end) & test_mask)
        pred = run.predictions[w]
        m = compute_f1({int(i): int(pred[i]) for i in idx}, {int(i): int(targets[i]) for i in idx}, w)
        rec = {"window": w, "start": int(start), "end": int(end), **{k: getattr(m, k) for k in PER_WINDOW_COLUMNS[3:]}}
        rows.append(rec)
        for k in totals:
            totals[k] += rec[k]
    tp, fp, fn, tn = totals["tp"], totals["fp"], totals["fn"], totals["tn"]
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    pooled = {
        "precision": p, "recall": r, "f1": 2 * p * r / (p + r) if p + r else 0.0,
        "fpr": fp / (fp + tn) if fp + tn else 0.0, **totals,
    }
    return rows, pooled


def latest_scores(run: MethodRun, graph, windows) -> np.ndarray:
    """Each node's score from the last window in which it was active (0 if never)."""
    out = np.zeros(graph.num_nodes)
    for w, (start, end) in enumerate(windows):
        act = active_nodes(graph, start, end)
        out[act] = run.window_scores[w][act]
    return out


def _motif_recall(run: MethodRun, motifs, graph, test_mask, windows):
    """Share of test motif-node appearances flagged, per motif type."""
    out = {}
    for kind, nodes in sorted(motif_node_sets(motifs).items()):
        nodes = np.array(sorted(nodes), dtype=np.int64)
        hit = total = 0
        for w, (start, end) in enumerate(windows):
            sel = nodes[(active_nodes(graph, start, end) & test_mask)[nodes]] if len(nodes) else nodes
            hit += int(run.predictions[w][sel].sum())
            total += len(sel)
        out[kind] = hit / total if total else None
    return out


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])


def dump_report(report, path):
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")


def evaluate(config: RunConfig, dataset: Optional[Dataset] = None, pretrained=None):
    """Run one experiment in memory; return ``(report, MethodRun, alerts)``."""
    stage = "ingest"
    try:
        dataset = dataset or load_dataset(config)
        graph = dataset.graph
        targets = graph.targets
        stage = "split"
        train_mask, test_mask = split_labels(targets, config.eval.get("train_fraction", 0.5), config.seed)
        windows = default_windows(graph, config.n_windows)
        stage = "train" if config.method != "rulematch" else "rules"
        run = _RUNNERS[config.method](config, graph, targets, train_mask, windows, pretrained)
        stage = "eval"
        per_window, pooled = _window_metrics(run, graph, targets, test_mask, windows)
        final = latest_scores(run, graph, windows)
        test_ranked = rank_alerts(final[test_mask], np.flatnonzero(test_mask))
        pak = precision_at_k(test_ranked, {int(i): int(targets[i]) for i in np.flatnonzero(test_mask)},
                             config.thresholds)
    except GCRMFError as exc:
        exc.stage = getattr(exc, "stage", stage)
        raise
    report = {
        "method": config.method,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "dataset": {
            "source": config.data.get("source", "synthetic"),
            "nodes": graph.num_nodes,
            "edges": graph.num_edges,
            "train_nodes": int(train_mask.sum()),
            "test_nodes": int(test_mask.sum()),
        },
        "windows": [[int(s), int(e)] for s, e in windows],
        "per_window": per_window,
        "precision_at_k": [p.as_dict() for p in pak],
        "summary": pooled,
        "notes": run.notes,
    }
    if dataset.motifs is not None:
        report["motif_recall"] = _motif_recall(run, dataset.motifs, graph, test_mask, windows)
    return report, run, rank_alerts(final)


def run_experiment(config: RunConfig, out_dir=None, dataset: Optional[Dataset] = None, pretrained=None) -> dict:
    """Evaluate and write all artifacts to ``out_dir``; nothing is left behind on failure."""
    out_dir = Path(out_dir or config.out or "gcrmf-run")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".gcrmf-", dir=out_dir.parent))
    try:
        report, run, alerts = evaluate(config, dataset, pretrained)
        dump_report(report, staging / "report.json")
        _write_csv(staging / "per_window.csv", PER_WINDOW_COLUMNS, report["per_window"])
        _write_csv(staging / "precision_at_k.csv", PAK_COLUMNS, report["precision_at_k"])
        write_loss_trace(run.loss_trace, staging / "loss_trace.csv")
        write_alerts(alerts, staging / "alerts.csv")
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(staging.iterdir()):
            f.replace(out_dir / f.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return report


def run_sweep(config: RunConfig, seeds=None, out_dir=None) -> dict:
    """One run per seed (``seed_<k>/``) plus ``sweep.json`` with median and quartiles."""
    seeds = config.sweep_seeds if seeds is None else list(seeds)
    out_dir = Path(out_dir or config.out or "gcrmf-sweep")
    per_seed = {}
    for s in seeds:
        rep = run_experiment(config.with_overrides(seed=s), out_dir / f"seed_{s}")
        per_seed[str(s)] = rep["summary"]["f1"]
    summary = {
        "method": config.method,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "f1": per_seed,
        "f1_stats": quartiles(per_seed.values()),
    }
    dump_report(summary, out_dir / "sweep.json")
    return summary


__all__ = [
    "RunConfig", "Dataset", "config_hash", "load_dataset", "split_labels", "evaluate", "run_experiment",
    "run_sweep", "dump_report", "latest_scores", "METHODS", "LOSS_TRACE_COLUMNS",
]
