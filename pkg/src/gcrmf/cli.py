"""Command line entry point: ``gcrmf <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage or configuration problem, 2 data problem,
3 numeric problem.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import export_graph, generate_synthetic, write_ground_truth
from .errors import ConfigError, GCRMFError
from .experiment import RunConfig, config_hash, load_dataset, run_experiment, run_sweep, split_labels
from .numerics import load_checkpoint, save_checkpoint
from .online import StreamState, ingest_batch, micro_batches, read_stream, score_stream, write_alerts
from .training import write_loss_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gcrmf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, out_required=True):
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--graph", help="use this graph file as the dataset (overrides [data])")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcrmf", description="Cross-industry temporal graph AML detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("generate", help="write a synthetic graph and its planted motifs"))
    _common(sub.add_parser("ingest", help="convert the Elliptic CSV bundle into a graph file"))
    _common(sub.add_parser("train", help="fit a model and write checkpoints plus the loss trace"))
    p = sub.add_parser("eval", help="run the windowed evaluation and write the report")
    _common(p)
    p.add_argument("--checkpoint-dir", help="reuse checkpoints written by 'train' instead of fitting")
    p.add_argument("--sweep", action="store_true", help="repeat over eval.seeds and summarize")
    p = sub.add_parser("stream", help="replay JSON-lines edges through the online updater")
    _common(p)
    p.add_argument("--stream", help="JSON-lines edge file (overrides online.stream)")
    p.add_argument("--checkpoint-dir", help="directory holding checkpoint.json from 'train'")
    _common(sub.add_parser("rules", help="evaluate the RuleMatch baseline only"))
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.graph:
        gpath = Path(args.graph).resolve()
        data = {"source": "graph", "path": str(gpath)}
        gt = gpath.parent / "ground_truth.json"
        if gt.exists():
            data["ground_truth"] = str(gt)
        cfg = RunConfig.from_dict({**cfg.to_dict(), "data": data}, base_dir=cfg.base_dir)
    return cfg.with_overrides(seed=args.seed, out=args.out)


# -- subcommands --------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args):
    spec = cfg.synthetic_spec()
    graph, motifs = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_graph(graph, out / "graph.json")
    write_ground_truth(motifs, out / "ground_truth.json")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1) + "\n")
    print(f"generated {graph.num_nodes} nodes, {graph.num_edges} edges, {len(motifs)} motifs -> {out}")


def cmd_ingest(cfg: RunConfig, args):
    if cfg.data.get("source") != "elliptic":
        raise ConfigError("ingest needs data.source = 'elliptic'")
    graph = load_dataset(cfg).graph
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_graph(graph, out / "graph.json")
    print(f"ingested {graph.num_nodes} nodes, {graph.num_edges} edges -> {out / 'graph.json'}")


def _fit_for_checkpoint(cfg: RunConfig):
    if cfg.method == "rulematch":
        raise ConfigError("rulematch has nothing to train; use the 'rules' subcommand")
    dataset = load_dataset(cfg)
    graph = dataset.graph
    train_mask, _ = split_labels(graph.targets, cfg.eval.get("train_fraction", 0.5), cfg.seed)
    if cfg.method == "semi-gcn":
        return graph, cfg.gcn_classifier().fit(graph, None, train_mask)
    det = cfg.detector()
    det.fit(graph, None, train_mask)
    return graph, det


def cmd_train(cfg: RunConfig, args):
    graph, model = _fit_for_checkpoint(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"method": cfg.method, "seed": cfg.seed, "config_hash": config_hash(cfg)}
    if cfg.method == "semi-gcn":
        save_checkpoint(model.store_, out / "checkpoint.json", meta)
        write_loss_trace([], out / "loss_trace.csv")
    else:
        meta["windows"] = [list(w) for w in model.windows_]
        save_checkpoint(model.store_, out / "checkpoint.json", meta)
        for w, store in enumerate(model.state_.window_stores):
            save_checkpoint(store, out / f"checkpoint_w{w}.json", {**meta, "window": w})
        write_loss_trace(model.loss_trace(), out / "loss_trace.csv")
    print(f"trained {cfg.method} -> {out / 'checkpoint.json'}")


def _load_window_stores(directory, cfg: RunConfig):
    directory = Path(directory)
    _, meta = load_checkpoint(directory / "checkpoint.json")
    if meta.get("config_hash") != config_hash(cfg) or meta.get("seed") != cfg.seed:
        raise ConfigError(f"checkpoints in {directory} were trained with a different config or seed")
    stores = [load_checkpoint(directory / f"checkpoint_w{w}.json")[0] for w in range(len(meta["windows"]))]
    return stores, [tuple(w) for w in meta["windows"]]


def cmd_eval(cfg: RunConfig, args):
    if args.sweep:
        summary = run_sweep(cfg, out_dir=args.out)
        stats = summary["f1_stats"]
        print(f"{cfg.method}: median F1 {stats['median']:.4f} (q1 {stats['q1']:.4f}, q3 {stats['q3']:.4f})")
        return
    pretrained = None
    if getattr(args, "checkpoint_dir", None):
        if cfg.method not in ("gcrmf", "gat-amlp"):
            raise ConfigError("--checkpoint-dir applies to gcrmf and gat-amlp only")
        pretrained = _load_window_stores(args.checkpoint_dir, cfg)
    report = run_experiment(cfg, args.out, pretrained=pretrained)
    s = report["summary"]
    print(f"{cfg.method}: precision {s['precision']:.4f} recall {s['recall']:.4f} f1 {s['f1']:.4f} -> {args.out}")


def cmd_rules(cfg: RunConfig, args):
    cmd_eval(cfg.with_overrides(method="rulematch"), argparse.Namespace(sweep=False, out=args.out))


def cmd_stream(cfg: RunConfig, args):
    if cfg.method not in ("gcrmf", "gat-amlp"):
        raise ConfigError("stream needs method gcrmf or gat-amlp")
    stream_path = args.stream or cfg.online.get("stream")
    if not stream_path:
        raise ConfigError("no stream file: pass --stream or set online.stream")
    stream_path = Path(args.stream) if args.stream else cfg.resolve(stream_path)
    edges = read_stream(stream_path)
    graph = load_dataset(cfg).graph
    det = cfg.detector()
    if args.checkpoint_dir:
        store, meta = load_checkpoint(Path(args.checkpoint_dir) / "checkpoint.json")
        if meta.get("config_hash") != config_hash(cfg):
            raise ConfigError("checkpoint was trained with a different config")
        det.config_, det.train_config_ = det._configs()
    else:
        train_mask, _ = split_labels(graph.targets, cfg.eval.get("train_fraction", 0.5), cfg.seed)
        det.fit(graph, None, train_mask)
        store = det.store_
    state = StreamState.from_graph(
        graph, store, det.config_, alpha_smooth=cfg.online.get("alpha_smooth", 0.3), radius=cfg.online.get("radius")
    )
    affected = []
    for batch in micro_batches(edges, int(cfg.online.get("micro_batch", 16))):
        rep = ingest_batch(state, batch)
        affected.append(len(rep.affected))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ranked = score_stream(state)
    write_alerts(ranked, out / "alerts.csv")
    summary = {
        "edges": len(edges), "batches": len(affected), "affected_per_batch": affected,
        "last_processed": state.last_processed, "live_nodes": int(state.table.shape[0]),
    }
    (out / "stream_report.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"streamed {len(edges)} edges in {len(affected)} batches; {len(ranked)} alerts -> {out / 'alerts.csv'}")


COMMANDS = {
    "generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
    "stream": cmd_stream, "rules": cmd_rules,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except GCRMFError as exc:
        stage = getattr(exc, "stage", None)
        print(f"gcrmf {args.command}: {stage + ': ' if stage else ''}{exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        print(f"gcrmf {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"gcrmf {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
