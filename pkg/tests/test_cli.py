import json
import subprocess
import sys

import pytest

from gcrmf.cli import main
from gcrmf.errors import ConfigError
from gcrmf.experiment import RunConfig, config_hash, evaluate
from gcrmf.online import read_alerts, write_stream

SMALL_TOML = """
method = "{method}"
seed = 0

[data]
source = "synthetic"

[data.synthetic]
n_background_nodes = 200
n_hubs = 6
circular = 3
microburst = 1
layered = 2
n_windows = 3

[encoder]
hidden_dim = 4
n_layers = 1

[metapath]
att_dim = 3

[training]
epochs_per_window = 3
batch_size = 16

[gcn]
epochs = 10

[eval]
windows = 3
"""


def write_config(tmp_path, method="gcrmf", extra=""):
    p = tmp_path / f"{method}.toml"
    p.write_text(SMALL_TOML.format(method=method) + extra)
    return p


# -- config ------------------------------------------------------------------------------------


def test_unknown_key_is_rejected(tmp_path):
    p = write_config(tmp_path, extra="\n[online]\nalpha = 0.3\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    assert main(["eval", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


@pytest.mark.parametrize("d", [
    {"bogus": 1},
    {"method": "svm"},
    {"data": {"source": "graph"}},
    {"data": {"source": "synthetic", "synthetic": {"cycles": 3}}},
    {"eval": {"windows": 0}},
    {"eval": {"thresholds": [0.5, 1.5]}},
])
def test_invalid_configs(d):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_missing_config_file(tmp_path):
    assert main(["eval", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_usage_errors(tmp_path, capsys):
    assert main(["teleport"]) == 1
    assert main(["eval"]) == 1  # --out is required


def test_hash_ignores_seed_and_out(tmp_path):
    cfg = RunConfig.load(write_config(tmp_path))
    assert config_hash(cfg) == config_hash(cfg.with_overrides(seed=9, out="x"))
    assert config_hash(cfg) != config_hash(cfg.with_overrides(method="semi-gcn"))


# -- pipeline ---------------------------------------------------------------------------------


def test_generate_train_eval(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    graph = tmp_path / "data" / "graph.json"
    assert graph.exists() and (tmp_path / "data" / "ground_truth.json").exists()

    args = ["--config", str(cfg), "--graph", str(graph)]
    assert main(["train", *args, "--out", str(tmp_path / "ckpt")]) == 0
    assert sorted(p.name for p in (tmp_path / "ckpt").iterdir()) == [
        "checkpoint.json", "checkpoint_w0.json", "checkpoint_w1.json", "checkpoint_w2.json", "loss_trace.csv"]
    trace = (tmp_path / "ckpt" / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "window,epoch,l_struct,l_temp,l_cls,l_total" and len(trace) == 1 + 3 * 3

    assert main(["eval", *args, "--out", str(tmp_path / "fit")]) == 0
    assert main(["eval", *args, "--checkpoint-dir", str(tmp_path / "ckpt"), "--out", str(tmp_path / "re")]) == 0
    a = (tmp_path / "fit" / "report.json").read_bytes()
    assert a == (tmp_path / "re" / "report.json").read_bytes()

    report = json.loads(a)
    assert len(report["per_window"]) == 3 and report["windows"][0][0] == 0
    assert list(report) == sorted(report)
    assert (tmp_path / "fit" / "per_window.csv").read_text().startswith("window,start,end,precision")
    assert (tmp_path / "fit" / "precision_at_k.csv").read_text().startswith("threshold,K,precision_at_k,flagged")
    assert len(read_alerts(tmp_path / "fit" / "alerts.csv")) == report["dataset"]["nodes"]


def test_checkpoint_from_other_seed_is_refused(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "ckpt")]) == 0
    code = main(["eval", "--config", str(cfg), "--seed", "1", "--checkpoint-dir", str(tmp_path / "ckpt"),
                 "--out", str(tmp_path / "o")])
    assert code == 1


def test_reports_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    for k in range(2):
        assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / f"r{k}")]) == 0
    for name in ("report.json", "per_window.csv", "precision_at_k.csv", "alerts.csv", "loss_trace.csv"):
        assert (tmp_path / "r0" / name).read_bytes() == (tmp_path / "r1" / name).read_bytes()


@pytest.mark.parametrize("method", ["gat-amlp", "semi-gcn"])
def test_baseline_methods_run(tmp_path, method):
    assert main(["eval", "--config", str(write_config(tmp_path, method)), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["method"] == method and len(report["per_window"]) == 3


def test_rules_subcommand_recovers_cycles(tmp_path):
    cfg = write_config(tmp_path, extra="")
    assert main(["rules", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["method"] == "rulematch"
    assert report["motif_recall"]["circular"] > 0


def test_failed_run_leaves_no_output(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{")
    cfg = write_config(tmp_path, extra="")
    code = main(["eval", "--config", str(cfg), "--graph", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2
    assert not (tmp_path / "o").exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".gcrmf-")] == []


def test_single_class_window_is_noted(tmp_path):
    cfg = write_config(tmp_path, "semi-gcn", extra="")
    text = cfg.read_text().replace("circular = 3", "circular = 0").replace("microburst = 1", "microburst = 0")
    cfg.write_text(text.replace("layered = 2", "layered = 0"))
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert len(report["notes"]) == 3 and report["summary"]["f1"] == 0.0


def test_stream_subcommand(tmp_path):
    cfg = write_config(tmp_path)
    report, _, _ = evaluate(RunConfig.load(cfg))
    n = report["dataset"]["nodes"]
    edges = [{"src": k, "dst": k + 1, "rel": "FundTransfer", "t": 40 + k, "amount": 10.0} for k in range(5)]
    write_stream(edges, tmp_path / "s.jsonl")
    code = main(["stream", "--config", str(cfg), "--stream", str(tmp_path / "s.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 0
    assert len(read_alerts(tmp_path / "o" / "alerts.csv")) == n
    summary = json.loads((tmp_path / "o" / "stream_report.json").read_text())
    assert summary["edges"] == 5 and summary["last_processed"] == 44


def test_bad_stream_file_is_a_data_error(tmp_path):
    (tmp_path / "s.jsonl").write_text('{"src": 0, "dst": 1, "rel": "Nope", "t": 99}\n')
    code = main(["stream", "--config", str(write_config(tmp_path)), "--stream", str(tmp_path / "s.jsonl"),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "gcrmf.cli", "generate", "--config", str(write_config(tmp_path)),
                          "--out", str(tmp_path / "g")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "motifs" in out.stdout
