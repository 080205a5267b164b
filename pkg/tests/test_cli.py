import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sinuscl import cli, svg
from sinuscl.data import generate_head, read_manifest, write_volume
from sinuscl.metrics import read_metrics_csv

TINY_ENCODER = {"channels": [4, 8], "downsample": [True, True], "feature_dim": 16}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"epochs": 1, "batch_size": 8, "lr": 1e-3, "stage2_epochs": 1,
                                "encoder": TINY_ENCODER}))
    return path


def _kfold(manifest, cfg, out, *extra):
    return cli.main(["kfold", "--manifest", str(manifest), "--regime", "combined", "--config", str(cfg),
                     "--seed", "1", "--outer-k", "2", "--inner-k", "2", "--out", str(out), *extra])


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "a"), "--patients", "3", "--seed", "2"]) == 0
    assert "6 samples" in capsys.readouterr().out
    cli.main(["gen-data", "--out", str(tmp_path / "b"), "--patients", "3", "--seed", "2"])
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
    cli.main(["gen-data", "--out", str(tmp_path / "c"), "--patients", "3", "--normal-ratio", "1.0"])
    assert all(r.label == 0 for r in read_manifest(tmp_path / "c/manifest.csv"))
    cli.main(["gen-data", "--out", str(tmp_path / "d"), "--patients", "3", "--exclude", "1"])
    assert len(read_manifest(tmp_path / "d/manifest.csv")) == 5


def test_seed_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("SINUSCL_SEED", "2")
    cli.main(["gen-data", "--out", str(tmp_path / "e"), "--patients", "3"])
    monkeypatch.delenv("SINUSCL_SEED")
    cli.main(["gen-data", "--out", str(tmp_path / "f"), "--patients", "3", "--seed", "2"])
    assert (tmp_path / "e/manifest.csv").read_bytes() == (tmp_path / "f/manifest.csv").read_bytes()
    monkeypatch.setenv("SINUSCL_SEED", "two")
    assert cli.main(["gen-data", "--out", str(tmp_path / "g"), "--patients", "1"]) == 2


def test_preprocess(tmp_path):
    ph = generate_head("cyst", "none", 1)
    write_volume(ph.volume, tmp_path / "head.vol")
    assert cli.main(["preprocess", "--head", str(tmp_path / "head.vol"), "--out", str(tmp_path / "o"),
                     "--left-label", "1"]) == 0
    rows = read_manifest(tmp_path / "o/manifest.csv")
    assert [(r.side, r.label) for r in rows] == [("left", 1), ("right", 0)]


def test_kfold_outputs_and_determinism(tiny_corpus, config_file, tmp_path):
    assert _kfold(tiny_corpus, config_file, tmp_path / "r1") == 0
    assert _kfold(tiny_corpus, config_file, tmp_path / "r2") == 0
    a, b = tmp_path / "r1/metrics.csv", tmp_path / "r2/metrics.csv"
    assert a.read_bytes() == b.read_bytes()
    assert len(read_metrics_csv(a)) == 2
    assert (tmp_path / "r1/aggregate.csv").read_text().startswith("metric,mean,std\n")
    snap = json.loads((tmp_path / "r1/run.json").read_text())
    assert snap["seed"] == 1 and snap["epochs"] == 1 and snap["regime"] == "combined"


def test_flags_override_config(tiny_corpus, config_file, tmp_path):
    assert _kfold(tiny_corpus, config_file, tmp_path / "r", "--epochs", "2") == 0
    assert json.loads((tmp_path / "r/run.json").read_text())["epochs"] == 2


def test_usage_errors(tiny_corpus, config_file, tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["kfold", "--manifest", str(tiny_corpus), "--regime", "bogus", "--out", str(tmp_path)])
    assert e.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"momentum": 1}')
    assert cli.main(["kfold", "--manifest", str(tiny_corpus), "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert cli.main(["kfold", "--manifest", str(tiny_corpus), "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["kfold", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 1


def test_process_exit_code_for_unknown_regime(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sinuscl.cli", "kfold", "--manifest", "m.csv",
                           "--regime", "bogus", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr


def test_train_embed_report(tiny_corpus, config_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--manifest", str(tiny_corpus), "--regime", "supcon", "--config", str(config_file),
                     "--outer-k", "2", "--inner-k", "2", "--out", str(run)]) == 0
    assert cli.main(["embed", "--run", str(run), "--manifest", str(tiny_corpus), "--out", str(tmp_path / "e.csv")]) == 0
    assert len((tmp_path / "e.csv").read_text().splitlines()) == len(read_manifest(tiny_corpus)) + 1
    capsys.readouterr()
    assert cli.main(["report", "--run", str(run)]) == 0
    printed = capsys.readouterr().out.splitlines()
    stored = (run / "metrics.csv").read_text().splitlines()[1].split(",")[1:5]
    assert printed[1].split(",")[1:] == stored
    ET.parse(run / "pr_curve.svg")


def test_report_names_missing_metrics(tmp_path, capsys):
    assert cli.main(["report", "--run", str(tmp_path)]) == 1
    assert str(tmp_path / "metrics.csv") in capsys.readouterr().err


def test_report_on_kfold_directory(tiny_corpus, config_file, tmp_path):
    _kfold(tiny_corpus, config_file, tmp_path / "k")
    assert cli.main(["report", "--run", str(tmp_path / "k")]) == 0
    root = ET.parse(tmp_path / "k/pr_curve.svg").getroot()
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2


def test_label_efficiency_command(tiny_corpus, config_file, tmp_path):
    out = tmp_path / "le"
    assert cli.main(["label-efficiency", "--manifest", str(tiny_corpus), "--config", str(config_file),
                     "--regimes", "ce,combined", "--fractions", "0.6,1.0", "--outer-k", "2", "--inner-k", "2",
                     "--out", str(out)]) == 0
    lines = (out / "label_efficiency.csv").read_text().splitlines()
    assert lines[0] == "regime,fraction,auprc_mean,auprc_std" and len(lines) == 5
    root = ET.parse(out / "label_efficiency.svg").getroot()
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2


def test_default_fractions():
    args = cli.build_parser().parse_args(["label-efficiency", "--manifest", "m", "--out", "o"])
    assert args.fractions == [0.6, 0.8, 1.0] and args.regimes == ["combined"]


# svg --------------------------------------------------------------------------------

def test_perfect_pr_curve_reaches_corner():
    text = svg.pr_curve_chart({"run": [(0.9, 0.5, 1.0), (0.8, 1.0, 1.0), (0.1, 1.0, 2 / 3)]})
    root = ET.fromstring(text)
    (line,) = root.findall("{http://www.w3.org/2000/svg}polyline")
    pts = [tuple(map(float, p.split(","))) for p in line.get("points").split()]
    # (recall 1, precision 1) maps to the plot's top-right corner
    right = svg.WIDTH - svg.RIGHT
    assert (float(right), float(svg.TOP)) in pts


def test_chart_validation():
    with pytest.raises(ValueError):
        svg.line_chart({}, xlim=(1, 0))
    text = svg.line_chart({"a<b": [(0, 0), (1, 1)]})
    assert "a&lt;b" in text and ET.fromstring(text) is not None
    assert np.isfinite(len(text))
