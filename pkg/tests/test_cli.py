import io
import json
import re

import pytest

from netcal.cli import EXIT_ALERT, EXIT_OK, EXIT_VALIDATION, main
from netcal.pipeline import DetectorModels

from conftest import CONFIGS


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """Run the staged pipeline once: simulate, tokenize, vocab, embeddings, triplets, encoder, scorer."""
    d = tmp_path_factory.mktemp("cli")
    scen = json.loads((CONFIGS / "scenario_benign.json").read_text())
    scen["duration"] = 80
    (d / "scen.json").write_text(json.dumps(scen))
    assert main(["simulate", "--scenario", str(d / "scen.json"), "--out", str(d / "benign.trace")]) == 0
    assert main(["tokenize", "--kind", "packet", "--in", str(d / "benign.trace"), "--out", str(d / "tok.txt")]) == 0
    assert main(["build-vocab", "--in", str(d / "tok.txt"), "--out", str(d / "models/vocab.txt")]) == 0
    assert main(["train-embeddings", "--tokens", str(d / "tok.txt"), "--vocab", str(d / "models/vocab.txt"),
                 "--out", str(d / "models/embeddings.txt"), "--dim", "8", "--epochs", "1"]) == 0
    assert main(["make-triplets", "--tokens", str(d / "tok.txt"), "--vocab", str(d / "models/vocab.txt"),
                 "--out", str(d / "trips.tsv"), "--window", "20", "--mutation", "0.1"]) == 0
    conf = {"vocab": "models/vocab.txt", "embeddings": "models/embeddings.txt", "tokens": "tok.txt",
            "encoder": {"model_dim": 8, "layers": 1, "heads": 2, "max_positions": 32},
            "training": {"learning_rate": 1e-3, "batch_size": 16, "epochs": 1}}
    (d / "enc.json").write_text(json.dumps(conf))
    assert main(["train-encoder", "--config", str(d / "enc.json"), "--triplets", str(d / "trips.tsv"),
                 "--out", str(d / "models/encoder.bin")]) == 0
    assert main(["fit-scorer", "--model-dir", str(d / "models"), "--tokens", str(d / "tok.txt"),
                 "--window", "20", "--contamination", "0.015"]) == 0
    return d


def test_staged_bundle_loads(staged):
    models = DetectorModels.load(staged / "models")
    assert models.window_length == 20 and models.encoder.config.model_dim == 8


def test_fixed_random_ablation(staged):
    out = staged / "rand.txt"
    assert main(["train-embeddings", "--vocab", str(staged / "models/vocab.txt"), "--out", str(out),
                 "--ablation", "fixed-random", "--dim", "8"]) == 0
    assert out.read_text().startswith("dim=8 ")


def test_score_writes_one_line_per_window(staged):
    out = staged / "scores.tsv"
    assert main(["score", "--model-dir", str(staged / "models"), "--in", str(staged / "benign.trace"),
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines and all(re.fullmatch(r"window=\d+\toffset=\d+\tscore=[0-9.]+\tflag=[01]", ln) for ln in lines)


def test_stream_alert_lines_and_exit_code(staged, monkeypatch, capsys, tmp_path):
    events = (staged / "benign.trace").read_text()
    monkeypatch.setattr("sys.stdin", io.StringIO(events))
    # threshold from c=0.45 is low enough that the benign stream alerts
    rc = main(["stream", "--model-dir", str(staged / "models"), "--contamination", "0.45",
               "--log", str(tmp_path / "logs/alerts.log"), "--plot", str(tmp_path / "stream.png")])
    out = capsys.readouterr().out.splitlines()
    assert rc == EXIT_ALERT
    assert out and all(re.fullmatch(r"ALERT ts=\d+\.\d{6} window=\d+ score=\d+\.\d{6}", ln) for ln in out)
    assert (tmp_path / "logs/alerts.log").read_text().splitlines() == out
    assert (tmp_path / "stream.png").stat().st_size > 0


def test_stream_without_events_exits_ok(staged, monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO(""))
    assert main(["stream", "--model-dir", str(staged / "models"), "--contamination", "0.015"]) == EXIT_OK
    assert capsys.readouterr().out == ""


def test_calibrate_needs_anomalous(staged, monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO(""))
    rc = main(["stream", "--model-dir", str(staged / "models"), "--contamination", "0.015", "--calibrate"])
    assert rc == EXIT_VALIDATION
    assert "--anomalous" in capsys.readouterr().err


def test_ingest_reports_bad_line(tmp_path, capsys):
    path = tmp_path / "bad.trace"
    path.write_text("ts=0.0\tproto=TCP\tsrc_ip=10.0.0.1\tsrc_port=70000\tdst_ip=8.8.8.8\tdst_port=1\t"
                    "size=1\tdir=Inbound\tpid=1\n")
    assert main(["ingest", "--kind", "packet", "--in", str(path), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "line 1" in capsys.readouterr().err
    assert main(["ingest", "--kind", "packet", "--in", str(path), "--out", str(tmp_path / "o"), "--lenient"]) == 0


def test_experiment_rejects_empty_contamination(tmp_path, capsys):
    conf = json.loads((CONFIGS / "demo_packet.json").read_text())
    conf["contamination"] = []
    (tmp_path / "c.json").write_text(json.dumps(conf))
    assert main(["experiment", "--config", str(tmp_path / "c.json")]) == EXIT_VALIDATION
    assert "contamination" in capsys.readouterr().err


def test_missing_model_dir(tmp_path):
    assert main(["score", "--model-dir", str(tmp_path / "nope"), "--in", str(tmp_path / "x")]) == EXIT_VALIDATION


def test_global_flags_before_and_after_subcommand(tmp_path):
    scen = str(CONFIGS / "scenario_benign.json")
    main(["--seed", "3", "simulate", "--scenario", scen, "--out", str(tmp_path / "a")])
    main(["simulate", "--scenario", scen, "--out", str(tmp_path / "b"), "--seed", "3"])
    main(["simulate", "--scenario", scen, "--out", str(tmp_path / "c"), "--seed", "4"])
    a, b, c = ((tmp_path / n).read_text() for n in "abc")
    assert a == b != c
