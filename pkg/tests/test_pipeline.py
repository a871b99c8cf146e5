import json

import numpy as np
import pytest

from netcal.pipeline import ConfigError, DetectorModels, ModelMismatchError, PipelineConfig, run_experiment
from netcal.score import ScoringConfig, fit
from netcal.synth import generate
from netcal.traces import TraceKind

from conftest import CONFIGS


def _small_config(tmp_path):
    conf = json.loads((CONFIGS / "demo_packet.json").read_text())
    conf["train_scenario"]["duration"] = 60
    for s in conf["eval_benign"]:
        s["duration"] = 30
    conf["malware"] = {"shifted": conf["malware"]["shifted"]}
    conf["malware"]["shifted"]["duration"] = 60
    conf["variants"] = [{"mutation_rate": 0.0}, {"mutation_rate": 0.1, "embeddings": "fixed-random"}]
    conf["skipgram"]["epochs"] = 1
    conf["training"]["epochs"] = 1
    conf["scoring"] = {"tree_count": 20}
    conf["model_dir"] = str(tmp_path / "models")
    (tmp_path / "c.json").write_text(json.dumps(conf))
    return PipelineConfig.load(tmp_path / "c.json")


@pytest.mark.parametrize("patch,msg", [
    ({"contamination": []}, "contamination"),
    ({"contamination": [0.7]}, "contamination"),
    ({"window_length": 500}, "max_positions"),
    ({"variants": []}, "variants"),
])
def test_config_validation(tmp_path, patch, msg):
    conf = json.loads((CONFIGS / "demo_packet.json").read_text())
    conf.update(patch)
    with pytest.raises(ConfigError, match=msg):
        PipelineConfig.from_dict(conf)


@pytest.mark.slow
def test_experiment_report_and_reload(tmp_path):
    cfg = _small_config(tmp_path)
    table = run_experiment(cfg, train_models=True, out_dir=tmp_path / "report")
    names = {p.name for p in (tmp_path / "report").iterdir()}
    assert names == {"report.txt", "report.csv", "detection_rates.png", "score_distributions.png"}
    csv_lines = (tmp_path / "report" / "report.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 2 * 3 * (3 + 1)   # header + variants x contaminations x datasets
    assert set(table.variants) == {"m0", "m0.1-rand"}
    again = run_experiment(cfg, train_models=False, out_dir=None)
    assert [r.rate for r in again.rows] == [r.rate for r in table.rows]


def test_reload_without_models_fails(tmp_path):
    cfg = _small_config(tmp_path)
    with pytest.raises(FileNotFoundError):
        run_experiment(cfg, train_models=False)


def test_mismatched_scorer_rejected(trained):
    models = trained["m0"]
    other = fit(np.random.default_rng(0).normal(size=(50, 5)), ScoringConfig(tree_count=3))
    with pytest.raises(ModelMismatchError):
        DetectorModels(models.kind, models.vocab, models.embeddings, models.encoder, other, models.window_length)


def test_unseen_tokens_map_to_unk(trained, demo_config):
    models = trained["m0"]
    mal = generate(demo_config.malware["shifted"], TraceKind.PACKET)
    ids = models.window_ids(mal)
    assert ids.max() <= models.vocab.unk_id
    assert np.isfinite(models.score_windows(ids[:5])).all()
