"""Shared fixtures: the demo configuration and detectors trained on it once per session."""

from pathlib import Path

import pytest

from netcal.lang import build_vocabulary, tokenize
from netcal.pipeline import PipelineConfig, Variant, train_detector
from netcal.synth import Scenario, generate

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def demo_config():
    cfg = PipelineConfig.load(CONFIGS / "demo_packet.json")
    cfg.model_dir = None
    return cfg


@pytest.fixture(scope="session")
def injected_scenario():
    return Scenario.load(CONFIGS / "scenario_injected.json")


@pytest.fixture(scope="session")
def trained(demo_config):
    """Detectors for m=0 and m=0.1 sharing one vocabulary and embedding table."""
    cfg = demo_config
    trace = generate(cfg.train_scenario, cfg.kind, cfg.rules)
    vocab = build_vocabulary(tokenize(trace.records, cfg.rules))
    out = {}
    emb = None
    for variant in (Variant(0.0), Variant(0.1)):
        models = train_detector(trace, cfg, variant, vocab, emb)
        emb = models.embeddings
        out[variant.name] = models
    return out


@pytest.fixture(scope="session")
def model_dir(trained, tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle") / "m0.1"
    trained["m0.1"].save(d)
    return d
