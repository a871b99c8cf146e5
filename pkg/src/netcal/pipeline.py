"""End-to-end training, model-directory persistence and the offline evaluation protocol."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .dataset import AugmentationConfig, NegativeStrategy, make_triplets, mean_embedding, segment
from .embed import EmbeddingTable, SkipGramConfig, fixed_random_embeddings, train_embeddings
from .encoder import EncoderConfig, EncoderModel, TrainConfig, train
from .lang import DEFAULT_RULES, AbstractionRules, Vocabulary, build_vocabulary, load_syscall_table, tokenize
from .persist import CorruptFileError, VersionError
from .score import FeatureMode, ScorerModel, ScoringConfig, detect, fit
from .synth import Scenario, generate
from .traces import PacketRecord, Trace, TraceKind, filter_by_pids

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class ConfigError(ValueError):
    """Invalid pipeline configuration (CLI exit status 1)."""


class ModelMismatchError(ValueError):
    """Artifacts in a model directory do not fit together."""


@dataclass
class DetectorModels:
    """Everything needed to turn events into window anomaly scores."""

    kind: TraceKind
    vocab: Vocabulary
    embeddings: EmbeddingTable
    encoder: EncoderModel
    scorer: ScorerModel
    window_length: int
    rules: AbstractionRules = field(default_factory=AbstractionRules)
    syscall_table: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = TraceKind(self.kind)
        self.check()

    def check(self) -> None:
        if len(self.embeddings) != self.vocab.size_with_unk:
            raise ModelMismatchError(
                f"embedding table has {len(self.embeddings)} rows, vocabulary needs {self.vocab.size_with_unk}"
            )
        if self.embeddings.tokens != self.vocab.tokens:
            raise ModelMismatchError("embedding tokens differ from the vocabulary")
        if self.encoder.config.input_dim != self.embeddings.dim:
            raise ModelMismatchError(
                f"encoder expects {self.encoder.config.input_dim}-d inputs, embeddings are {self.embeddings.dim}-d"
            )
        if self.window_length > self.encoder.config.max_positions:
            raise ModelMismatchError("window longer than the encoder's positional table")
        want = self.encoder.config.model_dim
        if self.scorer.reference is not None:
            feat_dim = len(self.scorer.reference)
            if self.scorer.reference.shape[1] != want:
                raise ModelMismatchError("scorer reference set has the wrong embedding width")
        else:
            feat_dim = want
        if self.scorer.forest.n_features != feat_dim:
            raise ModelMismatchError(
                f"scorer expects {self.scorer.forest.n_features} features, pipeline produces {feat_dim}"
            )

    def tokens(self, records) -> List[str]:
        return tokenize(records, self.rules, self.syscall_table)

    def token_id(self, rec) -> int:
        is_packet = isinstance(rec, PacketRecord)
        if is_packet != (self.kind is TraceKind.PACKET):
            raise ModelMismatchError(f"{type(rec).__name__} fed to a {self.kind.value} detector")
        return self.vocab.id_of(self.tokens([rec])[0])

    def window_ids(self, trace: Trace) -> np.ndarray:
        ids = self.vocab.encode(self.tokens(trace.records))
        wins = segment(ids, self.window_length)
        if not wins:
            return np.empty((0, self.window_length), dtype=np.int64)
        return np.stack([w.token_ids for w in wins])

    def embed_windows(self, ids) -> np.ndarray:
        return self.encoder.encode_ids(ids, self.embeddings)

    def score_windows(self, ids) -> np.ndarray:
        return self.scorer.score_embeddings(self.embed_windows(ids))

    # -- persistence ---------------------------------------------------------

    def save(self, directory: Union[str, Path]) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.vocab.save(d / "vocab.txt")
        self.embeddings.save(d / "embeddings.txt")
        self.encoder.save(d / "encoder.bin")
        self.scorer.save(d / "scorer.npz")
        self.rules.save(d / "rules.json")
        with open(d / "syscalls.tsv", "w", encoding="utf-8") as fh:
            for name, cat in sorted(self.syscall_table.items()):
                fh.write(f"{name}\t{cat}\n")
        meta = {"version": BUNDLE_VERSION, "kind": self.kind.value, "window_length": self.window_length}
        (d / "detector.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "DetectorModels":
        d = Path(directory)
        try:
            meta = json.loads((d / "detector.json").read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"{d}: no detector.json; not a model directory") from None
        except ValueError:
            raise CorruptFileError(f"{d / 'detector.json'}: unreadable") from None
        if meta.get("version") != BUNDLE_VERSION:
            raise VersionError(f"{d}: bundle version {meta.get('version')}, this build reads {BUNDLE_VERSION}")
        table = load_syscall_table(d / "syscalls.tsv") if (d / "syscalls.tsv").exists() else {}
        return cls(
            kind=TraceKind(meta["kind"]),
            vocab=Vocabulary.load(d / "vocab.txt"),
            embeddings=EmbeddingTable.load(d / "embeddings.txt"),
            encoder=EncoderModel.load(d / "encoder.bin"),
            scorer=ScorerModel.load(d / "scorer.npz"),
            window_length=int(meta["window_length"]),
            rules=AbstractionRules.load(d / "rules.json") if (d / "rules.json").exists() else AbstractionRules(),
            syscall_table=table,
        )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class Variant:
    mutation_rate: float = 0.1
    strategy: NegativeStrategy = NegativeStrategy.RANDOM
    embeddings: str = "net2vec"

    def __post_init__(self):
        self.strategy = NegativeStrategy(self.strategy)
        if self.embeddings not in ("net2vec", "fixed-random"):
            raise ConfigError(f"unknown embedding source {self.embeddings!r}")

    @property
    def name(self) -> str:
        base = f"m{self.mutation_rate:g}"
        if self.strategy is NegativeStrategy.HARD:
            base += "-hard"
        if self.embeddings == "fixed-random":
            base += "-rand"
        return base


@dataclass
class PipelineConfig:
    train_scenario: Scenario
    eval_benign: List[Scenario]
    malware: Dict[str, Scenario]
    kind: TraceKind = TraceKind.PACKET
    window_length: int = 100
    contamination: List[float] = field(default_factory=lambda: [0.005, 0.015, 0.025])
    variants: List[Variant] = field(default_factory=lambda: [Variant(0.0), Variant(0.1), Variant(0.2)])
    feature_mode: FeatureMode = FeatureMode.RAW
    skipgram: SkipGramConfig = field(default_factory=SkipGramConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(model_dim=32, layers=1, heads=2))
    training: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=2))
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    max_events: Optional[int] = None
    model_dir: Optional[str] = None
    seed: int = 0
    rules: AbstractionRules = field(default_factory=AbstractionRules)
    syscall_table: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = TraceKind(self.kind)
        self.feature_mode = FeatureMode(self.feature_mode)
        if not self.contamination:
            raise ConfigError("contamination list is empty")
        for c in self.contamination:
            if not 0.0 < c < 0.5:
                raise ConfigError(f"contamination {c} outside (0, 0.5)")
        if not self.variants:
            raise ConfigError("no variants configured")
        if self.window_length < 1:
            raise ConfigError("window_length must be positive")
        if self.window_length > self.encoder.max_positions:
            raise ConfigError("window_length exceeds encoder max_positions")
        if self.encoder.input_dim != self.skipgram.dim:
            raise ConfigError("encoder input_dim must equal the embedding dim")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate variants")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Union[str, Path] = ".") -> "PipelineConfig":
        base = Path(base_dir)

        def scenario(x):
            if isinstance(x, str):
                return Scenario.load(base / x)
            return Scenario.from_dict(x)

        try:
            kw = dict(
                train_scenario=scenario(d["train_scenario"]),
                eval_benign=[scenario(s) for s in d.get("eval_benign", [])],
                malware={k: scenario(v) for k, v in d.get("malware", {}).items()},
            )
            for key in ("kind", "window_length", "contamination", "feature_mode", "max_events", "model_dir", "seed"):
                if key in d:
                    kw[key] = d[key]
            if "variants" in d:
                kw["variants"] = [Variant(**v) for v in d["variants"]]
            if "skipgram" in d:
                kw["skipgram"] = SkipGramConfig(**d["skipgram"])
            if "encoder" in d:
                kw["encoder"] = EncoderConfig(**d["encoder"])
            if "training" in d:
                t = dict(d["training"])
                if "betas" in t:
                    t["betas"] = tuple(t["betas"])
                kw["training"] = TrainConfig(**t)
            if "scoring" in d:
                kw["scoring"] = ScoringConfig(**d["scoring"])
            if "rules" in d:
                kw["rules"] = AbstractionRules.from_dict(d["rules"])
            if "syscall_table" in d:
                st = d["syscall_table"]
                kw["syscall_table"] = load_syscall_table(base / st) if isinstance(st, str) else dict(st)
            return cls(**kw)
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from None
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def build_embeddings(ids: Sequence[int], vocab: Vocabulary, cfg: SkipGramConfig, source: str = "net2vec",
                     seed: int = 0) -> EmbeddingTable:
    if source == "fixed-random":
        return fixed_random_embeddings(vocab, cfg.dim, seed)
    return train_embeddings(ids, vocab, cfg)


def train_detector(trace: Trace, cfg: PipelineConfig, variant: Variant,
                   vocab: Optional[Vocabulary] = None, embeddings: Optional[EmbeddingTable] = None) -> DetectorModels:
    """Fit vocabulary, embeddings, encoder and scorer on one benign trace.

    ``vocab``/``embeddings`` may be passed in to share them across variants.
    """
    if not trace.is_benign:
        raise ConfigError("training consumes benign traces only")
    records = trace.records[: cfg.max_events] if cfg.max_events else trace.records
    tokens = tokenize(records, cfg.rules, cfg.syscall_table)
    if vocab is None:
        vocab = build_vocabulary(tokens)
    ids = vocab.encode(tokens)
    if embeddings is None:
        embeddings = build_embeddings(ids, vocab, cfg.skipgram, variant.embeddings, cfg.seed)
    windows = segment(ids, cfg.window_length)
    model = EncoderModel(cfg.encoder)
    aug = AugmentationConfig(variant.mutation_rate, variant.strategy, seed=cfg.seed)
    embed_fn = None
    if variant.strategy is NegativeStrategy.HARD:
        embed_fn = lambda w: model.encode(embeddings.window_vectors(w.token_ids))  # noqa: E731
    triplets = make_triplets(windows, aug, len(vocab), embed_fn)
    logger.info("variant %s: %d windows, %d triplets", variant.name, len(windows), len(triplets))
    result = train(model, triplets, embeddings, cfg.training)
    ids_arr = np.stack([w.token_ids for w in windows])
    benign_emb = result.model.encode_ids(ids_arr, embeddings)
    scoring = dataclasses.replace(cfg.scoring, contamination=min(cfg.contamination),
                                  feature_mode=cfg.feature_mode)
    scorer = fit(benign_emb, scoring)
    return DetectorModels(
        kind=cfg.kind, vocab=vocab, embeddings=embeddings, encoder=result.model, scorer=scorer,
        window_length=cfg.window_length, rules=cfg.rules, syscall_table=dict(cfg.syscall_table),
    )


# ---------------------------------------------------------------------------
# evaluation and reports
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    dataset: str
    role: str          # "benign" (cell is a false-positive rate) or "malware" (detection rate)
    contamination: float
    variant: str
    rate: float        # percent
    windows: int


@dataclass
class ReportTable:
    rows: List[ReportRow] = field(default_factory=list)
    scores: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def cell(self, dataset: str, contamination: float, variant: str) -> float:
        for r in self.rows:
            if r.dataset == dataset and r.variant == variant and r.contamination == contamination:
                return r.rate
        raise KeyError((dataset, contamination, variant))

    @property
    def datasets(self) -> List[str]:
        return list(dict.fromkeys(r.dataset for r in self.rows))

    @property
    def variants(self) -> List[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    @property
    def contaminations(self) -> List[float]:
        return sorted({r.contamination for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "role", "contamination", "variant", "rate_percent", "windows"])
        for r in self.rows:
            w.writerow([r.dataset, r.role, f"{r.contamination:g}", r.variant, f"{r.rate:.2f}", r.windows])
        return buf.getvalue()

    def to_text(self) -> str:
        """One block per contamination; '*' marks the best variant per malware row."""
        variants = self.variants
        width = max([len(v) for v in variants] + [7]) + 2
        name_w = max([len(d) for d in self.datasets] + [7]) + 2
        lines = []
        for c in self.contaminations:
            lines.append(f"contamination {c:g}")
            lines.append("dataset".ljust(name_w) + "".join(v.rjust(width) for v in variants))
            for ds in self.datasets:
                rows = {r.variant: r for r in self.rows if r.dataset == ds and r.contamination == c}
                best = max(r.rate for r in rows.values())
                role = next(iter(rows.values())).role
                cells = []
                for v in variants:
                    mark = "*" if role == "malware" and rows[v].rate == best else " "
                    cells.append(f"{rows[v].rate:.1f}{mark}".rjust(width))
                lines.append(ds.ljust(name_w) + "".join(cells))
            lines.append("")
        return "\n".join(lines)


def evaluate(models: DetectorModels, trace: Trace, contamination: Sequence[float],
             pids: Optional[Sequence[int]] = None) -> Dict[float, "Detection"]:
    """Offline detection on one trace, optionally PID-filtered first."""
    if pids is not None:
        trace = filter_by_pids(trace, pids)
    ids = models.window_ids(trace)
    emb = models.embed_windows(ids)
    feats = models.scorer.features(emb) if len(emb) else np.empty((0, 0))
    return {c: detect(models.scorer.with_contamination(c), feats) for c in contamination}


def run_experiment(cfg: PipelineConfig, train_models: bool = True,
                   out_dir: Optional[Union[str, Path]] = None, figures: bool = True) -> ReportTable:
    """Train (or load) each variant, then evaluate every eval trace at every contamination.

    Benign eval rows report the flagged fraction (false-positive rate);
    malware rows report the flagged fraction of PID-filtered malware windows.
    """
    model_root = Path(cfg.model_dir) if cfg.model_dir else None
    train_trace = generate(cfg.train_scenario, cfg.kind, cfg.rules)
    benign_traces = [generate(s, cfg.kind, cfg.rules) for s in cfg.eval_benign]
    malware_traces = {name: (generate(s, cfg.kind, cfg.rules), s) for name, s in cfg.malware.items()}

    table = ReportTable()
    shared_vocab = None
    shared_emb: Dict[str, EmbeddingTable] = {}
    for variant in cfg.variants:
        vdir = model_root / variant.name if model_root else None
        if train_models:
            if shared_vocab is None:
                records = train_trace.records[: cfg.max_events] if cfg.max_events else train_trace.records
                shared_vocab = build_vocabulary(tokenize(records, cfg.rules, cfg.syscall_table))
            models = train_detector(train_trace, cfg, variant, shared_vocab, shared_emb.get(variant.embeddings))
            shared_emb[variant.embeddings] = models.embeddings
            if vdir is not None:
                models.save(vdir)
        else:
            if vdir is None or not (vdir / "detector.json").exists():
                raise FileNotFoundError(f"no trained models for variant {variant.name}; rerun with training enabled")
            models = DetectorModels.load(vdir)

        scores = table.scores.setdefault(variant.name, {})
        for i, trace in enumerate(benign_traces):
            name = f"benign{i + 1}"
            res = evaluate(models, trace, cfg.contamination)
            for c, det in res.items():
                table.rows.append(ReportRow(name, "benign", c, variant.name, 100 * det.flagged_fraction, len(det.flags)))
            scores[name] = next(iter(res.values())).scores
        for name, (trace, scen) in malware_traces.items():
            pids = [scen.anomaly_source.pid] if scen.anomaly_source is not None else []
            res = evaluate(models, trace, cfg.contamination, pids=pids)
            for c, det in res.items():
                if len(det.flags) == 0:
                    raise RuntimeError(f"{name}: no complete malware windows after PID filtering")
                table.rows.append(ReportRow(name, "malware", c, variant.name, 100 * det.flagged_fraction, len(det.flags)))
            scores[name] = next(iter(res.values())).scores
        logger.info("variant %s evaluated", variant.name)

    if out_dir is not None:
        write_report(table, out_dir, figures=figures)
    return table


def write_report(table: ReportTable, out_dir: Union[str, Path], figures: bool = True) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.txt", out / "report.csv"]
    written[0].write_text(table.to_text(), encoding="utf-8")
    written[1].write_text(table.to_csv(), encoding="utf-8")
    if figures:
        from .plotting import plot_detection_rates, plot_score_distributions

        written.append(plot_detection_rates(table, out / "detection_rates.png"))
        written.append(plot_score_distributions(table, out / "score_distributions.png"))
    return written
