"""``netcal`` command line. Exit codes: 0 ok, 1 validation error, 2 runtime error, 4 stream alert fired."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import AugmentationConfig, make_triplets, mean_embedding, read_triplets, segment, write_triplets
from .embed import EmbeddingTable, SkipGramConfig, fixed_random_embeddings, train_embeddings
from .encoder import EncoderConfig, EncoderModel, TrainConfig, TrainingError, train
from .lang import AbstractionRules, Vocabulary, load_syscall_table, tokenize
from .online import OnlineDetectorState, calibrate_alpha, smoothed_threshold, stream_scores
from .persist import CorruptFileError, VersionError
from .pipeline import ConfigError, DetectorModels, ModelMismatchError, PipelineConfig, run_experiment
from .score import ScoringConfig, fit
from .synth import Scenario, generate
from .traces import TraceKind, TraceParseError, filter_by_pids, iter_records, load_trace, write_trace

logger = logging.getLogger("netcal")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ALERT = 0, 1, 2, 4


def _read_tokens(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]


def _pids(text):
    try:
        return {int(p) for p in text.split(",") if p.strip()}
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad pid list {text!r}") from None


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    trace = load_trace(args.input, args.kind, strict=not args.lenient)
    if trace.malformed_lines:
        print(f"skipped {trace.malformed_lines} malformed lines", file=sys.stderr)
    if args.pids is not None:
        trace = filter_by_pids(trace, args.pids)
    write_trace(trace, args.out)
    print(f"{len(trace)} records -> {args.out}")


def cmd_tokenize(args):
    rules = AbstractionRules.load(args.rules) if args.rules else AbstractionRules()
    table = load_syscall_table(args.syscall_table) if args.syscall_table else {}
    trace = load_trace(args.input, args.kind)
    if args.max_events:
        trace = type(trace)(trace.kind, trace.records[: args.max_events], trace.label)
    tokens = tokenize(trace.records, rules, table)
    Path(args.out).write_text("".join(t + "\n" for t in tokens), encoding="utf-8")
    print(f"{len(tokens)} tokens -> {args.out}")


def cmd_build_vocab(args):
    vocab = Vocabulary()
    for path in args.inputs:
        for tok in _read_tokens(path):
            vocab.add(tok)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} tokens -> {args.out}")


def cmd_train_embeddings(args):
    vocab = Vocabulary.load(args.vocab)
    if args.ablation == "fixed-random":
        table = fixed_random_embeddings(vocab, args.dim, args.seed)
    else:
        ids = vocab.encode(_read_tokens(args.tokens))
        if vocab.unk_id in ids:
            raise ConfigError("token file contains text missing from the vocabulary")
        cfg = SkipGramConfig(dim=args.dim, window_radius=args.window_radius, negatives_per_positive=args.negatives,
                             epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
        table = train_embeddings(ids, vocab, cfg)
        print("objective per epoch: " + " ".join(f"{x:.4f}" for x in table.loss_history))
    table.save(args.out)
    print(f"{len(table)} x {table.dim} embeddings ({table.source}) -> {args.out}")


def cmd_make_triplets(args):
    vocab = Vocabulary.load(args.vocab)
    ids = vocab.encode(_read_tokens(args.tokens))
    windows = segment(ids, args.window)
    embed_fn = None
    if args.strategy == "hard":
        if not args.embeddings:
            raise ConfigError("--strategy hard needs --embeddings")
        embed_fn = mean_embedding(EmbeddingTable.load(args.embeddings))
    cfg = AugmentationConfig(args.mutation, args.strategy, seed=args.seed)
    triplets = make_triplets(windows, cfg, len(vocab), embed_fn)
    write_triplets(triplets, args.out)
    print(f"{len(triplets)} triplets from {len(windows)} windows -> {args.out}")


def cmd_train_encoder(args):
    if not args.config:
        raise ConfigError("train-encoder needs --config")
    base = Path(args.config).parent
    conf = _load_json(args.config)
    try:
        vocab = Vocabulary.load(base / conf["vocab"])
        table = EmbeddingTable.load(base / conf["embeddings"])
        ids = vocab.encode(_read_tokens(base / conf["tokens"]))
    except KeyError as exc:
        raise ConfigError(f"encoder config is missing {exc}") from None
    enc = dict(conf.get("encoder", {}))
    enc.setdefault("input_dim", table.dim)
    if args.seed is not None:
        enc["seed"] = args.seed
    tr = dict(conf.get("training", {}))
    if "betas" in tr:
        tr["betas"] = tuple(tr["betas"])
    if args.seed is not None:
        tr["seed"] = args.seed
    triplets = read_triplets(args.triplets, ids)
    if not triplets:
        raise ConfigError("triplet file is empty")
    model = EncoderModel(EncoderConfig(**enc))
    result = train(model, triplets, table, TrainConfig(**tr))
    result.model.save(args.out)
    print(f"{result.steps} steps, loss {result.loss_history[0]:.4f} -> {result.loss_history[-1]:.4f}; model -> {args.out}")


def cmd_fit_scorer(args):
    d = Path(args.model_dir)
    vocab = Vocabulary.load(d / "vocab.txt")
    table = EmbeddingTable.load(d / "embeddings.txt")
    encoder = EncoderModel.load(d / "encoder.bin")
    ids = vocab.encode(_read_tokens(args.tokens))
    windows = segment(ids, args.window)
    if len(windows) < 2:
        raise ConfigError("need at least two benign windows to fit the scorer")
    emb = encoder.encode_ids(np.stack([w.token_ids for w in windows]), table)
    scorer = fit(emb, ScoringConfig(contamination=args.contamination, feature_mode=args.mode, seed=args.seed or 0))
    rules = AbstractionRules.load(args.rules) if args.rules else AbstractionRules()
    st = load_syscall_table(args.syscall_table) if args.syscall_table else {}
    models = DetectorModels(args.kind, vocab, table, encoder, scorer, args.window, rules, st)
    models.save(d)
    print(f"scorer on {len(windows)} windows, threshold {scorer.threshold:.6f} -> {d / 'scorer.npz'}")


def cmd_score(args):
    models = DetectorModels.load(args.model_dir)
    trace = load_trace(args.input, models.kind)
    if args.pids is not None:
        trace = filter_by_pids(trace, args.pids)
    scorer = models.scorer.with_contamination(args.contamination) if args.contamination else models.scorer
    ids = models.window_ids(trace)
    scores = scorer.score_embeddings(models.embed_windows(ids)) if len(ids) else np.empty(0)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i, s in enumerate(scores):
            out.write(f"window={i}\toffset={i * models.window_length}\tscore={s:.6f}\tflag={int(s > scorer.threshold)}\n")
    finally:
        if args.out:
            out.close()
    flagged = int((scores > scorer.threshold).sum())
    print(f"{flagged}/{len(scores)} windows flagged at threshold {scorer.threshold:.6f}", file=sys.stderr)


def cmd_stream(args):
    models = DetectorModels.load(args.model_dir)
    train_scores = models.scorer.train_scores
    if args.calibrate:
        if not args.anomalous:
            raise ConfigError("--calibrate needs --anomalous TRACE holding anomalous calibration events")
        anom = load_trace(args.anomalous, models.kind)
        anom_scores = models.score_windows(models.window_ids(anom))
        if len(anom_scores) == 0:
            raise ConfigError("anomalous calibration trace is shorter than one window")
        alpha = calibrate_alpha([train_scores], [anom_scores], args.contamination)
        print(f"calibrated alpha={alpha:g}", file=sys.stderr)
    else:
        alpha = args.alpha
    threshold = smoothed_threshold(train_scores, alpha, args.contamination)
    state = OnlineDetectorState(alpha=alpha, threshold=threshold)
    log = open(args.log, "w", encoding="utf-8") if args.log else None
    raw, smooth, alerts = [], [], 0
    try:
        for w in stream_scores(state, iter_records(sys.stdin, models.kind), models):
            raw.append(w.raw_score)
            smooth.append(w.smoothed)
            if w.alert:
                alerts += 1
                line = f"ALERT ts={w.timestamp:.6f} window={w.window} score={w.smoothed:.6f}"
                print(line, flush=True)
                if log:
                    log.write(line + "\n")
    finally:
        if log:
            log.close()
    if args.plot:
        from .plotting import plot_stream

        plot_stream(smooth, raw, threshold, args.plot)
    print(f"{state.windows_seen} windows, {alerts} alerts (alpha={alpha:g}, threshold={threshold:.6f})",
          file=sys.stderr)
    return EXIT_ALERT if alerts else EXIT_OK


def cmd_simulate(args):
    scenario = Scenario.load(args.scenario)
    if args.seed is not None:
        scenario = scenario.reseeded(args.seed)
    rules = AbstractionRules.load(args.rules) if args.rules else AbstractionRules()
    trace = generate(scenario, args.kind, rules)
    write_trace(trace, args.out)
    print(f"{len(trace)} {args.kind} events -> {args.out}")


def cmd_experiment(args):
    if not args.config:
        raise ConfigError("experiment needs --config")
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.model_dir:
        cfg.model_dir = args.model_dir
    table = run_experiment(cfg, train_models=args.train, out_dir=args.out_dir, figures=not args.no_figures)
    print(table.to_text())
    print(f"report written to {args.out_dir}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands re-accept the global flags; SUPPRESS keeps their defaults
    # from clobbering values given before the subcommand name
    def default(value):
        return argparse.SUPPRESS if suppress else value

    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--seed", type=int, default=default(None), help="override every seed")
    flags.add_argument("--config", default=default(None), help="JSON configuration file")
    flags.add_argument("-v", "--verbose", action="count", default=default(0))
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="netcal", description=__doc__, parents=[_global_flags(suppress=False)])
    p.add_argument("--version", action="version", version=f"netcal {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    kinds = [k.value for k in TraceKind]

    sp = add("ingest", cmd_ingest, "validate a trace file and optionally keep only some PIDs")
    sp.add_argument("--kind", choices=kinds, required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pids", type=_pids)
    sp.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")

    sp = add("tokenize", cmd_tokenize, "turn a trace into one token per line")
    sp.add_argument("--kind", choices=kinds, required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rules")
    sp.add_argument("--syscall-table")
    sp.add_argument("--max-events", type=int)

    sp = add("build-vocab", cmd_build_vocab, "collect distinct tokens in first-seen order")
    sp.add_argument("--in", dest="inputs", nargs="+", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-embeddings", cmd_train_embeddings, "skip-gram token embeddings")
    sp.add_argument("--tokens")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ablation", choices=["fixed-random"])
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--window-radius", type=int, default=5)
    sp.add_argument("--negatives", type=int, default=5)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--lr", type=float, default=0.025)

    sp = add("make-triplets", cmd_make_triplets, "segment tokens and dump contrastive triplets")
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--window", type=int, default=100)
    sp.add_argument("--mutation", type=float, default=0.1)
    sp.add_argument("--strategy", choices=["random", "hard"], default="random")
    sp.add_argument("--embeddings", help="embedding file used to rank hard-negative candidates")

    sp = add("train-encoder", cmd_train_encoder, "train the window encoder on a triplet dump")
    sp.add_argument("--triplets", required=True)
    sp.add_argument("--out", required=True)

    sp = add("fit-scorer", cmd_fit_scorer, "fit the isolation forest on benign windows")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--tokens", required=True, help="benign training tokens")
    sp.add_argument("--kind", choices=kinds, default="packet")
    sp.add_argument("--window", type=int, default=100)
    sp.add_argument("--contamination", type=float, default=0.005)
    sp.add_argument("--mode", choices=["raw", "paircos"], default="raw")
    sp.add_argument("--rules")
    sp.add_argument("--syscall-table")

    sp = add("score", cmd_score, "offline per-window scores and flags for a trace")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")
    sp.add_argument("--pids", type=_pids)
    sp.add_argument("--contamination", type=float)

    sp = add("stream", cmd_stream, "online detection over events read from stdin")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--contamination", type=float, required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--calibrate", action="store_true")
    sp.add_argument("--anomalous", help="anomalous calibration trace for --calibrate")
    sp.add_argument("--log", help="also write alert lines to this file")
    sp.add_argument("--plot", help="render the score trace to this image file")

    sp = add("simulate", cmd_simulate, "generate a synthetic trace from a scenario file")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", choices=kinds, default="packet")
    sp.add_argument("--rules")

    sp = add("experiment", cmd_experiment, "train and evaluate every variant, write report + figures")
    sp.add_argument("--train", action="store_true", help="train models instead of loading them")
    sp.add_argument("--out-dir", default="report")
    sp.add_argument("--model-dir")
    sp.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is None and args.command not in ("simulate", "train-encoder", "experiment"):
        args.seed = 0
    for attr in ("out", "log", "plot"):
        target = getattr(args, attr, None)
        if target:
            Path(target).parent.mkdir(parents=True, exist_ok=True)
    try:
        rc = args.func(args)
    except BrokenPipeError:
        # downstream reader (e.g. head) went away; not an error of ours
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except (ConfigError, TraceParseError, CorruptFileError, VersionError, ModelMismatchError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"netcal: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"netcal: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"netcal: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return rc or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
