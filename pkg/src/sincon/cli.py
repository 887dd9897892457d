"""Command-line entry point: ``sincon <command>`` or ``python -m sincon <command>``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .detector import HISTORY_COLUMNS, TRAIN_MODES, VARIANTS, TrainingError, evaluate, init_params, train
from .mpt import CorpusParseError, MPTError, load_corpus, save_corpus
from .synth import synth_corpus
from . import harness


def _config(args):
    overrides = list(args.set or [])
    return load_config(args.config, overrides)


def _add_common(p, seed_required=False):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.alpha2=0.1 (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required,
                   help="base seed" + ("" if seed_required else " (default: corpus.seed)"))


def cmd_synth(args) -> int:
    cfg = _config(args)
    trees = synth_corpus(cfg.corpus, args.seed)
    save_corpus(trees, args.out)
    print(f"wrote {len(trees)} trees to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    trees = load_corpus(args.corpus)
    if not trees:
        raise ConfigError(f"{args.corpus} holds no trees")
    seed = cfg.train.seed if args.seed is None else args.seed
    variant = args.variant or cfg.detector.variant
    data = harness.encode_corpus(cfg.encoder, trees)
    tc = dataclasses.replace(cfg.train, mode=args.mode or cfg.train.mode, seed=seed)
    params = init_params(cfg.encoder.dim, cfg.detector.hidden_dims, seed, variant, cfg.detector.init_scale)
    params, history = train(params, data, tc)
    harness.save_model(args.out, params, cfg.encoder)
    if args.history:
        harness.write_csv(Path(args.history), HISTORY_COLUMNS, history)
    print(f"trained {variant} ({tc.mode}) on {len(trees)} trees; train accuracy "
          f"{evaluate(params, data):.4f}; model saved to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params, encoder = harness.load_model(args.model)
    trees = load_corpus(args.corpus)
    if not trees:
        raise ConfigError(f"{args.corpus} holds no trees")
    acc = evaluate(params, harness.encode_corpus(encoder, trees))
    print(f"accuracy {acc:.4f} on {len(trees)} trees")
    return 0


def cmd_attack(args) -> int:
    from .attack import Outcome, attack_corpus
    from .detector import Detector

    cfg = _config(args)
    params, encoder = harness.load_model(args.model)
    cfg = dataclasses.replace(cfg, encoder=encoder)
    oracle = harness.load_model(args.oracle)[0] if args.oracle else params
    trees = load_corpus(args.corpus)
    if not trees:
        raise ConfigError(f"{args.corpus} holds no trees")
    vocab_trees = load_corpus(args.vocab_corpus) if args.vocab_corpus else trees
    seed = cfg.corpus.seed if args.seed is None else args.seed
    generator = harness.make_generator(cfg, harness.corpus_tokens(vocab_trees), seed)
    data = harness.encode_corpus(encoder, trees)
    attacked, traces = attack_corpus(Detector(oracle), data, cfg.attack, generator, encoder)
    save_corpus([t for t, _ in attacked], args.out)
    if args.traces:
        harness._write_traces(Path(args.traces), traces)
    flips = sum(t.outcome == Outcome.FLIPPED for t in traces)
    errors = sum(t.outcome == Outcome.ERROR for t in traces)
    print(f"attacked {len(traces)} rumor trees: {flips} flipped against the stop oracle, "
          f"{errors} errors; accuracy {evaluate(params, data):.4f} clean, "
          f"{evaluate(params, attacked):.4f} under attack")
    return 0 if errors == 0 else 1


def cmd_run(args) -> int:
    cfg = _config(args)
    res = harness.run_experiment(cfg, args.seed, args.out, args.jobs)
    print(harness.report(res["out_dir"]))
    failed = sum(r["status"] != "ok" for r in res["rows"])
    return 0 if failed == 0 else 1


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}") from exc
    out = Path(args.out or cfg.output_dir)
    rows = harness.sweep(cfg, args.param, values, args.seed, out, args.jobs)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def cmd_report(args) -> int:
    print(harness.report(args.run_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sincon", description=__doc__)
    ap.add_argument("--log-level", default="WARNING", help="python logging level")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    _add_common(p)
    p.add_argument("--out", required=True, help="corpus JSON path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector on a corpus file")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=TRAIN_MODES)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--out", required=True, help="model .npz path")
    p.add_argument("--history", help="write per-epoch losses to this CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved model on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="inject messages into the rumor trees of a corpus")
    _add_common(p)
    p.add_argument("--model", required=True, help="victim model (.npz)")
    p.add_argument("--oracle", help="stop-oracle model for transfer attacks (default: the victim)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-corpus", help="corpus whose tokens form the generator vocabulary")
    p.add_argument("--out", required=True, help="attacked corpus JSON path")
    p.add_argument("--traces", help="JSONL attack trace path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("run", help="full experiment: arms x stop oracles x seeds")
    _add_common(p, seed_required=True)
    p.add_argument("--out", help="output directory (default: output_dir from config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="repeat the experiment over values of alpha1 or alpha2")
    _add_common(p, seed_required=True)
    p.add_argument("--param", required=True, choices=harness.SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="validate a run directory and print its table")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusParseError, MPTError, harness.ReportError, TrainingError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
