"""Experiment runner: arms x stop-oracles x seeds, persisted artifacts, sweeps and reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attack import BuiltinDissimilarGenerator, HTTPGenerator, Outcome, attack_corpus
from .config import ConfigError, ExperimentConfig, dump_config
from .contrastive import influence_gap, make_views
from .detector import (HISTORY_COLUMNS, Detector, ModelParams, evaluate, init_params,
                       predict_corpus, train)
from .encode import EncoderConfig, encode_tree, tokenize
from .mpt import DegenerateInputError, PropagationTree, rank_by_influence
from .synth import stratified_split, synth_corpus

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("arm", "seed", "status", "acc", "aua_self", "aua_transfer", "influence_gap",
                  "flip_rate_self", "mean_injections_self", "threshold_miss_rate", "error")
SUMMARY_STATS = ("acc", "aua_self", "aua_transfer", "influence_gap")
PREDICTION_COLUMNS = ("tree", "label", "clean", "self", "transfer", "injections_self")
SWEEP_PARAMS = ("alpha1", "alpha2")


class ReportError(RuntimeError):
    pass


def seed_schedule(base_seed: int, n_seeds: int) -> list[int]:
    return [base_seed + i for i in range(n_seeds)]


def fmt(x) -> str:
    """Fixed float formatting so metric files are byte-stable."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- model files ---------------------------------------------------------------

def save_model(path: str | Path, params: ModelParams, encoder: EncoderConfig) -> None:
    meta = {"in_dim": params.in_dim, "hidden_dims": list(params.hidden_dims),
            "variant": params.variant, "encoder": dataclasses.asdict(encoder)}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params.weights)


def load_model(path: str | Path) -> tuple[ModelParams, EncoderConfig]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        weights = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    params = ModelParams(weights, meta["in_dim"], tuple(meta["hidden_dims"]), meta["variant"])
    return params, EncoderConfig(**meta["encoder"])


# -- building blocks -----------------------------------------------------------

def encode_corpus(encoder: EncoderConfig, trees: Sequence[PropagationTree]):
    return [(t, encode_tree(encoder, t)) for t in trees]


def corpus_tokens(trees: Sequence[PropagationTree]) -> list[str]:
    return sorted({tok for t in trees for text in t.texts for tok in tokenize(text)})


def make_generator(cfg: ExperimentConfig, vocab: Sequence[str], seed: int):
    g = cfg.generator
    if g.kind == "http":
        return HTTPGenerator(g.url, timeout=g.timeout, retries=g.retries)
    return BuiltinDissimilarGenerator(vocab, cfg.encoder, length=g.length, seed=seed)


def train_detector(cfg: ExperimentConfig, train_set, mode: str, seed: int,
                   variant: str | None = None):
    tc = dataclasses.replace(cfg.train, mode=mode, seed=seed)
    params = init_params(cfg.encoder.dim, cfg.detector.hidden_dims, seed,
                         variant or cfg.detector.variant, cfg.detector.init_scale)
    return train(params, train_set, tc)


def mean_influence_gap(params: ModelParams, data) -> float:
    gaps = []
    for tree, feats in data:
        try:
            gaps.append(influence_gap(params, make_views(tree, feats, rank_by_influence(tree))))
        except DegenerateInputError:
            continue
    return float(np.mean(gaps)) if gaps else float("nan")


def _attack_stats(traces) -> dict:
    rumors = len(traces)
    if not rumors:
        return {"flip_rate_self": float("nan"), "mean_injections_self": float("nan"),
                "threshold_miss_rate": float("nan")}
    records = [r for t in traces for r in t.records]
    return {"flip_rate_self": sum(t.outcome == Outcome.FLIPPED for t in traces) / rumors,
            "mean_injections_self": float(np.mean([t.injections for t in traces])),
            "threshold_miss_rate": (sum(r.threshold_miss for r in records) / len(records)
                                    if records else 0.0)}


def _write_traces(path: Path, traces) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "\n".join(t.to_jsonl() for t in traces)
    path.write_text(text + "\n" if text else "")


def _labels(preds) -> list[int]:
    return [int(p.label) for p in preds]


# -- one seed --------------------------------------------------------------------

def run_seed(cfg: ExperimentConfig, seed: int, out_dir: str | Path) -> list[dict]:
    """Train every arm on one seeded corpus, attack, evaluate and persist artifacts.

    All arms share the corpus, split, initial weights and attack generator, so
    they differ only in the training objective.  Transfer-mode perturbations
    are made once against a normally trained surrogate and replayed on each arm.
    """
    out = Path(out_dir)
    trees = synth_corpus(cfg.corpus, seed)
    data = encode_corpus(cfg.encoder, trees)
    tr_idx, te_idx = stratified_split(trees, cfg.test_fraction, seed)
    train_set = [data[i] for i in tr_idx]
    test_set = [data[i] for i in te_idx]
    generator = make_generator(cfg, corpus_tokens([t for t, _ in train_set]), seed)

    transfer_set = None
    transfer_error = None
    if "transfer" in cfg.attack_modes:
        try:
            surrogate, _ = train_detector(cfg, train_set, "normal", seed, cfg.detector.surrogate_variant)
            transfer_set, traces = attack_corpus(Detector(surrogate), test_set, cfg.attack,
                                                 generator, cfg.encoder)
            _write_traces(out / "traces" / f"surrogate_seed{seed}_transfer.jsonl", traces)
        except Exception as exc:
            log.error("seed %d: transfer attack failed: %s", seed, exc)
            transfer_error = f"transfer: {type(exc).__name__}: {exc}"

    rows = []
    for arm in cfg.arms:
        row = {"arm": arm, "seed": seed}
        try:
            params, history = train_detector(cfg, train_set, arm, seed)
            write_csv(out / "history" / f"{arm}_seed{seed}.csv", HISTORY_COLUMNS, history)
            clean = predict_corpus(params, test_set)
            preds = {"clean": _labels(clean)}
            row["acc"] = evaluate(params, test_set)
            row["influence_gap"] = mean_influence_gap(params, test_set)
            injections = [0] * len(test_set)
            if "self" in cfg.attack_modes:
                attacked, traces = attack_corpus(Detector(params), test_set, cfg.attack,
                                                 generator, cfg.encoder)
                _write_traces(out / "traces" / f"{arm}_seed{seed}_self.jsonl", traces)
                preds["self"] = _labels(predict_corpus(params, attacked))
                row["aua_self"] = evaluate(params, attacked)
                row.update(_attack_stats(traces))
                for t in traces:
                    injections[t.tree_index] = t.injections
            if transfer_set is not None:
                preds["transfer"] = _labels(predict_corpus(params, transfer_set))
                row["aua_transfer"] = evaluate(params, transfer_set)
            pred_rows = [{"tree": te_idx[i], "label": int(test_set[i][0].label),
                          "clean": preds["clean"][i],
                          "self": preds["self"][i] if "self" in preds else None,
                          "transfer": preds["transfer"][i] if "transfer" in preds else None,
                          "injections_self": injections[i]}
                         for i in range(len(test_set))]
            write_csv(out / "predictions" / f"{arm}_seed{seed}.csv", PREDICTION_COLUMNS, pred_rows)
            row["status"] = "ok"
            row["error"] = transfer_error
        except Exception as exc:  # a failing arm is recorded, the others continue
            log.error("seed %d arm %s failed: %s", seed, arm, exc)
            row = {"arm": arm, "seed": seed, "status": "failed",
                   "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
    return rows


def _run_seed_job(args):
    cfg, seed, out_dir = args
    try:
        return run_seed(cfg, seed, out_dir)
    except Exception as exc:
        log.error("seed %d failed before training: %s", seed, exc)
        return [{"arm": a, "seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
                for a in cfg.arms]


# -- whole experiment --------------------------------------------------------------

def summarize(rows: Sequence[dict], arms: Sequence[str]) -> list[dict]:
    """Mean and sample standard deviation over successful seeds, per arm."""
    out = []
    for arm in arms:
        ok = [r for r in rows if r["arm"] == arm and r["status"] == "ok"]
        s = {"arm": arm, "n_ok": len(ok), "n_failed": sum(1 for r in rows if r["arm"] == arm) - len(ok)}
        for stat in SUMMARY_STATS:
            vals = np.array([r[stat] for r in ok if r.get(stat) is not None], dtype=float)
            vals = vals[~np.isnan(vals)]
            s[f"{stat}_mean"] = float(vals.mean()) if vals.size else None
            s[f"{stat}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None)
        out.append(s)
    return out


def summary_columns() -> tuple[str, ...]:
    return ("arm", "n_ok", "n_failed") + tuple(f"{s}_{k}" for s in SUMMARY_STATS for k in ("mean", "std"))


def write_manifest(out: Path, cfg: ExperimentConfig, seeds: Sequence[int]) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {"version": __version__, "config_sha256": cfg.digest(), "seeds": list(seeds),
                "files": {p.relative_to(out).as_posix(): sha256_file(p) for p in files}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_experiment(cfg: ExperimentConfig, base_seed: int, out_dir: str | Path | None = None,
                   jobs: int = 1) -> dict:
    """Run all arms over the seed schedule; returns {"rows", "summary", "out_dir"}."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = seed_schedule(base_seed, cfg.n_seeds)
    (out / "config.yaml").write_text(dump_config(cfg))
    tasks = [(cfg, s, out) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_run_seed_job, tasks))
    else:
        per_seed = [_run_seed_job(t) for t in tasks]
    rows = [r for chunk in per_seed for r in chunk]
    summary = summarize(rows, cfg.arms)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    write_csv(out / "summary.csv", summary_columns(), summary)
    write_manifest(out, cfg, seeds)
    return {"rows": rows, "summary": summary, "out_dir": out}


def sweep(cfg: ExperimentConfig, param: str, values: Sequence[float], base_seed: int,
          out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """One full experiment per value of a regulariser weight; writes sweep.csv."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"can only sweep {SWEEP_PARAMS}, got {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out_dir)
    rows = []
    for v in values:
        sub = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **{param: float(v)}))
        res = run_experiment(sub, base_seed, out / f"{param}={float(v):g}", jobs)
        for s in res["summary"]:
            rows.append({"param": param, "value": float(v), **s})
    write_csv(out / "sweep.csv", ("param", "value") + summary_columns(), rows)
    return rows


# -- report ----------------------------------------------------------------------

def _float(x: str):
    return float(x) if x not in ("", None) else None


def _check(run: Path) -> dict:
    if not run.is_dir():
        raise ReportError(f"{run} is not a directory")
    if not any(run.iterdir()):
        raise ReportError(f"{run} is empty")
    mpath = run / "manifest.json"
    if not mpath.exists():
        raise ReportError(f"{run} has no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"corrupt manifest: {exc}") from exc
    for rel, digest in manifest.get("files", {}).items():
        p = run / rel
        if not p.exists():
            raise ReportError(f"missing artifact {rel}")
        if sha256_file(p) != digest:
            raise ReportError(f"checksum mismatch for {rel}")
    if "metrics.csv" not in manifest.get("files", {}):
        raise ReportError("manifest does not list metrics.csv")
    return manifest


def _recompute(run: Path, row: dict) -> None:
    """Re-derive accuracy figures from the per-tree predictions and compare."""
    path = run / "predictions" / f"{row['arm']}_seed{row['seed']}.csv"
    if not path.exists():
        raise ReportError(f"missing predictions for {row['arm']} seed {row['seed']}")
    preds = read_csv(path)
    if not preds:
        raise ReportError(f"empty predictions file {path.name}")
    for stat, col in (("acc", "clean"), ("aua_self", "self"), ("aua_transfer", "transfer")):
        stored = _float(row.get(stat))
        if stored is None:
            continue
        value = np.mean([int(p[col]) == int(p["label"]) for p in preds])
        if abs(value - stored) > 5e-7:
            raise ReportError(f"{stat} for {row['arm']} seed {row['seed']}: stored {stored}, "
                              f"recomputed {value:.6f}")


def report(run_dir: str | Path) -> str:
    """Validate a run directory and render the arm table with deltas against the normal arm."""
    run = Path(run_dir)
    _check(run)
    rows = read_csv(run / "metrics.csv")
    if not rows:
        raise ReportError("metrics.csv has no rows")
    for r in rows:
        if r["status"] == "ok":
            _recompute(run, r)
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    typed = [{**r, "seed": int(r["seed"]), **{k: _float(r[k]) for k in SUMMARY_STATS}} for r in rows]
    summary = {s["arm"]: s for s in summarize(typed, arms)}
    base = summary.get("normal")

    def cell(s, stat):
        m = s[f"{stat}_mean"]
        return "n/a" if m is None else f"{100 * m:6.2f} ± {100 * s[f'{stat}_std']:5.2f}"

    def delta(s, stat):
        if base is None or s[f"{stat}_mean"] is None or base[f"{stat}_mean"] is None:
            return "n/a"
        return f"{100 * (s[f'{stat}_mean'] - base[f'{stat}_mean']):+6.2f}"

    head = (f"{'arm':<14} {'seeds':>5}  {'ACC':>15}  {'AUA self':>15} {'Δ':>7}  "
            f"{'AUA transfer':>15} {'Δ':>7}  {'gap':>8}")
    lines = [head, "-" * len(head)]
    for arm in arms:
        s = summary[arm]
        gap = "n/a" if s["influence_gap_mean"] is None else f"{s['influence_gap_mean']:.5f}"
        lines.append(f"{arm:<14} {s['n_ok']:>5}  {cell(s, 'acc'):>15}  {cell(s, 'aua_self'):>15} "
                     f"{delta(s, 'aua_self'):>7}  {cell(s, 'aua_transfer'):>15} "
                     f"{delta(s, 'aua_transfer'):>7}  {gap:>8}")
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        lines.append(f"FAILED {r['arm']} seed {r['seed']}: {r['error']}")
    return "\n".join(lines)

