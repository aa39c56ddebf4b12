"""Command-line entry point: ``cfalab <command> [--config F] [--seed N] [--out DIR]``.

Exit codes: 0 ok, 2 missing input, 3 invalid input or violated invariant.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .bank import build_bank, save_bank
from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetError, assign_groups, compute_stats, load_dataset, load_embeddings, \
    save_dataset, split_scenes
from .experiments import CELLS, ResultCache, grid_table, run_grid
from .model import load_checkpoint, save_checkpoint
from .pipeline import Context, TrainingDiverged, evaluate_scenes, prepare, train
from .similarity import cluster_entities, clusters_to_json, combined_similarity
from .synth import config_dict, generate_dataset, generate_world

log = logging.getLogger("cfalab")

EXIT_MISSING = 2
EXIT_INVALID = 3


class MissingInput(Exception):
    pass


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"tool": "cfalab", "version": __version__, "config_hash": cfg.hash()}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra: Optional[dict] = None):
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = dict(_stamp(cfg), command=command, seed=cfg.train.seed, config=cfg.to_dict(),
                    files=files)
    manifest.update(extra or {})
    _write_json(out / "manifest.json", manifest)


def _require_dir(path: Optional[str], what: str) -> Path:
    if not path:
        raise MissingInput(f"no {what} given (use --data or [data] path)")
    p = Path(path)
    if not p.is_dir():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise MissingInput(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _dataset(args, cfg: ExperimentConfig, require_features: bool):
    root = _require_dir(args.data or cfg.data, "dataset directory")
    for name in ("vocab.json", "scenes.jsonl"):
        _require_file(str(root / name), name)
    vocab, scenes = load_dataset(root, require_features=require_features)
    return root, vocab, scenes


def _context(args, cfg: ExperimentConfig) -> Context:
    root, vocab, scenes = _dataset(args, cfg, require_features=True)
    _require_file(str(root / "embeddings.bin"), "embeddings.bin")
    emb = load_embeddings(root, vocab)
    return prepare(vocab, scenes, emb, cfg.k, cfg.weights, cfg.tail_quantile, cfg.head_quantile)


def _csv_text(header: List[str], rows: List[list], cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    buf.write(f"# cfalab {__version__} config {cfg.hash()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------- commands

def cmd_synth(args, cfg: ExperimentConfig, out: Path) -> None:
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    cfg = replace(cfg, synth=synth)
    vocab, scenes, emb = generate_dataset(generate_world(synth), synth)
    save_dataset(out, vocab, scenes, emb)
    _write_json(out / "synth_config.json", dict(_stamp(cfg), synth=config_dict(synth)))
    _write_manifest(out, cfg, "synth")


def cmd_stats(args, cfg: ExperimentConfig, out: Path) -> None:
    _, vocab, scenes = _dataset(args, cfg, require_features=False)
    train_scenes = split_scenes(scenes, "train") or scenes
    stats = compute_stats(train_scenes, vocab)
    vocab = assign_groups(vocab, stats, cfg.tail_quantile, cfg.head_quantile)
    body = dict(_stamp(cfg), **stats.to_json(vocab))
    body["groups"] = {g: [vocab.predicate_classes[p] for p in sorted(s)]
                      for g, s in (("head", vocab.head_set), ("body", vocab.body_set),
                                   ("tail", vocab.tail_set))}
    _write_json(out / "stats.json", body)
    _write_manifest(out, cfg, "stats")


def cmd_cluster(args, cfg: ExperimentConfig, out: Path) -> None:
    root, vocab, scenes = _dataset(args, cfg, require_features=False)
    _require_file(str(root / "embeddings.bin"), "embeddings.bin")
    emb = load_embeddings(root, vocab)
    k = cfg.k if args.k is None else args.k
    cfg = replace(cfg, k=k)
    stats = compute_stats(split_scenes(scenes, "train") or scenes, vocab)
    assign = cluster_entities(combined_similarity(stats, emb, cfg.weights), k)
    _write_json(out / "clusters.json",
                dict(_stamp(cfg), **clusters_to_json(assign, vocab.entity_classes, cfg.weights)))
    _write_manifest(out, cfg, "cluster")


def cmd_bank(args, cfg: ExperimentConfig, out: Path) -> None:
    _, vocab, scenes = _dataset(args, cfg, require_features=True)
    train_scenes = split_scenes(scenes, "train") or scenes
    stats = compute_stats(train_scenes, vocab)
    vocab = assign_groups(vocab, stats, cfg.tail_quantile, cfg.head_quantile)
    bank = build_bank(train_scenes, vocab)
    save_bank(bank, out)
    meta = json.loads((out / "bank.json").read_text())
    meta.update(_stamp(cfg))
    (out / "bank.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    _write_manifest(out, cfg, "bank")


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> None:
    ctx = _context(args, cfg)
    result = train(ctx, cfg.sampler, cfg.augment, cfg.train, keep_trace=True)
    save_checkpoint(result.params, out / "checkpoint.bin", _stamp(cfg))
    keys = sorted({k for row in result.log for k in row}, key=lambda k: (k != "epoch", k))
    rows = [[row.get(k, "") for k in keys] for row in result.log]
    (out / "train_log.csv").write_text(_csv_text(keys, rows, cfg))
    with open(out / "trace.jsonl", "w") as fh:
        fh.write(json.dumps(dict(_stamp(cfg), fired=result.trace.fired,
                                 missed=result.trace.missed), sort_keys=True) + "\n")
        for rec in result.trace.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_manifest(out, cfg, "train")


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> None:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    root, vocab, scenes = _dataset(args, cfg, require_features=True)
    _require_file(str(root / "embeddings.bin"), "embeddings.bin")
    emb = load_embeddings(root, vocab)
    params, meta = load_checkpoint(ckpt)
    regime = args.regime or cfg.train.regime
    train_scenes = split_scenes(scenes, "train") or scenes
    stats = compute_stats(train_scenes, vocab)
    vocab = assign_groups(vocab, stats, cfg.tail_quantile, cfg.head_quantile)
    eval_scenes = split_scenes(scenes, cfg.eval_split)
    if not eval_scenes:
        raise DatasetError(f"no scenes in split {cfg.eval_split!r}")
    ctx = Context(vocab, train_scenes, [], eval_scenes, stats, emb, None, None)
    rep = evaluate_scenes(params, eval_scenes, ctx, regime, cfg.ks, cfg.graph_constraint)
    body = rep.to_json(vocab.predicate_classes)
    body.update(_stamp(cfg))
    body["meta"] = {"regime": regime, "split": cfg.eval_split, "checkpoint_config": meta.get("config_hash"),
                    "graph_constraint": cfg.graph_constraint}
    body["predicate_frequency"] = {vocab.predicate_classes[p]: float(stats.f_r[p])
                                   for p in range(1, vocab.n_predicates)}
    body["groups_members"] = {g: [vocab.predicate_classes[p] for p in sorted(s)]
                              for g, s in (("head", vocab.head_set), ("body", vocab.body_set),
                                           ("tail", vocab.tail_set))}
    _write_json(out / "report.json", body)
    (out / "report.csv").write_text(f"# cfalab {__version__} config {cfg.hash()}\n" + rep.to_csv())
    _write_manifest(out, cfg, "eval")


def _report(path: str) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    _require_file(str(p), "report")
    raw = p.read_bytes()
    try:
        body = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"{p}: not a JSON report ({exc})") from exc
    if not isinstance(body, dict):
        raise DatasetError(f"{p}: not a JSON report")
    # identify by content so the output does not depend on where reports live
    body["_source"] = {"sha256": hashlib.sha256(raw).hexdigest(),
                       "config_hash": body.get("config_hash")}
    return body


def cmd_compare(args, cfg: ExperimentConfig, out: Path) -> None:
    a, b = _report(args.report_a), _report(args.report_b)
    for r, name in ((a, args.report_a), (b, args.report_b)):
        if "R" not in r or "mR" not in r:
            raise DatasetError(f"{name}: missing R/mR sections")
    rows = []
    for k in sorted(set(a["R"]) & set(b["R"]), key=int):
        for metric in ("R", "mR"):
            rows.append([f"{metric}@{k}", a[metric][k], b[metric][k], b[metric][k] - a[metric][k]])
        for g in ("head", "body", "tail"):
            va, vb = a["groups"][k].get(g), b["groups"][k].get(g)
            if va is not None and vb is not None:
                rows.append([f"mR_{g}@{k}", va, vb, vb - va])
    rows.append(["Mean", a["Mean"], b["Mean"], b["Mean"] - a["Mean"]])
    (out / "delta.csv").write_text(_csv_text(["metric", "A", "B", "B_minus_A"], rows, cfg))
    _write_json(out / "delta.json", dict(_stamp(cfg), A=a["_source"], B=b["_source"],
                                        rows=[dict(zip(("metric", "A", "B", "delta"), r)) for r in rows]))
    freq = b.get("predicate_frequency") or a.get("predicate_frequency") or {}
    k = max(set(a["per_predicate"]) & set(b["per_predicate"]), key=int)
    plot = []
    for pred in sorted(freq, key=lambda p: (-freq[p], p)):
        ra, rb = a["per_predicate"][k].get(pred), b["per_predicate"][k].get(pred)
        plot.append([pred, freq[pred], "" if ra is None else ra, "" if rb is None else rb])
    (out / "recall_vs_frequency.csv").write_text(
        _csv_text(["predicate", "train_frequency", f"recall@{k}_A", f"recall@{k}_B"], plot, cfg))
    _write_manifest(out, cfg, "compare")


def cmd_ablate(args, cfg: ExperimentConfig, out: Path) -> None:
    ctx = _context(args, cfg)
    seeds = list(range(args.seeds)) if args.seed is None else [args.seed + i for i in range(args.seeds)]
    grid = run_grid(ctx, cfg, seeds, CELLS, ResultCache(args.cache))
    table = grid_table(grid)
    _write_json(out / "grid.json", dict(_stamp(cfg), seeds=seeds, table=table,
                                       runs={"+".join(str(int(x)) for x in c): v for c, v in grid.items()}))
    keys = list(table[0])
    (out / "grid.csv").write_text(_csv_text(keys, [[r[k] for k in keys] for r in table], cfg))
    _write_manifest(out, cfg, "ablate")


# --------------------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="override the training (or, for synth, dataset) seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (overrides [data] path)")

    parser = argparse.ArgumentParser(prog="cfalab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cfalab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("stats", parents=[common, data], help="dataset statistics and predicate groups")
    p = sub.add_parser("cluster", parents=[common, data], help="cluster entity classes")
    p.add_argument("--k", type=int)
    sub.add_parser("bank", parents=[common, data], help="build the tail feature bank")
    sub.add_parser("train", parents=[common, data], help="train a model")
    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--regime", choices=("predcls", "sgcls"))
    p = sub.add_parser("compare", parents=[common], help="delta table between two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p = sub.add_parser("ablate", parents=[common, data], help="IN / EX-fg / EX-bg toggle grid")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--cache", help="directory for cached per-run results")
    return parser


COMMANDS = {"synth": cmd_synth, "stats": cmd_stats, "cluster": cmd_cluster, "bank": cmd_bank,
            "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "ablate": cmd_ablate}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            cfg = load_config(_require_file(args.config, "config file"))
        else:
            cfg = ExperimentConfig()
        if args.seed is not None and args.command != "synth":
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except (MissingInput, FileNotFoundError) as exc:
        print(f"cfalab: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, DatasetError, TrainingDiverged, ValueError, KeyError) as exc:
        print(f"cfalab: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
