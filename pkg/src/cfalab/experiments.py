"""Component-ablation grid over the IN / EX-fg / EX-bg toggles."""

from __future__ import annotations

import itertools
import json
import logging
import statistics
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .config import ExperimentConfig
from .metrics import mean_metric
from .pipeline import Context, evaluate_scenes, prepare, train
from .synth import generate_dataset, generate_world

log = logging.getLogger(__name__)

Cell = Tuple[bool, bool, bool]
CELLS: List[Cell] = [tuple(bool(x) for x in c) for c in itertools.product((0, 1), repeat=3)]
BASELINE: Cell = (False, False, False)
FULL: Cell = (True, True, True)


def cell_name(cell: Cell) -> str:
    parts = [n for n, on in zip(("IN", "EX-fg", "EX-bg"), cell) if on]
    return "+".join(parts) or "baseline"


def with_cell(cfg: ExperimentConfig, cell: Cell, **augment) -> ExperimentConfig:
    aug = replace(cfg.augment, intrinsic_enabled=cell[0], extrinsic_fg_enabled=cell[1],
                  extrinsic_bg_enabled=cell[2], **augment)
    return replace(cfg, augment=aug)


def synthetic_context(cfg: ExperimentConfig) -> Context:
    world = generate_world(cfg.synth)
    vocab, scenes, emb = generate_dataset(world, cfg.synth)
    return prepare(vocab, scenes, emb, cfg.k, cfg.weights, cfg.tail_quantile, cfg.head_quantile)


def run_one(ctx: Context, cfg: ExperimentConfig, k: int = 20) -> Dict[str, float]:
    res = train(ctx, cfg.sampler, cfg.augment, cfg.train, validate=False)
    rep = evaluate_scenes(res.params, ctx.test, ctx, cfg.train.regime, ks=(k,),
                          graph_constraint=cfg.graph_constraint)
    return {"R": rep.recall[k], "mR": rep.mean_recall[k], "tail": rep.groups[k]["tail"],
            "Mean": mean_metric([rep.recall[k], rep.mean_recall[k]])}


class ResultCache:
    """Optional JSON cache keyed by config hash; a missing directory disables it."""

    def __init__(self, directory: Optional[Path] = None):
        self.dir = Path(directory) if directory else None

    def get(self, key: str) -> Optional[dict]:
        if self.dir is None:
            return None
        path = self.dir / f"{key}.json"
        return json.loads(path.read_text()) if path.exists() else None

    def put(self, key: str, value: dict) -> None:
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / f"{key}.json").write_text(json.dumps(value, sort_keys=True))


def run_grid(ctx: Context, cfg: ExperimentConfig, seeds: Iterable[int],
             cells: Iterable[Cell] = CELLS, cache: Optional[ResultCache] = None,
             **augment) -> Dict[Cell, List[Dict[str, float]]]:
    """Per cell, one metrics dict per seed (seed order preserved)."""
    cache = cache or ResultCache()
    out: Dict[Cell, List[Dict[str, float]]] = {}
    for cell in cells:
        rows = []
        for seed in seeds:
            run_cfg = with_cell(cfg, cell, **augment).with_seed(seed)
            key = run_cfg.hash()
            row = cache.get(key)
            if row is None:
                row = run_one(ctx, run_cfg)
                cache.put(key, row)
            log.info("%s seed %d: %s", cell_name(cell), seed, row)
            rows.append(row)
        out[cell] = rows
    return out


def medians(rows: List[Dict[str, float]]) -> Dict[str, float]:
    return {m: statistics.median(r[m] for r in rows) for m in rows[0]}


def grid_table(grid: Dict[Cell, List[Dict[str, float]]]) -> List[dict]:
    table = []
    for cell, rows in grid.items():
        row = {"cell": cell_name(cell), "IN": cell[0], "EX_fg": cell[1], "EX_bg": cell[2]}
        row.update({f"median_{k}": v for k, v in medians(rows).items()})
        table.append(row)
    return table
