"""INI experiment configuration.

Every ablation knob is a config key::

    [augment]   IN, EX_fg, EX_bg, theta, sigma, intrinsic_rate
    [sampler]   lambda, gamma, bg_prob, repeat_factor
    [cluster]   K, weights
    [train]     tau, beta, lr, epochs, batch_size, hidden, neg_ratio, regime, seed
    [eval]      ks, graph_constraint, split
    [groups]    tail_quantile, head_quantile
    [synth]     generator fields

Missing keys take the documented defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Tuple

from .augment import AugmentConfig, SamplerConfig
from .pipeline import TrainConfig
from .similarity import SimilarityWeights
from .synth import SynthConfig, config_dict


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    data: Optional[str] = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = 6
    weights: SimilarityWeights = field(default_factory=SimilarityWeights)
    ks: Tuple[int, ...] = (20, 50, 100)
    graph_constraint: bool = True
    eval_split: str = "test"
    tail_quantile: float = 0.5
    head_quantile: float = 0.9
    synth: SynthConfig = field(default_factory=SynthConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Training seed override; the dataset seed lives in [synth]."""
        return replace(self, train=replace(self.train, seed=seed),
                       sampler=replace(self.sampler, seed=seed))

    def to_dict(self) -> dict:
        """Canonical, JSON-ready view; the data path is excluded so hashes survive relocation."""
        return {
            "sampler": asdict(self.sampler),
            "augment": asdict(self.augment),
            "train": asdict(self.train),
            "cluster": {"K": self.k, "weights": list(self.weights.as_tuple())},
            "eval": {"ks": list(self.ks), "graph_constraint": self.graph_constraint,
                     "split": self.eval_split},
            "groups": {"tail_quantile": self.tail_quantile, "head_quantile": self.head_quantile},
            "synth": config_dict(self.synth),
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _number(text: str) -> float:
    return float(Fraction(text.strip()))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _coerce(template, text: str):
    if isinstance(template, bool):
        return _bool(text)
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return _number(text)
    if isinstance(template, tuple):
        vals = [_number(x) for x in text.replace(",", " ").split()]
        if len(vals) != len(template):
            raise ConfigError(f"expected {len(template)} values, got {text!r}")
        return tuple(type(t)(v) for t, v in zip(template, vals))
    return text.strip()


def _apply(obj, section, aliases=None):
    """Replace dataclass fields from an INI section, honoring key aliases."""
    aliases = aliases or {}
    names = {f.name for f in fields(obj)}
    updates = {}
    for key, text in section.items():
        name = aliases.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        updates[name] = _coerce(getattr(obj, name), text)
    return replace(obj, **updates)


_AUGMENT_ALIASES = {"in": "intrinsic_enabled", "ex_fg": "extrinsic_fg_enabled",
                    "ex_bg": "extrinsic_bg_enabled"}
_SAMPLER_ALIASES = {"lambda": "lam"}
_KNOWN = {"data", "sampler", "augment", "cluster", "train", "eval", "groups", "synth"}


def parse_config(text: str, base_dir: Optional[Path] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = lambda s: s.strip().lower()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - _KNOWN
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    cfg = ExperimentConfig()
    try:
        if cp.has_section("data"):
            sec = dict(cp["data"])
            path = sec.pop("path", None)
            if sec:
                raise ConfigError(f"unknown keys in [data]: {sorted(sec)}")
            if path is not None:
                p = Path(path)
                cfg = replace(cfg, data=str(p if p.is_absolute() or base_dir is None else base_dir / p))
        if cp.has_section("sampler"):
            cfg = replace(cfg, sampler=_apply(cfg.sampler, cp["sampler"], _SAMPLER_ALIASES))
        if cp.has_section("augment"):
            cfg = replace(cfg, augment=_apply(cfg.augment, cp["augment"], _AUGMENT_ALIASES))
        if cp.has_section("train"):
            cfg = replace(cfg, train=_apply(cfg.train, cp["train"]))
        if cp.has_section("synth"):
            cfg = replace(cfg, synth=_apply(cfg.synth, cp["synth"]))
        if cp.has_section("cluster"):
            sec = cp["cluster"]
            for key in sec:
                if key not in ("k", "weights"):
                    raise ConfigError(f"unknown key {key!r} in [cluster]")
            if "k" in sec:
                cfg = replace(cfg, k=int(sec["k"]))
            if "weights" in sec:
                w = [_number(x) for x in sec["weights"].replace(",", " ").split()]
                if len(w) != 3:
                    raise ConfigError("weights needs three values: pattern, context, semantic")
                cfg = replace(cfg, weights=SimilarityWeights(*w))
        if cp.has_section("eval"):
            sec = cp["eval"]
            for key in sec:
                if key not in ("ks", "graph_constraint", "split"):
                    raise ConfigError(f"unknown key {key!r} in [eval]")
            if "ks" in sec:
                cfg = replace(cfg, ks=_ints(sec["ks"]))
            if "graph_constraint" in sec:
                cfg = replace(cfg, graph_constraint=_bool(sec["graph_constraint"]))
            if "split" in sec:
                cfg = replace(cfg, eval_split=sec["split"].strip())
        if cp.has_section("groups"):
            sec = cp["groups"]
            for key in sec:
                if key not in ("tail_quantile", "head_quantile"):
                    raise ConfigError(f"unknown key {key!r} in [groups]")
            cfg = replace(cfg, tail_quantile=_number(sec.get("tail_quantile", "0.5")),
                          head_quantile=_number(sec.get("head_quantile", "0.9")))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.k < 1:
        raise ConfigError("K must be >= 1")
    if not cfg.ks or min(cfg.ks) < 1:
        raise ConfigError("ks must list positive integers")
    if not 0 < cfg.tail_quantile < cfg.head_quantile < 1:
        raise ConfigError("need 0 < tail_quantile < head_quantile < 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)
