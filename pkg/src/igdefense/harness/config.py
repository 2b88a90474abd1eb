"""Declarative run configuration (YAML) with an explicit schema version.

A run file looks like::

    schema_version: 1
    seed: 0
    output_dir: runs/desk
    dataset: {name: digits, contrast: 0.25}
    eval: {num_images: 500}
    model:
      architecture: small_cnn
      layer_id: stage4
      checkpoint: null          # or a path; null trains from ``train``
      train: {mode: pgd_adversarial, epochs: 15}
    ranking: {method: LO-IR, probe_fraction: 1.0}
    defense: {k: 10, tau: 0.01, n_s: 1}
    attacks: {epsilon: 8/255, preset: desk, steps: 50}

Validation errors carry the dotted path of the offending field.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from ..attacks.registry import ATTACKS, AttackConfig
from ..defense import SEED_POLICIES, DefenseConfig
from ..evaluation import AttackSuite, default_suite
from ..io_utils import stable_hash
from ..models import ARCHITECTURES, TrainConfig
from ..ranking import SimilarityConfig

SCHEMA_VERSION = 1
RANKING_METHODS = ("LO-IR", "CD-IR", "RANDOM", "none")
DATASETS = ("digits", "synthetic", "arrays")
PRESETS = ("desk", "custom")
DEFAULT_LAYERS = {"small_cnn": "stage4", "resnet18": "layer4"}


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def parse_number(value, path: str) -> float:
    """Accept numbers and fraction strings such as ``8/255``."""
    if isinstance(value, bool):
        raise ConfigError(path, "expected a number")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(path, f"expected a number, got {value!r}")


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "expected a mapping")
    unknown = sorted(set(sec) - allowed)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", f"unknown field; allowed: {sorted(allowed)}")
    return dict(sec)


DEFAULTS = {
    "dataset": {"name": "digits", "contrast": 0.25},
    "eval": {"num_images": 500, "split": "test", "include_base": True},
    "model": {"architecture": "small_cnn", "layer_id": None, "checkpoint": None, "params": {},
              "train": {"mode": "pgd_adversarial", "epochs": 15}},
    "ranking": {"method": "LO-IR", "probe_fraction": 1.0, "seed": 0, "embeddings": None, "similarity": {}},
    "defense": {"k": 10, "tau": 0.01, "n_s": 1, "sigma_d": None, "seed_policy": "fresh-per-call", "seed": 0},
    "attacks": {"epsilon": 8 / 255, "preset": "desk", "steps": 50, "eot_iters": 10, "eot_steps": None,
                "square_queries": 500, "n_targets": 3, "direct": [], "transfer": []},
}
TRAIN_FIELDS = {"mode", "epochs", "lr", "schedule", "batch_size", "momentum", "weight_decay", "epsilon",
                "attack_steps", "attack_step_size", "seed"}


@dataclass
class RunConfig:
    dataset: dict
    model: dict
    ranking: dict
    defense: dict
    attacks: dict
    eval: dict
    seed: int = 0
    output_dir: str = "runs/default"
    plots: bool = False
    schema_version: int = SCHEMA_VERSION
    source: str | None = field(default=None, compare=False)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path | None = None, source: str | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")
        top = {"schema_version", "seed", "output_dir", "plots", *DEFAULTS}
        unknown = sorted(set(raw) - top)
        if unknown:
            raise ConfigError(unknown[0], f"unknown field; allowed: {sorted(top)}")
        version = raw.get("schema_version")
        if version is None:
            raise ConfigError("schema_version", "missing (current version is %d)" % SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version!r}; expected {SCHEMA_VERSION}")
        merged = {}
        for name, defaults in DEFAULTS.items():
            allowed = set(defaults) | ({"contrast", "size", "test_size", "seed", "path", "num_classes", "per_class",
                                        "channels", "noise"} if name == "dataset" else set())
            merged[name] = {**copy.deepcopy(defaults), **_section(raw, name, allowed)}
        cfg = cls(**merged, seed=raw.get("seed", 0), output_dir=str(raw.get("output_dir", "runs/default")),
                  plots=bool(raw.get("plots", False)), schema_version=version, source=source)
        cfg._resolve_paths(Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError("<file>", f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"cannot parse YAML: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent, source=str(path))

    def _resolve_paths(self, base: Path):
        for sec, key in (("model", "checkpoint"), ("ranking", "embeddings"), ("dataset", "path")):
            v = getattr(self, sec).get(key)
            if v:
                getattr(self, sec)[key] = str((base / v).resolve()) if not Path(v).is_absolute() else v
        if not Path(self.output_dir).is_absolute():
            self.output_dir = str((base / self.output_dir).resolve())

    # -- validation ----------------------------------------------------------

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed", "expected an integer")
        d = self.dataset
        if d["name"] not in DATASETS:
            raise ConfigError("dataset.name", f"expected one of {DATASETS}")
        if d["name"] == "arrays":
            if not d.get("path"):
                raise ConfigError("dataset.path", "required for the arrays dataset")
            if not Path(d["path"]).is_dir():
                raise ConfigError("dataset.path", f"directory {d['path']} does not exist")
        if "contrast" in d:
            c = parse_number(d["contrast"], "dataset.contrast")
            if not 0 < c <= 1:
                raise ConfigError("dataset.contrast", "must lie in (0, 1]")
            d["contrast"] = c
        if d["name"] != "digits":
            d.pop("contrast", None)

        e = self.eval
        if not isinstance(e["num_images"], int) or e["num_images"] < 1:
            raise ConfigError("eval.num_images", "expected a positive integer")
        if e["split"] not in ("train", "test"):
            raise ConfigError("eval.split", "expected train or test")

        m = self.model
        if m["architecture"] not in ARCHITECTURES:
            raise ConfigError("model.architecture", f"expected one of {sorted(ARCHITECTURES)}")
        if m["layer_id"] is None:
            m["layer_id"] = DEFAULT_LAYERS[m["architecture"]]
        if m["checkpoint"] and not Path(m["checkpoint"]).exists():
            raise ConfigError("model.checkpoint", f"file {m['checkpoint']} does not exist")
        if not isinstance(m["params"], dict):
            raise ConfigError("model.params", "expected a mapping")
        train = m["train"] or {}
        bad = sorted(set(train) - TRAIN_FIELDS)
        if bad:
            raise ConfigError(f"model.train.{bad[0]}", f"unknown field; allowed: {sorted(TRAIN_FIELDS)}")
        for key in ("epsilon", "attack_step_size", "lr"):
            if key in train:
                train[key] = parse_number(train[key], f"model.train.{key}")
        try:
            TrainConfig(**train)
        except (ValueError, TypeError) as exc:
            raise ConfigError("model.train", str(exc)) from exc

        r = self.ranking
        if r["method"] not in RANKING_METHODS:
            raise ConfigError("ranking.method", f"expected one of {RANKING_METHODS}")
        r["probe_fraction"] = parse_number(r["probe_fraction"], "ranking.probe_fraction")
        if not 0 < r["probe_fraction"] <= 1:
            raise ConfigError("ranking.probe_fraction", "must lie in (0, 1]")
        if r["embeddings"] and not Path(r["embeddings"]).exists():
            raise ConfigError("ranking.embeddings", f"file {r['embeddings']} does not exist")
        try:
            SimilarityConfig(**r["similarity"])
        except (ValueError, TypeError) as exc:
            raise ConfigError("ranking.similarity", str(exc)) from exc

        df = self.defense
        for key in ("tau", "sigma_d"):
            if df[key] is not None:
                df[key] = parse_number(df[key], f"defense.{key}")
        if df["seed_policy"] not in SEED_POLICIES:
            raise ConfigError("defense.seed_policy", f"expected one of {SEED_POLICIES}")
        for key in ("k", "n_s"):
            if not isinstance(df[key], int) or isinstance(df[key], bool) or df[key] < 1:
                raise ConfigError(f"defense.{key}", "expected a positive integer")
        try:
            DefenseConfig(**df)
        except ValueError as exc:
            raise ConfigError("defense", str(exc)) from exc

        a = self.attacks
        a["epsilon"] = parse_number(a["epsilon"], "attacks.epsilon")
        if not 0 <= a["epsilon"] <= 1:
            raise ConfigError("attacks.epsilon", "must lie in [0, 1]")
        if a["preset"] not in PRESETS:
            raise ConfigError("attacks.preset", f"expected one of {PRESETS}")
        for key in ("steps", "eot_iters", "square_queries"):
            if not isinstance(a[key], int) or a[key] < 1:
                raise ConfigError(f"attacks.{key}", "expected a positive integer")
        if a["steps"] < 2:
            raise ConfigError("attacks.steps", "APGD needs at least 2 steps")
        for group in ("direct", "transfer"):
            for i, entry in enumerate(a[group]):
                if not isinstance(entry, dict) or entry.get("name") not in ATTACKS:
                    raise ConfigError(f"attacks.{group}[{i}].name", f"expected one of {sorted(ATTACKS)}")
        if a["preset"] == "custom" and not (a["direct"] or a["transfer"]):
            raise ConfigError("attacks.direct", "a custom preset needs at least one attack")
        return self

    # -- derived objects ------------------------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **(self.model["train"] or {})})

    def defense_config(self) -> DefenseConfig:
        return DefenseConfig(**{**self.defense, "epsilon": self.attacks["epsilon"],
                                "layer_id": self.model["layer_id"]})

    def similarity_config(self) -> SimilarityConfig:
        return SimilarityConfig(**self.ranking["similarity"])

    def attack_suite(self) -> AttackSuite:
        a = self.attacks
        if a["preset"] == "desk":
            return default_suite(a["epsilon"], steps=a["steps"], eot_iters=a["eot_iters"], eot_steps=a["eot_steps"],
                                 square_queries=a["square_queries"], n_targets=a["n_targets"], seed=self.seed)

        def build(entry):
            return AttackConfig(entry["name"], parse_number(entry.get("epsilon", a["epsilon"]), "attacks.epsilon"),
                                dict(entry.get("params", {})), int(entry.get("seed", self.seed)))
        return AttackSuite([build(e) for e in a["direct"]], [build(e) for e in a["transfer"]])

    # -- hashing / serialization ---------------------------------------------

    def semantic_dict(self) -> dict:
        """Everything that can change a result; paths and plotting are excluded."""
        return {"schema_version": self.schema_version, "seed": self.seed, "dataset": self.dataset,
                "eval": self.eval, "model": self.model, "ranking": self.ranking, "defense": self.defense,
                "attacks": self.attacks}

    def config_hash(self) -> str:
        return stable_hash(self.semantic_dict())

    def to_dict(self) -> dict:
        return {**self.semantic_dict(), "output_dir": self.output_dir, "plots": self.plots}

    def replace(self, **sections) -> "RunConfig":
        """Copy with sections updated; dotted keys like ``defense.k`` set one field."""
        d = copy.deepcopy(self.to_dict())
        for key, value in sections.items():
            parts = key.split(".")
            tgt = d
            for p in parts[:-1]:
                tgt = tgt[p]
            tgt[parts[-1]] = value
        cfg = RunConfig(**{k: d[k] for k in ("dataset", "model", "ranking", "defense", "attacks", "eval")},
                        seed=d["seed"], output_dir=d["output_dir"], plots=d["plots"],
                        schema_version=d["schema_version"], source=self.source)
        return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
