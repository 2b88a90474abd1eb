"""Named attacks, their configs, and an on-disk result cache.

New attacks (e.g. boundary-search methods) plug in with ``register_attack``;
the function receives ``(model, x, y, threat, generator=..., keys=..., **params)``
and must return an AttackResult.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import filelock
import torch

from ..io_utils import stable_hash
from .base import AttackResult, ThreatModel, keyed
from .cascade import autoattack_lite_attack
from .gradient import apgd, apgd_eot, apgd_targeted, fgsm, pgd
from .square import square_attack

ATTACKS = {}


def register_attack(name):
    def deco(fn):
        ATTACKS[name] = fn
        return fn
    return deco


register_attack("fgsm")(lambda model, x, y, threat, generator=None, keys=None, **kw: fgsm(model, x, y, threat, keys=keys, **kw))
register_attack("pgd")(pgd)
register_attack("apgd-ce")(lambda model, x, y, threat, **kw: apgd(model, x, y, "ce", threat, **kw))
register_attack("apgd-cw")(lambda model, x, y, threat, **kw: apgd(model, x, y, "cw", threat, **kw))
register_attack("apgd-t-dlr")(apgd_targeted)
register_attack("apgd-eot")(lambda model, x, y, threat, **kw: apgd_eot(model, x, y, "ce", threat, **kw))
register_attack("square")(square_attack)
register_attack("autoattack-lite")(autoattack_lite_attack)


@dataclass(frozen=True)
class AttackConfig:
    name: str
    epsilon: float
    params: dict = field(default_factory=dict, hash=False)
    seed: int = 0

    def __post_init__(self):
        if self.name not in ATTACKS:
            raise KeyError(f"unknown attack {self.name!r}; registered: {sorted(ATTACKS)}")

    @property
    def attack_id(self) -> str:
        return self.name

    def key(self) -> str:
        return stable_hash({"name": self.name, "epsilon": round(self.epsilon, 10), "params": self.params,
                            "seed": self.seed})

    def to_dict(self):
        return {"name": self.name, "epsilon": self.epsilon, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], float(d["epsilon"]), dict(d.get("params", {})), int(d.get("seed", 0)))


def run_attack(cfg: AttackConfig, model, x, y, keys=None, threat: ThreatModel | None = None) -> AttackResult:
    threat = threat or ThreatModel(cfg.epsilon)
    gen = torch.Generator().manual_seed(cfg.seed)
    if cfg.epsilon == 0:
        with torch.no_grad(), keyed(model, keys):
            success = model(x).argmax(1) != y
        zeros = torch.zeros(len(x))
        return AttackResult(torch.zeros_like(x), success, zeros, zeros[None], 0)
    return ATTACKS[cfg.name](model, x, y, threat, generator=gen, keys=keys, **cfg.params)


def data_hash(x, y) -> str:
    h = hashlib.sha256(x.contiguous().numpy().tobytes())
    h.update(y.numpy().tobytes())
    return h.hexdigest()[:16]


class ResultCache:
    """AttackResults on disk, keyed by (model fingerprint, attack config, data)."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, fingerprint: str, cfg: AttackConfig, dhash: str) -> Path:
        return self.root / "attacks" / fingerprint / f"{cfg.name}-{cfg.key()}-{dhash}.npz"

    def get(self, fingerprint, cfg, dhash):
        p = self.path(fingerprint, cfg, dhash)
        return AttackResult.load(p) if p.exists() else None

    def put(self, fingerprint, cfg, dhash, result: AttackResult):
        p = self.path(fingerprint, cfg, dhash)
        p.parent.mkdir(parents=True, exist_ok=True)
        with filelock.FileLock(str(p) + ".lock"):
            result.save(p)

    def get_or_compute(self, fingerprint, cfg, dhash, compute):
        p = self.path(fingerprint, cfg, dhash)
        p.parent.mkdir(parents=True, exist_ok=True)
        with filelock.FileLock(str(p) + ".lock"):
            if p.exists():
                return AttackResult.load(p), True
            result = compute()
            result.save(p)
            return result, False
