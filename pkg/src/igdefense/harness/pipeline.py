"""Run orchestration: data -> model -> ranking -> defense -> attacks -> report.

Everything expensive is cached under one root (``$IGDEFENSE_CACHE`` or
``<output_dir>/.cache``):

    models/<key>.pt            trained base models, keyed by data + arch + TrainConfig
    rankings/<key>.igrank      one ranking per (model, layer, method, probe)
    attacks/<fingerprint>/...  transfer perturbations per (base model, attack, data)

Every cache entry is produced under a per-key file lock and written
atomically, so an interrupted run never leaves a partial file behind.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import filelock
import numpy as np

from ..attacks.base import ThreatModel
from ..attacks.registry import AttackConfig, ResultCache
from ..data import load_dataset
from ..defense import defend
from ..evaluation import (AttackSuite, EvaluationReport, activation_shift_report, iwwc_evaluate,
                          loss_surface_grid)
from ..io_utils import atomic_write_text, stable_hash
from ..models import load_checkpoint, save_checkpoint, train_base_model
from ..ranking import (EmbeddingBundle, cdir_rank, load_ranking, loir_rank, mock_encoder, random_rank,
                       save_ranking)
from . import render
from .config import ConfigError, RunConfig, dump_config

logger = logging.getLogger(__name__)

CACHE_ENV = "IGDEFENSE_CACHE"
MODES = ("defend-eval", "iwwc")


def cache_root(cfg: RunConfig) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(cfg.output_dir) / ".cache"


def _locked(path: Path, produce, load):
    """Load ``path`` if present, otherwise produce it, holding the per-key lock."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with filelock.FileLock(str(path) + ".lock"):
        if path.exists():
            return load(path), True
        produce(path)
        return load(path), False


@dataclass
class RunResult:
    report: EvaluationReport
    base_report: EvaluationReport | None
    paths: dict = field(default_factory=dict)
    cache_hits: dict = field(default_factory=dict)

    def table(self):
        rows = [("base", self.base_report)] if self.base_report is not None else []
        return rows + [(self.report.metadata.get("label", "defended"), self.report)]


class Pipeline:
    """Lazily builds and caches every stage of one run configuration."""

    def __init__(self, cfg: RunConfig, cache_dir=None, recompute: bool = True):
        self.cfg = cfg
        self.root = Path(cache_dir) if cache_dir else cache_root(cfg)
        self.recompute = recompute
        self.cache_hits: dict[str, bool] = {}
        self._data = None
        self._model = None
        self._ranking = None

    # -- stages ------------------------------------------------------------------

    def data(self):
        if self._data is None:
            self._data = load_dataset(self.cfg.dataset)
        return self._data

    def eval_set(self):
        train, test = self.data()
        ds = test if self.cfg.eval["split"] == "test" else train
        return ds.head(min(self.cfg.eval["num_images"], len(ds)))

    def model_key(self) -> str:
        m = self.cfg.model
        return stable_hash({"dataset": self.cfg.dataset, "architecture": m["architecture"], "params": m["params"],
                            "train": vars(self.cfg.train_config())})

    def model(self):
        if self._model is not None:
            return self._model
        m = self.cfg.model
        if m["checkpoint"]:
            self._model = load_checkpoint(m["checkpoint"], m["layer_id"])
            self.cache_hits["model"] = True
            return self._model
        train, _ = self.data()
        tcfg = self.cfg.train_config()

        def produce(path):
            logger.info("training %s (%s)", m["architecture"], tcfg.mode)
            net = train_base_model(m["architecture"], train, tcfg, m["layer_id"], **m["params"])
            save_checkpoint(net, path, tcfg)

        path = self.root / "models" / f"{self.model_key()}.pt"
        self._model, self.cache_hits["model"] = _locked(path, produce, lambda p: load_checkpoint(p, m["layer_id"]))
        return self._model

    def ranking_key(self, model) -> str:
        r = self.cfg.ranking
        emb = None
        if r["embeddings"]:
            emb = stable_hash(Path(r["embeddings"]).read_bytes().hex())
        return stable_hash({"fingerprint": model.fingerprint, "layer": model.layer_id, "method": r["method"],
                            "probe_fraction": r["probe_fraction"], "seed": r["seed"], "dataset": self.cfg.dataset,
                            "similarity": r["similarity"], "embeddings": emb})

    def ranking(self):
        if self._ranking is not None or self.cfg.ranking["method"] == "none":
            return self._ranking
        model = self.model()
        r = self.cfg.ranking
        if r["method"] == "RANDOM":
            self._ranking = random_rank(model.num_neurons, model.num_classes, r["seed"], model.layer_id,
                                        model.fingerprint)
            return self._ranking
        train, _ = self.data()

        def produce(path):
            idx = train.fraction_indices(r["probe_fraction"], r["seed"])
            probe = train.subset(idx)
            probe.split_tag = f"{train.split_tag}:frac={r['probe_fraction']}:seed={r['seed']}"
            t0 = time.perf_counter()
            if r["method"] == "LO-IR":
                ranking = loir_rank(model, probe)
            else:
                if r["embeddings"]:
                    full = EmbeddingBundle.load(r["embeddings"])
                    bundle = EmbeddingBundle(full.image_embeddings[idx], full.text_embeddings)
                else:
                    bundle = mock_encoder(probe, seed=r["seed"])
                ranking = cdir_rank(model, probe, bundle, self.cfg.similarity_config())
            logger.info("%s ranking in %.1fs", r["method"], time.perf_counter() - t0)
            save_ranking(ranking, path)

        path = self.root / "rankings" / f"{self.ranking_key(model)}.igrank"
        self._ranking, self.cache_hits["ranking"] = _locked(path, produce, lambda p: load_ranking(p, model))
        return self._ranking

    def defended(self):
        return defend(self.model(), self.ranking(), self.cfg.defense_config())

    def suite(self, mode: str) -> AttackSuite:
        suite = self.cfg.attack_suite()
        if mode == "defend-eval":
            aa = [c for c in suite.direct_attacks if c.name == "autoattack-lite"] or suite.direct_attacks[:1]
            if not aa:
                raise ConfigError("attacks.direct", "defend-eval needs at least one direct attack")
            return AttackSuite(aa, [])
        return suite

    def label(self) -> str:
        r = self.cfg.ranking["method"]
        return "defended (no mask)" if r == "none" else f"{r}-{self.cfg.defense['k']}"

    # -- evaluation ------------------------------------------------------------------

    def evaluate(self, mode: str = "iwwc", include_base: bool | None = None) -> RunResult:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        include_base = self.cfg.eval.get("include_base", True) if include_base is None else include_base
        base, ds, suite = self.model(), self.eval_set(), self.suite(mode)
        cache = ResultCache(self.root)
        defended = self.defended()
        report = iwwc_evaluate(base, defended, ds, suite, cache, self.recompute)
        base_report = iwwc_evaluate(base, base, ds, suite, cache, self.recompute) if include_base else None
        for rep, label in ((report, self.label()), (base_report, "base")):
            if rep is None:
                continue
            rep.metadata.update({"label": label, "mode": mode, "config_hash": self.cfg.config_hash(),
                                 "layer_id": base.layer_id, "k": self.cfg.defense["k"] if label != "base" else None})
            if mode == "defend-eval":
                rep.iwwc_acc = None
        return RunResult(report, base_report, cache_hits=dict(self.cache_hits))

    def shift_analysis(self, steps: int = 50):
        base, ranking = self.model(), self.ranking()
        if ranking is None:
            raise ConfigError("ranking.method", "activation-shift analysis needs a ranking")
        eps = self.cfg.attacks["epsilon"]
        attack = AttackConfig("pgd", eps, {"steps": steps, "step_size": eps / 4, "random_start": True}, self.cfg.seed)
        return activation_shift_report(base, ranking, self.cfg.defense["k"], attack, self.eval_set())

    def loss_surface(self, index: int = 0, resolution: int = 21):
        ds = self.eval_set()
        return loss_surface_grid(self.defended(), ds.images[index], ds.labels[index],
                                 ThreatModel(self.cfg.attacks["epsilon"]), resolution, seed=self.cfg.seed,
                                 key=index)


# -- entry points ------------------------------------------------------------------------


def _as_config(config) -> RunConfig:
    return config if isinstance(config, RunConfig) else RunConfig.load(config)


def write_report(result: RunResult, cfg: RunConfig, out: Path, stem: str = "report") -> dict:
    table = result.table()
    paths = {
        "json": out / f"{stem}.json",
        "csv": out / f"{stem}.csv",
        "markdown": out / f"{stem}.md",
    }
    atomic_write_text(paths["json"], render.render_json(table, {"config_hash": cfg.config_hash()}))
    render.report_render(table, "csv", paths["csv"])
    render.report_render(table, "markdown", paths["markdown"], layout="full")
    if cfg.plots:
        paths["plot"] = out / f"{stem}.png"
        render.plot_report(table, paths["plot"])
    return paths


def run(config, mode: str = "iwwc", cache_dir=None, recompute: bool = True) -> RunResult:
    """Execute one configuration end to end and write its artifacts to ``output_dir``."""
    cfg = _as_config(config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.resolved.yaml", dump_config(cfg))
    pipe = Pipeline(cfg, cache_dir, recompute)
    result = pipe.evaluate(mode)
    result.paths = write_report(result, cfg, out)
    if cfg.plots:
        grid = pipe.loss_surface()
        np.savez(out / "loss_surface.npz", **{k: np.asarray(v) for k, v in grid.items()})
        result.paths["loss_surface"] = out / "loss_surface.png"
        render.plot_loss_surface(grid, result.paths["loss_surface"], pipe.label())
    logger.info("report written to %s", out)
    return result


def train(config, out_path=None, cache_dir=None) -> Path:
    cfg = _as_config(config)
    pipe = Pipeline(cfg, cache_dir)
    model = pipe.model()
    out_path = Path(out_path or Path(cfg.output_dir) / "model.pt")
    save_checkpoint(model, out_path, cfg.train_config())
    return out_path


def rank(config, out_path=None, cache_dir=None) -> Path:
    cfg = _as_config(config)
    pipe = Pipeline(cfg, cache_dir)
    ranking = pipe.ranking()
    if ranking is None:
        raise ConfigError("ranking.method", "method 'none' produces no ranking")
    out_path = Path(out_path or Path(cfg.output_dir) / "ranking.igrank")
    save_ranking(ranking, out_path)
    return out_path


def analyze_shift(config, cache_dir=None, steps: int = 50):
    cfg = _as_config(config)
    out = Path(cfg.output_dir)
    report = Pipeline(cfg, cache_dir).shift_analysis(steps)
    atomic_write_text(out / "activation_shift.json", report.to_json())
    if cfg.plots:
        render.plot_activation_shift(report, out / "activation_shift.png")
    return report


# -- sweeps --------------------------------------------------------------------------------

SWEEP_AXES = {
    "k": "defense.k",
    "layer": "model.layer_id",
    "sigma_d": "defense.sigma_d",
    "n_s": "defense.n_s",
    "tau": "defense.tau",
    "epsilon": "attacks.epsilon",
    "probe_fraction": "ranking.probe_fraction",
    "attack_steps": "attacks.steps",
}
METRICS = ("pgd", "aa", "iwwc")


@dataclass
class SweepSpec:
    axis: str
    values: list

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError("sweep.axis", f"unknown axis {self.axis!r}; choose from {sorted(SWEEP_AXES)}")
        if not self.values:
            raise ConfigError("sweep.values", "at least one value is required")

    def configs(self, cfg: RunConfig) -> list[RunConfig]:
        """One validated config per value; an illegal value raises ConfigError naming it."""
        out = []
        for i, v in enumerate(self.values):
            try:
                point = cfg.replace(**{SWEEP_AXES[self.axis]: v})
            except ConfigError as exc:
                raise ConfigError(f"sweep.values[{i}]", f"{v!r} is illegal for {self.axis}: {exc}") from exc
            point.output_dir = str(Path(cfg.output_dir) / f"sweep-{self.axis}" / f"{i:02d}-{v}")
            out.append(point)
        return out


def _evaluate_point(cfg: RunConfig, metric: str, cache_dir, recompute: bool) -> dict:
    pipe = Pipeline(cfg, cache_dir, recompute)
    if metric == "pgd":
        eps = cfg.attacks["epsilon"]
        atk = AttackConfig("pgd", eps, {"steps": cfg.attacks["steps"], "step_size": eps / 4, "random_start": True},
                           cfg.seed)
        rep = iwwc_evaluate(pipe.model(), pipe.defended(), pipe.eval_set(), AttackSuite([atk], []))
        return {"clean_acc": rep.clean_acc, "robust_acc": rep.per_attack_acc["pgd"], "report": rep}
    res = pipe.evaluate("iwwc" if metric == "iwwc" else "defend-eval", include_base=False)
    rep = res.report
    robust = rep.iwwc_acc if metric == "iwwc" else rep.per_attack_acc.get("autoattack-lite",
                                                                          min(rep.per_attack_acc.values()))
    return {"clean_acc": rep.clean_acc, "robust_acc": robust, "report": rep}


def sweep(config, spec: SweepSpec, metric: str = "pgd", workers: int = 1, cache_dir=None,
          recompute: bool = True) -> list[dict]:
    """Evaluate every value of ``spec.axis``; a failing point is recorded and the sweep goes on."""
    if metric not in METRICS:
        raise ConfigError("sweep.metric", f"expected one of {METRICS}")
    cfg = _as_config(config)
    points = spec.configs(cfg)
    root = Path(cache_dir) if cache_dir else cache_root(cfg)

    def one(i):
        row = {"axis": spec.axis, "value": spec.values[i], "clean_acc": None, "robust_acc": None, "error": None}
        try:
            out = _evaluate_point(points[i], metric, root, recompute)
            row.update(clean_acc=out["clean_acc"], robust_acc=out["robust_acc"])
            atomic_write_text(Path(points[i].output_dir) / "report.json", out["report"].to_json())
        except Exception as exc:  # recorded per point, sweep continues
            logger.warning("sweep point %s=%r failed: %s", spec.axis, spec.values[i], exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(one, range(len(points))))
    out = Path(cfg.output_dir)
    atomic_write_text(out / f"sweep-{spec.axis}.csv", render_sweep_csv(rows))
    if cfg.plots:
        render.plot_sweep(rows, spec.axis, out / f"sweep-{spec.axis}.png")
    return rows


def render_sweep_csv(rows) -> str:
    lines = ["axis,value,clean_acc,robust_acc,error"]
    for r in rows:
        fmt = ["" if r[k] is None else f"{r[k]:.4f}" for k in ("clean_acc", "robust_acc")]
        err = (r["error"] or "").replace(",", ";").replace("\n", " ")
        lines.append(f"{r['axis']},{r['value']},{fmt[0]},{fmt[1]},{err}")
    return "\n".join(lines) + "\n"
