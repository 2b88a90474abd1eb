"""Command line entry point: ``igdefense <verb> CONFIG [options]``.

Exit codes: 0 success, 1 invalid configuration or usage, 2 failure at run time.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline, render
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _override(args) -> dict:
    """Flags that mirror RunConfig fields, as dotted-path overrides."""
    out = {}
    for flag, path in (("k", "defense.k"), ("tau", "defense.tau"), ("n_s", "defense.n_s"),
                       ("sigma_d", "defense.sigma_d"), ("layer", "model.layer_id"), ("method", "ranking.method"),
                       ("probe_fraction", "ranking.probe_fraction"), ("epsilon", "attacks.epsilon"),
                       ("steps", "attacks.steps"), ("num_images", "eval.num_images"), ("seed", "seed"),
                       ("checkpoint", "model.checkpoint"), ("output_dir", "output_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            out[path] = v
    if getattr(args, "plots", False):
        out["plots"] = True
    return out


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    overrides = _override(args)
    if "model.checkpoint" in overrides:
        overrides["model.checkpoint"] = str(Path(overrides["model.checkpoint"]).resolve())
    if "output_dir" in overrides:
        overrides["output_dir"] = str(Path(overrides["output_dir"]).resolve())
    return cfg.replace(**overrides) if overrides else cfg


def _parse_value(text: str):
    # fractions such as 8/255 stay strings and are parsed by the config layer
    return yaml.safe_load(text.strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="igdefense", description="Neuron-importance masking defense and robustness evaluation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, defense=True):
        sp.add_argument("config", help="run configuration (YAML)")
        sp.add_argument("--output-dir", dest="output_dir")
        sp.add_argument("--cache-dir", help=f"cache root (default: ${pipeline.CACHE_ENV} or <output_dir>/.cache)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--checkpoint")
        sp.add_argument("--layer")
        sp.add_argument("--method", choices=["LO-IR", "CD-IR", "RANDOM", "none"])
        sp.add_argument("--probe-fraction", dest="probe_fraction", type=float)
        sp.add_argument("--plots", action="store_true", help="also emit PNG figures (needs matplotlib)")
        if defense:
            sp.add_argument("--k", type=int)
            sp.add_argument("--tau", type=float)
            sp.add_argument("--n-s", dest="n_s", type=int)
            sp.add_argument("--sigma-d", dest="sigma_d")
            sp.add_argument("--epsilon")
            sp.add_argument("--steps", type=int)
            sp.add_argument("--num-images", dest="num_images", type=int)

    sp = sub.add_parser("train", help="train (or fetch from cache) the base model")
    common(sp, defense=False)
    sp.add_argument("--out", help="checkpoint path (default <output_dir>/model.pt)")

    sp = sub.add_parser("rank", help="compute the neuron importance ranking")
    common(sp, defense=False)
    sp.add_argument("--out", help="ranking path (default <output_dir>/ranking.igrank)")

    sp = sub.add_parser("defend-eval", help="clean and AutoAttack-lite accuracy of base and defended model")
    common(sp)
    sp = sub.add_parser("iwwc", help="image-wise worst case over the full attack suite")
    common(sp)
    sp.add_argument("--no-recompute", action="store_true", help="fail if a transfer perturbation is not cached")
    sp = sub.add_parser("analyze-shift", help="activation shift of important neurons under PGD")
    common(sp)

    sp = sub.add_parser("sweep", help="evaluate one axis over a list of values")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma separated, e.g. 5,10,25 or 4/255,8/255")
    sp.add_argument("--metric", default="pgd", choices=pipeline.METRICS)
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("render", help="re-render a saved report")
    sp.add_argument("report", help="report JSON written by defend-eval or iwwc")
    sp.add_argument("--format", required=True, choices=render.FORMATS)
    sp.add_argument("--layout", default="summary", choices=["summary", "full"])
    sp.add_argument("--out", help="output file (stdout when omitted; required for plot)")
    return p


def _dispatch(args) -> int:
    if args.verb == "render":
        path = Path(args.report)
        if not path.exists():
            raise ConfigError("report", f"{path} does not exist")
        table = render.parse_json(path.read_text())
        kwargs = {"layout": args.layout} if args.format == "markdown" else {}
        text = render.report_render(table, args.format, args.out, **kwargs)
        if text is not None and args.out is None:
            sys.stdout.write(text)
        return EXIT_OK

    cfg = _load(args)
    cache = args.cache_dir
    if args.verb == "train":
        print(pipeline.train(cfg, args.out, cache))
    elif args.verb == "rank":
        print(pipeline.rank(cfg, args.out, cache))
    elif args.verb in ("defend-eval", "iwwc"):
        recompute = not getattr(args, "no_recompute", False)
        result = pipeline.run(cfg, args.verb, cache, recompute)
        sys.stdout.write(render.render_markdown(result.table(), layout="summary"))
        print(f"report: {result.paths['json']}")
    elif args.verb == "analyze-shift":
        rep = pipeline.analyze_shift(cfg, cache)
        print(rep.to_json())
    elif args.verb == "sweep":
        values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
        spec = pipeline.SweepSpec(args.axis, values)
        rows = pipeline.sweep(cfg, spec, args.metric, args.workers, cache)
        sys.stdout.write(pipeline.render_sweep_csv(rows))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, render.RenderError, UsageError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        logging.getLogger("igdefense").debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
