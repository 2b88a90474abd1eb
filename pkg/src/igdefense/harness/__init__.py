"""Run configuration, orchestration, caching, sweeps and report rendering."""
from .config import ConfigError, RunConfig, SCHEMA_VERSION
from .pipeline import CACHE_ENV, Pipeline, RunResult, SweepSpec, run, sweep
from .render import report_render

__all__ = ["CACHE_ENV", "ConfigError", "Pipeline", "RunConfig", "RunResult", "SCHEMA_VERSION", "SweepSpec",
           "report_render", "run", "sweep"]
