import contextlib
import os
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch

from igdefense.data import make_synthetic
from igdefense.harness.config import RunConfig
from igdefense.harness.pipeline import CACHE_ENV, Pipeline
from igdefense.models import TrainConfig, train_base_model

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

REPO = Path(__file__).resolve().parents[1]
DESK_CONFIG = REPO / "configs" / "desk.yaml"

_ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria on desk-scale models")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, title, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} | {detail}")


@pytest.fixture
def criterion():
    """``with criterion(n, title) as rec: ...; rec['detail'] = ...`` records a pass/fail line."""

    @contextlib.contextmanager
    def _record(n, title):
        rec = {"detail": ""}
        try:
            yield rec
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _ACCEPTANCE[n] = (False, title, f"{rec['detail']} | {msg}" if rec["detail"] else msg)
            raise
        _ACCEPTANCE[n] = (True, title, rec["detail"])

    return _record


@pytest.fixture(scope="session")
def synthetic():
    train = make_synthetic(num_classes=4, per_class=48, size=8, seed=3)
    test = make_synthetic(num_classes=4, per_class=16, size=8, seed=3, sample_seed=11, split_tag="test")
    return train, test


@pytest.fixture(scope="session")
def small_model(synthetic):
    """A quickly trained 4-stage CNN on synthetic data (N = 32 at the penultimate stage)."""
    train, _ = synthetic
    return train_base_model("small_cnn", train, TrainConfig(epochs=3, seed=0), widths=(8, 16, 16, 32))


@pytest.fixture(scope="session")
def cache_dir(request):
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(request.config.cache.mkdir("igdefense"))


@pytest.fixture(scope="session")
def desk(cache_dir):
    """Desk-scale models from the default config, trained once and cached across sessions."""
    cfg = RunConfig.load(DESK_CONFIG)
    pipe = Pipeline(cfg, cache_dir)
    std_cfg = cfg.replace(**{"model.train": {"mode": "standard", "epochs": 8}})
    train, test = pipe.data()
    return SimpleNamespace(cfg=cfg, pipe=pipe, model=pipe.model(), ranking=pipe.ranking(), train=train, test=test,
                           standard=Pipeline(std_cfg, cache_dir).model(), epsilon=cfg.attacks["epsilon"],
                           cache_dir=cache_dir)
