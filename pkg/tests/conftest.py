from pathlib import Path

import numpy as np
import pytest
import torch

from hiva.config import apply_overrides, from_dict, validate_config
from hiva.data import SyntheticSpec, generate_synthetic_dataset
from hiva.training import train_stage1, train_stage2

ROOT = Path(__file__).resolve().parents[1]
OVERFIT = ROOT / "configs" / "overfit.yaml"


def tiny_config(**overrides):
    """A 3-AU model small enough for per-test training."""
    cfg = from_dict({
        "seed": 0,
        "data": {"au_ids": ["AU1", "AU2", "AU4"], "batch_size": 4, "synthetic": {"num_samples": 8}},
        "model": {"image_size": 32, "raw_channels": 16, "width": 16},
        "text": {"width": 16, "layers": 2, "heads": 2, "trainable_layers": 1, "context_layers": 1,
                 "context_heads": 4, "max_tokens": 16},
        "graph": {"k": 1},
        "loss": {"lambda": 0.1},
        "stage1": {"lr": 1e-3, "epochs": 2},
        "stage2": {"lr": 1e-3, "epochs": 2},
    })
    return apply_overrides(cfg, overrides) if overrides else cfg


def synthetic_for(cfg):
    s = cfg.data.synthetic
    spec = SyntheticSpec(num_aus=cfg.num_aus, image_size=cfg.model.image_size, num_samples=s.num_samples,
                         seed=s.seed, jitter=s.jitter, noise=s.noise)
    return spec, generate_synthetic_dataset(spec)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_data(tiny_cfg):
    return synthetic_for(tiny_cfg)[1]


@pytest.fixture(scope="session")
def tiny_run():
    cfg = tiny_config()
    _, samples = synthetic_for(cfg)
    c1 = train_stage1(cfg, samples)
    c2 = train_stage2(cfg, samples, c1)
    return cfg, samples, c1, c2


@pytest.fixture(scope="session")
def overfit_cfg():
    return validate_config(OVERFIT)


@pytest.fixture(scope="session")
def overfit_data(overfit_cfg):
    return synthetic_for(overfit_cfg)


@pytest.fixture(scope="session")
def overfit_run(overfit_cfg, overfit_data):
    """Both stages on the synthetic overfit config, shared by the acceptance tests."""
    import time

    _, samples = overfit_data
    t0 = time.perf_counter()
    c1 = train_stage1(overfit_cfg, samples)
    c2 = train_stage2(overfit_cfg, samples, c1)
    return {"stage1": c1, "stage2": c2, "seconds": time.perf_counter() - t0}


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and not rep.failed:
        return
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[marker.args[0]] = (status, item.name, getattr(item, "criterion_detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {name}  {detail}".rstrip())
