import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from asfusion import numerics as nx  # noqa: E402
from asfusion.config import ExperimentConfig, FusionConfig, HeadConfig, SceneConfig  # noqa: E402

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def f64():
    with nx.precision(64):
        yield


def tiny_config(grid: int = 4, c_u: int = 8, n_p: int = 2, n_h: int = 2, n_q: int = 1) -> ExperimentConfig:
    """Small enough for finite-difference checks: 1.6 m cells on a grid x grid map."""
    cfg = ExperimentConfig()
    cfg.fusion = FusionConfig(patch_h=2, patch_w=2, c_u=c_u, n_p=n_p, n_h=n_h, n_u=2, n_n=2, n_q=n_q)
    side = 1.6 * grid
    cfg.scenes = SceneConfig(x_min=0.0, x_max=side, y_min=-side / 2, y_max=side / 2, grid_h=grid, grid_w=grid,
                             min_objects=1, max_objects=2)
    cfg.head = HeadConfig(trunk_channels=6)
    cfg.precision = 64
    return cfg


def random_maps(rng, grid: int = 4, batch: int | None = None, channels=(6, 8, 4)) -> dict:
    lead = () if batch is None else (batch,)
    return {s: rng.normal(size=lead + (c, grid, grid)) for s, c in zip(("camera", "lidar", "radar"), channels)}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
