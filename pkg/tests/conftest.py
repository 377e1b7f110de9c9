import numpy as np
import pytest
import torch

from cyclebev.geometry import GridSpec, default_rig
from cyclebev.scene_synth import SceneParams, generate_dataset

torch.set_num_threads(1)

# acceptance criteria report: (criterion, passed, detail)
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def report(criterion: str, passed: bool, detail: str = ""):
    ACCEPTANCE_LINES.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {name}  {detail}")


@pytest.fixture(scope="session")
def small_rig():
    return default_rig(56, 112)


@pytest.fixture(scope="session")
def grid():
    return GridSpec()


@pytest.fixture(scope="session")
def tiny_bundles(small_rig, grid):
    return generate_dataset(8, 3, small_rig, grid)


TINY_GRID = GridSpec(32, 32, 16.0, 16.0)
TINY_PARAMS = SceneParams(vehicle_count=(1, 2), pedestrian_count=(1, 2), occluded_fraction=0.0,
                          road_width=(4.0, 6.0))


@pytest.fixture(scope="session")
def tiny_setup():
    """Tiny trainable world: 4 train and 2 val scenes, 16x32 images, 32x32 grid."""
    from cyclebev import training

    rig = default_rig(16, 32)
    bundles = generate_dataset(6, 11, rig, TINY_GRID, TINY_PARAMS)
    train = training.TensorData.from_bundles(bundles[:4], rig, TINY_GRID)
    val = training.TensorData.from_bundles(bundles[4:], rig, TINY_GRID)
    ncfg = training.default_net_config(train, s=1, feat_channels=8, dim=8, heads=2, vt_layers=1,
                                       ivt_layers=1, depth_bins=4, depth_range=(0.5, 10.0))
    return train, val, ncfg, bundles, rig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
