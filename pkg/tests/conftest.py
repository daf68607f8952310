import numpy as np
import pytest

from amulet.backbone import BackboneConfig
from amulet.model import AmuletNet, HeadsConfig, ModelConfig
from amulet.rfc import RfcConfig
from amulet.training import init_msra


def tiny_config(levels=3, size=8, use_bpr=True, min_stride=1) -> ModelConfig:
    chans = (3, 4, 4, 5, 5)[:levels]
    return ModelConfig(
        BackboneConfig(levels=levels, convs_per_level=(1,) * levels, channels_per_level=chans, input_size=(size, size)),
        RfcConfig(per_level_channels=3, combined_channels=3),
        HeadsConfig(min_stride=min_stride, use_bpr=use_bpr),
    )


def tiny_model(seed=0, dtype=np.float64, **kw) -> AmuletNet:
    m = AmuletNet(tiny_config(**kw), dtype=dtype)
    init_msra(m.params, m.specs, seed)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register one verdict line each; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
