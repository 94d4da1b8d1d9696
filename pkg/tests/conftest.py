import numpy as np
import pytest

from toc_align.channel import ChannelSpec
from toc_align.features import TaskSpec, generate_task, select_anchors
from toc_align.models import TrainConfig, build_system, train_baseline, train_on_device_aligned

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def task():
    return generate_task(TaskSpec(10, 16, 300, 5.0, seed=3))


@pytest.fixture(scope="session")
def plain_pair(task):
    ch = ChannelSpec(snr_db=18.0, seed=5)
    a = train_baseline(build_system("a", 16, 10, seed=1), task, TrainConfig(epochs=30, channel=ch, seed=1))
    b = train_baseline(build_system("b", 16, 10, encoder_hidden=48, seed=2), task,
                       TrainConfig(epochs=30, channel=ch, seed=2, learning_rate=2e-3))
    return a, b


@pytest.fixture(scope="session")
def relative_pair(task):
    ch = ChannelSpec(snr_db=18.0, seed=6)
    anchors = select_anchors(task, 32, pool="train", seed=9)
    a = train_on_device_aligned(build_system("ra", 16, 10, mode="relative", anchors=anchors, seed=3),
                                task, anchors, TrainConfig(epochs=30, channel=ch, seed=3))
    b = train_on_device_aligned(build_system("rb", 16, 10, mode="relative", anchors=anchors,
                                             encoder_hidden=48, seed=4),
                                task, anchors, TrainConfig(epochs=30, channel=ch, seed=4, learning_rate=2e-3))
    return a, b, anchors
