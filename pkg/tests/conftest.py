import pytest

from rllogo.pipeline import TrainConfig
from rllogo.synthgen import generate_dataset


def tiny_config(**joint) -> TrainConfig:
    """Small network and short schedules for fast end-to-end tests."""
    j = {"epochs": 2, "batch": 8, "replay_capacity": 200, "target_sync": 5, "episodes_per_epoch": 6}
    j.update(joint)
    return TrainConfig.from_dict({
        "pretrain": {"epochs": 2, "drop_epoch": 1, "batch": 8, "lr": 0.01},
        "joint": j,
        "env": {"encoder_input_side": 8, "max_steps": 12},
        "model": {"feature_dim": 12, "trunk_width": 24},
        "seeds": [0],
    })


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    train, ev = generate_dataset(4, 24, 12, (0.2, 0.8), 3, root)
    return root, train, ev


_ACCEPTANCE = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    _ACCEPTANCE.append((criterion, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
