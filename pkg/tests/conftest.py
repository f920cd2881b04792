from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poisontrace import nn
from poisontrace.attacks import (
    DIRTY_LABEL,
    AttackPlan,
    MisclassificationEvent,
    default_trigger,
    inject_dirty_label,
    mint_events,
)
from poisontrace.data import LabeledDataset, forge_blobs, split
from poisontrace.seeding import derive_seed

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")


# ---------------------------------------------------------------------------
# acceptance summary lines

_CRITERIA: list[tuple[int, str]] = []


@pytest.fixture
def record_criterion():
    """Collects one PASS/FAIL line per acceptance criterion for the summary."""

    def _record(number: int, passed: bool, detail: str) -> None:
        word = "PASS" if passed else "FAIL"
        _CRITERIA.append((number, f"criterion {number:2d}: {word}  {detail}"))

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# shared scenarios


@pytest.fixture(scope="session")
def tiny_blobs() -> LabeledDataset:
    return forge_blobs(3, 40, 8, 1.0, 0.08, 2024)


@pytest.fixture(scope="session")
def tiny_model(tiny_blobs) -> nn.Classifier:
    cfg = nn.TrainConfig(epochs=12, batch_size=32, learning_rate=0.3, shuffle_seed=5)
    return nn.train(tiny_blobs, nn.Architecture((8, 16, 3)), cfg, 7)


@dataclass
class BackdoorScenario:
    root: int
    train_data: LabeledDataset
    test_data: LabeledDataset
    plan: AttackPlan
    poisoned: LabeledDataset
    victim: nn.Classifier
    train_config: nn.TrainConfig
    events: list[MisclassificationEvent]

    @property
    def poison_rows(self) -> np.ndarray:
        return np.flatnonzero(self.poisoned.poison_mask)


@pytest.fixture(scope="session")
def backdoor() -> BackdoorScenario:
    """Small five-class backdoor: 500 clean rows, 50 triggered relabeled rows.

    Trains in a couple of seconds and yields a victim with a near-perfect
    trigger, which is what the tracer tests need to observe clean separations.
    """
    root = derive_seed(7, "fidelity")
    clean = forge_blobs(5, 125, 64, 1.0, 0.8, derive_seed(root, "forge"), mean_box=0.8)
    train_data, test_data = split(clean, 0.8, derive_seed(root, "split"))
    trigger = default_trigger(train_data, 2, width=32)
    plan = AttackPlan(
        kind=DIRTY_LABEL,
        injection_rate=0.10,
        triggers=(trigger,),
        seed=derive_seed(root, "inject"),
    )
    poisoned = inject_dirty_label(train_data, plan)
    train_config = nn.TrainConfig(
        epochs=20, batch_size=64, learning_rate=0.2,
        shuffle_seed=derive_seed(root, "shuffle"),
    )
    victim = nn.train(
        poisoned, nn.Architecture((64, 128, 5)), train_config, derive_seed(root, "init")
    )
    events = mint_events(victim, test_data, plan, 10, derive_seed(root, "mint"))
    return BackdoorScenario(
        root=root,
        train_data=train_data,
        test_data=test_data,
        plan=plan,
        poisoned=poisoned,
        victim=victim,
        train_config=train_config,
        events=events,
    )
