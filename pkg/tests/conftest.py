"""Shared fixtures: small experiment configs and the acceptance verdict hook."""

from __future__ import annotations

import pytest

from skewsim.config import ExperimentConfig

# one line per acceptance criterion, echoed after the run summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_report():
    def record(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def tiny_config(**overrides) -> ExperimentConfig:
    """Logreg-on-blobs config small enough for sub-second runs."""
    base = dict(
        dataset="synth",
        synth_classes=4,
        synth_samples=400,
        synth_dim=16,
        synth_separation=4.0,
        arch="logreg",
        norm="none",
        nodes=3,
        skew_fraction=0.0,
        batch_size=10,
        epochs=2,
        eval_every=1,
        moment_window=100,
        algo="bsp",
        lr0=0.05,
        lr_step_drops=[],
        momentum=0.9,
        weight_decay=0.0,
        dtype="f32",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def make_config():
    return tiny_config
