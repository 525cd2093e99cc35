from __future__ import annotations

import os

os.environ.setdefault("ONFATTN_NO_PLOTS", "0")

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from onfattn.config import DataConfig
from onfattn.dataio import NoteEvent, NoteSequence

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data_config() -> DataConfig:
    """A few short pieces: enough to exercise every code path in seconds."""
    return DataConfig(seed=7, n_train=3, n_valid=1, n_test=2, duration=(3.0, 4.0), density=(2.0, 3.0))


@pytest.fixture(scope="session")
def tiny_splits(tiny_data_config):
    from onfattn.datasets import synthetic_splits

    return synthetic_splits(tiny_data_config)


def seq(*triples, duration=0.0) -> NoteSequence:
    """Build a NoteSequence from (pitch, onset, offset) triples."""
    return NoteSequence([NoteEvent(p, on, off) for p, on, off in triples], duration=duration)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
