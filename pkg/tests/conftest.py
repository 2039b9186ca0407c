from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from dynrisk.data_model import load_episodes

DATA = Path(str(resources.files("dynrisk").joinpath("data")))


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def table_s1() -> pd.DataFrame:
    return load_episodes(DATA / "table_s1.csv")


@pytest.fixture
def table_s1_raw() -> pd.DataFrame:
    return load_episodes(DATA / "table_s1_raw.csv")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
