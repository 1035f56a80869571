import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hgts.data import SeriesTable, save_csv

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# acceptance lines collected during the run, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def etth1_path() -> str | None:
    """Location of the real ETTh1.csv: $HGTS_ETTH1, else data/ETTh1.csv under the repo."""
    for cand in (os.environ.get("HGTS_ETTH1"), os.path.join(ROOT, "data", "ETTh1.csv")):
        if cand and os.path.exists(cand):
            return cand
    return None


def synthetic_table(n_rows: int, n_channels: int, seed: int = 0, period: int = 24) -> SeriesTable:
    """Hourly series with daily and weekly cycles plus AR(1) noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_rows)
    noise = np.zeros((n_channels, n_rows))
    eps = rng.standard_normal((n_channels, n_rows)) * 0.3
    for i in range(1, n_rows):
        noise[:, i] = 0.8 * noise[:, i - 1] + eps[:, i]
    phase = rng.uniform(0, 2 * np.pi, size=(n_channels, 1))
    amp = rng.uniform(0.5, 2.0, size=(n_channels, 1))
    vals = (
        amp * np.sin(2 * np.pi * t / period + phase)
        + 0.5 * np.sin(2 * np.pi * t / (7 * period))
        + noise
        + rng.uniform(-5, 5, size=(n_channels, 1))
    )
    return SeriesTable(1.4e9 + t * 3600.0, vals, [f"ch{i}" for i in range(n_channels)])


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    save_csv(str(path), synthetic_table(1500, 3))
    return str(path)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
