import json
import sys
from pathlib import Path

import pytest

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))


@pytest.fixture(scope="session")
def frozen():
    return json.loads((HERE / "data" / "frozen_oracles.json").read_text())


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)


def write_house(house_dir, n=400, step=3.0, levels=(5, 80, 20, 150, 60, 10, 120), seed=0,
                extra_label=None):
    """A REDD-style house: two mains channels plus one channel per level, sampled every ``step`` s."""
    import numpy as np

    rng = np.random.default_rng(seed)
    house_dir.mkdir(parents=True, exist_ok=True)
    ts = 1303132964 + step * np.arange(n)
    labels = ["1 mains", "2 mains"]
    apps = []
    for i, level in enumerate(levels):
        on = rng.random(n) < 0.6
        power = np.round(level * on + rng.random(n), 3)
        apps.append(power)
        name = extra_label if (extra_label and i == len(levels) - 1) else f"app{i + 3}"
        labels.append(f"{i + 3} {name}")
    total = np.sum(apps, axis=0)
    channels = {1: np.round(total * 0.5, 3), 2: np.round(total - np.round(total * 0.5, 3), 3)}
    for i, p in enumerate(apps):
        channels[i + 3] = p
    for ch, p in channels.items():
        lines = [f"{int(t)} {float(v)!r}" for t, v in zip(ts, p)]
        (house_dir / f"channel_{ch}.dat").write_text("\n".join(lines) + "\n")
    (house_dir / "labels.dat").write_text("\n".join(labels) + "\n")
    return ts, apps


@pytest.fixture
def redd_root(tmp_path):
    write_house(tmp_path / "redd" / "house_1")
    return tmp_path / "redd"


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
