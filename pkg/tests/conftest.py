import math
from pathlib import Path

import numpy as np
import pytest

from slim.bench import DEFAULT_CONFIG
from slim.simworld import Room, WorldMap, load_world


@pytest.fixture(scope="session")
def apartment():
    return load_world(DEFAULT_CONFIG, 0)


def open_map(nx=40, ny=40, res=0.1, walls=True):
    """Empty room with a one-cell border wall."""
    occ = np.zeros((ny, nx), dtype=bool)
    if walls:
        occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    w, h = nx * res, ny * res
    return WorldMap(occ, res, [Room("room", "room", ((0, 0), (w, 0), (w, h), (0, h)))])


@pytest.fixture
def room_map():
    return open_map()


def write_csv(path: Path, rows, header="class_i,class_j,relation,frequency"):
    path.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line, then assert."""
    def report(num, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
