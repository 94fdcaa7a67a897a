import numpy as np
import pytest
import torch

ACCEPTANCE_LINES = []


def record_criterion(name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def square_mask(size=16, side=6, top=None, left=None):
    m = np.zeros((size, size), dtype=np.uint8)
    top = (size - side) // 2 if top is None else top
    left = (size - side) // 2 if left is None else left
    m[top:top + side, left:left + side] = 1
    return m


def disk_mask(size=64, radius=None, center=None):
    radius = size / 4 if radius is None else radius
    cy, cx = ((size - 1) / 2, (size - 1) / 2) if center is None else center
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2).astype(np.uint8)
