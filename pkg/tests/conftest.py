import numpy as np
import pytest
from PIL import Image

from fmgcam import testbed

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (bool(ok), name, detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {name}: {detail}")


@pytest.fixture(scope="session")
def pixel_sum():
    return testbed.make_model("pixel_sum", size=32)


@pytest.fixture(scope="session")
def pixel_sum_double():
    return testbed.make_model("pixel_sum", precision="double", size=32)


@pytest.fixture(scope="session")
def tiny_cnn():
    return testbed.make_model("tiny_cnn", seed=0)


@pytest.fixture(scope="session")
def tiny_cnn_double():
    return testbed.make_model("tiny_cnn", seed=0, precision="double")


@pytest.fixture(scope="session")
def tiny_cnn10():
    return testbed.make_model("tiny_cnn", seed=3, num_classes=10)


@pytest.fixture
def rgb_image():
    return np.random.default_rng(0).random((32, 32, 3))


def write_pngs(folder, n, size=(40, 48), seed=0):
    """n random RGB PNG files; returns their paths."""
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        p = folder / f"img{i:03d}.png"
        Image.fromarray(rng.integers(0, 256, (*size, 3), dtype=np.uint8)).save(p)
        paths.append(p)
    return paths
