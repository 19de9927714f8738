import numpy as np
import pytest

from sdsinpaint.field import PositionalEncoding, RadianceField
from sdsinpaint.render import Camera


def make_field(seed=0, dtype=np.float64, trunk=(16, 16), head=8, lp=3, ld=2):
    return RadianceField(PositionalEncoding(lp, ld, True), trunk, head, dtype=dtype, seed=seed)


def make_camera(width=8, height=8, pose=None, near=0.5, far=4.0, f=None):
    f = f if f is not None else 1.2 * width
    return Camera(f, f, width / 2, height / 2, width, height, np.eye(4) if pose is None else pose, near, far)


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = rng.normal(size=3)
    return m


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
