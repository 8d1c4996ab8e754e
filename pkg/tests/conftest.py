import numpy as np
import pytest

from liesvf.lie_core import manifold, skew

KIND_TAGS = ["SO2", "S2", "SO3", "SE2", "SE3"]
GROUP_TAGS = ["SO2", "SO3", "SE2", "SE3"]


def make_kind(tag, bound=1.0):
    return manifold(tag, bound if tag.startswith("SE") else None)


def hat(tag, v):
    """Matrix algebra element, used with scipy's expm as an exp oracle."""
    v = np.asarray(v, dtype=float)
    if tag == "SO3":
        return skew(v)
    if tag == "SE2":
        return np.array([[0, -v[2], v[0]], [v[2], 0, v[1]], [0, 0, 0]])
    if tag == "SE3":
        out = np.zeros((4, 4))
        out[:3, :3] = skew(v[3:])
        out[:3, 3] = v[:3]
        return out
    raise ValueError(tag)


def random_algebra(kind, rng, n, max_angle=np.pi - 1e-3):
    """Algebra vectors with rotation norm below ``max_angle``."""
    v = rng.standard_normal((n, kind.dim))
    rot = list(kind.rot_idx)
    r = np.linalg.norm(v[:, rot], axis=-1, keepdims=True)
    v[:, rot] *= rng.uniform(0, max_angle, (n, 1)) / np.maximum(r, 1e-300)
    if kind.pos_idx:
        v[:, list(kind.pos_idx)] = rng.uniform(-1, 1, (n, len(kind.pos_idx)))
    return v


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(lines.get(n, f"FAIL  C{n:<2} did not run"))


@pytest.fixture
def acceptance_log(request):
    return request.config.acceptance_lines
