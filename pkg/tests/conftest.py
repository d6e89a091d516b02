import numpy as np
import pytest

from fedseg.autodiff import Graph, Node
from fedseg.data import PROFILES, generate_site
from fedseg.model import ModelConfig, build_model

TINY = ModelConfig(patch=(16, 16), depth=3, base_channels=4)


def small_graph(slope=0.01):
    """conv3x3 -> bias -> leaky -> conv1x1 -> bias -> softmax, 1 input channel."""
    nodes = (
        Node("input"),
        Node("conv2d", (0,), ("c1.w",), name="c1"),
        Node("bias", (1,), ("c1.b",)),
        Node("leaky", (2,), (), {"slope": slope}),
        Node("conv2d", (3,), ("c2.w",), name="c2"),
        Node("bias", (4,), ("c2.b",)),
        Node("softmax", (5,)),
    )
    return Graph(nodes, 1)


def small_params(rng, hidden=3, dtype=np.float64):
    return {
        "c1.w": rng.standard_normal((hidden, 1, 3, 3)).astype(dtype),
        "c1.b": rng.standard_normal(hidden).astype(dtype) * 0.1,
        "c2.w": rng.standard_normal((2, hidden, 1, 1)).astype(dtype),
        "c2.b": rng.standard_normal(2).astype(dtype) * 0.1,
    }


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(TINY, 0)


@pytest.fixture(scope="session")
def default_model():
    return build_model(ModelConfig(), 0)


@pytest.fixture(scope="session")
def site_a_small():
    return generate_site(PROFILES["A"], 24, 7, split=(16, 4, 4), site="A")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
