import numpy as np
import pytest

from tinytracker import netgraph, ptq
from tinytracker.faceprep import CropBox, preprocess
from tinytracker.qtensor import Tensor


def synthetic_frame(rng, h=96, w=128, channels=1):
    """Smooth gradient plus noise, uint8-representable values in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.5 + 0.3 * np.sin(xx / 9.0 + rng.uniform(0, 6)) * np.cos(yy / 7.0)
    px = np.clip(base[..., None] + rng.normal(0, 0.08, (h, w, channels)), 0, 1)
    return Tensor.f32(np.round(px * 255)[None] / 255.0)


def synthetic_inputs(n, seed=0, resolution=112):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        frame = synthetic_frame(rng)
        x0, y0 = int(rng.integers(0, 40)), int(rng.integers(0, 30))
        side = int(rng.integers(40, 64))
        out.append(preprocess(frame, CropBox(x0, y0, side, side, 128, 96), resolution))
    return out


@pytest.fixture(scope="session")
def zero_graph():
    return netgraph.build_tinytracker()


@pytest.fixture(scope="session")
def random_graph(zero_graph):
    return netgraph.init_random_weights(zero_graph, seed=0)


@pytest.fixture(scope="session")
def calib_inputs():
    return synthetic_inputs(4, seed=1)


@pytest.fixture(scope="session")
def quant_graph(random_graph, calib_inputs):
    return ptq.quantize_graph(random_graph, ptq.calibrate(random_graph, calib_inputs))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
