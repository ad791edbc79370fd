import pytest

from hlstm.gradcheck import randomize
from hlstm.network import LayerSpec, Model, StackSpec
from hlstm.tensor import RngStream


def make_model(seed=0, bidirectional=False, kinds=("lstm", "lstm"), cell=4, proj=3, n_in=3, n_out=5, scale=0.5):
    spec = StackSpec(n_in, n_out, tuple(LayerSpec(k, cell, proj) for k in kinds), bidirectional)
    rng = RngStream(seed)
    return randomize(Model.init(spec, rng), rng, scale)


@pytest.fixture
def model_factory():
    return make_model


@pytest.fixture
def rng():
    return RngStream(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
