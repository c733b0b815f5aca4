import numpy as np
import pytest

import artifacts
from iba.network import LayerSpec, Model, ModelSpec, build_default_model


@pytest.fixture(scope="session")
def dataset():
    return artifacts.dataset()


@pytest.fixture(scope="session")
def small_dataset():
    from iba.data import ShapesDataset

    return ShapesDataset.generate(n_train=60, n_val=20, seed=3)


@pytest.fixture(scope="session")
def trained_model():
    return artifacts.model("maxpool")


@pytest.fixture(scope="session")
def stride_model():
    return artifacts.model("stride")


@pytest.fixture(scope="session")
def conv3_stats():
    return artifacts.stats()


@pytest.fixture(scope="session")
def readout_net():
    return artifacts.readout()


@pytest.fixture
def tiny_model():
    """Untrained default-architecture model on 32x32 inputs."""
    return build_default_model(3, seed=1, input_shape=(1, 32, 32), channels=(4, 4, 6, 6))


def identity_model(classes: int = 2, size: int = 4) -> Model:
    """One 1x1 conv with unit weight and a ReLU: the tap equals relu(input)."""
    layers = (
        LayerSpec("conv1", "conv", 1, 1, 1, 1, 0),
        LayerSpec("relu1", "relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc", "dense", size * size, classes),
    )
    spec = ModelSpec((1, size, size), classes, layers)
    params = {
        "conv1.weight": np.ones((1, 1, 1, 1), np.float32),
        "conv1.bias": np.zeros(1, np.float32),
        "fc.weight": np.random.default_rng(0).normal(size=(classes, size * size)).astype(np.float32),
        "fc.bias": np.zeros(classes, np.float32),
    }
    return Model(spec, params)


# ---- acceptance summary ----------------------------------------------------------------

CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
