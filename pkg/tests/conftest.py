import numpy as np
import pytest

from gracile.model import LayerDescriptor, Model, ModelSpec, ParameterStore, ParamTensor

# One line per acceptance criterion, emitted in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_conv_model(seed: int = 0, activation: str = "relu") -> Model:
    """Conv + pool + dense toy network used across the unit tests."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(input_shape=(1, 8, 8), class_count=4, layers=[
        LayerDescriptor(name="c1", kind="conv", activation=activation,
                        in_channels=1, out_channels=3, kernel=(3, 3)),
        LayerDescriptor(name="p1", kind="maxpool", pool=(2, 2), pool_stride=(2, 2)),
        LayerDescriptor(name="fl", kind="flatten"),
        LayerDescriptor(name="f1", kind="fc", activation="softmax",
                        in_features=27, out_features=4),
    ])
    store = ParameterStore([
        ParamTensor("c1.weight", (3, 1, 3, 3), "f32",
                    rng.normal(0, 0.5, 27).astype(np.float32)),
        ParamTensor("c1.bias", (3,), "f32", rng.normal(0, 0.1, 3).astype(np.float32)),
        ParamTensor("f1.weight", (4, 27), "f32",
                    rng.normal(0, 0.5, 108).astype(np.float32)),
        ParamTensor("f1.bias", (4,), "f32", rng.normal(0, 0.1, 4).astype(np.float32)),
    ])
    if activation == "prelu":
        store = ParameterStore(list(store) + [
            ParamTensor("c1.alpha", (1,), "f32", np.array([0.25], np.float32))])
    return Model(spec, store)


def small_dataset(seed: int = 1, n: int = 48):
    rng = np.random.default_rng(seed)
    images = rng.normal(0, 1, (n, 1, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 4, n).astype(np.uint16)
    return images, labels


@pytest.fixture
def conv_model():
    return small_conv_model()


@pytest.fixture
def toy_dataset():
    return small_dataset()
