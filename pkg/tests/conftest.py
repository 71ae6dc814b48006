import numpy as np
import pytest

from fullgrad import network as nw
from fullgrad.data import make_bars
from fullgrad.evalharness import TrainConfig, evaluate_accuracy, sgd_train
from fullgrad.models import desk_cnn

# (criterion number, line) pairs filled in by test_acceptance.py
ACCEPTANCE = []


def randomize(params, rng, bias_scale=0.5):
    """Random biases and batch-norm statistics so every additive term is nonzero."""
    for _, name, arr in params.items():
        if name in ("bias", "beta", "running_mean"):
            arr[...] = rng.normal(0.0, bias_scale, size=arr.shape)
        elif name in ("gamma", "running_var"):
            arr[...] = rng.uniform(0.5, 2.0, size=arr.shape)
    return params


def random_conv_net(rng, bias=True, batchnorm=True, max_blocks=2):
    """Random small conv net: 1..max_blocks conv blocks, flatten, dense head."""
    c = int(rng.integers(1, 3))
    size = int(rng.choice([4, 6, 8]))
    shape = (c, size, size)
    layers, ch, hw = [], c, size
    for _ in range(int(rng.integers(1, max_blocks + 1))):
        out = int(rng.integers(2, 5))
        k = int(rng.choice([1, 3]))
        layers.append(nw.conv(ch, out, k, padding=k // 2, bias=bias))
        if batchnorm and rng.random() < 0.7:
            layers.append(nw.batchnorm(out))
        layers.append(nw.relu())
        if hw % 2 == 0 and hw > 2 and rng.random() < 0.5:
            layers.append(nw.maxpool(2) if rng.random() < 0.5 else nw.avgpool(2))
            hw //= 2
        ch = out
    classes = int(rng.integers(2, 5))
    layers += [nw.flatten(), nw.dense(ch * hw * hw, classes, bias=bias)]
    spec = nw.NetworkSpec(layers, shape, classes)
    params = nw.init_params(spec, int(rng.integers(1 << 30)))
    if bias:
        randomize(params, rng)
    return spec, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bars_data():
    train = make_bars(4000, seed=1)
    test = make_bars(1000, seed=2, split="test")
    return train, test


@pytest.fixture(scope="session")
def trained_model(bars_data):
    train, test = bars_data
    spec = desk_cnn()
    params, log = sgd_train(spec, train, TrainConfig(epochs=6))
    return spec, params, evaluate_accuracy(spec, params, test)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
