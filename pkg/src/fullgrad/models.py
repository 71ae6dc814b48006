"""Ready-made networks: the desk-scale CNN and small closed-form toys."""

import numpy as np

from . import network as nw

__all__ = ["desk_cnn", "saturation_net", "piecewise_ig_net", "one_hidden_net"]


def desk_cnn(size=16, channels=1, num_classes=10, width=8):
    """Two conv+BN+ReLU+pool blocks followed by two dense layers."""
    if size % 4:
        raise ValueError("size must be divisible by 4")
    flat = 2 * width * (size // 4) ** 2
    layers = [
        nw.conv(channels, width, 3, padding=1),
        nw.batchnorm(width),
        nw.relu(),
        nw.maxpool(2),
        nw.conv(width, 2 * width, 3, padding=1),
        nw.batchnorm(2 * width),
        nw.relu(),
        nw.maxpool(2),
        nw.flatten(),
        nw.dense(flat, 64),
        nw.relu(),
        nw.dense(64, num_classes),
    ]
    return nw.NetworkSpec(layers, (channels, size, size), num_classes)


def saturation_net(a=1.0, b=1.0, spatial=False):
    """``f(x) = a - relu(b - x)`` as dense(-1, +b) -> relu -> dense(-1, +a).

    With ``spatial`` the first layer is a 1x1 convolution on a 1x1x1 image,
    which lets image-based saliency code run on the same function.
    """
    first = {"weight": np.array([[-1.0]]), "bias": np.array([b])}
    last = {"weight": np.array([[-1.0]]), "bias": np.array([a])}
    if not spatial:
        spec = nw.NetworkSpec([nw.dense(1, 1), nw.relu(), nw.dense(1, 1)], (1,), 1)
        return spec, nw.Parameters([first, {}, last])
    first["weight"] = first["weight"].reshape(1, 1, 1, 1)
    spec = nw.NetworkSpec(
        [nw.conv(1, 1, 1), nw.relu(), nw.flatten(), nw.dense(1, 1)], (1, 1, 1), 1
    )
    return spec, nw.Parameters([first, {}, {}, last])


def piecewise_ig_net():
    """Two-input ReLU net equal to ``x1 + 3 x2`` when both inputs are in [0, 1]
    and to ``3 x1 + x2`` when both exceed 1.

    Hidden units: relu(+-x1), relu(+-x2) pass the inputs through and
    relu(x1 - 1), relu(x2 - 1) switch the slopes.
    """
    w0 = np.array(
        [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [0.0, 1.0]]
    )
    b0 = np.array([0.0, 0.0, 0.0, 0.0, -1.0, -1.0])
    w1 = np.array([[1.0, -1.0, 3.0, -3.0, 2.0, -2.0]])
    spec = nw.NetworkSpec([nw.dense(2, 6), nw.relu(), nw.dense(6, 1)], (2,), 1)
    params = nw.Parameters([{"weight": w0, "bias": b0}, {}, {"weight": w1, "bias": np.zeros(1)}])
    return spec, params


def one_hidden_net(w0=2.0, b0=-1.0, w1=3.0, b1=0.5):
    """``f(x) = w1 * relu(w0 * x + b0) + b1`` for scalar ``x``."""
    spec = nw.NetworkSpec([nw.dense(1, 1), nw.relu(), nw.dense(1, 1)], (1,), 1)
    params = nw.Parameters(
        [
            {"weight": np.array([[w0]]), "bias": np.array([b0])},
            {},
            {"weight": np.array([[w1]]), "bias": np.array([b1])},
        ]
    )
    return spec, params
