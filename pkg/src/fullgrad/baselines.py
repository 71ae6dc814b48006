"""Reference attribution methods built on the same gradient core.

Each ``*_batch`` function takes a batch ``x`` of shape ``(N,) + input_shape``
and one target per sample and returns an ``(N, H, W)`` array (or ``(N, D)``
for flat inputs). The single-input wrappers return a :class:`SaliencyMap`.
"""

import numpy as np

from . import tensor as T
from .decomposition import PostProcessor, SaliencyMap, fullgrad_saliency_batch
from .errors import ConfigurationError
from .grads import backward, target_vector
from .network import forward

__all__ = [
    "input_gradient_map",
    "gradient_times_input",
    "integrated_gradients",
    "smooth_grad",
    "grad_cam",
    "random_map",
    "input_gradients",
    "saliency_batch",
    "METHODS",
    "SIGNED_METHODS",
    "IG_STEPS",
    "SMOOTHGRAD_SAMPLES",
    "SMOOTHGRAD_NOISE",
]

IG_STEPS = 128
SMOOTHGRAD_SAMPLES = 25
SMOOTHGRAD_NOISE = 0.15  # fraction of the input's value range


def _channel_sum(a):
    # per-sample arrays: (N, C, H, W) -> (N, H, W); flat inputs pass through
    return a.sum(axis=1) if a.ndim == 4 else a


def input_gradients(spec, params, x, target):
    """Batched ``grad_x logits[n, target[n]]`` and the logits."""
    x = T.as_tensor(x)
    logits, trace = forward(spec, params, x)
    t = target_vector(target, x.shape[0])
    return backward(spec, params, trace, t).input_grad, logits


def input_gradient_batch(spec, params, x, target, signed=True):
    g, _ = input_gradients(spec, params, x, target)
    return _channel_sum(g if signed else np.abs(g))


def gradient_times_input_batch(spec, params, x, target):
    g, _ = input_gradients(spec, params, x, target)
    return _channel_sum(g * x)


def integrated_gradients_batch(spec, params, x, target, baseline=None, steps=IG_STEPS):
    """Midpoint-rule path integral from ``baseline`` (default zeros) to ``x``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = T.as_tensor(x)
    base = np.zeros_like(x) if baseline is None else np.broadcast_to(T.as_tensor(baseline), x.shape)
    diff = x - base
    total = np.zeros_like(x)
    for s in range(1, steps + 1):
        alpha = (s - 0.5) / steps
        g, _ = input_gradients(spec, params, base + alpha * diff, target)
        total += g
    return _channel_sum(diff * total / steps)


def smooth_grad_batch(
    spec, params, x, target, sigma=None, n=SMOOTHGRAD_SAMPLES, squared=False, seed=0
):
    """Mean gradient over Gaussian-perturbed copies of each input.

    ``sigma=None`` uses ``SMOOTHGRAD_NOISE * (max(x) - min(x))`` per input.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = T.as_tensor(x)
    rng = np.random.default_rng(seed)
    if sigma is None:
        flat = x.reshape(x.shape[0], -1)
        scale = SMOOTHGRAD_NOISE * (flat.max(axis=1) - flat.min(axis=1))
    else:
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        scale = np.full(x.shape[0], float(sigma))
    scale = scale.reshape((-1,) + (1,) * (x.ndim - 1))
    total = np.zeros_like(x)
    for _ in range(n):
        noisy = x + scale * rng.standard_normal(x.shape)
        g, _ = input_gradients(spec, params, noisy, target)
        total += g * g if squared else g
    return _channel_sum(total / n)


def last_conv_layer(spec):
    convs = spec.conv_layers()
    if not convs:
        raise ConfigurationError("network has no convolutional layer for grad-CAM")
    return convs[-1]


def grad_cam_batch(spec, params, x, target, layer=None):
    x = T.as_tensor(x)
    layer = last_conv_layer(spec) if layer is None else layer
    logits, trace = forward(spec, params, x)
    acts = trace.outputs[layer]
    if acts.ndim != 4:
        raise ConfigurationError(f"layer {layer} ({spec.layers[layer].kind}) is not spatial")
    bundle = backward(spec, params, trace, target_vector(target, x.shape[0]))
    weights = bundle.preact_grads[layer].mean(axis=(2, 3))
    cam = np.maximum((weights[:, :, None, None] * acts).sum(axis=1), 0.0)
    return T.bilinear_upsample(cam, x.shape[-2:])


def random_batch(shape, seed=0):
    return np.random.default_rng(seed).random(shape)


# ---------------------------------------------------------------------------
# single-input API


def _single(fn, spec, params, x, target, method, **kw):
    x = T.as_tensor(x)
    if target is None:
        logits, _ = forward(spec, params, x[None])
        target = int(logits[0].argmax())
    values = fn(spec, params, x[None], target, **kw)[0]
    return SaliencyMap(values, method, int(target))


def input_gradient_map(spec, params, x, target=None, signed=True):
    """Channel-summed input gradient (absolute values first if not ``signed``)."""
    return _single(input_gradient_batch, spec, params, x, target, "gradient", signed=signed)


def gradient_times_input(spec, params, x, target=None):
    return _single(gradient_times_input_batch, spec, params, x, target, "gxi")


def integrated_gradients(spec, params, x, baseline=None, target=None, steps=IG_STEPS):
    """Integrated gradients with a midpoint Riemann sum over ``steps`` points."""
    b = None if baseline is None else T.as_tensor(baseline)[None]
    return _single(
        integrated_gradients_batch, spec, params, x, target, "ig", baseline=b, steps=steps
    )


def smooth_grad(
    spec, params, x, target=None, sigma=None, n=SMOOTHGRAD_SAMPLES, squared=False, seed=0
):
    return _single(
        smooth_grad_batch,
        spec,
        params,
        x,
        target,
        "smoothgradsq" if squared else "smoothgrad",
        sigma=sigma,
        n=n,
        squared=squared,
        seed=seed,
    )


def grad_cam(spec, params, x, target=None, layer=None):
    """Gradient-weighted activation map of a conv layer, upsampled to the input."""
    return _single(grad_cam_batch, spec, params, x, target, "gradcam", layer=layer)


def random_map(shape, seed=0):
    """Uniform [0, 1) values; identical for identical seeds."""
    return SaliencyMap(random_batch(tuple(shape), seed), "random", -1)


# ---------------------------------------------------------------------------
# dispatch by name


def _fullgrad(spec, params, x, target, psi="full", **_):
    return fullgrad_saliency_batch(spec, params, x, target, PostProcessor(psi))


def _random(spec, params, x, target, seed=0, **_):
    return random_batch((x.shape[0],) + tuple(x.shape[-2:]), seed)


METHODS = {
    "fullgrad": _fullgrad,
    "gradient": lambda spec, params, x, target, signed=False, **_: input_gradient_batch(
        spec, params, x, target, signed=signed
    ),
    "gxi": lambda spec, params, x, target, **_: gradient_times_input_batch(
        spec, params, x, target
    ),
    "ig": lambda spec, params, x, target, steps=IG_STEPS, **_: integrated_gradients_batch(
        spec, params, x, target, steps=steps
    ),
    "smoothgrad": lambda spec, params, x, target, sigma=None, samples=SMOOTHGRAD_SAMPLES, seed=0, **_: smooth_grad_batch(
        spec, params, x, target, sigma=sigma, n=samples, seed=seed
    ),
    "smoothgradsq": lambda spec, params, x, target, sigma=None, samples=SMOOTHGRAD_SAMPLES, seed=0, **_: smooth_grad_batch(
        spec, params, x, target, sigma=sigma, n=samples, squared=True, seed=seed
    ),
    "gradcam": lambda spec, params, x, target, layer=None, **_: grad_cam_batch(
        spec, params, x, target, layer=layer
    ),
    "random": _random,
}

# methods whose maps keep the sign of the evidence (usable for class contrasts)
SIGNED_METHODS = ("fullgrad", "gradient", "gxi", "ig", "smoothgrad", "random")


def saliency_batch(method, spec, params, x, target, **options):
    """Dispatch to a method by name; unknown options are ignored."""
    try:
        fn = METHODS[method]
    except KeyError:
        raise ConfigurationError(
            f"unknown saliency method {method!r}; choose from {sorted(METHODS)}"
        ) from None
    return fn(spec, params, T.as_tensor(x), target, **options)
