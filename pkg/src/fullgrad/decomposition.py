"""Full-gradient decomposition and the FullGrad saliency map.

A network output splits exactly into an input term and bias terms::

    f(x) = grad_x f . x + sum over every additive term b of (grad_b f * b)

Spatial bias terms (conv, batch norm, smooth activations on feature maps)
are kept as per-channel maps; the rest are flat scalars. The saliency map
post-processes and sums the input term and every spatial bias map.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CompletenessError, ConfigurationError, DimensionError
from .grads import backward, target_vector
from .network import forward

__all__ = [
    "FullGradients",
    "PostProcessor",
    "SaliencyMap",
    "decompose",
    "decompose_batch",
    "completeness_residual",
    "postprocess",
    "fullgrad_saliency",
    "fullgrad_saliency_batch",
    "layer_bias_map",
    "COMPLETENESS_RTOL",
]

COMPLETENESS_RTOL = 1e-8
PSI_VARIANTS = ("full", "noabs", "absonly")


@dataclass
class FullGradients:
    """The pair (input gradient, bias gradients) for one input and one logit.

    ``bias_maps`` is a list of ``(layer, channel, map)`` with ``map`` shaped
    like that layer's spatial output; ``fc_bias_terms`` holds the remaining
    non-spatial entries in layer order.
    """

    input_gradient: np.ndarray
    bias_maps: list
    fc_bias_terms: np.ndarray
    f_value: float
    target: int = 0

    def layers(self):
        return sorted({layer for layer, _, _ in self.bias_maps})

    def bias_sum(self):
        return sum(float(m.sum()) for _, _, m in self.bias_maps) + float(self.fc_bias_terms.sum())


@dataclass(frozen=True)
class PostProcessor:
    """Map transform applied to every channel map before summation.

    ``full``: upsample(rescale(abs(m))); ``noabs``: upsample(m);
    ``absonly``: upsample(abs(m)). ``size`` defaults to the input size.
    """

    variant: str = "full"
    size: tuple = None

    def __post_init__(self):
        if self.variant not in PSI_VARIANTS:
            raise ConfigurationError(
                f"unknown post-processing {self.variant!r}; choose from {PSI_VARIANTS}"
            )

    def sized(self, size):
        return PostProcessor(self.variant, tuple(size))


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    target: int

    @property
    def shape(self):
        return self.values.shape


def _split(spec, bundle, logits, t, n):
    out = []
    for s in range(n):
        maps, flat = [], []
        for i in sorted(bundle.bias_grads):
            b = bundle.bias_grads[i][s]
            if b.ndim == 3:
                maps.extend((i, c, b[c]) for c in range(b.shape[0]))
            else:
                flat.append(b.ravel())
        out.append(
            FullGradients(
                input_gradient=bundle.input_grad[s],
                bias_maps=maps,
                fc_bias_terms=np.concatenate(flat) if flat else np.zeros(0),
                f_value=float(logits[s, t[s]]),
                target=int(t[s]),
            )
        )
    return out


def decompose_batch(spec, params, x, target=None, check=True):
    """Decompose every sample of a batch; ``target=None`` picks each argmax."""
    x = T.as_tensor(x)
    logits, trace = forward(spec, params, x)
    n = x.shape[0]
    t = logits.argmax(axis=1) if target is None else target_vector(target, n)
    bundle = backward(spec, params, trace, t)
    fgs = _split(spec, bundle, logits, t, n)
    if check:
        for s, fg in enumerate(fgs):
            res = completeness_residual(fg, x[s])
            if abs(res) > COMPLETENESS_RTOL * max(1.0, abs(fg.f_value)):
                raise CompletenessError(
                    f"sample {s}: output {fg.f_value!r} reconstructed with residual {res!r}",
                    residual=res,
                )
    return fgs


def decompose(spec, params, x, target=None):
    """Full gradients of one input (shape ``spec.input_shape``).

    Raises :class:`CompletenessError` if the pieces do not add back up to
    the output within ``1e-8 * max(1, |f|)``.
    """
    x = T.as_tensor(x)
    return decompose_batch(spec, params, x[None], target)[0]


def completeness_residual(fg, x):
    """``f - (grad_x f . x + sum of all bias-gradient entries)``."""
    input_term = float(np.sum(fg.input_gradient * x))
    return fg.f_value - (input_term + fg.bias_sum())


def postprocess(m, psi):
    """Apply ``psi`` to a single 2-D map (or a stack of them along axis 0)."""
    m = T.as_tensor(m)
    if psi.variant != "noabs":
        m = np.abs(m)
    if psi.variant == "full":
        if m.ndim == 2:
            m = T.rescale_unit(m)
        else:
            m = np.stack([T.rescale_unit(c) for c in m])
    size = psi.size if psi.size is not None else m.shape[-2:]
    return T.bilinear_upsample(m, size)


def _input_term(fg, x, psi):
    prod = fg.input_gradient * x
    if prod.ndim != 3:
        raise DimensionError("FullGrad saliency needs a C x H x W input")
    return postprocess(prod, psi).sum(axis=0)


def _layer_term(fg, layer, psi):
    maps = [m for i, _, m in fg.bias_maps if i == layer]
    return postprocess(np.stack(maps), psi).sum(axis=0)


def fullgrad_saliency(fg, x, psi=None, method="fullgrad"):
    """Sum of post-processed input-gradient x input channels and all bias maps.

    With ``psi=None`` nothing is post-processed; every map must then already
    have the input's spatial size.
    """
    x = T.as_tensor(x)
    size = x.shape[-2:]
    if psi is None:
        total = (fg.input_gradient * x).sum(axis=0)
        for _, _, m in fg.bias_maps:
            if m.shape != size:
                raise DimensionError(
                    f"bias map of shape {m.shape} cannot be summed without resizing"
                )
            total = total + m
        return SaliencyMap(total, method, fg.target)
    psi = psi.sized(size)
    total = _input_term(fg, x, psi)
    for layer in fg.layers():
        total = total + _layer_term(fg, layer, psi)
    return SaliencyMap(total, method, fg.target)


def fullgrad_saliency_batch(spec, params, x, target=None, psi=PostProcessor()):
    """FullGrad maps for a batch; returns an ``(N, H, W)`` array."""
    x = T.as_tensor(x)
    fgs = decompose_batch(spec, params, x, target, check=False)
    return np.stack([fullgrad_saliency(fg, x[s], psi).values for s, fg in enumerate(fgs)])


def layer_bias_map(fg, layer, psi, size):
    """Channel-summed post-processed bias map of one spatial layer at input ``size``."""
    if layer not in fg.layers():
        raise ConfigurationError(f"layer {layer} has no spatial bias-gradient maps")
    return SaliencyMap(_layer_term(fg, layer, psi.sized(size)), f"layer{layer}", fg.target)
