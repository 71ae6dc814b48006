"""Reverse-mode gradients over an activation trace, plus a finite-difference oracle.

The attribution target is always one pre-softmax logit per sample. For a
batch the scalar being differentiated is ``sum_n logits[n, target[n]]``;
since eval-mode samples do not interact, per-sample input and intermediate
gradients come out of a single pass.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NearKinkError, TraceMismatchError
from .network import SMOOTH_ACTIVATIONS, forward

__all__ = [
    "GradientBundle",
    "SensitivityResult",
    "backprop",
    "backward",
    "layer_bias",
    "finite_difference_oracle",
    "gradient_sensitivity_check",
    "activation_pattern",
    "kink_margin",
    "sample_off_kink_inputs",
    "max_relative_deviation",
    "target_vector",
]


@dataclass
class GradientBundle:
    """Gradients of the selected logit.

    Attributes
    ----------
    input_grad : ndarray shaped like ``x``
    param_grads : list of dicts, batch-summed, shaped like the parameters
    preact_grads : list of per-layer gradients with respect to each layer output
    bias_grads : dict layer index -> ``grad (.) bias`` broadcast to the layer
        output shape. Explicit conv/linear biases, the batch-norm additive term
        and the linearisation offset of smooth activations all appear here;
        layers with no additive term have no entry.
    """

    input_grad: np.ndarray
    param_grads: list
    preact_grads: list
    bias_grads: dict

    def bias_total(self):
        """Per-sample sum of all bias-gradient entries."""
        n = self.input_grad.shape[0]
        total = np.zeros(n)
        for b in self.bias_grads.values():
            total += b.reshape(n, -1).sum(axis=1)
        return total


def target_vector(target, n):
    t = np.asarray(target, dtype=int)
    if t.ndim == 0:
        t = np.full(n, int(t))
    if t.shape != (n,):
        raise ValueError(f"target must be a scalar or length-{n} array")
    return t


def _smooth_parts(kind, z):
    """Activation value and slope at ``z``."""
    if kind == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return s, s * (1.0 - s)
    t = np.tanh(z)
    return t, 1.0 - t * t


def layer_bias(layer, p, z=None):
    """The additive term of a layer in its (local) affine form, or None.

    ``z`` is the layer input; only smooth activations need it.
    """
    kind = layer.kind
    if kind in ("conv2d", "linear"):
        return p.get("bias")
    if kind == "batchnorm2d":
        return T.batchnorm_implicit_bias(
            p["gamma"], p["beta"], p["running_mean"], p["running_var"], layer.eps
        )
    if kind in SMOOTH_ACTIVATIONS:
        value, slope = _smooth_parts(kind, z)
        return value - slope * z
    return None


def _broadcast_bias(layer, b, out_shape):
    if layer.kind in SMOOTH_ACTIVATIONS:
        return b
    if len(out_shape) == 4:
        return b[None, :, None, None]
    return b[None, :]


def backprop(spec, params, trace, grad_logits, need_params=True):
    """Chain the per-layer backward kernels from the logits down to the input.

    Returns ``(input_grad, param_grads, output_grads)`` where
    ``output_grads[i]`` is the cotangent of layer ``i``'s output.
    """
    if len(trace) != len(spec.layers):
        raise TraceMismatchError(
            f"trace has {len(trace)} layers, network has {len(spec.layers)}"
        )
    if grad_logits.shape != trace.logits.shape:
        raise TraceMismatchError("logit cotangent does not match trace output shape")
    n_layers = len(spec.layers)
    param_grads = [dict() for _ in range(n_layers)]
    output_grads = [None] * n_layers
    g = grad_logits
    for i in range(n_layers - 1, -1, -1):
        layer, p = spec.layers[i], params.layers[i]
        x = trace.inputs[i]
        output_grads[i] = g
        kind = layer.kind
        if kind == "conv2d":
            gx, gw, gb = T.conv2d_backward(
                g, x, p["weight"], layer.stride, layer.padding
            )
            if need_params:
                param_grads[i]["weight"] = gw
                if layer.bias:
                    param_grads[i]["bias"] = gb
            g = gx
        elif kind == "linear":
            gx, gw, gb = T.linear_backward(g, x, p["weight"])
            if need_params:
                param_grads[i]["weight"] = gw
                if layer.bias:
                    param_grads[i]["bias"] = gb
            g = gx
        elif kind == "relu":
            g = T.relu_backward(g, x)
        elif kind in SMOOTH_ACTIVATIONS:
            g = g * _smooth_parts(kind, x)[1]
        elif kind == "maxpool2d":
            g = T.maxpool2d_backward(g, trace.aux[i], x.shape)
        elif kind == "avgpool2d":
            g = T.avgpool2d_backward(g, x.shape, layer.window, layer.stride)
        elif kind == "flatten":
            g = g.reshape(x.shape)
        elif kind == "batchnorm2d":
            g = _batchnorm_backward(layer, p, x, g, trace, i, param_grads, need_params)
    return g, param_grads, output_grads


def _batchnorm_backward(layer, p, x, g, trace, i, param_grads, need_params):
    gamma = p["gamma"][None, :, None, None]
    if trace.mode == "train":
        xhat, inv_std = trace.aux[i]
        if need_params:
            param_grads[i]["gamma"] = (g * xhat).sum(axis=(0, 2, 3))
            param_grads[i]["beta"] = g.sum(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        dxhat = g * gamma
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
    inv_std = 1.0 / np.sqrt(p["running_var"] + layer.eps)
    if need_params:
        xhat = (x - p["running_mean"][None, :, None, None]) * inv_std[None, :, None, None]
        param_grads[i]["gamma"] = (g * xhat).sum(axis=(0, 2, 3))
        param_grads[i]["beta"] = g.sum(axis=(0, 2, 3))
    return g * (gamma * inv_std[None, :, None, None])


def backward(spec, params, trace, target):
    """Gradients of ``logits[n, target[n]]`` for an eval-mode trace.

    ``target`` is a class index or one index per sample.
    """
    if trace.mode != "eval":
        raise TraceMismatchError("attribution requires an eval-mode trace")
    logits = trace.logits
    n, k = logits.shape
    t = target_vector(target, n)
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"target out of range for {k} classes")
    seed = np.zeros_like(logits)
    seed[np.arange(n), t] = 1.0
    input_grad, param_grads, output_grads = backprop(spec, params, trace, seed)

    bias_grads = {}
    for i, layer in enumerate(spec.layers):
        if not layer.has_bias:
            continue
        b = layer_bias(layer, params.layers[i], trace.inputs[i])
        bias_grads[i] = output_grads[i] * _broadcast_bias(layer, b, output_grads[i].shape)
    return GradientBundle(input_grad, param_grads, output_grads, bias_grads)


# ---------------------------------------------------------------------------
# finite differences


def activation_pattern(spec, trace):
    """ReLU sign masks and max-pool winners; constant within a linear region."""
    pattern = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "relu":
            pattern.append(trace.inputs[i] > 0)
        elif layer.kind == "maxpool2d":
            pattern.append(trace.aux[i])
    return pattern


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def kink_margin(spec, trace):
    """Smallest distance to a kink: min |ReLU input| and min max-pool top-2 gap.

    All-zero pooling windows are ignored: their entries come from ReLUs that
    the first term already keeps switched off.
    """
    margin = np.inf
    for i, layer in enumerate(spec.layers):
        if layer.kind == "relu":
            margin = min(margin, float(np.abs(trace.inputs[i]).min()))
        elif layer.kind == "maxpool2d":
            x = trace.inputs[i]
            kh, kw = layer.window
            win = T._windows(x, kh, kw, layer.stride, (0, 0))
            flat = win.reshape(win.shape[:4] + (-1,))
            if flat.shape[-1] > 1:
                top2 = np.sort(flat, axis=-1)[..., -2:]
                gap = top2[..., 1] - top2[..., 0]
                # windows of exact zeros sit behind dead ReLUs and stay tied
                gap = np.where((top2[..., 1] == 0) & (top2[..., 0] == 0), np.inf, gap)
                margin = min(margin, float(gap.min()))
    return margin


def sample_off_kink_inputs(spec, params, n, rng, margin=1e-3, scale=1.0, max_tries=1000):
    """Draw ``n`` standard-normal inputs whose kink margin exceeds ``margin``."""
    out = []
    for _ in range(max_tries):
        x = rng.normal(0.0, scale, size=(1,) + tuple(spec.input_shape))
        _, trace = forward(spec, params, x)
        if kink_margin(spec, trace) > margin:
            out.append(x[0])
            if len(out) == n:
                return np.stack(out)
    raise NearKinkError(f"could not find {n} off-kink inputs in {max_tries} draws")


def _objective(spec, params, x, t, offsets=None):
    logits, trace = forward(spec, params, x, output_offsets=offsets)
    return logits[np.arange(x.shape[0]), t].sum(), trace


def _pick(size, max_coords, rng):
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def finite_difference_oracle(
    spec, params, x, target, h=1e-4, on_kink="raise", max_coords=None, seed=0
):
    """Central-difference estimate of everything :func:`backward` returns.

    Input coordinates and trainable parameters are perturbed directly. Layer
    output gradients are probed by adding ``+-h`` to a single output entry,
    and bias gradients are those numbers times the layer's additive term.

    ``on_kink="raise"`` rejects inputs whose kink margin is below ``10 h``.
    ``on_kink="skip"`` instead drops (sets to NaN) any probe whose ``+-h``
    evaluations change the activation pattern; layer-output probes are
    always dropped when they do. ``max_coords`` subsamples
    each tensor; unprobed entries are NaN.
    """
    x = T.as_tensor(x)
    t = target_vector(target, x.shape[0])
    rng = np.random.default_rng(seed)
    _, base_trace = forward(spec, params, x)
    base_pattern = activation_pattern(spec, base_trace)
    if on_kink == "raise" and kink_margin(spec, base_trace) < 10 * h:
        raise NearKinkError("input lies within 10h of a ReLU or max-pool kink")

    def central(evaluate, base, shape, check=on_kink == "skip"):
        flat = np.full(int(np.prod(shape)), np.nan)
        for j in _pick(flat.size, max_coords, rng):
            d = np.zeros(flat.size)
            d[j] = h
            fp, tp = evaluate(base + d.reshape(shape))
            fm, tm = evaluate(base - d.reshape(shape))
            if check and not (
                _same_pattern(activation_pattern(spec, tp), base_pattern)
                and _same_pattern(activation_pattern(spec, tm), base_pattern)
            ):
                continue
            flat[j] = (fp - fm) / (2 * h)
        return flat.reshape(shape)

    input_grad = central(lambda xx: _objective(spec, params, xx, t), x, x.shape)

    param_grads = [dict() for _ in spec.layers]
    for i, name, arr in params.items(trainable_only=True):

        def eval_param(v, i=i, name=name):
            p2 = params.copy()
            p2.layers[i][name] = v
            return _objective(spec, p2, x, t)

        param_grads[i][name] = central(eval_param, arr, arr.shape)

    preact_grads, bias_grads = [], {}
    for i, layer in enumerate(spec.layers):
        shape = base_trace.outputs[i].shape

        def eval_offset(off, i=i):
            return _objective(spec, params, x, t, offsets={i: off})

        # an offset on a ReLU output inside an all-zero pooling window breaks
        # the tie, so offset probes that change the pattern are always dropped
        g = central(eval_offset, np.zeros(shape), shape, check=True)
        preact_grads.append(g)
        if layer.has_bias:
            b = layer_bias(layer, params.layers[i], base_trace.inputs[i])
            bias_grads[i] = g * _broadcast_bias(layer, b, shape)
    return GradientBundle(input_grad, param_grads, preact_grads, bias_grads)


def max_relative_deviation(analytic, numeric, floor=1e-3):
    """``max |a - n| / max(|a|, |n|, floor)`` over entries where ``numeric`` is finite."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = np.isfinite(n)
    if not mask.any():
        return 0.0
    a, n = a[mask], n[mask]
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


# ---------------------------------------------------------------------------
# sensitivity of the full-gradient pair


@dataclass
class SensitivityResult:
    delta_f: float
    delta_G: float
    delta_input_grad: float


def _full_pair(bundle):
    parts = [bundle.input_grad.ravel()]
    parts += [bundle.bias_grads[i].ravel() for i in sorted(bundle.bias_grads)]
    return np.concatenate(parts)


def gradient_sensitivity_check(spec, params, x, target, layer, name="bias", index=0, delta=1.0):
    """Change in ``f`` and in ``G = (input grad, bias grads)`` when one parameter moves.

    Returns max-abs changes; ``delta_G`` is zero exactly when ``delta_f`` is.
    """
    x = T.as_tensor(x)
    if x.ndim == len(spec.input_shape):
        x = x[None]

    def evaluate(p):
        logits, trace = forward(spec, p, x)
        t = target_vector(target, x.shape[0])
        return logits[np.arange(x.shape[0]), t], backward(spec, p, trace, t)

    f0, g0 = evaluate(params)
    moved = params.copy()
    arr = moved.layers[layer][name]
    arr.reshape(-1)[index] += delta
    f1, g1 = evaluate(moved)
    return SensitivityResult(
        delta_f=float(np.abs(f1 - f0).max()),
        delta_G=float(np.abs(_full_pair(g1) - _full_pair(g0)).max()),
        delta_input_grad=float(np.abs(g1.input_grad - g0.input_grad).max()),
    )
