"""Sequential network description, parameters, forward pass and model files."""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, ModelFormatError, SpecError

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "Parameters",
    "ActivationTrace",
    "conv",
    "dense",
    "relu",
    "sigmoid",
    "tanh",
    "maxpool",
    "avgpool",
    "batchnorm",
    "flatten",
    "validate_spec",
    "forward",
    "replay",
    "init_params",
    "save_model",
    "load_model",
    "BN_MOMENTUM",
]

KINDS = (
    "conv2d",
    "linear",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "batchnorm2d",
    "flatten",
    "sigmoid",
    "tanh",
)
SMOOTH_ACTIVATIONS = ("sigmoid", "tanh")
BN_MOMENTUM = 0.1
LOGIT_INIT_SCALE = 0.1
MANIFEST_MAGIC = "FULLGRAD-MODEL"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    in_features: int = 0
    out_features: int = 0
    window: tuple = (2, 2)
    eps: float = 1e-5
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        for name in ("kernel", "stride", "padding", "window"):
            object.__setattr__(self, name, T._pair(getattr(self, name)))
        if self.kind == "batchnorm2d" and not self.eps > 0:
            raise SpecError("batchnorm2d needs eps > 0")

    @property
    def has_params(self):
        return self.kind in ("conv2d", "linear", "batchnorm2d")

    @property
    def has_bias(self):
        """True if the layer owns an explicit or implicit additive term."""
        if self.kind in ("conv2d", "linear"):
            return self.bias
        return self.kind in ("batchnorm2d",) + SMOOTH_ACTIVATIONS

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(
                in_channels=self.in_channels,
                out_channels=self.out_channels,
                kernel=list(self.kernel),
                stride=list(self.stride),
                padding=list(self.padding),
                bias=self.bias,
            )
        elif self.kind == "linear":
            d.update(in_features=self.in_features, out_features=self.out_features, bias=self.bias)
        elif self.kind in ("maxpool2d", "avgpool2d"):
            d.update(window=list(self.window), stride=list(self.stride))
        elif self.kind == "batchnorm2d":
            d.update(in_channels=self.in_channels, eps=self.eps)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("tensors", None)
        return cls(**d)


def conv(in_channels, out_channels, kernel=3, stride=1, padding=0, bias=True):
    return LayerSpec(
        "conv2d",
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        stride=stride,
        padding=padding,
        bias=bias,
    )


def dense(in_features, out_features, bias=True):
    return LayerSpec("linear", in_features=in_features, out_features=out_features, bias=bias)


def relu():
    return LayerSpec("relu")


def sigmoid():
    return LayerSpec("sigmoid")


def tanh():
    return LayerSpec("tanh")


def maxpool(window=2, stride=None):
    return LayerSpec("maxpool2d", window=window, stride=window if stride is None else stride)


def avgpool(window=2, stride=None):
    return LayerSpec("avgpool2d", window=window, stride=window if stride is None else stride)


def batchnorm(channels, eps=1e-5):
    return LayerSpec("batchnorm2d", in_channels=channels, eps=eps)


def flatten():
    return LayerSpec("flatten")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=[LayerSpec.from_dict(layer) for layer in d["layers"]],
            input_shape=d["input_shape"],
            num_classes=d["num_classes"],
        )

    def conv_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv2d"]


def _layer_output_shape(layer, shape, index):
    def fail(msg):
        raise SpecError(f"layer {index} ({layer.kind}): {msg}", layer=index)

    kind = layer.kind
    if kind == "conv2d":
        if len(shape) != 3:
            fail(f"expects C x H x W input, got {shape}")
        if shape[0] != layer.in_channels:
            fail(f"expects {layer.in_channels} channels, got {shape[0]}")
        try:
            oh = T.conv_output_size(shape[1], layer.kernel[0], layer.stride[0], layer.padding[0])
            ow = T.conv_output_size(shape[2], layer.kernel[1], layer.stride[1], layer.padding[1])
        except DimensionError as exc:
            fail(str(exc))
        return (layer.out_channels, oh, ow)
    if kind == "linear":
        if len(shape) != 1:
            fail(f"expects a flat input, got {shape}")
        if shape[0] != layer.in_features:
            fail(f"expects {layer.in_features} features, got {shape[0]}")
        return (layer.out_features,)
    if kind in ("maxpool2d", "avgpool2d"):
        if len(shape) != 3:
            fail(f"expects C x H x W input, got {shape}")
        (kh, kw), (sh, sw) = layer.window, layer.stride
        if kh > shape[1] or kw > shape[2]:
            fail(f"window {layer.window} larger than input {shape[1:]}")
        return (shape[0], (shape[1] - kh) // sh + 1, (shape[2] - kw) // sw + 1)
    if kind == "batchnorm2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            fail(f"expects {layer.in_channels} x H x W input, got {shape}")
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def validate_spec(spec):
    """Per-layer output shapes (without the batch axis).

    Raises :class:`SpecError` naming the first layer that does not compose.
    """
    shape = tuple(spec.input_shape)
    shapes = []
    for i, layer in enumerate(spec.layers):
        shape = _layer_output_shape(layer, shape, i)
        shapes.append(shape)
    if shape != (spec.num_classes,):
        raise SpecError(
            f"network outputs {shape}, expected ({spec.num_classes},) logits",
            layer=len(spec.layers) - 1,
        )
    return shapes


def _param_shapes(layer):
    if layer.kind == "conv2d":
        shapes = {"weight": (layer.out_channels, layer.in_channels) + layer.kernel}
        if layer.bias:
            shapes["bias"] = (layer.out_channels,)
        return shapes
    if layer.kind == "linear":
        shapes = {"weight": (layer.out_features, layer.in_features)}
        if layer.bias:
            shapes["bias"] = (layer.out_features,)
        return shapes
    if layer.kind == "batchnorm2d":
        c = (layer.in_channels,)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


# batch-norm running statistics are buffers, not trainable parameters
BUFFER_NAMES = ("running_mean", "running_var")


@dataclass
class Parameters:
    """Per-layer tensors, ``layers[i]`` is a name -> array dict (empty if none)."""

    layers: list

    def copy(self):
        return Parameters([{k: v.copy() for k, v in d.items()} for d in self.layers])

    def items(self, trainable_only=False):
        for i, d in enumerate(self.layers):
            for name, arr in d.items():
                if trainable_only and name in BUFFER_NAMES:
                    continue
                yield i, name, arr

    def __getitem__(self, index):
        return self.layers[index]

    def __len__(self):
        return len(self.layers)

    def num_values(self):
        return sum(arr.size for _, _, arr in self.items())

    def check(self, spec):
        if len(self.layers) != len(spec.layers):
            raise SpecError(f"{len(self.layers)} parameter groups for {len(spec.layers)} layers")
        for i, layer in enumerate(spec.layers):
            want = _param_shapes(layer)
            have = {k: v.shape for k, v in self.layers[i].items()}
            if want != have:
                raise SpecError(f"layer {i} ({layer.kind}): parameter shapes {have} != {want}", layer=i)
            if layer.kind == "batchnorm2d" and np.any(self.layers[i]["running_var"] < 0):
                raise SpecError(f"layer {i}: negative running_var", layer=i)


def init_params(spec, seed=0):
    """He-normal weights, zero biases, identity batch norm; fully seed-determined.

    The logit layer's weights are shrunk by ``LOGIT_INIT_SCALE`` so an untrained
    classifier starts close to uniform.
    """
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    last = max(i for i, layer in enumerate(spec.layers) if layer.kind in ("conv2d", "linear"))
    layers = []
    for i, layer in enumerate(spec.layers):
        d = {}
        if layer.kind in ("conv2d", "linear"):
            shapes = _param_shapes(layer)
            fan_in = int(np.prod(shapes["weight"][1:]))
            std = np.sqrt(2.0 / fan_in)
            if i == last:
                std *= LOGIT_INIT_SCALE
            d["weight"] = rng.normal(0.0, std, size=shapes["weight"])
            if layer.bias:
                d["bias"] = np.zeros(shapes["bias"])
        elif layer.kind == "batchnorm2d":
            c = layer.in_channels
            d = {
                "gamma": np.ones(c),
                "beta": np.zeros(c),
                "running_mean": np.zeros(c),
                "running_var": np.ones(c),
            }
        layers.append(d)
    return Parameters(layers)


@dataclass
class ActivationTrace:
    """Cached per-layer inputs and outputs from one forward pass.

    ``aux[i]`` holds whatever the backward kernel of layer ``i`` needs beyond
    its input (max-pool winners, batch statistics in train mode).
    """

    inputs: list
    outputs: list
    aux: list
    mode: str = "eval"

    @property
    def logits(self):
        return self.outputs[-1]

    def __len__(self):
        return len(self.outputs)


def _apply_layer(layer, p, x, mode):
    kind = layer.kind
    aux = None
    if kind == "conv2d":
        y = T.conv2d(x, p["weight"], p.get("bias"), layer.stride, layer.padding)
    elif kind == "linear":
        y = T.linear(x, p["weight"], p.get("bias"))
    elif kind == "relu":
        y = T.relu(x)
    elif kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
    elif kind == "tanh":
        y = np.tanh(x)
    elif kind == "maxpool2d":
        y, aux = T.maxpool2d(x, layer.window, layer.stride)
    elif kind == "avgpool2d":
        y = T.avgpool2d(x, layer.window, layer.stride)
    elif kind == "flatten":
        y = x.reshape(x.shape[0], -1)
    elif kind == "batchnorm2d":
        if mode == "train":
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            y = p["gamma"][None, :, None, None] * xhat + p["beta"][None, :, None, None]
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            p["running_mean"] *= 1 - BN_MOMENTUM
            p["running_mean"] += BN_MOMENTUM * mean
            p["running_var"] *= 1 - BN_MOMENTUM
            p["running_var"] += BN_MOMENTUM * unbiased
            aux = (xhat, inv_std)
        else:
            y = T.batchnorm2d_eval(
                x, p["gamma"], p["beta"], p["running_mean"], p["running_var"], layer.eps
            )
    else:  # pragma: no cover - guarded by LayerSpec
        raise SpecError(f"unsupported layer kind {kind!r}")
    return y, aux


def forward(spec, params, x, mode="eval", output_offsets=None):
    """Run the network on a batch ``x`` of shape ``(N,) + spec.input_shape``.

    Returns ``(logits, trace)``. In ``"train"`` mode batch norm normalises with
    batch statistics and updates the running averages in ``params`` in place
    (momentum ``BN_MOMENTUM``).

    ``output_offsets`` maps a layer index to an array added to that layer's
    output; it exists for finite-difference probing of intermediate gradients.
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', not {mode!r}")
    x = T.as_tensor(x)
    if x.shape[1:] != tuple(spec.input_shape) or x.shape[0] < 1:
        raise DimensionError(
            f"input shape {x.shape} does not match (N,) + {tuple(spec.input_shape)}"
        )
    inputs, outputs, aux = [], [], []
    h = x
    for i, layer in enumerate(spec.layers):
        inputs.append(h)
        h, a = _apply_layer(layer, params.layers[i], h, mode)
        if output_offsets and i in output_offsets:
            h = h + output_offsets[i]
        outputs.append(h)
        aux.append(a)
    return h, ActivationTrace(inputs, outputs, aux, mode)


def replay(spec, params, trace):
    """Recompute every layer from its cached input; returns the final output."""
    if len(trace) != len(spec.layers):
        raise SpecError("trace length does not match layer count")
    out = None
    for i, layer in enumerate(spec.layers):
        out, _ = _apply_layer(layer, params.layers[i], trace.inputs[i], "eval")
    return out


# ---------------------------------------------------------------------------
# model files: JSON manifest + little-endian float32 blob


def _checksum(arr32):
    return zlib.crc32(arr32.tobytes()) & 0xFFFFFFFF


def save_model(spec, params, manifest_path, weights_path):
    """Write the manifest JSON and the concatenated float32 weights blob."""
    validate_spec(spec)
    params.check(spec)
    manifest = {"magic": MANIFEST_MAGIC, "version": MANIFEST_VERSION, **spec.to_dict()}
    chunks, offset = [], 0
    for i, layer in enumerate(manifest["layers"]):
        tensors = []
        for name, arr in params.layers[i].items():
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            tensors.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "crc32": _checksum(arr32),
                }
            )
            chunks.append(arr32.tobytes())
            offset += arr32.size
        layer["tensors"] = tensors
    manifest["num_values"] = offset
    _atomic_write(Path(weights_path), b"".join(chunks))
    _atomic_write(Path(manifest_path), (json.dumps(manifest, indent=2) + "\n").encode())


def _atomic_write(path, payload):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_model(manifest_path, weights_path):
    """Read a model written by :func:`save_model`; returns ``(spec, params)``.

    Values are widened to float64. Raises :class:`ModelFormatError` on a bad
    magic, a size mismatch or a per-tensor checksum mismatch.
    """
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("magic") != MANIFEST_MAGIC:
        raise ModelFormatError(f"bad manifest magic {manifest.get('magic')!r}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ModelFormatError(f"unsupported manifest version {manifest.get('version')!r}")
    blob = Path(weights_path).read_bytes()
    if len(blob) % 4:
        raise ModelFormatError(f"weights blob size {len(blob)} is not a multiple of 4")
    values = np.frombuffer(blob, dtype="<f4")
    expected = manifest.get("num_values")
    if values.size != expected:
        raise ModelFormatError(
            f"weights blob holds {values.size} values, manifest expects {expected}"
        )
    spec = NetworkSpec.from_dict(manifest)
    layers, offset = [], 0
    for i, layer in enumerate(manifest["layers"]):
        d = {}
        for t in layer.get("tensors", []):
            count = int(np.prod(t["shape"]))
            if t["offset"] != offset or offset + count > values.size:
                raise ModelFormatError(f"layer {i} tensor {t['name']!r}: bad offset")
            chunk = values[offset : offset + count]
            if _checksum(chunk) != t["crc32"]:
                raise ModelFormatError(f"layer {i} tensor {t['name']!r}: checksum mismatch")
            d[t["name"]] = chunk.astype(np.float64).reshape(t["shape"])
            offset += count
        layers.append(d)
    params = Parameters(layers)
    validate_spec(spec)
    params.check(spec)
    return spec, params
