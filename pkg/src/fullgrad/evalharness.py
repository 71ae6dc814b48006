"""Saliency benchmarks: pixel perturbation, remove-and-retrain, digit flipping.

Every protocol is deterministic given its seeds. Saliency maps are always
computed from the model passed in and never recomputed during retraining.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .baselines import SIGNED_METHODS, saliency_batch
from .data import Dataset
from .errors import ConfigurationError, DimensionError, TrainingDivergedError
from .grads import backprop
from .network import forward, init_params

__all__ = [
    "EvalCurve",
    "TrainConfig",
    "Dataset",
    "perturb_least_salient",
    "perturb_most_salient",
    "removal_mask",
    "pixel_perturbation_curve",
    "sgd_train",
    "evaluate_accuracy",
    "roar_run",
    "digit_flip_delta_logodds",
    "mnist_pixel_perturbation",
    "table2_ordering",
    "curves_to_csv",
    "curves_to_json",
    "PERTURB_K_GRID",
    "ROAR_K_GRID",
    "RF_GRID",
]

PERTURB_K_GRID = (0, 1, 2, 5, 10, 20, 50)
ROAR_K_GRID = (0, 10, 30, 50, 70, 90)
RF_GRID = (0.5, 0.7, 0.9)
TINY = 1e-12


@dataclass
class EvalCurve:
    method: str
    k_grid: list
    values: list
    stddev: list
    n_samples: int
    seeds: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) != len(self.k_grid) or len(self.stddev) != len(self.k_grid):
            raise ValueError("values and stddev must align with k_grid")
        if 0 not in [float(k) for k in self.k_grid]:
            raise ValueError("k_grid must contain 0")

    def at(self, k):
        return self.values[[float(v) for v in self.k_grid].index(float(k))]

    def std_at(self, k):
        return self.stddev[[float(v) for v in self.k_grid].index(float(k))]


def _fmt(v):
    return repr(float(v))


def curves_to_csv(curves):
    """CSV text with columns ``method,k,mean,stddev,n``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "k", "mean", "stddev", "n"])
    for curve in curves:
        for k, v, s in zip(curve.k_grid, curve.values, curve.stddev):
            writer.writerow([curve.method, _fmt(k), _fmt(v), _fmt(s), curve.n_samples])
    return buf.getvalue()


def curves_to_json(curves):
    return json.dumps([asdict(c) for c in curves], indent=2, sort_keys=True, default=float) + "\n"


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative (momentum < 1)")


# ---------------------------------------------------------------------------
# pixel removal


def removal_mask(saliency, k, most_salient=False):
    """Boolean ``(N, H, W)`` mask of the ``floor(k * H * W / 100)`` selected pixels.

    Pixels are ranked by saliency (ascending, or descending when
    ``most_salient``) with ties going to the lowest flat index.
    """
    if not 0 <= k <= 100:
        raise ValueError(f"k must lie in [0, 100], got {k}")
    s = np.asarray(saliency, dtype=np.float64)
    squeeze = s.ndim == 2
    if squeeze:
        s = s[None]
    n, h, w = s.shape
    count = int(math.floor(k * h * w / 100 + 1e-9))
    flat = s.reshape(n, -1)
    order = np.argsort(-flat if most_salient else flat, axis=1, kind="stable")[:, :count]
    mask = np.zeros((n, h * w), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    mask = mask.reshape(n, h, w)
    return mask[0] if squeeze else mask


def _apply_mask(x, mask, fill):
    x = T.as_tensor(x)
    if x.shape[-2:] != mask.shape[-2:]:
        raise DimensionError(f"saliency shape {mask.shape[-2:]} != image shape {x.shape[-2:]}")
    out = x.copy()
    if x.ndim == 3:
        out[:, mask] = fill
    else:
        out[np.broadcast_to(mask[:, None], x.shape)] = fill
    return out


def perturb_least_salient(x, saliency, k, fill=0.0):
    """Set every channel of the ``k`` percent least salient pixels to ``fill``.

    ``x`` is ``(C, H, W)`` with an ``(H, W)`` map, or batched.
    """
    s = saliency.values if hasattr(saliency, "values") else saliency
    return _apply_mask(x, removal_mask(s, k), fill)


def perturb_most_salient(x, saliency, k, fill=0.0):
    s = saliency.values if hasattr(saliency, "values") else saliency
    return _apply_mask(x, removal_mask(s, k, most_salient=True), fill)


# ---------------------------------------------------------------------------
# pixel perturbation


def _label(method, options):
    if method == "fullgrad":
        return f"fullgrad[{options.get('psi', 'full')}]"
    return method


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _perturbation_stats(spec, params, images, method, options, grid, batch_size):
    """Per-k arrays of |fractional output change| for each image."""
    per_k = [[] for _ in grid]
    for sl in _batches(len(images), batch_size):
        x = images[sl]
        logits, _ = forward(spec, params, x)
        t = logits.argmax(axis=1)
        f0 = logits[np.arange(len(t)), t]
        opts = dict(options)
        if method == "random":
            opts["seed"] = int(options.get("seed", 0)) * 1_000_003 + sl.start
        maps = saliency_batch(method, spec, params, x, t, **opts)
        for j, k in enumerate(grid):
            if k == 0:
                per_k[j].append(np.zeros(len(t)))
                continue
            xk = _apply_mask(x, removal_mask(maps, k), options.get("fill", 0.0))
            fk = forward(spec, params, xk)[0][np.arange(len(t)), t]
            per_k[j].append(np.abs(f0 - fk) / np.maximum(np.abs(f0), TINY))
    return [np.concatenate(v) for v in per_k]


def pixel_perturbation_curve(
    spec,
    params,
    dataset,
    method="fullgrad",
    k_grid=PERTURB_K_GRID,
    seed=0,
    options=None,
    include_random=True,
    batch_size=256,
):
    """Mean |f(x) - f(x_k)| / |f(x)| after removing the k% least salient pixels.

    ``f`` is the logit of the most confident class on the clean image.
    Returns a dict label -> :class:`EvalCurve`, including a ``random``
    baseline unless ``include_random`` is false.
    """
    options = dict(options or {})
    options.setdefault("seed", seed)
    runs = [(method, options)]
    if include_random and method != "random":
        runs.append(("random", {"seed": seed, "fill": options.get("fill", 0.0)}))
    curves = {}
    for m, opts in runs:
        stats = _perturbation_stats(
            spec, params, dataset.images, m, opts, list(k_grid), batch_size
        )
        label = _label(m, opts)
        curves[label] = EvalCurve(
            method=label,
            k_grid=list(k_grid),
            values=[float(s.mean()) for s in stats],
            stddev=[float(s.std()) for s in stats],
            n_samples=len(dataset),
            seeds=[seed],
            metadata={"protocol": "pixel_perturbation", "options": _plain(opts)},
        )
    return curves


def _plain(d):
    return {k: (v if isinstance(v, (int, float, str, bool, type(None))) else str(v)) for k, v in d.items()}


# ---------------------------------------------------------------------------
# training


def evaluate_accuracy(spec, params, dataset, batch_size=512):
    correct = 0
    for sl in _batches(len(dataset), batch_size):
        logits, _ = forward(spec, params, dataset.images[sl])
        correct += int((logits.argmax(axis=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


def _loss_and_grad(logits, labels):
    logp = T.log_softmax(logits)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n, logits.argmax(axis=1) == labels


def _mean_loss(spec, params, dataset, batch_size=512):
    total = 0.0
    for sl in _batches(len(dataset), batch_size):
        logits, _ = forward(spec, params, dataset.images[sl])
        logp = T.log_softmax(logits)
        total += -logp[np.arange(sl.stop - sl.start), dataset.labels[sl]].sum()
    return total / len(dataset)


def sgd_train(spec, dataset, config=TrainConfig(), params=None):
    """Minibatch SGD with momentum on softmax cross-entropy.

    Returns ``(params, log)``. ``log[0]`` is the eval-mode loss and accuracy
    before any update; ``log[e]`` holds the running training loss and
    accuracy of epoch ``e``. Raises :class:`TrainingDivergedError` on a
    non-finite loss.
    """
    params = init_params(spec, config.seed) if params is None else params.copy()
    rng = np.random.default_rng([config.seed, 1])
    velocity = {(i, name): np.zeros_like(a) for i, name, a in params.items(trainable_only=True)}
    log = [
        {
            "epoch": 0,
            "loss": float(_mean_loss(spec, params, dataset)),
            "accuracy": evaluate_accuracy(spec, params, dataset),
        }
    ]
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for sl in _batches(n, config.batch_size):
            idx = order[sl]
            if len(idx) < 2 and n > 1:
                continue  # batch-norm statistics need at least two samples
            logits, trace = forward(spec, params, dataset.images[idx], mode="train")
            loss, grad, hits = _loss_and_grad(logits, dataset.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} in epoch {epoch}", epoch=epoch)
            loss_sum += loss * len(idx)
            correct += int(hits.sum())
            _, grads, _ = backprop(spec, params, trace, grad)
            for i, name, arr in params.items(trainable_only=True):
                g = grads[i][name]
                if config.weight_decay and name == "weight":
                    g = g + config.weight_decay * arr
                v = velocity[(i, name)]
                v *= config.momentum
                v += g
                arr -= config.lr * v
        log.append({"epoch": epoch, "loss": float(loss_sum / n), "accuracy": correct / n})
    return params, log


# ---------------------------------------------------------------------------
# remove and retrain


def _saliency_maps(spec, params, images, method, options, batch_size=256):
    maps = []
    for sl in _batches(len(images), batch_size):
        x = images[sl]
        logits, _ = forward(spec, params, x)
        opts = dict(options)
        if method == "random":
            opts["seed"] = int(options.get("seed", 0)) * 1_000_003 + sl.start
        maps.append(saliency_batch(method, spec, params, x, logits.argmax(axis=1), **opts))
    return np.concatenate(maps)


def roar_run(
    spec,
    params,
    train,
    test,
    method="fullgrad",
    k_grid=ROAR_K_GRID,
    seeds=(1, 2, 3),
    config=TrainConfig(),
    options=None,
    fill=0.0,
):
    """Remove the k% most salient pixels from every image, retrain, test.

    Maps come from ``params`` (the original model) once, for both splits.
    Each (k, seed) pair trains a fresh model with ``config`` reseeded to
    ``seed``; the curve holds mean and stddev test accuracy over seeds.
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    options = dict(options or {})
    train_maps = _saliency_maps(spec, params, train.images, method, options)
    test_options = dict(options)
    if method == "random":
        test_options["seed"] = int(options.get("seed", 0)) + 7919
    test_maps = _saliency_maps(spec, params, test.images, method, test_options)

    values, stddev, runs = [], [], {}
    for k in k_grid:
        tr = Dataset(
            _apply_mask(train.images, removal_mask(train_maps, k, True), fill),
            train.labels,
            "train",
            train.num_classes,
        )
        te = Dataset(
            _apply_mask(test.images, removal_mask(test_maps, k, True), fill),
            test.labels,
            "test",
            test.num_classes,
        )
        accs = []
        for s in seeds:
            cfg = TrainConfig(**{**asdict(config), "seed": int(s)})
            retrained, _ = sgd_train(spec, tr, cfg)
            accs.append(evaluate_accuracy(spec, retrained, te))
        runs[str(k)] = accs
        values.append(float(np.mean(accs)))
        stddev.append(float(np.std(accs)))
    label = _label(method, options)
    return EvalCurve(
        method=label,
        k_grid=list(k_grid),
        values=values,
        stddev=stddev,
        n_samples=len(test),
        seeds=[int(s) for s in seeds],
        metadata={
            "protocol": "roar",
            "options": _plain(options),
            "train_config": asdict(config),
            "accuracies": runs,
        },
    )


# ---------------------------------------------------------------------------
# digit flipping


def digit_flip_delta_logodds(
    spec, params, dataset, method="fullgrad", k=20, options=None, source=8, target=3, batch_size=256
):
    """Mean and stddev of the drop in ``logit[source] - logit[target]``.

    The contrast map is the signed saliency for ``source`` minus that for
    ``target``; the k% pixels with the largest contrast are set to zero.
    Returns ``(mean, stddev, per_image_deltas)``.
    """
    if method not in SIGNED_METHODS:
        raise ConfigurationError(f"method {method!r} does not produce a signed map")
    options = dict(options or {})
    if method == "fullgrad":
        options.setdefault("psi", "noabs")
    if method == "gradient":
        options["signed"] = True
    deltas = []
    for sl in _batches(len(dataset), batch_size):
        x = dataset.images[sl]
        n = len(x)
        opts = dict(options)
        if method == "random":
            opts["seed"] = int(options.get("seed", 0)) * 1_000_003 + sl.start
        contrast = saliency_batch(method, spec, params, x, np.full(n, source), **opts)
        if method == "random":
            opts["seed"] += 1
        contrast = contrast - saliency_batch(method, spec, params, x, np.full(n, target), **opts)
        before = forward(spec, params, x)[0]
        xk = _apply_mask(x, removal_mask(contrast, k, most_salient=True), 0.0)
        after = forward(spec, params, xk)[0]
        deltas.append(
            (before[:, source] - before[:, target]) - (after[:, source] - after[:, target])
        )
    deltas = np.concatenate(deltas)
    return float(deltas.mean()), float(deltas.std()), deltas


# ---------------------------------------------------------------------------
# removal-fraction table


DEFAULT_TABLE_METHODS = (
    ("random", "random", {}),
    ("gradient", "gradient", {}),
    ("ig", "ig", {}),
    ("fullgrad[absonly]", "fullgrad", {"psi": "absonly"}),
    ("fullgrad[noabs]", "fullgrad", {"psi": "noabs"}),
)


def mnist_pixel_perturbation(
    spec, params, dataset, methods=DEFAULT_TABLE_METHODS, rf_grid=RF_GRID, seed=0
):
    """Pixel perturbation at removal fractions ``rf_grid`` (plus 0) for each method.

    ``methods`` is a sequence of ``(label, method, options)``.
    """
    grid = [0] + [100 * rf for rf in rf_grid]
    curves = {}
    for label, method, opts in methods:
        opts = dict(opts)
        opts.setdefault("seed", seed)
        curve = pixel_perturbation_curve(
            spec, params, dataset, method, grid, seed, opts, include_random=False
        )
        curve = next(iter(curve.values()))
        curve.method = label
        curve.metadata["rf_grid"] = list(rf_grid)
        curves[label] = curve
    return curves


def table2_ordering(curves, rf=0.5):
    """Check absonly < noabs < gradient < random at removal fraction ``rf``."""
    k = 100 * rf
    v = {name: c.at(k) for name, c in curves.items()}
    out = {
        "absonly<noabs": v["fullgrad[absonly]"] < v["fullgrad[noabs]"],
        "noabs<random": v["fullgrad[noabs]"] < v["random"],
    }
    if "gradient" in v:
        out["noabs<=gradient"] = v["fullgrad[noabs]"] <= v["gradient"]
        out["gradient<=random"] = v["gradient"] <= v["random"]
    return out
