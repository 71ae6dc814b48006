"""Command-line driver.

Exit codes: 0 success, 1 runtime or tolerance failure, 2 usage error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, decomposition, evalharness, grads, imageio
from .data import load_idx, make_bars, write_idx
from .errors import FullGradError
from .models import desk_cnn
from .network import NetworkSpec, forward, load_model, save_model, validate_spec

METHOD_CHOICES = ("fullgrad", "gradient", "gxi", "ig", "smoothgrad", "smoothgradsq", "gradcam", "random")
PSI_CHOICES = ("full", "noabs", "absonly")
CORRUPTION = 1e-3  # fault-injection offset for the hidden --corrupt-layer hook


class CommandError(Exception):
    """Runtime failure reported with exit code 1."""


def _csv_numbers(text, cast=float):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _methods(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METHOD_CHOICES]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown method(s) {bad}; choose from {', '.join(METHOD_CHOICES)}"
        )
    return names


def _atomic_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _load(args):
    return load_model(args.model, args.weights)


def _dataset(args, split="test"):
    if getattr(args, "images", None):
        if not args.labels:
            raise CommandError("--images needs --labels")
        return load_idx(args.images, args.labels, split)
    n = args.synthetic
    seed = args.data_seed + (1 if split == "test" else 0)
    return make_bars(n, seed=seed, split=split)


def _method_options(args, method):
    opts = {"seed": args.seed}
    if method == "fullgrad":
        opts["psi"] = args.psi
    if getattr(args, "steps", None):
        opts["steps"] = args.steps
    if getattr(args, "sigma", None) is not None:
        opts["sigma"] = args.sigma
    return opts


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    train = _dataset(args, "train")
    test = _dataset(args, "test") if not args.images else None
    if args.test_images:
        test = load_idx(args.test_images, args.test_labels, "test")
    if args.spec:
        spec = NetworkSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = desk_cnn(size=train.images.shape[-1], channels=train.images.shape[1])
    validate_spec(spec)
    config = evalharness.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        weight_decay=args.weight_decay,
    )
    params, log = evalharness.sgd_train(spec, train, config)
    for entry in log:
        print(f"epoch {entry['epoch']}: loss {entry['loss']:.6f} accuracy {entry['accuracy']:.4f}")
    save_model(spec, params, args.model, args.weights)
    if test is not None:
        # report the accuracy of the stored (single-precision) model
        spec, params = load_model(args.model, args.weights)
        print(f"test accuracy {evalharness.evaluate_accuracy(spec, params, test):.4f}")
    return 0


def _input_image(args, spec):
    if args.image:
        img = imageio.read_pnm(args.image)
        if img.shape != tuple(spec.input_shape):
            raise CommandError(f"image shape {img.shape} does not match model input {spec.input_shape}")
        return img
    ds = _dataset(args, "test")
    if not 0 <= args.index < len(ds):
        raise CommandError(f"--index {args.index} outside dataset of {len(ds)} images")
    return ds.images[args.index]


def cmd_saliency(args):
    spec, params = _load(args)
    x = _input_image(args, spec)
    logits, _ = forward(spec, params, x[None])
    target = int(logits[0].argmax()) if args.target is None else args.target
    if not 0 <= target < spec.num_classes:
        raise CommandError(f"--target {target} outside [0, {spec.num_classes})")
    values = baselines.saliency_batch(
        args.method, spec, params, x[None], target, **_method_options(args, args.method)
    )[0]
    imageio.write_pgm(values, args.out)
    print(f"wrote {args.out} ({args.method}, target {target})")
    if args.overlay:
        imageio.write_ppm(imageio.overlay(x, values, args.alpha), args.overlay)
        print(f"wrote {args.overlay}")
    return 0


def cmd_check(args):
    spec, params = _load(args)
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.n,) + tuple(spec.input_shape))
    fgs = decomposition.decompose_batch(spec, params, x, check=False)
    corrupt = args.corrupt_layer

    worst_res = 0.0
    for s, fg in enumerate(fgs):
        res = decomposition.completeness_residual(fg, x[s])
        if corrupt is not None:
            # one bias-gradient entry raised by CORRUPTION lowers the residual by as much
            res -= CORRUPTION
        worst_res = max(worst_res, abs(res) / max(1.0, abs(fg.f_value)))
    print(f"max completeness residual (relative) {worst_res:.3e}")
    failures = []
    if worst_res > decomposition.COMPLETENESS_RTOL:
        failures.append("completeness")

    if args.bias_free:
        worst = 0.0
        for s, fg in enumerate(fgs):
            lin = float(np.sum(fg.input_gradient * x[s]))
            worst = max(worst, abs(fg.f_value - lin) / max(1.0, abs(fg.f_value)))
        print(f"max |f - grad.x| (relative) {worst:.3e}")
        if worst > 1e-10:
            failures.append("homogeneity (model has biases)")

    worst_fd, worst_where = 0.0, None
    for s in range(min(args.fd_inputs, args.n)):
        xs = x[s : s + 1]
        logits, trace = forward(spec, params, xs)
        t = int(logits[0].argmax())
        analytic = grads.backward(spec, params, trace, t)
        if corrupt is not None:
            if corrupt not in analytic.bias_grads:
                raise CommandError(f"--corrupt-layer {corrupt} has no bias gradient")
            analytic.bias_grads[corrupt] = analytic.bias_grads[corrupt] + CORRUPTION
        numeric = grads.finite_difference_oracle(
            spec, params, xs, t, h=args.h, on_kink="skip", max_coords=args.fd_coords, seed=args.seed + s
        )
        pairs = [("input", analytic.input_grad, numeric.input_grad)]
        for i in range(len(spec.layers)):
            for name, g in analytic.param_grads[i].items():
                pairs.append((f"layer {i} ({spec.layers[i].kind}) {name}", g, numeric.param_grads[i][name]))
        for i, g in analytic.bias_grads.items():
            pairs.append((f"layer {i} ({spec.layers[i].kind}) bias-gradient", g, numeric.bias_grads[i]))
        for where, a, nmr in pairs:
            dev = grads.max_relative_deviation(a, nmr)
            if dev > worst_fd:
                worst_fd, worst_where = dev, where
    print(f"max finite-difference deviation (relative) {worst_fd:.3e}" + (f" at {worst_where}" if worst_where else ""))
    if worst_fd > 1e-6:
        failures.append(f"gradient check at {worst_where}")
    if failures:
        print("FAILED: " + "; ".join(failures), file=sys.stderr)
        return 1
    print("OK")
    return 0


def _write_report(curves, out):
    out = Path(out)
    _atomic_text(out.with_suffix(".json"), evalharness.curves_to_json(curves))
    _atomic_text(out, evalharness.curves_to_csv(curves))
    print(f"wrote {out} and {out.with_suffix('.json')}")


def cmd_perturb(args):
    spec, params = _load(args)
    ds = _dataset(args, "test")
    if args.n_images:
        ds = ds.subset(slice(0, args.n_images))
    curves = []
    for method in args.method:
        result = evalharness.pixel_perturbation_curve(
            spec, params, ds, method, args.k_grid, args.seed,
            _method_options(args, method), include_random=False,
        )
        curves.extend(result.values())
    for c in curves:
        print(c.method, " ".join(f"{k:g}:{v:.4f}" for k, v in zip(c.k_grid, c.values)))
    _write_report(curves, args.out)
    return 0


def cmd_roar(args):
    spec, params = _load(args)
    train = _dataset(args, "train")
    test = load_idx(args.test_images, args.test_labels, "test") if args.test_images else _dataset(args, "test")
    if args.images and not args.test_images:
        raise CommandError("roar with IDX data needs --test-images/--test-labels")
    config = evalharness.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        momentum=args.momentum, weight_decay=args.weight_decay,
    )
    curves = []
    for method in args.method:
        c = evalharness.roar_run(
            spec, params, train, test, method, args.k_grid, args.seeds, config,
            _method_options(args, method),
        )
        print(c.method, " ".join(f"{k:g}:{v:.4f}" for k, v in zip(c.k_grid, c.values)))
        curves.append(c)
    _write_report(curves, args.out)
    return 0


def cmd_flip(args):
    spec, params = _load(args)
    ds = _dataset(args, "test").of_class(args.source)
    if args.n_images:
        ds = ds.subset(slice(0, args.n_images))
    curves = []
    for method in args.method:
        opts = _method_options(args, method)
        values, stds = [], []
        for k in args.k_grid:
            mean, std, _ = evalharness.digit_flip_delta_logodds(
                spec, params, ds, method, k, opts, args.source, args.target
            )
            values.append(mean)
            stds.append(std)
        label = evalharness._label(method, opts)
        curves.append(
            evalharness.EvalCurve(
                label, list(args.k_grid), values, stds, len(ds), [args.seed],
                {"protocol": "digit_flip", "source": args.source, "target": args.target},
            )
        )
        print(label, " ".join(f"{k:g}:{v:.4f}" for k, v in zip(args.k_grid, values)))
    _write_report(curves, args.out)
    return 0


def cmd_make_data(args):
    ds = make_bars(args.n, seed=args.data_seed, size=args.size)
    write_idx(ds, args.out_images, args.out_labels)
    print(f"wrote {len(ds)} images to {args.out_images}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model(p):
    p.add_argument("--model", required=True, help="model manifest (JSON)")
    p.add_argument("--weights", required=True, help="float32 weights blob")


def _add_data(p, default_n=1000):
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--synthetic", type=int, default=default_n, metavar="N",
                   help="use N generated bar-digit images when no IDX files are given")
    p.add_argument("--data-seed", type=int, default=0)


def _add_method_flags(p):
    p.add_argument("--psi", choices=PSI_CHOICES, default="full")
    p.add_argument("--steps", type=int, default=None, help="integrated-gradients steps")
    p.add_argument("--sigma", type=float, default=None, help="smooth-grad noise stddev")
    p.add_argument("--seed", type=int, default=0)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)


def build_parser():
    parser = argparse.ArgumentParser(prog="fullgrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write manifest + weights")
    _add_model(p)
    _add_data(p, default_n=4000)
    _add_train_flags(p)
    p.add_argument("--spec", help="network description JSON (default: built-in desk CNN)")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("saliency", help="render a saliency map as PGM (and PPM overlay)")
    _add_model(p)
    _add_data(p)
    _add_method_flags(p)
    p.add_argument("--method", choices=METHOD_CHOICES, default="fullgrad")
    p.add_argument("--image", help="input image (binary PGM/PPM)")
    p.add_argument("--index", type=int, default=0, help="dataset index when no --image")
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", help="optional PPM overlay path")
    p.add_argument("--alpha", type=float, default=imageio.OVERLAY_ALPHA)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("check", help="completeness and finite-difference gradient check")
    _add_model(p)
    p.add_argument("--n", type=int, default=100, help="number of random inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bias-free", action="store_true", help="also require f(x) = grad.x")
    p.add_argument("--fd-inputs", type=int, default=2)
    p.add_argument("--fd-coords", type=int, default=24, help="probes per tensor")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--corrupt-layer", type=int, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("perturb", help="pixel perturbation benchmark")
    _add_model(p)
    _add_data(p, default_n=500)
    _add_method_flags(p)
    p.add_argument("--method", type=_methods, default=["fullgrad", "random"])
    p.add_argument("--k-grid", type=_csv_numbers, default=list(evalharness.PERTURB_K_GRID))
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("roar", help="remove-and-retrain benchmark")
    _add_model(p)
    _add_data(p, default_n=4000)
    _add_method_flags(p)
    _add_train_flags(p)
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--method", type=_methods, default=["fullgrad", "random"])
    p.add_argument("--k-grid", type=_csv_numbers, default=list(evalharness.ROAR_K_GRID))
    p.add_argument("--seeds", type=lambda s: _csv_numbers(s, int), default=[1, 2, 3])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roar)

    p = sub.add_parser("flip", help="digit-flipping benchmark")
    _add_model(p)
    _add_data(p)
    _add_method_flags(p)
    p.add_argument("--method", type=_methods, default=["fullgrad", "random"])
    p.add_argument("--k-grid", type=_csv_numbers, default=[0, 10, 20])
    p.add_argument("--source", type=int, default=8)
    p.add_argument("--target", type=int, default=3)
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flip)

    p = sub.add_parser("make-data", help="write the synthetic bar-digit set as IDX files")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--out-images", required=True)
    p.add_argument("--out-labels", required=True)
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, FullGradError, OSError, ValueError) as exc:
        print(f"fullgrad {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
