"""
Benchmarks on the synthetic digit set
=====================================

Train the desk CNN on seven-segment digits, then run pixel perturbation,
digit flipping and the removal-fraction table. ROAR retrains once per
(k, seed) and takes about a minute; set ``RUN_ROAR`` to try it.
"""

import time

import numpy as np

from fullgrad.data import make_bars
from fullgrad.evalharness import (
    TrainConfig,
    digit_flip_delta_logodds,
    evaluate_accuracy,
    mnist_pixel_perturbation,
    pixel_perturbation_curve,
    roar_run,
    sgd_train,
)
from fullgrad.models import desk_cnn

RUN_ROAR = False

train = make_bars(4000, seed=1)
test = make_bars(1000, seed=2, split="test")
spec = desk_cnn()

t0 = time.perf_counter()
params, log = sgd_train(spec, train, TrainConfig(epochs=6))
for entry in log:
    print(f"epoch {entry['epoch']}: loss {entry['loss']:.4f}")
print(f"test accuracy {evaluate_accuracy(spec, params, test):.3f} ({time.perf_counter() - t0:.0f} s)")

#############################################################################
# Pixel perturbation
# ------------------
# Blank the k% least salient pixels and watch the top logit. Lower is better.

images = test.subset(np.arange(500))
curves = pixel_perturbation_curve(spec, params, images, "fullgrad", [0, 1, 2, 5, 10, 20])
for label, c in curves.items():
    print(f"{label:16s}", "  ".join(f"{v:.4f}" for v in c.values))

#############################################################################
# Digit flipping
# --------------
# Remove the pixels that most favour 8 over 3 and measure the drop in
# ``logit8 - logit3``. Higher is better.

eights = test.of_class(8)
for label, method, opts in [
    ("fullgrad[noabs]", "fullgrad", {"psi": "noabs"}),
    ("fullgrad[full]", "fullgrad", {"psi": "full"}),
    ("gxi", "gxi", {}),
    ("random", "random", {}),
]:
    mean, std, _ = digit_flip_delta_logodds(spec, params, eights, method, 20, opts)
    print(f"{label:16s} {mean:7.2f} +- {std:.2f}")

#############################################################################
# Removal fractions 0.5 / 0.7 / 0.9

table = mnist_pixel_perturbation(spec, params, images)
for label, c in table.items():
    print(f"{label:18s}", "  ".join(f"RF {k / 100:.1f}: {v:.3f}" for k, v in zip(c.k_grid[1:], c.values[1:])))

#############################################################################
# Remove and retrain

if RUN_ROAR:
    for method in ("fullgrad", "random"):
        c = roar_run(spec, params, train, test, method, [0, 50], seeds=[1, 2, 3], config=TrainConfig(epochs=4))
        print(method, c.values)
