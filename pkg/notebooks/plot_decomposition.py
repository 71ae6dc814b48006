"""
Full-gradient decomposition of a small CNN
==========================================

Split a logit into an input term and one term per bias, check that the
pieces add back up, and turn them into saliency maps.
"""

from pathlib import Path

import numpy as np

from fullgrad import (
    PostProcessor,
    completeness_residual,
    decompose,
    fullgrad_saliency,
    layer_bias_map,
)
from fullgrad import network as nw
from fullgrad.data import make_bars
from fullgrad.imageio import overlay, write_pgm, write_ppm
from fullgrad.models import desk_cnn

rng = np.random.default_rng(0)

#############################################################################
# An untrained network with nonzero biases
# ----------------------------------------
# Random biases and batch-norm statistics make every additive term matter.

spec = desk_cnn()
params = nw.init_params(spec, seed=0)
for _, name, arr in params.items():
    if name in ("bias", "beta", "running_mean"):
        arr[...] = rng.normal(0.0, 0.3, size=arr.shape)

x = make_bars(1, seed=3).images[0]
fg = decompose(spec, params, x)
print("target class       ", fg.target)
print("f(x)               ", fg.f_value)
print("input term         ", float(np.sum(fg.input_gradient * x)))
print("spatial bias terms ", sum(float(m.sum()) for _, _, m in fg.bias_maps))
print("dense bias terms   ", float(fg.fc_bias_terms.sum()))
print("residual           ", completeness_residual(fg, x))

#############################################################################
# Where the bias terms live
# -------------------------
# Conv and batch-norm layers give one spatial map per channel.

for layer in fg.layers():
    maps = [m for i, _, m in fg.bias_maps if i == layer]
    print(f"layer {layer} ({spec.layers[layer].kind}): {len(maps)} maps of {maps[0].shape}")

#############################################################################
# Saliency maps
# -------------
# Each channel map goes through ``psi`` (abs, rescale to [0, 1], upsample)
# before summation. ``noabs`` keeps signs; ``absonly`` skips the rescale.

out = Path("fullgrad_demo")
out.mkdir(exist_ok=True)
for variant in ("full", "noabs", "absonly"):
    s = fullgrad_saliency(fg, x, PostProcessor(variant)).values
    print(f"{variant:8s} min {s.min():+.3f} max {s.max():+.3f}")
    write_pgm(s, out / f"fullgrad_{variant}.pgm")

s = fullgrad_saliency(fg, x, PostProcessor("full")).values
write_ppm(overlay(x, s), out / "overlay.ppm")
for layer in fg.layers():
    write_pgm(layer_bias_map(fg, layer, PostProcessor("full"), (16, 16)).values, out / f"layer{layer}.pgm")
print("images written to", out)
