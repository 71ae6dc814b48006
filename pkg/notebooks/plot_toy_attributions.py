"""
Attributions on three tiny networks
===================================

Three one- and two-input ReLU networks small enough to check by hand. Each
one shows a behaviour that a plain input gradient cannot express.
"""

import numpy as np

from fullgrad import decompose, gradient_sensitivity_check, integrated_gradients
from fullgrad.models import one_hidden_net, piecewise_ig_net, saturation_net

#############################################################################
# Saturation
# ----------
# ``f(x) = 1 - relu(1 - x)`` is flat for ``x > 1``. At ``x = 2`` the input
# gradient is zero, so gradient-style maps say nothing. The two biases
# carry the whole output.

spec, params = saturation_net(a=1.0, b=1.0)
fg = decompose(spec, params, np.array([2.0]))
print("f(2)            =", fg.f_value)
print("grad_x f * x    =", fg.input_gradient[0] * 2.0)
print("bias terms (b,a)=", fg.fc_bias_terms)

#############################################################################
# A piecewise-linear function and integrated gradients
# -----------------------------------------------------
# The network computes ``x1 + 3 x2`` on the unit square and ``3 x1 + x2``
# once both inputs pass 1. All three points below share one linear region,
# yet integrated gradients ranks the two inputs differently at each.

spec, params = piecewise_ig_net()
for point in [(4.0, 4.0), (2.0, 2.0), (1.5, 1.5)]:
    ig = integrated_gradients(spec, params, np.array(point), steps=768).values
    print(f"IG{point} = {np.round(ig, 4)}")

#############################################################################
# Sensitivity to biases
# ---------------------
# ``f = 3 relu(2x - 1) + b1``. Moving ``b1`` leaves the input gradient alone
# but shifts ``f``; the full-gradient pair notices because it includes
# the bias term.

spec, params = one_hidden_net()
r = gradient_sensitivity_check(spec, params, np.array([2.0]), 0, layer=2, delta=100.0)
print(f"b1 += 100: delta f = {r.delta_f:g}, delta input grad = {r.delta_input_grad:g}, "
      f"delta G = {r.delta_G:g}")

# a bias feeding a switched-off unit changes neither
r = gradient_sensitivity_check(spec, params, np.array([0.0]), 0, layer=0, delta=0.5)
print(f"dead b0 += 0.5: delta f = {r.delta_f:g}, delta G = {r.delta_G:g}")
