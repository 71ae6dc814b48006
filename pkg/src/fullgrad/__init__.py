"""Full-gradient attribution for small convolutional networks.

The network output splits exactly into input-gradient and bias-gradient
terms; FullGrad saliency maps aggregate those terms spatially. Baseline
attribution methods and saliency benchmarks share the same numpy core.
"""

from .baselines import (
    grad_cam,
    gradient_times_input,
    input_gradient_map,
    integrated_gradients,
    random_map,
    smooth_grad,
)
from .data import Dataset, load_idx, make_bars
from .decomposition import (
    FullGradients,
    PostProcessor,
    SaliencyMap,
    completeness_residual,
    decompose,
    fullgrad_saliency,
    layer_bias_map,
    postprocess,
)
from .grads import backward, finite_difference_oracle, gradient_sensitivity_check
from .network import (
    NetworkSpec,
    Parameters,
    forward,
    init_params,
    load_model,
    save_model,
    validate_spec,
)

__version__ = "0.1.0"
