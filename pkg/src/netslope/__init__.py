"""netslope: exact slope (input-Jacobian operator p-norm) of ReLU networks.

The slope of a network at a point is the operator p-norm of its Jacobian
with respect to the input; the slope of the network is its average over a
sampled set of data points.  This package computes it exactly for dense and
small convolutional ReLU classifiers, trains such networks with SGD plus
momentum, and reproduces the slope-dynamics experiments at desk scale.
"""

from netslope.linalg import (
    frobenius_norm,
    gram_spectral,
    matrix_opnorm,
    vector_pnorm,
)
from netslope.nn import (
    Conv2D,
    Dense,
    Network,
    NetworkSpec,
    backward,
    forward,
    init_network,
    linear_network,
    load_network,
    output_jacobian,
    save_network,
    scale_at_layer,
    softmax_xent,
)
from netslope.slope import (
    SlopeReport,
    lipschitz_check,
    mean_slope,
    slope_at,
    slope_oracle,
    weight_product_bound,
)
from netslope.train import TrainConfig, TrainLog, evaluate, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "Conv2D",
    "Dense",
    "Network",
    "NetworkSpec",
    "SlopeReport",
    "TrainConfig",
    "TrainLog",
    "backward",
    "evaluate",
    "forward",
    "frobenius_norm",
    "gram_spectral",
    "init_network",
    "linear_network",
    "lipschitz_check",
    "load_network",
    "matrix_opnorm",
    "mean_slope",
    "output_jacobian",
    "save_network",
    "scale_at_layer",
    "sgd_step",
    "slope_at",
    "slope_oracle",
    "softmax_xent",
    "train",
    "vector_pnorm",
    "weight_product_bound",
]
