"""WideNet: mixture-of-experts transformer blocks whose attention and expert
weights are shared across depth while every block keeps its own layer norms.

Everything runs on a small numpy autodiff engine in float64.
"""

from .analysis import divergence_report, expert_utilization, ln_divergence, tokens_per_expert_estimate
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ConfigError, WideNetConfig, count_parameters, init_params, model_forward, named_parameters
from .moe import balance_loss, buffer_capacity, dispatch_with_capacity, moe_forward, route
from .tensor import NonFiniteError, RngStream, ShapeError, Tensor, backward, finite_difference_gradient, no_grad
# the training loop stays at widenet.train.train so the name keeps pointing at the submodule
from .train import DataConfig, NumericalAbort, ToyDataset, TrainConfig, evaluate

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataConfig",
    "NonFiniteError",
    "NumericalAbort",
    "RngStream",
    "ShapeError",
    "Tensor",
    "ToyDataset",
    "TrainConfig",
    "WideNetConfig",
    "backward",
    "balance_loss",
    "buffer_capacity",
    "count_parameters",
    "dispatch_with_capacity",
    "divergence_report",
    "evaluate",
    "expert_utilization",
    "finite_difference_gradient",
    "init_params",
    "ln_divergence",
    "load_checkpoint",
    "model_forward",
    "moe_forward",
    "named_parameters",
    "no_grad",
    "route",
    "save_checkpoint",
    "tokens_per_expert_estimate",
]
