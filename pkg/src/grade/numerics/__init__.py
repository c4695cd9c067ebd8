"""Double-precision differentiable kernels on top of a small reverse-mode tape."""
from .kernels import (
    GUMBEL_EPS,
    LOG_EPS,
    GaussianParams,
    GRUCell,
    Linear,
    check_gradients,
    gaussian_sample,
    gru_step,
    gumbel_softmax,
    kl_categorical,
    kl_gaussian_diag,
    linear,
    log_softmax,
    row_softmax,
    safe_log,
    softmax,
)
from .optim import Adam
from .tape import Parameter, Tensor, as_tensor, backward, no_grad

__all__ = [
    "Adam", "GaussianParams", "GRUCell", "GUMBEL_EPS", "LOG_EPS", "Linear", "Parameter", "Tensor",
    "as_tensor", "backward", "check_gradients", "gaussian_sample", "gru_step", "gumbel_softmax",
    "kl_categorical", "kl_gaussian_diag", "linear", "log_softmax", "no_grad", "row_softmax", "safe_log", "softmax",
]
