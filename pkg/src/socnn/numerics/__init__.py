from .gradcheck import NonDeterministicLoss, grad_check
from .layers import (EVAL, BatchNormState, MLPSpec, Mode, batch_norm_apply, init_mlp,
                     mlp_forward, softmax_rows)
from .optim import AdamState, adam_step, bn_momentum_at, cosine_annealing_lr
from .params import MissingParameterError, ParamStore
from .tensor import ShapeError, Tensor, leaky_relu

__all__ = [
    "EVAL", "AdamState", "BatchNormState", "MLPSpec", "MissingParameterError", "Mode",
    "NonDeterministicLoss", "ParamStore", "ShapeError", "Tensor", "adam_step",
    "batch_norm_apply", "bn_momentum_at", "cosine_annealing_lr", "grad_check", "init_mlp",
    "leaky_relu", "mlp_forward", "softmax_rows",
]
