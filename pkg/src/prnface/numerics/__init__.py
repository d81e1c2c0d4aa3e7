"""Dense tensors with reverse-mode differentiation, layers and SGD."""

from . import tensor
from .checkpoint import CheckpointError
from .gradcheck import GradCheckReport, check_function, grad_check
from .nn import (
    EVAL,
    TRAIN,
    LstmState,
    MlpSpec,
    ParamStore,
    add_linear,
    add_lstm,
    add_mlp,
    linear,
    lstm_step,
    mlp_forward,
    softmax_cross_entropy,
)
from .optim import sgd_step
from .tensor import GraphStateError, NonFiniteError, Tensor

__all__ = [
    "EVAL",
    "TRAIN",
    "CheckpointError",
    "GradCheckReport",
    "GraphStateError",
    "LstmState",
    "MlpSpec",
    "NonFiniteError",
    "ParamStore",
    "Tensor",
    "add_linear",
    "add_lstm",
    "add_mlp",
    "check_function",
    "grad_check",
    "linear",
    "lstm_step",
    "mlp_forward",
    "sgd_step",
    "softmax_cross_entropy",
    "tensor",
]
