from .layers import Adam, Params
from .lstm import attention_weights, lstm_forward, pad_sequences
from .mlp import mlp_forward
from .params import init_params, l2_penalty
from .training import (
    Batch,
    FittedModel,
    GradientCheckResult,
    ModelSpec,
    NetworkData,
    Trainer,
    TrainingLog,
    backward,
    gradient_check,
    loss,
    network_data,
    train,
)

__all__ = [
    "Adam", "Params",
    "attention_weights", "lstm_forward", "pad_sequences", "mlp_forward",
    "init_params", "l2_penalty",
    "Batch", "FittedModel", "GradientCheckResult", "ModelSpec", "NetworkData",
    "Trainer", "TrainingLog", "backward", "gradient_check", "loss", "network_data", "train",
]
