from .network import (
    BCE,
    DETECTOR,
    REGRESSOR,
    SQUARED_ERROR,
    AdamState,
    ModelParams,
    Network,
    NetworkSpec,
    adam_step,
    loss_and_gradients,
    model_forward,
)
from .modelio import load_model, save_model

__all__ = [
    "BCE", "DETECTOR", "REGRESSOR", "SQUARED_ERROR",
    "AdamState", "ModelParams", "Network", "NetworkSpec",
    "adam_step", "loss_and_gradients", "model_forward",
    "load_model", "save_model",
]
