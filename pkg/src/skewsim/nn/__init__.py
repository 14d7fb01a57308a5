from .gradcheck import grad_check
from .io import load_model, save_model
from .model import ActivationCache, Model, ModelSpec, backward, forward, softmax_cross_entropy
from .optim import LrSchedule, OptState, lr_at, sgd_momentum_step
from .params import ParamVector, Segment

__all__ = [
    "ActivationCache",
    "LrSchedule",
    "Model",
    "ModelSpec",
    "OptState",
    "ParamVector",
    "Segment",
    "backward",
    "forward",
    "grad_check",
    "load_model",
    "lr_at",
    "save_model",
    "sgd_momentum_step",
    "softmax_cross_entropy",
]
