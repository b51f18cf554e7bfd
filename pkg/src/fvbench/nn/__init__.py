from .layers import AvgPool2d, Conv2d, Dense, Flatten, L2Normalize, ReLU
from .network import EmbeddingModel, load_model, parameter_gradients, save_model
from .optim import Adam

__all__ = [
    "Adam",
    "AvgPool2d",
    "Conv2d",
    "Dense",
    "EmbeddingModel",
    "Flatten",
    "L2Normalize",
    "ReLU",
    "load_model",
    "parameter_gradients",
    "save_model",
]
