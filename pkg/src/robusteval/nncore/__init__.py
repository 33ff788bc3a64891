"""Numpy feed-forward classifiers with exact reverse-mode derivatives."""

from .layers import Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU
from .model import (
    GradientBundle,
    Model,
    ModelSpec,
    build_model,
    cross_entropy,
    evaluate,
    forward,
    load_model,
    logit_jacobian,
    loss_and_gradients,
    save_model,
    softmax,
    train,
)
from .optim import OPTIMIZERS, Adadelta, Adagrad, Adam, RMSprop, SGD, make_optimizer
