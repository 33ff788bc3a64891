import os

import numpy as np
import pytest

from robusteval.dataset import synthetic_dataset
from robusteval.nncore import Dense, Flatten, Model, ModelSpec, build_model, train

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.path.join(ROOT, "data", "mnist")


def affine_model(W, b, input_shape):
    """Trained-flagged model whose logits are ``flatten(x) @ W + b``."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return Model([Flatten(), Dense(W, b)], input_shape, W.shape[1], trained=True)


def random_mlp(seed, input_shape=(4, 4, 1), hidden=6, classes=3, dropout=0.0):
    spec = ModelSpec(hidden_neurons=hidden, dropout_rate=dropout, num_classes=classes, seed=seed)
    model = build_model(spec, input_shape)
    rng = np.random.default_rng(seed + 1000)
    for layer in model.layers:
        for p in layer.params.values():
            # non-zero biases so ReLU kinks are not pinned at the origin
            p += rng.normal(scale=0.1, size=p.shape)
    model.trained = True
    return model


@pytest.fixture(scope="session")
def blobs():
    return synthetic_dataset(3, 240, shape=(12, 12, 1), num_classes=3)


@pytest.fixture(scope="session")
def blob_model(blobs):
    spec = ModelSpec(hidden_neurons=16, dropout_rate=0.0, num_classes=3, optimizer="adam", epochs=5, seed=0, batch_size=16)
    model = build_model(spec, blobs.shape)
    train(model, blobs)
    return model


def have_mnist():
    return os.path.exists(os.path.join(MNIST_DIR, "t10k-images-idx3-ubyte"))
