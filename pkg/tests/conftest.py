"""
Pytest fixtures for the low-rank compression test suite.

This module puts the compressor modules and the repository root on the
Python path and provides seeded generators, small models and datasets.
"""

import os
import sys

import numpy as np
import pytest

# Add compressor directory to Python path so modules can import each other
compressor_path = os.path.join(os.path.dirname(__file__), '..', 'compressor')
sys.path.insert(0, os.path.abspath(compressor_path))
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from model_graph import FC, Conv, MaxPool, ModelGraph, ReLU, Softmax, reference_cnn
from runtime import TrainConfig, fine_tune, make_dataset


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(1234)


@pytest.fixture
def out_dir(tmp_path):
    """Fresh output directory under pytest's tmp_path."""
    path = tmp_path / 'out'
    path.mkdir()
    return str(path)


@pytest.fixture
def small_model(rng):
    """
    Compact conv/FC network on 3×8×8 inputs with channel counts above the
    small-rank threshold.
    """
    return ModelGraph(
        layers=[
            Conv(kernel=rng.normal(0, 0.2, size=(3, 3, 3, 24)), bias=rng.normal(0, 0.1, size=24), padding=1),
            ReLU(),
            MaxPool(2, 2),
            Conv(kernel=rng.normal(0, 0.1, size=(3, 3, 24, 32)), bias=rng.normal(0, 0.1, size=32), padding=1),
            ReLU(),
            MaxPool(2, 2),
            FC(weight=rng.normal(0, 0.05, size=(24, 128)), bias=np.zeros(24)),
            ReLU(),
            FC(weight=rng.normal(0, 0.2, size=(4, 24)), bias=np.zeros(4)),
            Softmax(),
        ],
        input_shape=(3, 8, 8),
        name='small',
    )


@pytest.fixture
def tiny_dataset():
    """Four-class 8×8 dataset small enough for per-test training."""
    return make_dataset(7, image_size=8, num_classes=4, train_per_class=20, test_per_class=10)


@pytest.fixture(scope="session")
def trained_reference():
    """
    Reference CNN trained on the default dataset (session scope; slow).

    Returns:
        (model, dataset)
    """
    dataset = make_dataset(11)
    model = reference_cnn(dataset.input_shape, dataset.num_classes, rng=np.random.default_rng(5))
    cfg = TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=32, epochs=20, seed=3)
    return fine_tune(model, dataset.train, cfg), dataset


def _naive_conv2d(x, kernel, bias, stride=1, padding=0):
    n, s, h, w = x.shape
    d, _, _, t = kernel.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - d) // stride + 1
    wo = (w + 2 * padding - d) // stride + 1
    out = np.zeros((n, t, ho, wo))
    for b in range(n):
        for o in range(t):
            for i in range(ho):
                for j in range(wo):
                    total = 0.0 if bias is None else bias[o]
                    for c in range(s):
                        for a in range(d):
                            for e in range(d):
                                total += kernel[a, e, c, o] * padded[b, c, i * stride + a, j * stride + e]
                    out[b, o, i, j] = total
    return out


@pytest.fixture
def conv_oracle():
    """Direct loop convolution ``(x, kernel, bias, stride, padding) -> output``."""
    return _naive_conv2d
