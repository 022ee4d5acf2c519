"""
Runtime module: a small deterministic inference and training engine.

Provides forward and backward passes for every layer variant of
``model_graph``, softmax cross-entropy, mini-batch SGD with momentum, and
the synthetic image dataset used for fine-tuning and accuracy checks.

EXECUTION CONTRACT:
- Inputs are float64 batches shaped N × C × H × W
- Convolutions are cross-correlations computed by patch expansion (im2col)
  followed by a matrix product
- A trailing Softmax layer is folded into the loss; ``forward`` always
  returns class probabilities, even for models ending in a linear head
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from common.errors import InvalidArgumentError, MalformedManifestError, TrainingDivergedError
from model_graph import (
    FC,
    BatchNorm,
    Conv,
    FactorizedConv,
    FactorizedFC,
    FORMAT_VERSION,
    Layer,
    MaxPool,
    ModelGraph,
    ReLU,
    Softmax,
    decode_array,
    encode_arrays,
    read_bundle,
    write_bundle,
)

logger = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass
class Batch:
    """
    Inputs and integer labels.

    Attributes:
        inputs: N × C × H × W float64 array
        labels: N integer class ids
    """
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise InvalidArgumentError(f"Batch inputs must be N×C×H×W, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise InvalidArgumentError(f"Expected {self.inputs.shape[0]} labels, got shape {self.labels.shape}")
        if np.any(self.labels < 0):
            raise InvalidArgumentError("Labels must be non-negative class ids")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TrainConfig:
    """
    Fine-tuning hyperparameters.

    Attributes:
        learning_rate: SGD step size (0 freezes the weights)
        momentum: Classical momentum coefficient in [0, 1)
        batch_size: Mini-batch size
        epochs: Epochs per compression iteration (5 to 15 is typical)
        seed: Seed for mini-batch shuffling
        early_stopping: Continue past ``epochs`` while held-out accuracy improves (up to 3×)
    """
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    early_stopping: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise InvalidArgumentError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class Dataset:
    """Fixed train/test splits of a synthetic classification task."""
    train: Batch
    test: Batch
    num_classes: int
    seed: int

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.train.inputs.shape[1:])


@dataclass
class TrainingResult:
    model: ModelGraph
    losses: List[float] = field(default_factory=list)
    epochs_run: int = 0


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, d: int, stride: int, padding: int) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (d, d), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, d * d * c)
    return cols, (n, ho, wo)


def _col2im(dcols: np.ndarray, x_shape: tuple, d: int, stride: int, padding: int, out_hw: tuple) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = out_hw
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    patches = dcols.reshape(n, ho, wo, d, d, c)
    for a in range(d):
        for b in range(d):
            dx[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += \
                patches[:, :, :, a, b, :].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray], stride: int = 1, padding: int = 0):
    """
    Cross-correlation of an N×S×H×W batch with a D×D×S×T kernel.

    Returns:
        (output N×T×Ho×Wo, cache for ``conv2d_backward``)
    """
    d, _, s, t = kernel.shape
    if x.shape[1] != s:
        raise InvalidArgumentError(f"Convolution expects {s} input channels, got {x.shape[1]}")
    cols, (n, ho, wo) = _im2col(x, d, stride, padding)
    out = cols @ kernel.reshape(d * d * s, t)
    if bias is not None:
        out = out + bias
    y = out.reshape(n, ho, wo, t).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape, (ho, wo))


def conv2d_backward(dy: np.ndarray, kernel: np.ndarray, cache, stride: int = 1, padding: int = 0):
    """Gradients of ``conv2d`` with respect to input, kernel and bias."""
    cols, x_shape, out_hw = cache
    d, _, s, t = kernel.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, t)
    dkernel = (cols.T @ dy2).reshape(kernel.shape)
    dbias = dy2.sum(axis=0)
    dcols = dy2 @ kernel.reshape(d * d * s, t).T
    dx = _col2im(dcols, x_shape, d, stride, padding, out_hw)
    return dx, dkernel, dbias


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_conv(layer: Conv, x):
    y, cache = conv2d(x, layer.kernel, layer.bias, layer.stride, layer.padding)
    return y, cache


def _backward_conv(layer: Conv, cache, dy):
    dx, dkernel, dbias = conv2d_backward(dy, layer.kernel, cache, layer.stride, layer.padding)
    return dx, {'kernel': dkernel, 'bias': dbias}


def _forward_factorized_conv(layer: FactorizedConv, x):
    h1, c1 = conv2d(x, layer.first, None)
    h2, c2 = conv2d(h1, layer.middle, None, layer.stride, layer.padding)
    y, c3 = conv2d(h2, layer.last, layer.bias)
    return y, (c1, c2, c3)


def _backward_factorized_conv(layer: FactorizedConv, cache, dy):
    c1, c2, c3 = cache
    dh2, dlast, dbias = conv2d_backward(dy, layer.last, c3)
    dh1, dmiddle, _ = conv2d_backward(dh2, layer.middle, c2, layer.stride, layer.padding)
    dx, dfirst, _ = conv2d_backward(dh1, layer.first, c1)
    return dx, {'first': dfirst, 'middle': dmiddle, 'last': dlast, 'bias': dbias}


def _forward_fc(layer: FC, x):
    x2 = x.reshape(x.shape[0], -1)
    return x2 @ layer.weight.T + layer.bias, (x2, x.shape)


def _backward_fc(layer: FC, cache, dy):
    x2, x_shape = cache
    return (dy @ layer.weight).reshape(x_shape), {'weight': dy.T @ x2, 'bias': dy.sum(axis=0)}


def _forward_factorized_fc(layer: FactorizedFC, x):
    x2 = x.reshape(x.shape[0], -1)
    h = x2 @ layer.first.T
    return h @ layer.last.T + layer.bias, (x2, h, x.shape)


def _backward_factorized_fc(layer: FactorizedFC, cache, dy):
    x2, h, x_shape = cache
    dh = dy @ layer.last
    grads = {'first': dh.T @ x2, 'last': dy.T @ h, 'bias': dy.sum(axis=0)}
    return (dh @ layer.first).reshape(x_shape), grads


def _forward_batchnorm(layer: BatchNorm, x):
    inv_std = _channel_view(1.0 / np.sqrt(layer.variance + layer.epsilon), x.ndim)
    xhat = (x - _channel_view(layer.mean, x.ndim)) * inv_std
    y = _channel_view(layer.gamma, x.ndim) * xhat + _channel_view(layer.beta, x.ndim)
    return y, (xhat, inv_std)


def _backward_batchnorm(layer: BatchNorm, cache, dy):
    xhat, inv_std = cache
    axes = tuple(i for i in range(dy.ndim) if i != 1)
    grads = {'gamma': (dy * xhat).sum(axis=axes), 'beta': dy.sum(axis=axes)}
    return dy * _channel_view(layer.gamma, dy.ndim) * inv_std, grads


def _forward_relu(layer: ReLU, x):
    mask = x > 0
    return x * mask, mask


def _backward_relu(layer: ReLU, mask, dy):
    return dy * mask, {}


def _forward_maxpool(layer: MaxPool, x):
    size, stride = layer.size, layer.stride
    windows = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    flat = windows.reshape(n, c, ho, wo, size * size)
    argmax = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return y, (argmax, x.shape)


def _backward_maxpool(layer: MaxPool, cache, dy):
    argmax, x_shape = cache
    size, stride = layer.size, layer.stride
    ho, wo = dy.shape[2:]
    dx = np.zeros(x_shape)
    for offset in range(size * size):
        a, b = divmod(offset, size)
        dx[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += dy * (argmax == offset)
    return dx, {}


def _forward_softmax(layer: Softmax, x):
    y = _softmax(x)
    return y, y


def _backward_softmax(layer: Softmax, y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True)), {}


LAYER_OPS: Dict[type, Tuple[Callable, Callable]] = {
    Conv: (_forward_conv, _backward_conv),
    FactorizedConv: (_forward_factorized_conv, _backward_factorized_conv),
    FC: (_forward_fc, _backward_fc),
    FactorizedFC: (_forward_factorized_fc, _backward_factorized_fc),
    BatchNorm: (_forward_batchnorm, _backward_batchnorm),
    ReLU: (_forward_relu, _backward_relu),
    MaxPool: (_forward_maxpool, _backward_maxpool),
    Softmax: (_forward_softmax, _backward_softmax),
}


def layer_forward(layer: Layer, x: np.ndarray) -> Tuple[np.ndarray, Any]:
    """Apply one layer to a batch; returns (output, cache for layer_backward)."""
    return LAYER_OPS[type(layer)][0](layer, x)


def layer_backward(layer: Layer, cache, dy: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Back-propagate ``dy`` through one layer; returns (dx, gradients of trainable arrays)."""
    return LAYER_OPS[type(layer)][1](layer, cache, dy)


# ---------------------------------------------------------------------------
# Model-level passes
# ---------------------------------------------------------------------------

def _body(model: ModelGraph) -> List[Layer]:
    if model.layers and isinstance(model.layers[-1], Softmax):
        return model.layers[:-1]
    return model.layers


def _check_inputs(model: ModelGraph, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4 or tuple(inputs.shape[1:]) != tuple(model.input_shape):
        raise InvalidArgumentError(
            f"Input of shape {inputs.shape} does not match model input {model.input_shape}"
        )
    return inputs


def forward_logits(model: ModelGraph, inputs: np.ndarray) -> np.ndarray:
    """Pre-softmax class scores for a batch."""
    x = _check_inputs(model, inputs)
    for layer in _body(model):
        x, _ = layer_forward(layer, x)
    return x


def forward(model: ModelGraph, batch: Batch | np.ndarray) -> np.ndarray:
    """
    Class probabilities for every sample of a batch.

    Args:
        model: Model to run
        batch: Batch or raw N×C×H×W inputs

    Returns:
        N × num_classes array whose rows sum to 1

    Raises:
        InvalidArgumentError: If the inputs do not match the model's input shape
    """
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    return _softmax(forward_logits(model, inputs))


def loss_and_gradients(model: ModelGraph, inputs: np.ndarray, labels: np.ndarray) -> Tuple[float, List[Dict[str, np.ndarray]]]:
    """
    Mean softmax cross-entropy and its gradient for every layer.

    Returns:
        (loss, per-layer gradient dicts aligned with ``model.layers``)
    """
    x = _check_inputs(model, inputs)
    body = _body(model)
    caches = []
    for layer in body:
        x, cache = layer_forward(layer, x)
        caches.append(cache)

    n = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    dz = np.exp(log_probs)
    dz[np.arange(n), labels] -= 1.0
    dz /= n

    grads: List[Dict[str, np.ndarray]] = [{} for _ in model.layers]
    for index in range(len(body) - 1, -1, -1):
        dz, grads[index] = layer_backward(body[index], caches[index], dz)
    return loss, grads


def evaluate_accuracy(model: ModelGraph, split: Batch) -> float:
    """
    Top-1 accuracy on a split.

    Raises:
        InvalidArgumentError: If the split is empty
    """
    if len(split) == 0:
        raise InvalidArgumentError("Cannot evaluate on an empty split")
    correct = 0
    for start in range(0, len(split), EVAL_BATCH):
        logits = forward_logits(model, split.inputs[start:start + EVAL_BATCH])
        correct += int(np.sum(logits.argmax(axis=1) == split.labels[start:start + EVAL_BATCH]))
    return correct / len(split)


def run_training(model: ModelGraph, train: Batch, cfg: TrainConfig, monitor: Optional[Batch] = None) -> TrainingResult:
    """
    Mini-batch SGD with momentum, reporting per-epoch losses.

    Args:
        model: Starting model (not modified)
        train: Training split
        cfg: Hyperparameters
        monitor: Held-out split used by early stopping

    Returns:
        TrainingResult with the trained copy, epoch losses and epochs run

    Raises:
        TrainingDivergedError: On a non-finite loss; carries the last finite model
    """
    if len(train) == 0:
        raise InvalidArgumentError("Cannot train on an empty split")
    working = model.copy()
    last_good = working.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity: Dict[Tuple[int, str], np.ndarray] = {}
    losses: List[float] = []

    early = cfg.early_stopping and monitor is not None
    max_epochs = 3 * cfg.epochs if early else cfg.epochs
    best_loss, best_state = np.inf, None
    monitor_best, monitor_state = -1.0, None

    epoch = 0
    while epoch < max_epochs:
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_gradients(working, train.inputs[idx], train.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"Training diverged in epoch {epoch + 1}: loss is {loss}", model=last_good)
            for index, layer_grads in enumerate(grads):
                layer = working.layers[index]
                for name, grad in layer_grads.items():
                    v = velocity.get((index, name))
                    v = -cfg.learning_rate * grad if v is None else cfg.momentum * v - cfg.learning_rate * grad
                    velocity[(index, name)] = v
                    param = getattr(layer, name)
                    param += v
            total += loss * len(idx)
        epoch_loss = total / len(train)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(f"Training diverged in epoch {epoch + 1}", model=last_good)
        epoch += 1
        losses.append(epoch_loss)
        last_good = working.copy()
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, last_good
        logger.debug(f"Epoch {epoch}: training loss {epoch_loss:.5f}")

        if early and epoch >= cfg.epochs:
            accuracy = evaluate_accuracy(working, monitor)
            if accuracy <= monitor_best:
                logger.info(f"Early stopping after {epoch} epochs (held-out accuracy {monitor_best:.4f})")
                return TrainingResult(model=monitor_state, losses=losses, epochs_run=epoch)
            monitor_best, monitor_state = accuracy, last_good

    if losses[-1] > losses[0]:
        logger.warning(
            f"Final epoch loss {losses[-1]:.5f} exceeds first epoch loss {losses[0]:.5f}; returning best-seen weights"
        )
        working = best_state
    return TrainingResult(model=working, losses=losses, epochs_run=epoch)


def fine_tune(model: ModelGraph, train: Batch, cfg: TrainConfig, monitor: Optional[Batch] = None) -> ModelGraph:
    """
    Fine-tune a copy of ``model`` for ``cfg.epochs`` epochs of SGD with momentum.

    Raises:
        TrainingDivergedError: On a non-finite loss
    """
    return run_training(model, train, cfg, monitor).model


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

def _pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = (size - 1) / 2 + rng.uniform(-2, 2, size=2)
    period = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    if label == 0:
        return 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + phase)
    if label == 1:
        return 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase)
    if label == 2:
        return 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / (period * np.sqrt(2)) + phase)
    if label == 3:
        radius = rng.uniform(0.25, 0.38) * size
        return (np.abs(np.hypot(yy - cy, xx - cx) - radius) < 1.2).astype(np.float64)
    if label == 4:
        half = rng.uniform(0.18, 0.3) * size
        return ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)).astype(np.float64)
    if label == 5:
        width = rng.uniform(0.8, 1.6)
        return ((np.abs(yy - cy) <= width) | (np.abs(xx - cx) <= width)).astype(np.float64)
    if label == 6:
        return 0.5 + 0.5 * np.sin(2 * np.pi * (xx - yy) / (period * np.sqrt(2)) + phase)
    if label == 7:
        return 0.5 + 0.5 * np.sin(2 * np.pi * xx / period + phase) * np.sin(2 * np.pi * yy / period + phase)
    if label == 8:
        width = rng.uniform(0.8, 1.6) * np.sqrt(2)
        dy, dx = yy - cy, xx - cx
        return ((np.abs(dy - dx) <= width) | (np.abs(dy + dx) <= width)).astype(np.float64)
    if label == 9:
        radius = rng.uniform(0.2, 0.33) * size
        return (np.hypot(yy - cy, xx - cx) <= radius).astype(np.float64)
    # extra classes: stripes at further orientations
    angle = np.pi * (label - 9) / 11
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    return 0.5 + 0.5 * np.sin(2 * np.pi * proj / period + phase)


def _make_split(rng, per_class: int, num_classes: int, channels: int, size: int, noise: float) -> Batch:
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = np.empty((labels.size, channels, size, size))
    for i, label in enumerate(labels):
        colour = rng.uniform(0.4, 1.0, size=channels)
        image = colour[:, None, None] * _pattern(int(label), size, rng)[None]
        inputs[i] = image - 0.3 + noise * rng.standard_normal((channels, size, size))
    order = rng.permutation(labels.size)
    return Batch(inputs=inputs[order], labels=labels[order])


def make_dataset(
    seed: int,
    image_size: int = 16,
    channels: int = 3,
    num_classes: int = 10,
    train_per_class: int = 100,
    test_per_class: int = 100,
    noise: float = 0.5,
) -> Dataset:
    """
    Deterministic synthetic dataset of parametric patterns (stripes, checkerboards, rings, squares, discs, crosses).

    Each class has exactly ``train_per_class`` training and ``test_per_class``
    test samples; the same seed yields identical arrays.
    """
    if num_classes < 2 or train_per_class < 1 or test_per_class < 1 or image_size < 4 or channels < 1:
        raise InvalidArgumentError("Dataset needs >= 2 classes, >= 1 sample per class and images of at least 4×4")
    rng = np.random.default_rng(seed)
    train = _make_split(rng, train_per_class, num_classes, channels, image_size, noise)
    test = _make_split(rng, test_per_class, num_classes, channels, image_size, noise)
    logger.debug(f"Generated dataset seed={seed}: {len(train)} train / {len(test)} test samples")
    return Dataset(train=train, test=test, num_classes=num_classes, seed=int(seed))


def save_dataset(dataset: Dataset, path: str) -> None:
    """Cache a dataset in the model bundle format (manifest + float32 blob)."""
    splits = {'train': dataset.train, 'test': dataset.test}
    groups, blob = encode_arrays([
        {'inputs': split.inputs, 'labels': split.labels.astype(np.float64)} for split in splits.values()
    ])
    header = {
        'format_version': FORMAT_VERSION,
        'kind': 'dataset',
        'seed': dataset.seed,
        'num_classes': dataset.num_classes,
    }
    entries = [{'split': name, 'arrays': arrays} for name, arrays in zip(splits, groups)]
    write_bundle(path, header, 'splits', entries, blob)


def load_dataset(path: str) -> Dataset:
    """
    Load a dataset cached by ``save_dataset``.

    Raises:
        ModelIOError, MalformedManifestError, ChecksumMismatchError: As for model bundles
    """
    manifest, blob = read_bundle(path)
    if manifest.get('kind') != 'dataset':
        raise MalformedManifestError(f"{path} does not hold a cached dataset")
    splits = {}
    try:
        for entry in manifest['splits']:
            arrays = {name: decode_array(blob, info, f"{entry['split']}.{name}") for name, info in entry['arrays'].items()}
            splits[entry['split']] = Batch(inputs=arrays['inputs'], labels=arrays['labels'].astype(np.int64))
        return Dataset(
            train=splits['train'],
            test=splits['test'],
            num_classes=int(manifest['num_classes']),
            seed=int(manifest['seed']),
        )
    except (KeyError, TypeError, InvalidArgumentError) as e:
        raise MalformedManifestError(f"Cached dataset {path} is incomplete: {e}") from e
