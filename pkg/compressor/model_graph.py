"""
Network representation for the compression pipeline.

A ModelGraph is an ordered list of layers operating on a single
(channels, height, width) input. Convolution kernels are stored as
D×D×S×T tensors (spatial, spatial, input channels, output channels) so
their channel modes are modes 3 and 4, the only ones HOSVD touches.

On disk a model is a directory holding ``manifest.yaml`` (layer list,
shapes, hyperparameters, offsets and SHA-256 checksums) and
``weights.bin`` (little-endian float32, C order). Weights live in memory
as float64.
"""

import copy
import logging
import os
from dataclasses import dataclass, field, fields
from typing import ClassVar, Dict, Iterator, List, Optional, Tuple

import numpy as np
import yaml

from common.errors import (
    InvalidArgumentError,
    MalformedManifestError,
    ModelIOError,
    UnsupportedTopologyError,
    UnsupportedVersionError,
)
from common.file_utils import safe_write_file
from common.hash_utils import compute_hash, verify_hash
from factorization import SvdResult, TuckerResult

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FILE = 'manifest.yaml'
BLOB_FILE = 'weights.bin'
BLOB_DTYPE = np.dtype('<f4')


def _weights(value, ndim: int, name: str) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim != ndim:
        raise InvalidArgumentError(f"{name} must have {ndim} modes, got shape {array.shape}")
    return array


class Layer:
    """
    Mixin giving every layer variant uniform access to its arrays.

    Subclasses are dataclasses; ndarray fields are weights, everything else
    is a hyperparameter.
    """
    kind: ClassVar[str] = ''
    trainable: ClassVar[Tuple[str, ...]] = ()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}

    def hyperparameters(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self) if not isinstance(getattr(self, f.name), np.ndarray)}

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays, keyed by field name."""
        return {name: getattr(self, name) for name in self.trainable}

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays().values()))


@dataclass(eq=False)
class Conv(Layer):
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = 'conv'
    trainable: ClassVar[Tuple[str, ...]] = ('kernel', 'bias')

    def __post_init__(self):
        self.kernel = _weights(self.kernel, 4, 'Conv kernel')
        self.bias = _weights(self.bias, 1, 'Conv bias')
        d1, d2, _, t = self.kernel.shape
        if d1 != d2:
            raise InvalidArgumentError(f"Only square kernels are supported, got {d1}×{d2}")
        if self.bias.shape[0] != t:
            raise InvalidArgumentError(f"Bias length {self.bias.shape[0]} does not match {t} output channels")
        if self.stride < 1 or self.padding < 0:
            raise InvalidArgumentError(f"Invalid stride {self.stride} / padding {self.padding}")

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]


@dataclass(eq=False)
class FC(Layer):
    weight: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = 'fc'
    trainable: ClassVar[Tuple[str, ...]] = ('weight', 'bias')

    def __post_init__(self):
        self.weight = _weights(self.weight, 2, 'FC weight')
        self.bias = _weights(self.bias, 1, 'FC bias')
        if self.bias.shape[0] != self.weight.shape[0]:
            raise InvalidArgumentError(f"Bias length {self.bias.shape[0]} does not match {self.weight.shape[0]} outputs")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class FactorizedConv(Layer):
    """
    Tucker-2 convolution: 1×1 (S→R3), D×D (R3→R4, original stride/padding),
    1×1 (R4→T) carrying the bias.
    """
    first: np.ndarray
    middle: np.ndarray
    last: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = 'factorized_conv'
    trainable: ClassVar[Tuple[str, ...]] = ('first', 'middle', 'last', 'bias')

    def __post_init__(self):
        self.first = _weights(self.first, 4, 'FactorizedConv first')
        self.middle = _weights(self.middle, 4, 'FactorizedConv middle')
        self.last = _weights(self.last, 4, 'FactorizedConv last')
        self.bias = _weights(self.bias, 1, 'FactorizedConv bias')
        if self.first.shape[:2] != (1, 1) or self.last.shape[:2] != (1, 1):
            raise InvalidArgumentError("Outer factors of a FactorizedConv must be 1×1 kernels")
        s, r3 = self.first.shape[2:]
        d1, d2, m3, m4 = self.middle.shape
        r4, t = self.last.shape[2:]
        if d1 != d2 or m3 != r3 or m4 != r4:
            raise InvalidArgumentError(
                f"Inconsistent factor shapes {self.first.shape}, {self.middle.shape}, {self.last.shape}"
            )
        if not (1 <= r3 <= s and 1 <= r4 <= t):
            raise InvalidArgumentError(f"Ranks ({r3}, {r4}) violate 1 <= R3 <= {s}, 1 <= R4 <= {t}")
        if self.bias.shape[0] != t:
            raise InvalidArgumentError(f"Bias length {self.bias.shape[0]} does not match {t} output channels")

    @property
    def kernel_size(self) -> int:
        return self.middle.shape[0]

    @property
    def in_channels(self) -> int:
        return self.first.shape[2]

    @property
    def out_channels(self) -> int:
        return self.last.shape[3]

    @property
    def ranks(self) -> Tuple[int, int]:
        return self.middle.shape[2], self.middle.shape[3]


@dataclass(eq=False)
class FactorizedFC(Layer):
    """Two-factor fully connected layer: ``y = last · (first · x) + bias``."""
    first: np.ndarray
    last: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = 'factorized_fc'
    trainable: ClassVar[Tuple[str, ...]] = ('first', 'last', 'bias')

    def __post_init__(self):
        self.first = _weights(self.first, 2, 'FactorizedFC first')
        self.last = _weights(self.last, 2, 'FactorizedFC last')
        self.bias = _weights(self.bias, 1, 'FactorizedFC bias')
        p, n_in = self.first.shape
        n_out, p_last = self.last.shape
        if p != p_last:
            raise InvalidArgumentError(f"Inner ranks differ: {p} vs {p_last}")
        if not 1 <= p <= min(n_in, n_out):
            raise InvalidArgumentError(f"Rank {p} violates 1 <= p <= min({n_in}, {n_out})")
        if self.bias.shape[0] != n_out:
            raise InvalidArgumentError(f"Bias length {self.bias.shape[0]} does not match {n_out} outputs")

    @property
    def rank(self) -> int:
        return self.first.shape[0]

    @property
    def in_features(self) -> int:
        return self.first.shape[1]

    @property
    def out_features(self) -> int:
        return self.last.shape[0]

    def effective_weight(self) -> np.ndarray:
        return self.last @ self.first


@dataclass(eq=False)
class BatchNorm(Layer):
    """Per-channel normalisation with frozen running statistics."""
    mean: np.ndarray
    variance: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5
    kind: ClassVar[str] = 'batchnorm'
    trainable: ClassVar[Tuple[str, ...]] = ('gamma', 'beta')

    def __post_init__(self):
        self.mean = _weights(self.mean, 1, 'BatchNorm mean')
        self.variance = _weights(self.variance, 1, 'BatchNorm variance')
        self.gamma = _weights(self.gamma, 1, 'BatchNorm gamma')
        self.beta = _weights(self.beta, 1, 'BatchNorm beta')
        lengths = {a.shape[0] for a in (self.mean, self.variance, self.gamma, self.beta)}
        if len(lengths) != 1:
            raise InvalidArgumentError("BatchNorm statistics must share one channel count")
        if np.any(self.variance < 0) or self.epsilon <= 0:
            raise InvalidArgumentError("BatchNorm variance must be non-negative and epsilon positive")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def scale(self) -> np.ndarray:
        return self.gamma / np.sqrt(self.variance + self.epsilon)


@dataclass
class ReLU(Layer):
    kind: ClassVar[str] = 'relu'


@dataclass
class MaxPool(Layer):
    size: int = 2
    stride: int = 2
    kind: ClassVar[str] = 'maxpool'

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise InvalidArgumentError(f"Invalid pool size {self.size} / stride {self.stride}")


@dataclass
class Softmax(Layer):
    kind: ClassVar[str] = 'softmax'


LAYER_TYPES = {cls.kind: cls for cls in (Conv, FC, FactorizedConv, FactorizedFC, BatchNorm, ReLU, MaxPool, Softmax)}
DECOMPOSABLE = (Conv, FC, FactorizedConv, FactorizedFC)
LINEAR_HEADS = (FC, FactorizedFC)


def layer_output_shape(layer: Layer, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """
    Output shape of a layer for a single (unbatched) input.

    Raises:
        UnsupportedTopologyError: If the layer cannot accept ``in_shape``
    """
    if isinstance(layer, (Conv, FactorizedConv)):
        if len(in_shape) != 3 or in_shape[0] != layer.in_channels:
            raise UnsupportedTopologyError(f"{layer.kind} expects {layer.in_channels} input channels, got {in_shape}")
        _, h, w = in_shape
        d = layer.kernel_size
        ho = (h + 2 * layer.padding - d) // layer.stride + 1
        wo = (w + 2 * layer.padding - d) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise UnsupportedTopologyError(f"{layer.kind} kernel {d} does not fit input {in_shape}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, (FC, FactorizedFC)):
        features = int(np.prod(in_shape))
        if features != layer.in_features:
            raise UnsupportedTopologyError(f"{layer.kind} expects {layer.in_features} inputs, got {in_shape}")
        return (layer.out_features,)
    if isinstance(layer, BatchNorm):
        if in_shape[0] != layer.channels:
            raise UnsupportedTopologyError(f"BatchNorm over {layer.channels} channels got {in_shape}")
        return tuple(in_shape)
    if isinstance(layer, MaxPool):
        if len(in_shape) != 3:
            raise UnsupportedTopologyError(f"MaxPool expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        ho = (h - layer.size) // layer.stride + 1
        wo = (w - layer.size) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise UnsupportedTopologyError(f"Pool window {layer.size} does not fit input {in_shape}")
        return (c, ho, wo)
    if isinstance(layer, Softmax):
        if len(in_shape) != 1:
            raise UnsupportedTopologyError(f"Softmax expects a flat input, got {in_shape}")
        return tuple(in_shape)
    if isinstance(layer, ReLU):
        return tuple(in_shape)
    raise UnsupportedTopologyError(f"Unknown layer {type(layer).__name__}")


@dataclass(eq=False)
class ModelGraph:
    """
    Ordered layer list plus input shape and metadata.

    Attributes:
        layers: Layers applied in order
        input_shape: (channels, height, width) of one sample
        name: Model name
        version: Revision number, bumped on every accepted compression iteration
    """
    layers: List[Layer]
    input_shape: Tuple[int, int, int]
    name: str = 'model'
    version: int = 1

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def copy(self) -> 'ModelGraph':
        return copy.deepcopy(self)

    def output_shapes(self, input_shape: Optional[Tuple[int, ...]] = None) -> List[Tuple[int, ...]]:
        shape = tuple(input_shape or self.input_shape)
        shapes = []
        for layer in self.layers:
            shape = layer_output_shape(layer, shape)
            shapes.append(shape)
        return shapes

    def validate(self) -> None:
        """
        Check shape compatibility and the single output head.

        Raises:
            UnsupportedTopologyError: On incompatible neighbours or a missing/misplaced head
        """
        if len(self.input_shape) != 3:
            raise UnsupportedTopologyError(f"Input shape must be (C, H, W), got {self.input_shape}")
        if not self.layers:
            raise UnsupportedTopologyError("Model has no layers")
        shapes = self.output_shapes()
        if len(shapes[-1]) != 1:
            raise UnsupportedTopologyError(f"Model output must be a class vector, got {shapes[-1]}")
        for layer in self.layers[:-1]:
            if isinstance(layer, Softmax):
                raise UnsupportedTopologyError("Softmax is only allowed as the final layer")
        head = self.layers[-1]
        if isinstance(head, Softmax):
            head = self.layers[-2] if len(self.layers) > 1 else None
        if not isinstance(head, LINEAR_HEADS):
            raise UnsupportedTopologyError("Model must end in a linear (FC) head, optionally followed by Softmax")

    @property
    def num_classes(self) -> int:
        return self.output_shapes()[-1][0]

    def layer_id(self, index: int) -> str:
        return f"{index}:{self.layers[index].kind}"

    def decomposable_layers(self) -> Iterator[Tuple[int, Layer]]:
        for index, layer in enumerate(self.layers):
            if isinstance(layer, DECOMPOSABLE):
                yield index, layer

    def has_batchnorm(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """
    Remove BatchNorm layers by rescaling the layer in front of them.

    Args:
        model: Model whose every BatchNorm directly follows a Conv/FC (plain or factorized)

    Returns:
        New model without BatchNorm layers and with identical forward outputs

    Raises:
        UnsupportedTopologyError: If a BatchNorm is not preceded by a Conv/FC layer
    """
    folded = model.copy()
    layers: List[Layer] = []
    for layer in folded.layers:
        if not isinstance(layer, BatchNorm):
            layers.append(layer)
            continue
        previous = layers[-1] if layers else None
        if not isinstance(previous, DECOMPOSABLE):
            raise UnsupportedTopologyError(
                f"BatchNorm at position {len(layers)} must follow a Conv or FC layer"
            )
        scale = layer.scale()
        shift = layer.beta - layer.mean * scale
        if isinstance(previous, Conv):
            previous.kernel = previous.kernel * scale
        elif isinstance(previous, FactorizedConv):
            previous.last = previous.last * scale
        elif isinstance(previous, FC):
            previous.weight = previous.weight * scale[:, None]
        else:
            previous.last = previous.last * scale[:, None]
        previous.bias = previous.bias * scale + shift
        logger.debug(f"Folded BatchNorm into layer {len(layers) - 1} ({previous.kind})")
    folded.layers = layers
    return folded


def conv_params(d: int, s: int, t: int) -> int:
    return d * d * s * t + t


def factorized_conv_params(d: int, s: int, t: int, r3: int, r4: int) -> int:
    return s * r3 + d * d * r3 * r4 + r4 * t + t


def fc_params(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def factorized_fc_params(n_in: int, n_out: int, p: int) -> int:
    return p * n_in + n_out * p + n_out


def substitute_conv(layer: Conv | FactorizedConv, tucker: TuckerResult) -> FactorizedConv:
    """
    Replace a convolution by its Tucker-2 stack.

    For a plain Conv, ``tucker`` decomposes its kernel. For a FactorizedConv,
    ``tucker`` decomposes the middle kernel and the new channel factors are
    absorbed into the existing 1×1 layers.

    Args:
        layer: Conv or FactorizedConv
        tucker: HOSVD of the (middle) kernel over modes {3, 4}

    Returns:
        FactorizedConv with the original stride, padding and bias

    Raises:
        InvalidArgumentError: If the decomposition does not match the layer or ranks are out of bounds
    """
    if tucker.decomposed_modes != frozenset({3, 4}):
        raise InvalidArgumentError(f"Expected a Tucker form over modes {{3, 4}}, got {sorted(tucker.decomposed_modes)}")
    c3, c4 = tucker.factors[3], tucker.factors[4]
    target = layer.kernel if isinstance(layer, Conv) else layer.middle
    if tucker.shape != target.shape:
        raise InvalidArgumentError(f"Tucker form of shape {tucker.shape} does not match kernel {target.shape}")

    if isinstance(layer, Conv):
        first = c3
        last = c4.T
    else:
        first = layer.first[0, 0] @ c3
        last = c4.T @ layer.last[0, 0]
    return FactorizedConv(
        first=first[None, None],
        middle=np.array(tucker.core),
        last=last[None, None],
        bias=layer.bias.copy(),
        stride=layer.stride,
        padding=layer.padding,
    )


def substitute_fc(layer: FC | FactorizedFC, svd: SvdResult) -> FactorizedFC:
    """
    Replace a fully connected layer by two factors, splitting √S evenly.

    Args:
        layer: FC, or FactorizedFC whose effective weight was decomposed
        svd: Truncated SVD of the (effective) out×in weight

    Returns:
        FactorizedFC with first = √S·Vᵀ and last = U·√S

    Raises:
        InvalidArgumentError: If the SVD shape does not match or the rank is out of bounds
    """
    expected = (layer.out_features, layer.in_features)
    if svd.shape != expected:
        raise InvalidArgumentError(f"SVD of shape {svd.shape} does not match weight {expected}")
    root = np.sqrt(svd.s)
    return FactorizedFC(
        first=root[:, None] * svd.v.T,
        last=svd.u * root,
        bias=layer.bias.copy(),
    )


@dataclass(frozen=True)
class LayerCount:
    index: int
    kind: str
    params: int
    macs: int


@dataclass(frozen=True)
class CountReport:
    """Per-layer and total parameter and multiply-accumulate counts."""
    layers: Tuple[LayerCount, ...] = field(default_factory=tuple)

    @property
    def total_params(self) -> int:
        return sum(entry.params for entry in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(entry.macs for entry in self.layers)


def count(model: ModelGraph, input_shape: Optional[Tuple[int, int, int]] = None) -> CountReport:
    """
    Count parameters and multiply-accumulates per layer for one input sample.

    Args:
        model: Model to count
        input_shape: Optional (C, H, W) override of the model's input shape

    Returns:
        CountReport
    """
    shape = tuple(input_shape or model.input_shape)
    entries = []
    for index, layer in enumerate(model.layers):
        out_shape = layer_output_shape(layer, shape)
        if isinstance(layer, Conv):
            d, s, t = layer.kernel_size, layer.in_channels, layer.out_channels
            macs = d * d * s * t * out_shape[1] * out_shape[2]
        elif isinstance(layer, FactorizedConv):
            d, s, t = layer.kernel_size, layer.in_channels, layer.out_channels
            r3, r4 = layer.ranks
            positions = out_shape[1] * out_shape[2]
            macs = s * r3 * shape[1] * shape[2] + (d * d * r3 * r4 + r4 * t) * positions
        elif isinstance(layer, FC):
            macs = layer.in_features * layer.out_features
        elif isinstance(layer, FactorizedFC):
            macs = layer.rank * (layer.in_features + layer.out_features)
        elif isinstance(layer, BatchNorm):
            macs = int(np.prod(shape))
        else:
            macs = 0
        entries.append(LayerCount(index=index, kind=layer.kind, params=layer.param_count, macs=int(macs)))
        shape = out_shape
    return CountReport(layers=tuple(entries))


def reference_cnn(
    input_shape: Tuple[int, int, int] = (3, 16, 16),
    num_classes: int = 10,
    rng: Optional[np.random.Generator] = None,
) -> ModelGraph:
    """
    Build the reference toy CNN with He-initialised weights.

    conv3×3(C→32)/ReLU/pool, conv3×3(32→64)/ReLU/pool, FC(→64)/ReLU,
    FC(64→classes), Softmax. Channel counts sit above the small-rank
    threshold so rank weakening has room to act.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    c, h, w = input_shape

    def conv(s, t):
        return Conv(
            kernel=rng.normal(0.0, np.sqrt(2.0 / (9 * s)), size=(3, 3, s, t)),
            bias=np.zeros(t),
            stride=1,
            padding=1,
        )

    def fc(n_in, n_out):
        return FC(weight=rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)), bias=np.zeros(n_out))

    flat = 64 * (h // 4) * (w // 4)
    model = ModelGraph(
        layers=[
            conv(c, 32), ReLU(), MaxPool(2, 2),
            conv(32, 64), ReLU(), MaxPool(2, 2),
            fc(flat, 64), ReLU(),
            fc(64, num_classes), Softmax(),
        ],
        input_shape=(c, h, w),
        name='reference_cnn',
    )
    model.validate()
    return model


def _array_entry(array: np.ndarray, offset: int) -> Tuple[dict, bytes]:
    raw = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
    entry = {
        'shape': [int(s) for s in array.shape],
        'offset': offset,
        'bytes': len(raw),
        'sha256': compute_hash(raw),
    }
    return entry, raw


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def encode_arrays(array_groups: List[Dict[str, np.ndarray]]) -> Tuple[List[dict], bytes]:
    """
    Pack groups of arrays into one float32 blob.

    Args:
        array_groups: {array name: array} mappings in blob order

    Returns:
        (per-group array entries, blob bytes)
    """
    chunks = []
    offset = 0
    groups = []
    for arrays in array_groups:
        entries = {}
        for name, array in arrays.items():
            entry, raw = _array_entry(array, offset)
            entries[name] = entry
            chunks.append(raw)
            offset += len(raw)
        groups.append(entries)
    return groups, b''.join(chunks)


def decode_array(blob: bytes, entry: dict, label: str) -> np.ndarray:
    """
    Extract and verify one array from a blob.

    Raises:
        ChecksumMismatchError: If the slice is out of bounds or its hash differs
        MalformedManifestError: If the entry itself is malformed
    """
    try:
        shape = tuple(int(s) for s in entry['shape'])
        offset = int(entry['offset'])
        size = int(entry['bytes'])
        digest = entry['sha256']
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedManifestError(f"Bad array entry for {label}: {e}") from e
    if size != int(np.prod(shape)) * BLOB_DTYPE.itemsize:
        raise MalformedManifestError(f"Array {label} declares {size} bytes for shape {shape}")
    raw = blob[offset:offset + size]
    verify_hash(raw, size, digest, f"Array {label}")
    return np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64).reshape(shape)


def write_bundle(path: str, header: dict, groups_key: str, groups: List[dict], blob: bytes) -> None:
    """Write a manifest plus blob directory (shared by models and cached datasets)."""
    manifest = dict(header)
    manifest['blob'] = {'file': BLOB_FILE, 'bytes': len(blob), 'sha256': compute_hash(blob)}
    manifest[groups_key] = groups
    text = yaml.safe_dump(manifest, sort_keys=False, default_flow_style=None)
    try:
        safe_write_file(os.path.join(path, BLOB_FILE), blob)
        safe_write_file(os.path.join(path, MANIFEST_FILE), text)
    except OSError as e:
        raise ModelIOError(f"Cannot write {path}: {e}") from e


def read_bundle(path: str) -> Tuple[dict, bytes]:
    """
    Read and verify a manifest plus blob directory.

    Raises:
        ModelIOError: If files are missing or unreadable
        MalformedManifestError: If the manifest cannot be parsed
        UnsupportedVersionError: If the format version is unknown
        ChecksumMismatchError: If the blob does not match the manifest
    """
    manifest_path = os.path.join(path, MANIFEST_FILE)
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ModelIOError(f"Cannot read manifest {manifest_path}: {e}") from e
    try:
        manifest = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise MalformedManifestError(f"Manifest {manifest_path} is not valid YAML: {e}") from e
    if not isinstance(manifest, dict):
        raise MalformedManifestError(f"Manifest {manifest_path} is not a mapping")
    version = manifest.get('format_version')
    if version is None:
        raise MalformedManifestError("Manifest has no format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"Unsupported format version {version!r} (expected {FORMAT_VERSION})")
    blob_info = manifest.get('blob')
    if not isinstance(blob_info, dict) or 'sha256' not in blob_info:
        raise MalformedManifestError("Manifest has no blob section")
    blob_path = os.path.join(path, str(blob_info.get('file', BLOB_FILE)))
    try:
        with open(blob_path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise ModelIOError(f"Cannot read weight blob {blob_path}: {e}") from e
    verify_hash(blob, blob_info.get('bytes'), blob_info['sha256'], f"Weight blob {blob_path}")
    return manifest, blob


def save(model: ModelGraph, path: str) -> None:
    """
    Save a model as ``<path>/manifest.yaml`` + ``<path>/weights.bin``.

    Raises:
        ModelIOError: If the directory or files cannot be written
    """
    groups, blob = encode_arrays([layer.arrays() for layer in model.layers])
    layers = []
    for layer, arrays in zip(model.layers, groups):
        layers.append({
            'type': layer.kind,
            'params': {name: _plain(value) for name, value in layer.hyperparameters().items()},
            'arrays': arrays,
        })
    header = {
        'format_version': FORMAT_VERSION,
        'name': model.name,
        'version': int(model.version),
        'input_shape': [int(s) for s in model.input_shape],
    }
    write_bundle(path, header, 'layers', layers, blob)
    logger.info(f"Saved model '{model.name}' v{model.version} to {path} ({len(blob)} bytes)")


def load(path: str) -> ModelGraph:
    """
    Load a model saved by ``save``.

    Raises:
        ModelIOError: On filesystem failures
        MalformedManifestError: On unparsable manifests or unknown layer tags
        ChecksumMismatchError: On truncated or altered weight blobs
    """
    manifest, blob = read_bundle(path)
    layers = []
    entries = manifest.get('layers')
    if not isinstance(entries, list):
        raise MalformedManifestError("Manifest has no layer list")
    for index, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise MalformedManifestError(f"Layer entry {index} is not a mapping")
        kind = entry.get('type')
        cls = LAYER_TYPES.get(kind)
        if cls is None:
            raise MalformedManifestError(f"Unknown layer tag {kind!r} at position {index}")
        arrays = {
            name: decode_array(blob, array_entry, f"{index}:{kind}.{name}")
            for name, array_entry in (entry.get('arrays') or {}).items()
        }
        try:
            layers.append(cls(**arrays, **(entry.get('params') or {})))
        except (TypeError, InvalidArgumentError) as e:
            raise MalformedManifestError(f"Layer {index} ({kind}) cannot be built: {e}") from e

    try:
        model = ModelGraph(
            layers=layers,
            input_shape=tuple(manifest['input_shape']),
            name=str(manifest.get('name', 'model')),
            version=int(manifest.get('version', 1)),
        )
        model.validate()
    except (KeyError, TypeError, ValueError, UnsupportedTopologyError) as e:
        raise MalformedManifestError(f"Model in {path} is not well formed: {e}") from e
    logger.debug(f"Loaded model '{model.name}' v{model.version} with {len(layers)} layers from {path}")
    return model
