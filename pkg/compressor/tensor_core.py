"""
Dense N-way tensor operations used by HOSVD.

Tensors are plain float64 ``numpy.ndarray`` values with 1 to 4 modes,
stored in C order and returned read-only. All mode arguments are 1-indexed
(mode 1 is axis 0).

Mode-k matricization convention: rows index mode k; columns run over the
remaining modes in increasing index order with the lowest remaining mode
varying fastest. With this ordering

    A_(k) = C^(k) B_(k) (C^(n) ⊗ ... ⊗ C^(k+1) ⊗ C^(k-1) ⊗ ... ⊗ C^(1))^T

holds for A = B ×_1 C^(1) ... ×_n C^(n), and ``fold`` is an exact inverse
of ``matricize`` (both are pure index permutations).
"""

from typing import Mapping, Sequence

import numpy as np

from common.errors import InvalidArgumentError

MAX_MODES = 4


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """
    Build an immutable float64 tensor.

    Args:
        data: Array-like values (nested lists, ndarray, flat sequence)
        shape: Optional extents; when given, ``data`` is taken as the C-order
            linearization and must contain exactly prod(shape) values

    Returns:
        Read-only float64 ndarray with 1 to 4 modes

    Raises:
        InvalidArgumentError: On empty extents, too many modes or a size mismatch
    """
    array = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if array.size != int(np.prod(shape)):
            raise InvalidArgumentError(
                f"Data length {array.size} does not match shape {shape}"
            )
        array = array.reshape(shape)
    if array.ndim < 1 or array.ndim > MAX_MODES:
        raise InvalidArgumentError(f"Tensors must have 1 to {MAX_MODES} modes, got {array.ndim}")
    if any(extent < 1 for extent in array.shape):
        raise InvalidArgumentError(f"All extents must be positive, got {array.shape}")
    array.setflags(write=False)
    return array


def as_matrix(data) -> np.ndarray:
    """Build an immutable float64 matrix (a 2-way tensor)."""
    matrix = as_tensor(data)
    if matrix.ndim != 2:
        raise InvalidArgumentError(f"Expected a matrix, got {matrix.ndim} modes")
    return matrix


def _check_mode(ndim: int, mode: int) -> int:
    if isinstance(mode, bool) or not isinstance(mode, (int, np.integer)):
        raise InvalidArgumentError(f"Mode must be an integer, got {mode!r}")
    if not 1 <= mode <= ndim:
        raise InvalidArgumentError(f"Mode {mode} out of range for a {ndim}-way tensor")
    return int(mode) - 1


def matricize(t: np.ndarray, mode: int) -> np.ndarray:
    """
    Mode-k matricization (unfolding) of a tensor.

    Args:
        t: N-way tensor
        mode: 1-indexed mode placed on the rows

    Returns:
        Matrix of shape (shape[mode], product of the remaining extents)

    Raises:
        InvalidArgumentError: If mode is out of range
    """
    t = np.asarray(t, dtype=np.float64)
    axis = _check_mode(t.ndim, mode)
    rows = t.shape[axis]
    unfolded = np.reshape(np.moveaxis(t, axis, 0), (rows, -1), order='F')
    return as_tensor(unfolded)


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """
    Inverse of ``matricize``.

    Args:
        m: Matrix produced by a mode-``mode`` unfolding
        mode: 1-indexed mode that sits on the rows of ``m``
        shape: Extents of the tensor to rebuild

    Returns:
        Tensor with the given shape

    Raises:
        InvalidArgumentError: If ``m`` is inconsistent with ``shape`` and ``mode``
    """
    m = np.asarray(m, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    axis = _check_mode(len(shape), mode)
    if m.ndim != 2:
        raise InvalidArgumentError(f"fold expects a matrix, got {m.ndim} modes")
    rest = shape[:axis] + shape[axis + 1:]
    expected = (shape[axis], int(np.prod(rest)) if rest else 1)
    if m.shape != expected:
        raise InvalidArgumentError(
            f"Matrix of shape {m.shape} cannot fold into {shape} at mode {mode} (expected {expected})"
        )
    moved = np.reshape(m, (shape[axis],) + rest, order='F')
    return as_tensor(np.moveaxis(moved, 0, axis))


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """
    k-mode product ``t ×_k m``.

    Args:
        t: N-way tensor
        m: Matrix with m.shape[1] == t.shape[mode]
        mode: 1-indexed mode to contract

    Returns:
        Tensor whose extent at ``mode`` is replaced by m.shape[0]

    Raises:
        InvalidArgumentError: On a dimension mismatch or bad mode
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    axis = _check_mode(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[axis]:
        raise InvalidArgumentError(
            f"Matrix of shape {m.shape} does not conform to mode {mode} of a tensor with shape {t.shape}"
        )
    product = np.tensordot(m, t, axes=(1, axis))
    return as_tensor(np.moveaxis(product, 0, axis))


def multi_mode_product(t: np.ndarray, factors: Mapping[int, np.ndarray]) -> np.ndarray:
    """Apply ``t ×_k factors[k]`` for every mode in ``factors``, in increasing mode order."""
    result = np.asarray(t, dtype=np.float64)
    for mode in sorted(factors):
        result = mode_product(result, factors[mode], mode)
    return as_tensor(result)


def kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Kronecker product with block structure ``a[i, j] * b``.

    Args:
        a: Left matrix
        b: Right matrix

    Returns:
        Matrix of shape (a.rows * b.rows, a.cols * b.cols)
    """
    return as_matrix(np.kron(as_matrix(a), as_matrix(b)))


def kronecker_chain(factors: Mapping[int, np.ndarray], skip: int | None = None) -> np.ndarray:
    """
    Descending Kronecker chain C^(n) ⊗ ... ⊗ C^(1), leaving out mode ``skip``.

    Args:
        factors: Map from 1-indexed mode to factor matrix
        skip: Mode to omit from the chain

    Returns:
        Chain product as a matrix (1×1 identity when nothing remains)
    """
    chain = np.ones((1, 1))
    for mode in sorted(factors, reverse=True):
        if mode == skip:
            continue
        chain = np.kron(chain, as_matrix(factors[mode]))
    return as_matrix(chain)


def tucker_unfolding(core: np.ndarray, factors: Mapping[int, np.ndarray], mode: int) -> np.ndarray:
    """
    Mode-k unfolding of ``core ×_1 C^(1) ... ×_n C^(n)`` computed through the
    Kronecker form instead of successive mode products.

    Args:
        core: Core tensor B
        factors: One factor matrix per mode of the core (all modes required)
        mode: 1-indexed mode to unfold

    Returns:
        C^(k) B_(k) (Kronecker chain without k)^T
    """
    core = np.asarray(core, dtype=np.float64)
    _check_mode(core.ndim, mode)
    missing = set(range(1, core.ndim + 1)) - set(factors)
    if missing:
        raise InvalidArgumentError(f"Missing factors for modes {sorted(missing)}")
    chain = kronecker_chain(factors, skip=mode)
    return as_matrix(np.asarray(factors[mode]) @ matricize(core, mode) @ chain.T)


def frobenius_norm(t: np.ndarray) -> float:
    """Frobenius norm of a tensor of any order."""
    return float(np.linalg.norm(np.ravel(t)))

