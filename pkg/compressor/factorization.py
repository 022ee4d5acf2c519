"""
Truncated SVD for 2-way kernels and HOSVD (Tucker) for 4-way kernels.

Sign convention: every left singular vector is flipped so that its
largest-magnitude entry is positive (the matching right vector is flipped
with it). Ties among singular values keep the order LAPACK returns, so a
truncation inside a tie is not unique but every choice has the same error.
"""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Mapping

import numpy as np
import scipy.linalg

from common.errors import InvalidArgumentError, UndefinedRatioError
from tensor_core import as_matrix, as_tensor, matricize, multi_mode_product


@dataclass(frozen=True)
class SvdResult:
    """
    Rank-p truncated singular value decomposition ``a ≈ u diag(s) vᵀ``.

    Attributes:
        u: m×p matrix with orthonormal columns
        s: p non-negative singular values, non-increasing
        v: n×p matrix with orthonormal columns
    """
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def p(self) -> int:
        return int(self.s.shape[0])

    @property
    def shape(self) -> tuple:
        return (self.u.shape[0], self.v.shape[0])


@dataclass(frozen=True)
class TuckerResult:
    """
    Tucker form ``core ×_k factors[k]`` over the decomposed modes.

    Attributes:
        core: Core tensor B; retained rank on decomposed modes, original extent elsewhere
        factors: Map from 1-indexed mode to factor C^(mode) with orthonormal columns
        decomposed_modes: Modes carrying a factor
    """
    core: np.ndarray
    factors: Dict[int, np.ndarray]
    decomposed_modes: FrozenSet[int] = field(default_factory=frozenset)

    @property
    def ranks(self) -> Dict[int, int]:
        return {mode: int(self.factors[mode].shape[1]) for mode in sorted(self.decomposed_modes)}

    @property
    def shape(self) -> tuple:
        extents = list(self.core.shape)
        for mode, factor in self.factors.items():
            extents[mode - 1] = factor.shape[0]
        return tuple(extents)


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def truncated_svd(a: np.ndarray, p: int) -> SvdResult:
    """
    Best rank-p approximation factors of a matrix.

    Args:
        a: m×n finite matrix
        p: Retained rank, 1 <= p <= min(m, n)

    Returns:
        SvdResult with deterministic signs

    Raises:
        InvalidArgumentError: If p is out of range or a has non-finite entries
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgumentError(f"truncated_svd expects a matrix, got {a.ndim} modes")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("Matrix contains non-finite entries")
    max_rank = min(a.shape)
    if isinstance(p, bool) or not isinstance(p, (int, np.integer)) or not 1 <= p <= max_rank:
        raise InvalidArgumentError(f"Rank {p!r} out of range [1, {max_rank}] for shape {a.shape}")

    u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver='gesdd')
    u, vt = _fix_signs(u, vt)
    p = int(p)
    return SvdResult(
        u=as_matrix(u[:, :p]),
        s=as_tensor(s[:p]),
        v=as_matrix(vt[:p].T),
    )


def singular_values(a: np.ndarray) -> np.ndarray:
    """Full singular spectrum of a matrix, non-increasing."""
    return scipy.linalg.svdvals(np.asarray(a, dtype=np.float64))


def hosvd(
    t: np.ndarray,
    ranks: Mapping[int, int],
    decomposed_modes: Iterable[int] | None = None,
) -> TuckerResult:
    """
    Higher-order SVD restricted to the given modes.

    Factor C^(k) holds the leading ``ranks[k]`` left singular vectors of the
    mode-k unfolding; the core is ``t ×_k C^(k)ᵀ`` over the decomposed modes.
    Modes not listed pass through untouched. For 4-way convolution kernels
    only the channel modes 3 and 4 may be decomposed.

    Args:
        t: N-way tensor
        ranks: Map from mode to retained rank
        decomposed_modes: Modes to decompose (defaults to the keys of ``ranks``)

    Returns:
        TuckerResult

    Raises:
        InvalidArgumentError: If a rank exceeds its mode's extent or a mode is not allowed
    """
    t = as_tensor(t)
    modes = frozenset(int(m) for m in (ranks if decomposed_modes is None else decomposed_modes))
    if not modes:
        raise InvalidArgumentError("At least one mode must be decomposed")
    if t.ndim == 4 and not modes <= {3, 4}:
        raise InvalidArgumentError(
            f"Only channel modes 3 and 4 of a convolution kernel are decomposed, got {sorted(modes)}"
        )

    factors: Dict[int, np.ndarray] = {}
    for mode in sorted(modes):
        if mode not in ranks:
            raise InvalidArgumentError(f"No rank given for decomposed mode {mode}")
        unfolded = matricize(t, mode)
        rank = ranks[mode]
        if isinstance(rank, bool) or not isinstance(rank, (int, np.integer)) or not 1 <= rank <= min(unfolded.shape):
            raise InvalidArgumentError(
                f"Rank {rank!r} for mode {mode} exceeds the admissible range [1, {min(unfolded.shape)}]"
            )
        factors[mode] = truncated_svd(unfolded, int(rank)).u

    core = multi_mode_product(t, {mode: factor.T for mode, factor in factors.items()})
    return TuckerResult(core=core, factors=factors, decomposed_modes=modes)


def reconstruct(r: TuckerResult | SvdResult) -> np.ndarray:
    """
    Rebuild the approximated tensor or matrix from its factors.

    Args:
        r: TuckerResult or SvdResult

    Returns:
        Tensor (Tucker) or matrix (SVD) with the original shape
    """
    if isinstance(r, SvdResult):
        return as_matrix((r.u * r.s) @ r.v.T)
    if isinstance(r, TuckerResult):
        return multi_mode_product(r.core, r.factors)
    raise InvalidArgumentError(f"Cannot reconstruct {type(r).__name__}")


def relative_error(original: np.ndarray, approx: np.ndarray) -> float:
    """
    Relative Frobenius error ``‖original − approx‖ / ‖original‖``.

    Raises:
        InvalidArgumentError: On a shape mismatch
        UndefinedRatioError: If the original has zero norm
    """
    original = np.asarray(original, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if original.shape != approx.shape:
        raise InvalidArgumentError(f"Shape mismatch: {original.shape} vs {approx.shape}")
    norm = np.linalg.norm(original.ravel())
    if norm == 0.0:
        raise UndefinedRatioError("Relative error is undefined for a zero-norm original")
    return float(np.linalg.norm((original - approx).ravel()) / norm)
