"""
Rank selection: extreme ranks from the global analytic empirical VBMF
solution, then rank weakening.

The extreme rank of a matrix is the number of singular values that survive
the empirical variational Bayes threshold once the noise variance has been
estimated by minimising the free energy. The weakened rank moves from the
initial rank towards the extreme rank by a factor k:

    R_w = round(R_i - k (R_i - R_e))   if R_i > 20
    R_w = R_i                          otherwise

Convolution kernels are analysed on their mode-3 and mode-4 unfoldings
only; the spatial modes are never decomposed.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize

from common.errors import DegenerateInputError, InvalidArgumentError, NothingToDoError
from factorization import singular_values
from model_graph import (
    FC,
    Conv,
    FactorizedConv,
    FactorizedFC,
    ModelGraph,
    conv_params,
    factorized_conv_params,
    factorized_fc_params,
    fc_params,
)
from tensor_core import matricize

logger = logging.getLogger(__name__)

SMALL_RANK_THRESHOLD = 20
RECOMMENDED_K = (0.5, 0.7)
# FC plans carry their single SVD rank under this key
MATRIX_RANK_KEY = 1

# Absorbs representation error of k before half-up rounding
_ROUND_SLACK = 1e-9


@dataclass
class RankPlan:
    """
    Rank decision for one decomposable layer.

    Attributes:
        layer_id: "<index>:<kind>" of the layer in its model
        layer_kind: Layer kind tag
        initial_ranks: R_i per mode (max rank of each unfolding before this iteration)
        extreme_ranks: R_e per mode from VBMF, clamped to at least 1
        weakened_ranks: R_w per mode
        weakening_factor: k used for this plan, None when ranks go straight to R_e
        skip: True when the layer is left untouched this iteration
        skip_reason: Why the layer is skipped
        near_noise_modes: Modes where VBMF found no signal (R_e clamped from 0 to 1)
        params_before: Parameter count of the layer now
        params_after: Parameter count after substitution at R_w
    """
    layer_id: str
    layer_kind: str
    initial_ranks: Dict[int, int]
    extreme_ranks: Dict[int, int]
    weakened_ranks: Dict[int, int]
    weakening_factor: Optional[float]
    skip: bool = False
    skip_reason: Optional[str] = None
    near_noise_modes: Tuple[int, ...] = field(default_factory=tuple)
    params_before: int = 0
    params_after: int = 0

    @property
    def index(self) -> int:
        return int(self.layer_id.split(':', 1)[0])

    def to_dict(self) -> dict:
        return {
            'layer': self.layer_id,
            'initial_ranks': dict(self.initial_ranks),
            'extreme_ranks': dict(self.extreme_ranks),
            'weakened_ranks': dict(self.weakened_ranks),
            'k': self.weakening_factor,
            'skip': self.skip,
            'skip_reason': self.skip_reason,
            'near_noise_modes': list(self.near_noise_modes),
            'params_before': self.params_before,
            'params_after': self.params_after,
        }


def _free_energy(sigma2: float, L: int, M: int, s: np.ndarray, residual: float, xubar: float) -> float:
    """Empirical VB free energy (up to constants) as a function of the noise variance."""
    H = len(s)
    alpha = L / M
    x = s ** 2 / (M * sigma2)

    z1 = x[x > xubar]
    z2 = x[x <= xubar]
    tau_z1 = 0.5 * (z1 - (1 + alpha) + np.sqrt((z1 - (1 + alpha)) ** 2 - 4 * alpha))

    term1 = np.sum(z2 - np.log(z2))
    term2 = np.sum(z1 - tau_z1)
    term3 = np.sum(np.log((tau_z1 + 1) / z1))
    term4 = alpha * np.sum(np.log(tau_z1 / alpha + 1))

    return term1 + term2 + term3 + term4 + residual / (M * sigma2) + (L - H) * np.log(sigma2)


def vbmf_extreme_rank(a: np.ndarray) -> int:
    """
    Number of components kept by the global analytic empirical VBMF solution.

    The noise variance is estimated by bounded minimisation of the free
    energy; singular values above the resulting threshold are signal.

    Args:
        a: Finite, non-zero matrix

    Returns:
        Extreme rank in [0, min(m, n)]; 0 means no signal was found

    Raises:
        InvalidArgumentError: If ``a`` is not a finite matrix
        DegenerateInputError: If ``a`` is all zeros
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgumentError(f"VBMF expects a matrix, got {a.ndim} modes")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("Matrix contains non-finite entries")
    if not np.any(a):
        raise DegenerateInputError("Cannot estimate a rank for an all-zero matrix")

    # the analytic solution is stated for L <= M
    L, M = sorted(a.shape)
    s = singular_values(a)[:L]
    H = L
    alpha = L / M
    tauubar = 2.5129 * np.sqrt(alpha)
    xubar = (1 + tauubar) * (1 + alpha / tauubar)
    residual = 0.0

    # Work at unit noise scale so the minimiser tolerance is scale-free.
    upper_bound = np.sum(s ** 2) / (L * M)
    s = s / np.sqrt(upper_bound)
    # exact zeros break the log terms of the free energy
    s = np.maximum(s, np.finfo(np.float64).eps * s[0])
    upper_bound = 1.0

    eH_ub = int(min(np.ceil(L / (1 + alpha)) - 1, H)) - 1
    lower_bound = max(s[eH_ub + 1] ** 2 / (M * xubar), np.mean(s[eH_ub + 1:] ** 2) / M)

    if lower_bound >= upper_bound:
        sigma2 = upper_bound
    else:
        result = optimize.minimize_scalar(
            _free_energy,
            args=(L, M, s, residual, xubar),
            bounds=(lower_bound, upper_bound),
            method='bounded',
            options={'xatol': 1e-10},
        )
        sigma2 = float(result.x)

    threshold = np.sqrt(M * sigma2 * (1 + tauubar) * (1 + alpha / tauubar))
    rank = int(np.sum(s > threshold))
    logger.debug(f"VBMF on {a.shape}: relative noise variance {sigma2:.4g}, rank {rank}")
    return rank


def extreme_ranks_for_conv(kernel: np.ndarray) -> Dict[int, int]:
    """
    Extreme ranks of a D×D×S×T kernel on its channel modes.

    Returns:
        {3: R_e on the mode-3 unfolding, 4: R_e on the mode-4 unfolding}

    Raises:
        InvalidArgumentError: If the kernel is not 4-way
        DegenerateInputError: If the kernel is all zeros
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise InvalidArgumentError(f"Expected a 4-way kernel, got {kernel.ndim} modes")
    return {mode: vbmf_extreme_rank(matricize(kernel, mode)) for mode in (3, 4)}


def extreme_rank_for_fc(weight: np.ndarray) -> int:
    """Extreme rank of a fully connected weight matrix (same contract as vbmf_extreme_rank)."""
    return vbmf_extreme_rank(weight)


def weaken(r_i: int, r_e: int, k: float, threshold: int = SMALL_RANK_THRESHOLD) -> int:
    """
    Weakened rank between the extreme and the initial rank.

    Args:
        r_i: Initial rank
        r_e: Extreme rank, 1 <= r_e <= r_i
        k: Weakening factor in (0, 1); larger is more aggressive
        threshold: Initial ranks at or below this value are left unchanged

    Returns:
        round_half_up(r_i - k (r_i - r_e)) clamped to [r_e, r_i], or r_i for small ranks

    Raises:
        InvalidArgumentError: If the preconditions are violated
    """
    for name, value in (('R_i', r_i), ('R_e', r_e)):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise InvalidArgumentError(f"{name} must be an integer, got {value!r}")
    if not 1 <= r_e <= r_i:
        raise InvalidArgumentError(f"Ranks must satisfy 1 <= R_e <= R_i, got R_e={r_e}, R_i={r_i}")
    if not 0.0 < k < 1.0:
        raise InvalidArgumentError(f"Weakening factor must lie in (0, 1), got {k}")
    if r_i <= threshold:
        return int(r_i)
    weakened = math.floor(r_i - k * (r_i - r_e) + 0.5 + _ROUND_SLACK)
    return int(min(max(weakened, r_e), r_i))


def check_weakening_factor(k: float) -> float:
    """
    Validate k, warning when it leaves the recommended band.

    Raises:
        InvalidArgumentError: If k is outside (0, 1)
    """
    if not 0.0 < k < 1.0:
        raise InvalidArgumentError(f"Weakening factor must lie in (0, 1), got {k}")
    low, high = RECOMMENDED_K
    if not low <= k <= high:
        logger.warning(f"Weakening factor k={k} is outside the recommended range [{low}, {high}]")
    return float(k)


def _channel_plan(kernel: np.ndarray) -> Tuple[Dict[int, int], Dict[int, int]]:
    initial = {mode: min(matricize(kernel, mode).shape) for mode in (3, 4)}
    extreme = extreme_ranks_for_conv(kernel)
    return initial, extreme


def _plan_layer(model: ModelGraph, index: int, k: Optional[float], weaken_ranks: bool, threshold: int) -> RankPlan:
    layer = model.layers[index]

    if isinstance(layer, (Conv, FactorizedConv)):
        kernel = layer.kernel if isinstance(layer, Conv) else layer.middle
        initial, extreme = _channel_plan(kernel)
    elif isinstance(layer, FC):
        initial = {MATRIX_RANK_KEY: min(layer.weight.shape)}
        extreme = {MATRIX_RANK_KEY: extreme_rank_for_fc(layer.weight)}
    else:
        initial = {MATRIX_RANK_KEY: layer.rank}
        extreme = {MATRIX_RANK_KEY: min(extreme_rank_for_fc(layer.effective_weight()), layer.rank)}

    near_noise = tuple(mode for mode, r_e in extreme.items() if r_e == 0)
    extreme = {mode: min(max(r_e, 1), initial[mode]) for mode, r_e in extreme.items()}

    weakened = {}
    for mode, r_i in initial.items():
        if weaken_ranks:
            weakened[mode] = weaken(r_i, extreme[mode], k, threshold)
        else:
            weakened[mode] = extreme[mode] if r_i > threshold else r_i

    if isinstance(layer, Conv):
        d, s, t = layer.kernel_size, layer.in_channels, layer.out_channels
        before = conv_params(d, s, t)
        after = factorized_conv_params(d, s, t, weakened[3], weakened[4])
    elif isinstance(layer, FactorizedConv):
        d, s, t = layer.kernel_size, layer.in_channels, layer.out_channels
        before = layer.param_count
        after = factorized_conv_params(d, s, t, weakened[3], weakened[4])
    elif isinstance(layer, FC):
        before = fc_params(layer.in_features, layer.out_features)
        after = factorized_fc_params(layer.in_features, layer.out_features, weakened[MATRIX_RANK_KEY])
    else:
        before = layer.param_count
        after = factorized_fc_params(layer.in_features, layer.out_features, weakened[MATRIX_RANK_KEY])

    plan = RankPlan(
        layer_id=model.layer_id(index),
        layer_kind=layer.kind,
        initial_ranks=initial,
        extreme_ranks=extreme,
        weakened_ranks=weakened,
        weakening_factor=float(k) if weaken_ranks else None,
        near_noise_modes=near_noise,
        params_before=int(before),
        params_after=int(after),
    )
    if all(r_i <= threshold for r_i in initial.values()):
        plan.skip, plan.skip_reason = True, 'already small enough'
    elif all(weakened[mode] == initial[mode] for mode in initial):
        plan.skip, plan.skip_reason = True, 'no rank reduction'
    elif after >= before:
        plan.skip, plan.skip_reason = True, 'factorization would not reduce parameters'
    if plan.skip:
        plan.params_after = plan.params_before
    if near_noise:
        logger.warning(f"Layer {plan.layer_id}: no signal found on modes {list(near_noise)}, extreme rank clamped to 1")
    return plan


def build_rank_plan(
    model: ModelGraph,
    k: Optional[float],
    weaken_ranks: bool = True,
    small_rank_threshold: int = SMALL_RANK_THRESHOLD,
) -> List[RankPlan]:
    """
    One RankPlan per Conv/FC layer (plain or factorized) of the model.

    Args:
        model: Model to analyse
        k: Weakening factor in (0, 1); ignored and may be None when weaken_ranks is False
        weaken_ranks: When False, R_w := R_e (one-time compression baseline)
        small_rank_threshold: Initial ranks at or below this are left alone

    Returns:
        Plans in layer order; skipped layers are included and flagged

    Raises:
        InvalidArgumentError: If weakening and k is missing or outside (0, 1)
        NothingToDoError: If the model has no decomposable layer
    """
    if weaken_ranks and (k is None or not 0.0 < k < 1.0):
        raise InvalidArgumentError(f"Weakening factor must lie in (0, 1), got {k}")
    indices = [index for index, _ in model.decomposable_layers()]
    if not indices:
        raise NothingToDoError("Model has no convolutional or fully connected layers to decompose")

    plans = [_plan_layer(model, index, k, weaken_ranks, small_rank_threshold) for index in indices]
    for plan in plans:
        logger.info(
            f"Layer {plan.layer_id}: R_i={plan.initial_ranks} R_e={plan.extreme_ranks} "
            f"R_w={plan.weakened_ranks}" + (f" (skip: {plan.skip_reason})" if plan.skip else "")
        )
    return plans
