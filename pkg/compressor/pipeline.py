"""
Iterative low-rank compression.

Each iteration measures accuracy, plans ranks (VBMF extreme rank, then
weakening), substitutes Tucker-2 stacks for convolutions and two-factor
products for fully connected layers, fine-tunes, and re-measures. The loop
continues while the accuracy drop stays below the threshold; an iteration
that breaks the threshold is discarded and the previous model returned.
"""

import logging
import os
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml
from jinja2 import Template

from common.errors import (
    InvalidArgumentError,
    ModelIOError,
    NothingToDoError,
    TrainingDivergedError,
    UnsupportedTopologyError,
)
from common.file_utils import safe_write_file
from factorization import hosvd, truncated_svd
from model_graph import (
    FC,
    Conv,
    FactorizedConv,
    FactorizedFC,
    ModelGraph,
    count,
    substitute_conv,
    substitute_fc,
)
from rank_selection import MATRIX_RANK_KEY, SMALL_RANK_THRESHOLD, RankPlan, build_rank_plan
from runtime import Batch, Dataset, TrainConfig, evaluate_accuracy, forward, run_training

logger = logging.getLogger(__name__)

REPORT_TEXT_FILE = 'report.txt'
REPORT_YAML_FILE = 'report.yaml'

ANALYSIS_NOTES = [
    'Initial ranks at or below the small-rank threshold are left unchanged, per mode.',
    'Already factorized layers are re-analysed directly: convolutions on their middle core, '
    'fully connected layers on the product of their two factors.',
    'Accuracy drop is measured in absolute percentage points against the iteration start; '
    'the cumulative drop is measured against the original model.',
]

REPORT_TEMPLATE = Template("""\
Low-rank compression report
===========================
{% for key, value in settings.items() %}{{ '%-22s' | format(key) }} {{ value }}
{% endfor %}
{{ title }}
{{ '-' * title|length }}
iter  status    params before -> after   size   MACs{% if timing %}   time{% endif %}   acc start  acc decomp  acc tuned   delta
{% for row in rows -%}
{{ '%4d' | format(row.iteration) }}  {{ '%-8s' | format(row.status) }}  {{ '%10d' | format(row.params_before) }} -> {{ '%-9d' | format(row.params_after) }} {{ '%5.2f' | format(row.params_ratio) }}x {{ '%5.2f' | format(row.macs_ratio) }}x{% if timing %} {{ '%5.2f' | format(row.time_ratio) }}x{% endif %}   {{ '%8.4f' | format(row.accuracy_before) }}  {{ '%10.4f' | format(row.accuracy_after_decomp) }}  {{ '%9.4f' | format(row.accuracy_after_finetune) }}  {{ '%+.4f' | format(row.accuracy_delta) }}
{% for plan in row.plans %}        {{ '%-20s' | format(plan.layer) }} R_i={{ plan.initial_ranks }} R_e={{ plan.extreme_ranks }} R_w={{ plan.weakened_ranks }}{% if plan.skip %} (skipped: {{ plan.skip_reason }}){% endif %}
{% endfor %}{% endfor %}
Cumulative: size {{ '%.2f' | format(cumulative.params_ratio) }}x, MACs {{ '%.2f' | format(cumulative.macs_ratio) }}x{% if timing %}, time {{ '%.2f' | format(cumulative.time_ratio) }}x{% endif %}, accuracy {{ '%+.4f' | format(cumulative.accuracy_delta) }} over {{ cumulative.accepted_iterations }} accepted iteration(s)
{% if baseline %}
One-time compression baseline: size {{ '%.2f' | format(baseline.params_ratio) }}x, MACs {{ '%.2f' | format(baseline.macs_ratio) }}x, accuracy {{ '%+.4f' | format(baseline.accuracy_delta) }}
{% endif %}
Notes:
{% for note in notes %}- {{ note }}
{% endfor %}""")


@dataclass(frozen=True)
class StopRule:
    """
    Loop termination for iterative compression.

    Attributes:
        max_iterations: Upper bound on iterations (2 to 4 is typical)
        accuracy_drop_threshold: Absolute accuracy drop that rejects an iteration
        cumulative_gate: Also reject when the drop against the original model reaches the threshold
    """
    max_iterations: int = 4
    accuracy_drop_threshold: float = 0.01
    cumulative_gate: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidArgumentError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0.0 < self.accuracy_drop_threshold < 1.0:
            raise InvalidArgumentError(
                f"Accuracy drop threshold must lie in (0, 1), got {self.accuracy_drop_threshold}"
            )


@dataclass
class IterationRecord:
    """Measurements of one compression iteration."""
    iteration: int
    plans: List[RankPlan]
    accuracy_before: float
    accuracy_after_decomp: float
    accuracy_after_finetune: float
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
    time_before: Optional[float] = None
    time_after: Optional[float] = None
    accepted: bool = True
    epochs_run: int = 0

    def to_dict(self) -> dict:
        data = {
            'iteration': self.iteration,
            'accepted': self.accepted,
            'epochs_run': self.epochs_run,
            'accuracy_before': self.accuracy_before,
            'accuracy_after_decomp': self.accuracy_after_decomp,
            'accuracy_after_finetune': self.accuracy_after_finetune,
            'params_before': self.params_before,
            'params_after': self.params_after,
            'macs_before': self.macs_before,
            'macs_after': self.macs_after,
            'layers': [plan.to_dict() for plan in self.plans],
        }
        if self.time_before is not None and self.time_after is not None:
            data['time_before'] = self.time_before
            data['time_after'] = self.time_after
        return data


@dataclass
class ComparisonResult:
    """Iterative run and one-time baseline started from the same model."""
    iterative_model: ModelGraph
    iterative_records: List[IterationRecord]
    one_time_model: ModelGraph
    one_time_records: List[IterationRecord]


@dataclass
class CompressionReport:
    text: str
    structured: Dict[str, Any] = field(default_factory=dict)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.structured, sort_keys=False)


def apply_rank_plan(model: ModelGraph, plans: List[RankPlan]) -> ModelGraph:
    """
    Substitute every non-skipped layer of ``model`` at its weakened ranks.

    Returns:
        New model; skipped layers are carried over unchanged

    Raises:
        InvalidArgumentError: If a plan does not match the layer at its index
    """
    result = model.copy()
    for plan in plans:
        if plan.skip:
            continue
        layer = result.layers[plan.index]
        if layer.kind != plan.layer_kind:
            raise InvalidArgumentError(f"Plan {plan.layer_id} does not match layer kind {layer.kind}")
        if isinstance(layer, (Conv, FactorizedConv)):
            kernel = layer.kernel if isinstance(layer, Conv) else layer.middle
            ranks = {3: plan.weakened_ranks[3], 4: plan.weakened_ranks[4]}
            result.layers[plan.index] = substitute_conv(layer, hosvd(kernel, ranks))
        elif isinstance(layer, (FC, FactorizedFC)):
            weight = layer.weight if isinstance(layer, FC) else layer.effective_weight()
            result.layers[plan.index] = substitute_fc(layer, truncated_svd(weight, plan.weakened_ranks[MATRIX_RANK_KEY]))
        else:
            raise InvalidArgumentError(f"Layer {plan.layer_id} cannot be decomposed")
        logger.debug(f"Substituted layer {plan.layer_id} at ranks {plan.weakened_ranks}")
    return result


def time_forward(model: ModelGraph, split: Batch, passes: int = 5) -> float:
    """Median wall-clock seconds of ``passes`` forward passes over a split."""
    samples = []
    for _ in range(max(passes, 1)):
        start = time.perf_counter()
        forward(model, split)
        samples.append(time.perf_counter() - start)
    return float(statistics.median(samples))


def _run_iteration(
    iteration: int,
    current: ModelGraph,
    dataset: Dataset,
    k: Optional[float],
    train_cfg: TrainConfig,
    weaken_ranks: bool,
    small_rank_threshold: int,
    include_timing: bool,
    timing_passes: int,
    accuracy_before: float,
) -> Optional[Tuple[IterationRecord, ModelGraph]]:
    plans = build_rank_plan(current, k, weaken_ranks=weaken_ranks, small_rank_threshold=small_rank_threshold)
    if all(plan.skip for plan in plans):
        return None

    candidate = apply_rank_plan(current, plans)
    accuracy_decomp = evaluate_accuracy(candidate, dataset.test)
    logger.info(f"Iteration {iteration}: accuracy after decomposition {accuracy_decomp:.4f}")

    cfg = replace(train_cfg, seed=train_cfg.seed + iteration - 1)
    monitor = dataset.test if cfg.early_stopping else None
    result = run_training(candidate, dataset.train, cfg, monitor)
    tuned = result.model
    accuracy_after = evaluate_accuracy(tuned, dataset.test)

    before, after = count(current), count(tuned)
    record = IterationRecord(
        iteration=iteration,
        plans=plans,
        accuracy_before=accuracy_before,
        accuracy_after_decomp=accuracy_decomp,
        accuracy_after_finetune=accuracy_after,
        params_before=before.total_params,
        params_after=after.total_params,
        macs_before=before.total_macs,
        macs_after=after.total_macs,
        epochs_run=result.epochs_run,
    )
    if include_timing:
        record.time_before = time_forward(current, dataset.test, timing_passes)
        record.time_after = time_forward(tuned, dataset.test, timing_passes)
    return record, tuned


def compress(
    model: ModelGraph,
    dataset: Dataset,
    k: float,
    train_cfg: TrainConfig,
    stop: StopRule,
    weaken_ranks: bool = True,
    small_rank_threshold: int = SMALL_RANK_THRESHOLD,
    include_timing: bool = True,
    timing_passes: int = 5,
) -> Tuple[ModelGraph, List[IterationRecord]]:
    """
    Run iterative low-rank compression.

    Args:
        model: BatchNorm-free model to compress (not modified)
        dataset: Train split for fine-tuning, test split for accuracy
        k: Weakening factor in (0, 1)
        train_cfg: Fine-tuning hyperparameters per iteration
        stop: Loop termination rule
        weaken_ranks: When False every layer goes straight to its extreme rank
        small_rank_threshold: Initial ranks at or below this are left alone
        include_timing: Measure forward wall-clock time before/after each iteration
        timing_passes: Timed passes per measurement (median is kept)

    Returns:
        (compressed model, one record per executed iteration); the input model
        and an empty list when nothing can be decomposed

    Raises:
        UnsupportedTopologyError: If the model still contains BatchNorm layers
        TrainingDivergedError: If fine-tuning diverges; ``records`` holds the completed iterations
    """
    if model.has_batchnorm():
        raise UnsupportedTopologyError("Fold BatchNorm layers before compressing")
    model.validate()

    current = model.copy()
    original_accuracy = evaluate_accuracy(current, dataset.test)
    accuracy = original_accuracy
    logger.info(f"Starting compression: k={k}, original accuracy {original_accuracy:.4f}")
    records: List[IterationRecord] = []

    for iteration in range(1, stop.max_iterations + 1):
        try:
            outcome = _run_iteration(
                iteration, current, dataset, k, train_cfg, weaken_ranks,
                small_rank_threshold, include_timing, timing_passes, accuracy,
            )
        except NothingToDoError:
            logger.info("No decomposable layers; model returned unchanged")
            return model, records
        except TrainingDivergedError as e:
            e.records = records
            raise
        if outcome is None:
            logger.info(f"Iteration {iteration}: every layer is skipped, stopping")
            break

        record, tuned = outcome
        records.append(record)
        drop = record.accuracy_before - record.accuracy_after_finetune
        cumulative_drop = original_accuracy - record.accuracy_after_finetune
        record.accepted = drop < stop.accuracy_drop_threshold and (
            not stop.cumulative_gate or cumulative_drop < stop.accuracy_drop_threshold
        )
        logger.info(
            f"Iteration {iteration}: params {record.params_before} -> {record.params_after}, "
            f"accuracy {record.accuracy_before:.4f} -> {record.accuracy_after_finetune:.4f} "
            f"(cumulative drop {cumulative_drop:+.4f})"
        )
        if not record.accepted:
            logger.warning(f"Iteration {iteration} rejected: accuracy drop {drop:.4f}; keeping the previous model")
            break
        current = tuned
        current.version += 1
        accuracy = record.accuracy_after_finetune

    if not records:
        return model, records
    return current, records


def compress_one_time(
    model: ModelGraph,
    dataset: Dataset,
    train_cfg: TrainConfig,
    small_rank_threshold: int = SMALL_RANK_THRESHOLD,
    include_timing: bool = True,
    timing_passes: int = 5,
) -> Tuple[ModelGraph, List[IterationRecord]]:
    """
    One-time compression baseline: a single pass at the VBMF extreme ranks.

    The result is always kept, whatever its accuracy drop.
    """
    if model.has_batchnorm():
        raise UnsupportedTopologyError("Fold BatchNorm layers before compressing")
    accuracy = evaluate_accuracy(model, dataset.test)
    try:
        outcome = _run_iteration(
            1, model, dataset, None, train_cfg, False,
            small_rank_threshold, include_timing, timing_passes, accuracy,
        )
    except NothingToDoError:
        return model, []
    if outcome is None:
        return model, []
    record, tuned = outcome
    tuned.version += 1
    return tuned, [record]


def compare_with_one_time(
    model: ModelGraph,
    dataset: Dataset,
    k: float,
    train_cfg: TrainConfig,
    stop: StopRule,
    small_rank_threshold: int = SMALL_RANK_THRESHOLD,
    include_timing: bool = True,
    timing_passes: int = 5,
) -> ComparisonResult:
    """
    Run iterative compression and the one-time baseline from the same model.

    The baseline is fine-tuned for as many epochs in total as the iterative
    run spent across all of its iterations.
    """
    iterative_model, iterative_records = compress(
        model, dataset, k, train_cfg, stop,
        small_rank_threshold=small_rank_threshold,
        include_timing=include_timing,
        timing_passes=timing_passes,
    )
    total_epochs = sum(record.epochs_run for record in iterative_records) or train_cfg.epochs
    baseline_cfg = replace(train_cfg, epochs=total_epochs, early_stopping=False)
    logger.info(f"One-time baseline: extreme ranks, {total_epochs} fine-tuning epochs")
    one_time_model, one_time_records = compress_one_time(
        model, dataset, baseline_cfg,
        small_rank_threshold=small_rank_threshold,
        include_timing=include_timing,
        timing_passes=timing_passes,
    )
    return ComparisonResult(iterative_model, iterative_records, one_time_model, one_time_records)


def _ratio(before: float, after: float) -> float:
    return float(before) / float(after) if after else 1.0


def _row(record: IterationRecord, timing: bool) -> Dict[str, Any]:
    row = {
        'iteration': record.iteration,
        'status': 'accepted' if record.accepted else 'rejected',
        'params_before': record.params_before,
        'params_after': record.params_after,
        'params_ratio': _ratio(record.params_before, record.params_after),
        'macs_ratio': _ratio(record.macs_before, record.macs_after),
        'accuracy_before': record.accuracy_before,
        'accuracy_after_decomp': record.accuracy_after_decomp,
        'accuracy_after_finetune': record.accuracy_after_finetune,
        'accuracy_delta': record.accuracy_after_finetune - record.accuracy_before,
        'plans': [plan.to_dict() for plan in record.plans],
    }
    if timing:
        row['time_ratio'] = _ratio(record.time_before, record.time_after)
    return row


def _cumulative(records: List[IterationRecord], timing: bool) -> Dict[str, Any]:
    accepted = [record for record in records if record.accepted]
    summary = {
        'accepted_iterations': len(accepted),
        'params_ratio': float(np.prod([_ratio(r.params_before, r.params_after) for r in accepted])) if accepted else 1.0,
        'macs_ratio': float(np.prod([_ratio(r.macs_before, r.macs_after) for r in accepted])) if accepted else 1.0,
        'accuracy_delta': (accepted[-1].accuracy_after_finetune - records[0].accuracy_before) if accepted else 0.0,
    }
    if timing:
        summary['time_ratio'] = float(np.prod([_ratio(r.time_before, r.time_after) for r in accepted])) if accepted else 1.0
    return summary


def report(
    records: List[IterationRecord],
    settings: Optional[Dict[str, Any]] = None,
    baseline: Optional[List[IterationRecord]] = None,
) -> CompressionReport:
    """
    Summarise a compression run.

    Per-iteration and cumulative parameter ratio, MAC ratio, forward-time
    ratio (when every record carries timings) and accuracy delta. The
    cumulative ratios are products over accepted iterations.

    Args:
        records: Non-empty list of iteration records
        settings: Run settings echoed at the top of the report
        baseline: Records of a one-time compression run to report alongside

    Returns:
        CompressionReport with a text table and a structured mapping

    Raises:
        InvalidArgumentError: If ``records`` is empty
    """
    if not records:
        raise InvalidArgumentError("Cannot report on an empty run")
    timing = all(r.time_before is not None and r.time_after is not None for r in records)
    settings = dict(settings or {})
    rows = [_row(record, timing) for record in records]
    cumulative = _cumulative(records, timing)

    structured: Dict[str, Any] = {
        'settings': settings,
        'iterations': [record.to_dict() for record in records],
        'cumulative': cumulative,
    }
    baseline_summary = None
    if baseline:
        baseline_summary = _cumulative(baseline, False)
        structured['one_time'] = {
            'iterations': [record.to_dict() for record in baseline],
            'cumulative': baseline_summary,
        }
    structured['notes'] = list(ANALYSIS_NOTES)

    text = REPORT_TEMPLATE.render(
        title='Iterations',
        settings=settings,
        rows=rows,
        cumulative=cumulative,
        baseline=baseline_summary,
        timing=timing,
        notes=ANALYSIS_NOTES,
    )
    return CompressionReport(text=text, structured=structured)


def write_report(compression_report: CompressionReport, out_dir: str) -> Tuple[str, str]:
    """Write ``report.txt`` and ``report.yaml`` into ``out_dir``; returns both paths."""
    text_path = os.path.join(out_dir, REPORT_TEXT_FILE)
    yaml_path = os.path.join(out_dir, REPORT_YAML_FILE)
    try:
        safe_write_file(text_path, compression_report.text)
        safe_write_file(yaml_path, compression_report.to_yaml())
    except OSError as e:
        raise ModelIOError(f"Cannot write report to {out_dir}: {e}") from e
    return text_path, yaml_path
