"""
Pytest test suite for pipeline.py (iterative compression, one-time baseline and reporting).

Loop-control tests replace the per-iteration work with scripted accuracies;
the remaining tests run the real decomposition and fine-tuning on small
models, and the slow tests on the trained reference CNN.
"""

import numpy as np
import pytest
import yaml

import pipeline
from common.errors import InvalidArgumentError, ModelIOError, TrainingDivergedError, UnsupportedTopologyError
from model_graph import FC, BatchNorm, Conv, FactorizedConv, FactorizedFC, ModelGraph, ReLU, Softmax, count
from pipeline import (
    IterationRecord,
    StopRule,
    apply_rank_plan,
    compare_with_one_time,
    compress,
    compress_one_time,
    report,
    write_report,
)
from rank_selection import build_rank_plan
from runtime import TrainConfig, evaluate_accuracy, make_dataset

QUICK = TrainConfig(learning_rate=0.02, momentum=0.9, batch_size=16, epochs=1, seed=0)


def _record(iteration, before, after, params=(1000, 500), macs=(4000, 1000), accepted=True, times=None):
    time_before, time_after = times if times else (None, None)
    return IterationRecord(
        iteration=iteration,
        plans=[],
        accuracy_before=before,
        accuracy_after_decomp=after - 0.05,
        accuracy_after_finetune=after,
        params_before=params[0],
        params_after=params[1],
        macs_before=macs[0],
        macs_after=macs[1],
        time_before=time_before,
        time_after=time_after,
        accepted=accepted,
    )


@pytest.fixture
def scripted(monkeypatch):
    """
    Replace the per-iteration work with a script of fine-tuned accuracies.

    Returns:
        Function ``(original_accuracy, accuracies)`` that installs the script
    """
    def install(original_accuracy, accuracies, diverge_at=None):
        remaining = list(accuracies)

        def fake_iteration(iteration, current, dataset, k, train_cfg, *rest):
            if iteration == diverge_at:
                raise TrainingDivergedError("scripted divergence", model=current)
            if not remaining:
                return None
            accuracy = remaining.pop(0)
            return _record(iteration, rest[-1], accuracy), current.copy()

        monkeypatch.setattr(pipeline, '_run_iteration', fake_iteration)
        monkeypatch.setattr(pipeline, 'evaluate_accuracy', lambda model, split: original_accuracy)

    return install


def test_stop_rule_validation():
    """Test StopRule preconditions."""
    with pytest.raises(InvalidArgumentError):
        StopRule(max_iterations=0)
    for threshold in (0.0, 1.0, -0.1):
        with pytest.raises(InvalidArgumentError):
            StopRule(accuracy_drop_threshold=threshold)


def test_loop_accepts_until_the_drop_breaks_the_threshold(small_model, tiny_dataset, scripted):
    """Test that the loop stops at the first rejected iteration and keeps the previous model."""
    scripted(0.9, [0.9, 0.895, 0.88, 0.87])
    result, records = compress(small_model, tiny_dataset, 0.6, QUICK, StopRule(max_iterations=4))
    assert [r.accepted for r in records] == [True, True, False]
    assert result.version == small_model.version + 2
    assert records[2].accuracy_before == 0.895


def test_cumulative_gate_rejects_slow_drift(small_model, tiny_dataset, scripted):
    """Test the drop against the original model when each step alone is acceptable."""
    scripted(0.9, [0.895, 0.889])
    _, records = compress(small_model, tiny_dataset, 0.6, QUICK, StopRule(max_iterations=2))
    assert [r.accepted for r in records] == [True, False]

    scripted(0.9, [0.895, 0.889])
    _, records = compress(small_model, tiny_dataset, 0.6, QUICK, StopRule(max_iterations=2, cumulative_gate=False))
    assert [r.accepted for r in records] == [True, True]


def test_loop_respects_max_iterations(small_model, tiny_dataset, scripted):
    """Test that no more than max_iterations records are produced."""
    scripted(0.5, [0.6, 0.7, 0.8, 0.9])
    _, records = compress(small_model, tiny_dataset, 0.6, QUICK, StopRule(max_iterations=2))
    assert len(records) == 2


def test_loop_stops_when_every_layer_is_skipped(small_model, tiny_dataset, scripted):
    """Test early termination once nothing is left to decompose."""
    scripted(0.5, [0.5])
    result, records = compress(small_model, tiny_dataset, 0.6, QUICK, StopRule(max_iterations=4))
    assert len(records) == 1
    assert result.version == small_model.version + 1


def test_rejected_first_iteration_returns_input_model(small_model, tiny_dataset, scripted):
    """Test rollback to the original model."""
    scripted(0.9, [0.5])
    result, records = compress(small_model, tiny_dataset, 0.6, QUICK, StopRule())
    assert len(records) == 1 and not records[0].accepted
    assert result.version == small_model.version
    assert count(result).total_params == count(small_model).total_params


def test_divergence_carries_completed_records(small_model, tiny_dataset, scripted):
    """Test that a diverging iteration reports the iterations already done."""
    scripted(0.5, [0.6, 0.7], diverge_at=2)
    with pytest.raises(TrainingDivergedError) as excinfo:
        compress(small_model, tiny_dataset, 0.6, QUICK, StopRule())
    assert [r.iteration for r in excinfo.value.records] == [1]


def test_apply_rank_plan_substitutes_planned_layers(small_model):
    """Test that non-skipped layers are factorized and skipped ones kept."""
    plans = build_rank_plan(small_model, 0.6)
    result = apply_rank_plan(small_model, plans)
    for plan in plans:
        layer = result.layers[plan.index]
        if plan.skip:
            assert layer is not small_model.layers[plan.index]
            assert type(layer) is type(small_model.layers[plan.index])
        else:
            assert isinstance(layer, (FactorizedConv, FactorizedFC))
    assert count(result).total_params < count(small_model).total_params
    assert isinstance(small_model.layers[0], Conv)


def test_apply_rank_plan_rejects_mismatched_plan(small_model):
    """Test a plan applied to a model with a different layer at its index."""
    plans = build_rank_plan(small_model, 0.6)
    index = next(plan.index for plan in plans if not plan.skip)
    layers = list(small_model.layers)
    layers[index] = ReLU()
    other = ModelGraph(layers=layers, input_shape=small_model.input_shape)
    with pytest.raises(InvalidArgumentError):
        apply_rank_plan(other, plans)


def test_single_iteration_compresses(small_model, tiny_dataset):
    """Test one real iteration: fewer parameters, factorized layers and timings."""
    stop = StopRule(max_iterations=1, accuracy_drop_threshold=0.99)
    result, records = compress(small_model, tiny_dataset, 0.6, QUICK, stop, timing_passes=1)
    assert len(records) == 1
    record = records[0]
    assert record.accepted
    assert record.params_after < record.params_before
    assert record.macs_after < record.macs_before
    assert record.time_before > 0 and record.time_after > 0
    assert record.epochs_run == 1
    assert count(result).total_params == record.params_after
    assert any(isinstance(layer, FactorizedConv) for layer in result.layers)
    assert result.version == small_model.version + 1


def test_compress_leaves_small_model_unchanged(rng):
    """Test a model whose every layer is at or below the small-rank threshold."""
    model = ModelGraph(
        layers=[
            Conv(kernel=rng.normal(size=(3, 3, 3, 8)), bias=np.zeros(8), padding=1),
            ReLU(),
            FC(weight=rng.normal(size=(4, 8 * 4 * 4)), bias=np.zeros(4)),
            Softmax(),
        ],
        input_shape=(3, 4, 4),
    )
    dataset = make_dataset(2, image_size=4, num_classes=4, train_per_class=5, test_per_class=5)
    result, records = compress(model, dataset, 0.6, QUICK, StopRule())
    assert records == []
    assert result is model


def test_compress_requires_folded_batchnorm(small_model, tiny_dataset):
    """Test that BatchNorm layers must be folded first."""
    layers = list(small_model.layers)
    layers.insert(1, BatchNorm(mean=np.zeros(24), variance=np.ones(24), gamma=np.ones(24), beta=np.zeros(24)))
    model = ModelGraph(layers=layers, input_shape=small_model.input_shape)
    with pytest.raises(UnsupportedTopologyError):
        compress(model, tiny_dataset, 0.6, QUICK, StopRule())
    with pytest.raises(UnsupportedTopologyError):
        compress_one_time(model, tiny_dataset, QUICK)


def test_one_time_uses_extreme_ranks(small_model, tiny_dataset):
    """Test that the baseline takes every non-small mode straight to its extreme rank."""
    result, records = compress_one_time(small_model, tiny_dataset, QUICK, include_timing=False)
    assert len(records) == 1
    for plan in records[0].plans:
        assert plan.weakening_factor is None
        for mode, r_i in plan.initial_ranks.items():
            if r_i > 20:
                assert plan.weakened_ranks[mode] == plan.extreme_ranks[mode]
    assert count(result).total_params < count(small_model).total_params


def test_compress_is_deterministic(small_model, tiny_dataset):
    """Test identical records and weights from identical inputs."""
    stop = StopRule(max_iterations=2, accuracy_drop_threshold=0.99)
    first = compress(small_model, tiny_dataset, 0.6, QUICK, stop, include_timing=False)
    second = compress(small_model, tiny_dataset, 0.6, QUICK, stop, include_timing=False)
    assert [r.to_dict() for r in first[1]] == [r.to_dict() for r in second[1]]
    for a, b in zip(first[0].layers, second[0].layers):
        for name, array in a.arrays().items():
            np.testing.assert_array_equal(array, b.arrays()[name])


def test_report_single_trivial_iteration():
    """Test unit ratios and zero delta for an iteration that changed nothing."""
    compression_report = report([_record(1, 0.9, 0.9, params=(100, 100), macs=(50, 50))])
    cumulative = compression_report.structured['cumulative']
    assert cumulative['params_ratio'] == 1.0
    assert cumulative['macs_ratio'] == 1.0
    assert cumulative['accuracy_delta'] == 0.0
    assert 'time_ratio' not in cumulative


def test_report_cumulative_ratios_are_products():
    """Test products over accepted iterations and exclusion of a rejected one."""
    records = [
        _record(1, 0.9, 0.9, params=(1000, 500), macs=(800, 400), times=(2.0, 1.0)),
        _record(2, 0.9, 0.895, params=(500, 250), macs=(400, 100), times=(1.0, 0.8)),
        _record(3, 0.895, 0.5, params=(250, 100), macs=(100, 10), times=(0.8, 0.5), accepted=False),
    ]
    compression_report = report(records, settings={'k': 0.6})
    cumulative = compression_report.structured['cumulative']
    assert cumulative['accepted_iterations'] == 2
    assert cumulative['params_ratio'] == pytest.approx(4.0)
    assert cumulative['macs_ratio'] == pytest.approx(8.0)
    assert cumulative['time_ratio'] == pytest.approx(2.5)
    assert cumulative['accuracy_delta'] == pytest.approx(-0.005)
    assert compression_report.structured['settings'] == {'k': 0.6}
    assert 'rejected' in compression_report.text
    assert 'Cumulative: size 4.00x' in compression_report.text


def test_report_with_no_accepted_iteration():
    """Test unit ratios when the only iteration was rejected."""
    cumulative = report([_record(1, 0.9, 0.1, accepted=False)]).structured['cumulative']
    assert cumulative['params_ratio'] == 1.0
    assert cumulative['accuracy_delta'] == 0.0


def test_report_includes_baseline_and_notes():
    """Test the one-time section and the fixed analysis notes."""
    structured = report([_record(1, 0.9, 0.9)], baseline=[_record(1, 0.9, 0.8)]).structured
    assert structured['one_time']['cumulative']['accuracy_delta'] == pytest.approx(-0.1)
    assert structured['notes'] == pipeline.ANALYSIS_NOTES


def test_report_rejects_empty_run():
    """Test the empty record list."""
    with pytest.raises(InvalidArgumentError):
        report([])


@pytest.mark.integration
def test_write_report(out_dir, tmp_path):
    """Test the text and YAML files and the I/O error mapping."""
    compression_report = report([_record(1, 0.9, 0.89)], settings={'k': 0.6})
    text_path, yaml_path = write_report(compression_report, out_dir)
    with open(text_path, encoding='utf-8') as f:
        assert f.read() == compression_report.text
    with open(yaml_path, encoding='utf-8') as f:
        assert yaml.safe_load(f) == compression_report.structured

    blocker = tmp_path / 'blocker'
    blocker.write_text('not a directory')
    with pytest.raises(ModelIOError):
        write_report(compression_report, str(blocker))


@pytest.mark.slow
def test_reference_model_trains(trained_reference):
    """Test that the reference CNN reaches 90% test accuracy."""
    model, dataset = trained_reference
    assert evaluate_accuracy(model, dataset.test) >= 0.9


@pytest.mark.slow
def test_iterative_beats_one_time(trained_reference):
    """Test the iterative run against the one-time baseline at equal fine-tuning epochs."""
    model, dataset = trained_reference
    cfg = TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=32, epochs=5, seed=0)
    comparison = compare_with_one_time(model, dataset, 0.6, cfg, StopRule(), include_timing=False)

    iterative = report(comparison.iterative_records).structured['cumulative']
    assert iterative['accepted_iterations'] >= 2
    assert iterative['params_ratio'] >= 1.5
    assert -iterative['accuracy_delta'] < 0.01

    original = evaluate_accuracy(model, dataset.test)
    one_time_drop = original - evaluate_accuracy(comparison.one_time_model, dataset.test)
    iterative_drop = original - evaluate_accuracy(comparison.iterative_model, dataset.test)
    assert one_time_drop > iterative_drop
    assert comparison.one_time_records[0].epochs_run == sum(r.epochs_run for r in comparison.iterative_records)
