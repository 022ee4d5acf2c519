"""
Command-line front door for the low-rank compression toolkit.

Subcommands:
    train     Train the reference CNN on the synthetic dataset and save it
    compress  Iteratively compress a saved model and write a report
    eval      Print test accuracy of a saved model
    inspect   Print per-layer shapes, ranks and counts without modifying anything

Exit codes: 0 success, 2 usage, 3 I/O, 4 malformed model, 5 training
diverged, 6 nothing to do.
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from common.errors import (
    ChecksumMismatchError,
    CompressorError,
    DegenerateInputError,
    InvalidArgumentError,
    MalformedManifestError,
    ModelIOError,
    NothingToDoError,
    TrainingDivergedError,
    UndefinedRatioError,
    UnsupportedTopologyError,
)
from config import load_config
from model_graph import ModelGraph, count, fold_batchnorm, load, reference_cnn, save
from pipeline import StopRule, compare_with_one_time, compress, compress_one_time, report, write_report
from rank_selection import build_rank_plan, check_weakening_factor
from runtime import Dataset, TrainConfig, evaluate_accuracy, fine_tune, load_dataset, make_dataset, save_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MALFORMED = 4
EXIT_DIVERGED = 5
EXIT_NOTHING_TO_DO = 6

ACCURACY_GATE = 0.9
MAX_LOG_FILES = 10
COMPRESSED_MODEL_DIR = 'model'

# Checked in order; subclasses before their bases
ERROR_EXIT_CODES: List[Tuple[type, int]] = [
    (NothingToDoError, EXIT_NOTHING_TO_DO),
    (TrainingDivergedError, EXIT_DIVERGED),
    (ModelIOError, EXIT_IO),
    (MalformedManifestError, EXIT_MALFORMED),
    (ChecksumMismatchError, EXIT_MALFORMED),
    (UnsupportedTopologyError, EXIT_MALFORMED),
    (InvalidArgumentError, EXIT_USAGE),
    (DegenerateInputError, EXIT_USAGE),
    (UndefinedRatioError, EXIT_USAGE),
]


def setup_logging(log_level: str = "INFO", logs_dir: str = "logs", log_to_file: bool = False):
    """
    Configure logging for a command-line run.

    Always logs to stderr. With ``log_to_file`` a timestamped log file is
    created under ``logs_dir`` and only the 10 newest log files are kept.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        logs_dir: Directory path for log files (default: "logs")
        log_to_file: Also write a log file
    """
    root_logger = logging.getLogger()
    if root_logger.handlers:
        return

    log_level_upper = log_level.upper()
    if log_level_upper not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
        print(f"Warning: Invalid log level '{log_level}'. Using INFO.", file=sys.stderr)
        log_level_upper = 'INFO'
    numeric_level = getattr(logging, log_level_upper)
    root_logger.setLevel(numeric_level)
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    if log_to_file:
        logs_path = Path(logs_dir)
        logs_path.mkdir(parents=True, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
        log_filename = logs_path / f"lowrank_{timestamp}.log"

        log_files = sorted(logs_path.glob("lowrank_*.log"), key=lambda p: p.stat().st_ctime)
        for old_file in log_files[:max(len(log_files) - (MAX_LOG_FILES - 1), 0)]:
            try:
                old_file.unlink()
            except OSError as e:
                print(f"Warning: Could not delete old log file {old_file}: {e}", file=sys.stderr)

        file_handler = logging.FileHandler(log_filename)
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setLevel(numeric_level)
    stderr_handler.setFormatter(formatter)
    root_logger.addHandler(stderr_handler)


@dataclass
class RunConfig:
    """Fully resolved settings of one command-line run."""
    command: str
    model_path: Optional[str] = None
    out_dir: Optional[str] = None
    k: float = 0.6
    epochs: int = 10
    train_epochs: int = 20
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    early_stopping: bool = False
    max_iterations: int = 4
    drop_threshold: float = 0.01
    weaken: bool = True
    cumulative_gate: bool = True
    small_rank_threshold: int = 20
    include_timing: bool = True
    timing_passes: int = 5
    compare_one_time: bool = False
    seed: int = 0
    dataset_seed: Optional[int] = None
    dataset_path: Optional[str] = None
    save_dataset_path: Optional[str] = None
    image_size: int = 16
    channels: int = 3
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 100
    noise: float = 0.5
    log_level: str = 'INFO'
    logs_dir: str = 'logs'
    log_to_file: bool = False

    def validate(self) -> None:
        """
        Check every value against the preconditions of the modules it feeds.

        Raises:
            InvalidArgumentError: On the first invalid value
        """
        if self.model_path is None:
            raise InvalidArgumentError(f"'{self.command}' requires --model")
        if self.command == 'compress' and self.out_dir is None:
            raise InvalidArgumentError("'compress' requires --out")
        if not 0.0 < self.k < 1.0:
            raise InvalidArgumentError(f"--k must lie in (0, 1), got {self.k}")
        if self.epochs < 1 or self.train_epochs < 1:
            raise InvalidArgumentError("--epochs and --train-epochs must be >= 1")
        if not self.learning_rate > 0.0:
            raise InvalidArgumentError(f"--lr must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError(f"--momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"--batch-size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 1:
            raise InvalidArgumentError(f"--max-iterations must be >= 1, got {self.max_iterations}")
        if not 0.0 < self.drop_threshold < 1.0:
            raise InvalidArgumentError(f"--drop-threshold must lie in (0, 1), got {self.drop_threshold}")
        if self.compare_one_time and not self.weaken:
            raise InvalidArgumentError("--compare-one-time needs weakened ranks; drop --no-weaken")
        if self.timing_passes < 1 or self.small_rank_threshold < 0:
            raise InvalidArgumentError("timing_passes must be >= 1 and small_rank_threshold >= 0")
        if self.seed < 0 or (self.dataset_seed is not None and self.dataset_seed < 0):
            raise InvalidArgumentError("Seeds must be non-negative")
        if self.num_classes < 2 or self.image_size < 4 or self.channels < 1:
            raise InvalidArgumentError("Dataset needs >= 2 classes, >= 1 channel and images of at least 4×4")
        if self.train_per_class < 1 or self.test_per_class < 1 or self.noise < 0:
            raise InvalidArgumentError("Dataset sizes must be >= 1 and noise non-negative")

    @property
    def one_time(self) -> bool:
        """A single pass straight to the extreme ranks, kept whatever its accuracy."""
        return not self.weaken and self.max_iterations == 1

    def seeds(self) -> Tuple[int, int, int]:
        """(dataset, initialisation, shuffling) seeds derived from the global seed."""
        children = np.random.SeedSequence(self.seed).spawn(3)
        dataset_seed, init_seed, shuffle_seed = (int(child.generate_state(1)[0]) for child in children)
        if self.dataset_seed is not None:
            dataset_seed = self.dataset_seed
        return dataset_seed, init_seed, shuffle_seed

    def train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=epochs,
            seed=self.seeds()[2],
            early_stopping=self.early_stopping,
        )

    def stop_rule(self) -> StopRule:
        return StopRule(
            max_iterations=self.max_iterations,
            accuracy_drop_threshold=self.drop_threshold,
            cumulative_gate=self.cumulative_gate,
        )

    def settings(self) -> dict:
        """Numeric settings echoed into reports."""
        keys = (
            'k', 'epochs', 'learning_rate', 'momentum', 'batch_size', 'early_stopping',
            'max_iterations', 'drop_threshold', 'weaken', 'cumulative_gate',
            'small_rank_threshold', 'seed',
        )
        values = asdict(self)
        settings = {key: values[key] for key in keys}
        settings['dataset_seed'] = self.seeds()[0]
        return settings


def build_parser(config: dict) -> argparse.ArgumentParser:
    """Argument parser whose defaults come from the loaded configuration."""
    training = config['training']
    compression = config['compression']
    logging_cfg = config['logging']

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML configuration file (default: ./config.yaml)')
    common.add_argument('--model', dest='model_path', help='Model directory (written by train, read otherwise)')
    common.add_argument('--seed', type=int, default=config['seed'], help='Global seed (default: from config or 0)')
    common.add_argument('--dataset-seed', type=int, default=config['dataset']['seed'],
                        help='Dataset seed (default: derived from --seed)')
    common.add_argument('--dataset', dest='dataset_path', help='Load a cached dataset instead of generating one')
    common.add_argument('--log-level', default=logging_cfg['level'],
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help='Logging level (default: from config or INFO)')
    common.add_argument('--logs-dir', default=logging_cfg['logs_dir'], help='Directory for log files')
    common.add_argument('--log-file', dest='log_to_file', action='store_true', default=logging_cfg['log_to_file'],
                        help='Also write a timestamped log file')

    tuning = argparse.ArgumentParser(add_help=False)
    tuning.add_argument('--lr', dest='learning_rate', type=float, default=training['learning_rate'],
                        help='SGD learning rate (default: from config or 0.05)')
    tuning.add_argument('--momentum', type=float, default=training['momentum'], help='SGD momentum')
    tuning.add_argument('--batch-size', type=int, default=training['batch_size'], help='Mini-batch size')

    ranks = argparse.ArgumentParser(add_help=False)
    ranks.add_argument('--k', type=float, default=compression['k'], help='Weakening factor in (0, 1) (default: 0.6)')

    parser = argparse.ArgumentParser(description='Iterative low-rank compression of convolutional networks')
    subparsers = parser.add_subparsers(dest='command', required=True)

    train = subparsers.add_parser('train', parents=[common, tuning], help='Train the reference CNN')
    train.add_argument('--epochs', dest='train_epochs', type=int, default=training['train_epochs'],
                       help='Training epochs (default: from config or 15)')
    train.add_argument('--save-dataset', dest='save_dataset_path', help='Also cache the generated dataset here')

    comp = subparsers.add_parser('compress', parents=[common, tuning, ranks], help='Compress a saved model')
    comp.add_argument('--out', dest='out_dir', help='Output directory for the model and report')
    comp.add_argument('--epochs', type=int, default=training['epochs'], help='Fine-tuning epochs per iteration')
    comp.add_argument('--max-iterations', type=int, default=compression['max_iterations'])
    comp.add_argument('--drop-threshold', type=float, default=compression['drop_threshold'],
                      help='Accuracy drop that rejects an iteration (default: 0.01)')
    comp.add_argument('--no-weaken', dest='weaken', action='store_false', default=compression['weaken'],
                      help='Use the VBMF extreme ranks directly; with --max-iterations 1 the pass is always kept')
    comp.add_argument('--no-timing', dest='include_timing', action='store_false',
                      default=compression['include_timing'], help='Leave wall-clock timings out of the report')
    comp.add_argument('--early-stopping', action='store_true', default=training['early_stopping'],
                      help='Keep fine-tuning while held-out accuracy improves')
    comp.add_argument('--compare-one-time', action='store_true',
                      help='Also run the one-time compression baseline and report both')

    subparsers.add_parser('eval', parents=[common], help='Print test accuracy of a saved model')
    subparsers.add_parser('inspect', parents=[common, ranks], help='Print per-layer ranks and counts')
    return parser


def parse_run_config(argv: Optional[List[str]] = None) -> RunConfig:
    """
    Parse command-line arguments over the configuration file.

    Raises:
        SystemExit: With status 2 on unparsable arguments (argparse)
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config')
    known, _ = pre.parse_known_args(argv)
    config = load_config(known.config)

    args = vars(build_parser(config).parse_args(argv))
    args.pop('config', None)
    training, compression, dataset = config['training'], config['compression'], config['dataset']
    values = {
        'k': compression['k'],
        'epochs': training['epochs'],
        'train_epochs': training['train_epochs'],
        'learning_rate': training['learning_rate'],
        'momentum': training['momentum'],
        'batch_size': training['batch_size'],
        'early_stopping': training['early_stopping'],
        'max_iterations': compression['max_iterations'],
        'drop_threshold': compression['drop_threshold'],
        'weaken': compression['weaken'],
        'include_timing': compression['include_timing'],
        'cumulative_gate': compression['cumulative_gate'],
        'small_rank_threshold': compression['small_rank_threshold'],
        'timing_passes': compression['timing_passes'],
        'image_size': dataset['image_size'],
        'channels': dataset['channels'],
        'num_classes': dataset['num_classes'],
        'train_per_class': dataset['train_per_class'],
        'test_per_class': dataset['test_per_class'],
        'noise': dataset['noise'],
    }
    values.update(args)
    return RunConfig(**values)


def _dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset_path:
        dataset = load_dataset(cfg.dataset_path)
        logger.info(f"Loaded cached dataset from {cfg.dataset_path} (seed {dataset.seed})")
        return dataset
    return make_dataset(
        cfg.seeds()[0],
        image_size=cfg.image_size,
        channels=cfg.channels,
        num_classes=cfg.num_classes,
        train_per_class=cfg.train_per_class,
        test_per_class=cfg.test_per_class,
        noise=cfg.noise,
    )


def _check_compatible(model: ModelGraph, dataset: Dataset) -> None:
    if tuple(model.input_shape) != dataset.input_shape or model.num_classes != dataset.num_classes:
        raise InvalidArgumentError(
            f"Model expects {model.input_shape} → {model.num_classes} classes, dataset provides "
            f"{dataset.input_shape} → {dataset.num_classes} classes"
        )


def _load_folded(path: str) -> ModelGraph:
    model = load(path)
    if model.has_batchnorm():
        logger.info("Folding BatchNorm layers into their preceding layers")
        model = fold_batchnorm(model)
    return model


def cmd_train(cfg: RunConfig) -> int:
    """Train the reference CNN from scratch and save it to ``--model``."""
    dataset = _dataset(cfg)
    if cfg.save_dataset_path:
        save_dataset(dataset, cfg.save_dataset_path)
        logger.info(f"Cached dataset at {cfg.save_dataset_path}")
    _, init_seed, _ = cfg.seeds()
    model = reference_cnn(dataset.input_shape, dataset.num_classes, rng=np.random.default_rng(init_seed))
    trained = fine_tune(model, dataset.train, cfg.train_config(cfg.train_epochs), monitor=dataset.test)
    accuracy = evaluate_accuracy(trained, dataset.test)
    if accuracy < ACCURACY_GATE:
        logger.warning(f"Test accuracy {accuracy:.4f} is below the {ACCURACY_GATE:.2f} gate; consider more epochs")
    save(trained, cfg.model_path)
    print(f"test accuracy: {accuracy:.4f}")
    return EXIT_OK


def cmd_compress(cfg: RunConfig) -> int:
    """Compress ``--model`` and write ``<out>/model``, ``report.txt`` and ``report.yaml``."""
    model = _load_folded(cfg.model_path)
    dataset = _dataset(cfg)
    _check_compatible(model, dataset)
    check_weakening_factor(cfg.k)
    train_cfg = cfg.train_config(cfg.epochs)
    options = {
        'small_rank_threshold': cfg.small_rank_threshold,
        'include_timing': cfg.include_timing,
        'timing_passes': cfg.timing_passes,
    }

    baseline = None
    try:
        if cfg.compare_one_time:
            result = compare_with_one_time(model, dataset, cfg.k, train_cfg, cfg.stop_rule(), **options)
            compressed, records, baseline = result.iterative_model, result.iterative_records, result.one_time_records
        elif cfg.one_time:
            compressed, records = compress_one_time(model, dataset, train_cfg, **options)
        else:
            compressed, records = compress(
                model, dataset, cfg.k, train_cfg, cfg.stop_rule(), weaken_ranks=cfg.weaken, **options
            )
    except TrainingDivergedError as e:
        if e.records:
            write_report(report(e.records, cfg.settings()), cfg.out_dir)
            logger.error(f"Partial report with {len(e.records)} completed iteration(s) written to {cfg.out_dir}")
        raise

    if not records:
        raise NothingToDoError("No layer could be compressed; model left unchanged")
    save(compressed, os.path.join(cfg.out_dir, COMPRESSED_MODEL_DIR))
    compression_report = report(records, cfg.settings(), baseline=baseline)
    write_report(compression_report, cfg.out_dir)
    print(compression_report.text)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    """Print test accuracy of ``--model``."""
    model = load(cfg.model_path)
    dataset = _dataset(cfg)
    _check_compatible(model, dataset)
    print(f"test accuracy: {evaluate_accuracy(model, dataset.test):.4f}")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig) -> int:
    """Print per-layer shapes, R_i / R_e / R_w at ``--k`` and parameter/MAC counts."""
    model = _load_folded(cfg.model_path)
    check_weakening_factor(cfg.k)
    counts = count(model)
    try:
        plans = {
            plan.index: plan
            for plan in build_rank_plan(
                model, cfg.k, weaken_ranks=cfg.weaken, small_rank_threshold=cfg.small_rank_threshold
            )
        }
    except NothingToDoError:
        plans = {}

    print(f"model: {model.name} v{model.version}, input {model.input_shape}")
    for index, (layer, shape, entry) in enumerate(zip(model.layers, model.output_shapes(), counts.layers)):
        line = f"{model.layer_id(index):<20} out={shape!s:<16} params={entry.params:<9} macs={entry.macs:<10}"
        plan = plans.get(index)
        if plan is not None:
            line += f" R_i={plan.initial_ranks} R_e={plan.extreme_ranks} R_w={plan.weakened_ranks}"
            if plan.skip:
                line += f" (skip: {plan.skip_reason})"
        print(line)
    print(f"total params={counts.total_params} macs={counts.total_macs}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'compress': cmd_compress,
    'eval': cmd_eval,
    'inspect': cmd_inspect,
}


def exit_code_for(error: Exception) -> int:
    for error_type, code in ERROR_EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit status."""
    cfg = parse_run_config(argv)
    try:
        cfg.validate()
    except InvalidArgumentError as e:
        print(f"ERROR {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(cfg.log_level, cfg.logs_dir, cfg.log_to_file)
    logger.info(f"Running '{cfg.command}' with seed {cfg.seed}")
    try:
        return COMMANDS[cfg.command](cfg)
    except CompressorError as e:
        logger.error(f"ERROR {e}")
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
