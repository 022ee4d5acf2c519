"""
Configuration module for the low-rank compression toolkit.

Loads configuration from YAML file with sensible defaults.
"""

import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional


def get_default_config() -> Dict[str, Any]:
    """
    Return default configuration values.

    Returns:
        Dictionary with default configuration
    """
    return {
        'logging': {
            'level': 'INFO',
            'logs_dir': 'logs',
            'log_to_file': False
        },
        'training': {
            'learning_rate': 0.05,
            'momentum': 0.9,
            'batch_size': 32,
            'epochs': 10,
            'train_epochs': 20,
            'early_stopping': False
        },
        'compression': {
            'k': 0.6,
            'max_iterations': 4,
            'drop_threshold': 0.01,
            'weaken': True,
            'cumulative_gate': True,
            'timing_passes': 5,
            'include_timing': True,
            'small_rank_threshold': 20
        },
        'dataset': {
            'seed': None,
            'image_size': 16,
            'channels': 3,
            'num_classes': 10,
            'train_per_class': 100,
            'test_per_class': 100,
            'noise': 0.5
        },
        'seed': 0
    }


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load configuration from YAML file or return defaults.

    Looks for an explicit path first, then ./config.yaml, then
    ~/.lowrank/config.yaml. If no file exists, returns the defaults.

    Args:
        config_path: Optional explicit path to a YAML config file

    Returns:
        Dictionary with configuration values
    """
    config = get_default_config()

    if config_path:
        path = Path(config_path)
    elif Path("config.yaml").exists():
        path = Path("config.yaml")
    else:
        path = Path(os.path.expanduser('~/.lowrank/config.yaml'))

    if not path.exists():
        if config_path:
            print(f"Warning: Config file {config_path} not found. Using default configuration.", file=sys.stderr)
        return config

    try:
        import yaml

        with open(path, 'r') as f:
            yaml_config = yaml.safe_load(f)

        # YAML values override defaults section by section
        if yaml_config:
            for section, values in yaml_config.items():
                if isinstance(config.get(section), dict) and isinstance(values, dict):
                    config[section].update(values)
                elif section in config:
                    config[section] = values

        return config

    except ImportError:
        print("Warning: PyYAML not installed. Using default configuration.", file=sys.stderr)
        return config

    except Exception as e:
        print(f"Warning: Error loading config file: {e}. Using default configuration.", file=sys.stderr)
        return config
