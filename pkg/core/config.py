"""
Configuration Utility

Manages the yaml run configuration: loading, saving, preset profiles,
overrides and validation. The tree mirrors RunConfig:
model / data / train / io / logging.
"""

import copy
import yaml
from pathlib import Path
from typing import Dict, Any, Optional


def get_project_root() -> Path:
    """Get the project root directory (where main.py lives)."""
    return Path(__file__).parent.parent


def get_profiles_dir() -> Path:
    return get_project_root() / "profiles"


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge overrides into a copy of base."""
    merged = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class Config:
    """Configuration manager for SwinFi runs"""

    def __init__(self, config_path: Optional[Path] = None):
        """
        Initialize configuration manager

        Args:
            config_path: Path to config file (default: <project-root>/config.yaml)
        """
        self.config_path = Path(config_path) if config_path else (get_project_root() / "config.yaml")
        self.config = self.load()

    def load(self) -> Dict[str, Any]:
        """
        Load configuration from file, layered over the defaults

        Returns:
            Configuration dictionary
        """
        if not self.config_path.exists():
            return self.get_default_config()

        try:
            with open(self.config_path, 'r') as f:
                config = yaml.safe_load(f)
                return deep_merge(self.get_default_config(), config) if config else self.get_default_config()
        except yaml.YAMLError as e:
            print(f"Error loading config: {e}")
            return self.get_default_config()

    def save(self, path: Optional[Path] = None):
        """
        Save configuration to file

        Args:
            path: Destination (default: the file this config was loaded from)
        """
        path = Path(path) if path else self.config_path
        path.parent.mkdir(parents=True, exist_ok=True)

        try:
            with open(path, 'w') as f:
                yaml.safe_dump(self.config, f, default_flow_style=False, sort_keys=False)

            path.chmod(0o600)
            return True
        except OSError as e:
            print(f"Error saving config: {e}")
            return False

    def get_default_config(self) -> Dict[str, Any]:
        """
        Get default configuration: the desk-scale synthetic setup
        (8 classes, 64 subcarriers, 64-packet frames, two merges)

        Returns:
            Default configuration dictionary
        """
        return {
            "model": {
                "p_S": 8,
                "p_T": 1,
                "M_S": 1,
                "M_T": 16,
                "C": 32,
                "depths": [2, 2, 2],
                "head_dim": 16,
                "mlp_ratio": 4,
                "n_classes": 8,
                "D": 4,
                "S": 64,
                "T": 64
            },
            "data": {
                "source": "synth",          # synth | captures
                "mode": "amplitude",        # amplitude | phase | mixed
                "frame_length": 64,
                "stride": 64,
                "split_seed": 0,
                "captures": [],
                "workers": 1,
                "synth": {
                    "seed": 7,
                    "n_classes": 8,
                    "packets_per_class": 4096,
                    "n_antennas": 4,
                    "n_subcarriers": 64,
                    "sample_rate_hz": 100.0,
                    "snr_db": 20.0,
                    "phase_error": {
                        "slope_range": [-0.2, 0.2],
                        "offset_range": [-3.141592653589793, 3.141592653589793],
                        "noise_std": 0.0
                    }
                }
            },
            "train": {
                "seed": 0,
                "lr": 1e-3,
                "batch_size": 8,
                "max_steps": 2000,
                "eval_every": 100,
                "cosine_decay": True,
                "grad_clip": 1.0,
                "divergence_factor": 10.0,
                "divergence_patience": 100,
                "classifier_steps": 500,
                "classifier_lr": 1e-2,
                "joint_finetune": False,
                "eval_workers": 1,
                "precision": "float32"
            },
            "io": {
                "output_dir": "runs/default",
                "capture_dir": "captures",
                "frames": "frames.npz",
                "ae_checkpoint": "ae.swck",
                "cls_checkpoint": "cls.swck",
                "stream": "stream.swfi",
                "history": "history.csv",
                "results": "grid.csv"
            },
            "logging": {
                "log_dir": "logs",
                "enabled": True
            }
        }

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """
        Get configuration value

        Args:
            section: Configuration section
            key: Configuration key
            default: Default value if not found

        Returns:
            Configuration value
        """
        return self.config.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value: Any):
        """
        Set configuration value

        Args:
            section: Configuration section
            key: Configuration key
            value: Value to set
        """
        if section not in self.config:
            self.config[section] = {}

        self.config[section][key] = value

    def merge(self, overrides: Dict[str, Any]):
        """Deep-merge a partial tree (preset profile or CLI overrides) into this config."""
        self.config = deep_merge(self.config, overrides)

    def apply_profile(self, name: str):
        """
        Merge a preset from profiles/<name>.yaml

        Raises:
            FileNotFoundError: no such profile
        """
        path = Path(name)
        if not path.suffix:
            path = get_profiles_dir() / f"{name}.yaml"
        with open(path, 'r') as f:
            profile = yaml.safe_load(f) or {}
        self.merge(profile.get("config", profile))

    def validate(self) -> tuple[bool, list[str]]:
        """
        Validate configuration by building the typed run configuration

        Returns:
            Tuple of (is_valid, error_messages)
        """
        from swinfi.errors import ConfigError
        from swinfi.runconfig import RunConfig

        try:
            RunConfig.from_config(self)
        except ConfigError as e:
            return False, list(e.errors)
        return True, []

    def __repr__(self) -> str:
        """String representation"""
        return f"Config(path={self.config_path})"
