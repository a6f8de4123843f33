"""
Typed run configuration

Builds ModelConfig, SynthSpec and the train/io settings from the yaml tree
held by core.config.Config. Every validation message from every section is
collected before a single ConfigError is raised.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from swinfi.csiprep import MODES, channels_for_mode
from swinfi.errors import ConfigError
from swinfi.model import ModelConfig
from swinfi.syndata import SynthSpec
from swinfi.tensor import PRECISIONS


SOURCES = ("synth", "captures")


@dataclass
class DataConfig:
    source: str = "synth"
    mode: str = "amplitude"
    frame_length: int = 64
    stride: Optional[int] = None
    split_seed: int = 0
    captures: List[Path] = field(default_factory=list)
    workers: int = 1
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> List[str]:
        errors = []
        if self.source not in SOURCES:
            errors.append(f"data.source must be one of {SOURCES} (got '{self.source}')")
        if self.mode not in MODES:
            errors.append(f"data.mode must be one of {MODES} (got '{self.mode}')")
        if self.frame_length < 1:
            errors.append(f"data.frame_length must be >= 1 (got {self.frame_length})")
        if self.stride is not None and self.stride < 1:
            errors.append(f"data.stride must be >= 1 (got {self.stride})")
        if self.workers < 1:
            errors.append(f"data.workers must be >= 1 (got {self.workers})")
        if self.source == "captures" and not self.captures:
            errors.append("data.captures is empty but data.source is 'captures'")
        if self.source == "synth":
            _, synth_errors = self.synth.validate()
            errors.extend(f"data.synth: {e}" for e in synth_errors)
        return errors


@dataclass
class TrainConfig:
    """Optimizer and schedule settings shared by both training stages."""

    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 8
    max_steps: int = 2000
    eval_every: int = 100
    cosine_decay: bool = True
    grad_clip: float = 1.0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    classifier_steps: int = 500
    classifier_lr: float = 1e-2
    joint_finetune: bool = False
    eval_workers: int = 1
    precision: str = "float32"

    def validate(self) -> List[str]:
        errors = []
        if self.lr < 0 or self.classifier_lr < 0:
            errors.append("train.lr and train.classifier_lr must be >= 0")
        for name in ("batch_size", "eval_every", "divergence_patience", "eval_workers"):
            if getattr(self, name) < 1:
                errors.append(f"train.{name} must be >= 1 (got {getattr(self, name)})")
        for name in ("max_steps", "classifier_steps"):
            if getattr(self, name) < 0:
                errors.append(f"train.{name} must be >= 0 (got {getattr(self, name)})")
        if self.grad_clip < 0:
            errors.append(f"train.grad_clip must be >= 0 (got {self.grad_clip})")
        if self.divergence_factor <= 1:
            errors.append(f"train.divergence_factor must be > 1 (got {self.divergence_factor})")
        if self.precision not in PRECISIONS:
            errors.append(f"train.precision must be one of {tuple(PRECISIONS)} (got '{self.precision}')")
        return errors


@dataclass
class IoConfig:
    """Artifact locations; relative names resolve against output_dir."""

    output_dir: Path = Path("runs/default")
    capture_dir: str = "captures"
    frames: str = "frames.npz"
    ae_checkpoint: str = "ae.swck"
    cls_checkpoint: str = "cls.swck"
    stream: str = "stream.swfi"
    history: str = "history.csv"
    results: str = "grid.csv"

    def path(self, name: str) -> Path:
        value = Path(getattr(self, name))
        return value if value.is_absolute() else self.output_dir / value


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig
    train: TrainConfig
    io: IoConfig
    log_dir: Path = Path("logs")
    logging_enabled: bool = True

    @property
    def n_antennas(self) -> int:
        return self.data.synth.n_antennas if self.data.source == "synth" else self.model.D // (
            2 if self.data.mode == "mixed" else 1)

    def validate(self) -> List[str]:
        errors = []
        _, model_errors = self.model.validate()
        errors.extend(f"model: {e}" for e in model_errors)
        errors.extend(self.data.validate())
        errors.extend(self.train.validate())

        if self.data.mode in MODES and self.data.source == "synth":
            expected_d = channels_for_mode(self.data.mode, self.data.synth.n_antennas)
            if expected_d != self.model.D:
                errors.append(
                    f"model.D={self.model.D} but mode '{self.data.mode}' with "
                    f"{self.data.synth.n_antennas} antennas gives {expected_d} channels"
                )
            if self.model.S != self.data.synth.n_subcarriers:
                errors.append(f"model.S={self.model.S} != data.synth.n_subcarriers={self.data.synth.n_subcarriers}")
        elif self.data.mode == "mixed" and self.model.D % 2:
            errors.append(f"mixed mode needs an even model.D (got {self.model.D})")

        if self.model.T != self.data.frame_length:
            errors.append(f"model.T={self.model.T} != data.frame_length={self.data.frame_length}")
        if self.data.source == "synth" and self.model.n_classes < self.data.synth.n_classes:
            errors.append(
                f"model.n_classes={self.model.n_classes} is smaller than data.synth.n_classes="
                f"{self.data.synth.n_classes}"
            )
        return errors

    def check(self):
        errors = self.validate()
        if errors:
            raise ConfigError("invalid run configuration: " + "; ".join(errors), errors)

    def check_paths(self):
        """Referenced inputs must exist when a run starts."""
        if self.data.source != "captures":
            return
        missing = [str(p) for p in self.data.captures if not Path(p).exists()]
        if missing:
            raise ConfigError(f"capture files not found: {', '.join(missing)}",
                              [f"missing capture: {m}" for m in missing])

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self.data)
        data["captures"] = [str(p) for p in self.data.captures]
        data["synth"] = self.data.synth.to_dict()
        io = asdict(self.io)
        io["output_dir"] = str(self.io.output_dir)
        return {"model": self.model.to_dict(), "data": data, "train": asdict(self.train), "io": io}

    @classmethod
    def from_dict(cls, tree: Dict[str, Any]) -> "RunConfig":
        """
        Build and validate a RunConfig from a plain mapping

        Raises:
            ConfigError: with every problem found, not just the first
        """
        errors: List[str] = []

        def build(label, factory, values):
            try:
                return factory(values or {})
            except (TypeError, ValueError, ConfigError) as e:
                errors.append(f"{label}: {e}")
                return None

        model = build("model", ModelConfig.from_dict, tree.get("model"))
        data_tree = dict(tree.get("data") or {})
        synth = build("data.synth", SynthSpec.from_dict, data_tree.pop("synth", None))
        data_tree["captures"] = [Path(p) for p in data_tree.get("captures") or []]
        data = build("data", lambda d: DataConfig(synth=synth or SynthSpec(), **d), data_tree)
        train = build("train", lambda d: TrainConfig(**d), tree.get("train"))
        io_tree = dict(tree.get("io") or {})
        if "output_dir" in io_tree:
            io_tree["output_dir"] = Path(io_tree["output_dir"])
        io = build("io", lambda d: IoConfig(**d), io_tree)

        if errors:
            raise ConfigError("invalid run configuration: " + "; ".join(errors), errors)

        logging_tree = tree.get("logging") or {}
        run = cls(model=model, data=data, train=train, io=io,
                  log_dir=Path(logging_tree.get("log_dir", "logs")),
                  logging_enabled=bool(logging_tree.get("enabled", True)))
        run.check()
        return run

    @classmethod
    def from_config(cls, config) -> "RunConfig":
        """Build from a core.config.Config instance."""
        return cls.from_dict(config.config)
