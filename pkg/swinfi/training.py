"""
Training and evaluation

Autoencoder training against the linear NMSE loss, classifier-head training
on a frozen encoder, and evaluation into MetricsReport records. Progress is
reported through an optional per-step callback (the CLI drives a rich
progress bar with it) and structured records go to the session metrics
file.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.logger import get_logger
from swinfi.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from swinfi.csiprep import (
    CsiFrameBatch, assemble_batch, default_usable_mask, frame_windows,
    load_frame_archive, parse_capture
)
from swinfi.errors import (
    DegenerateDataError, IncompatibleCheckpointError, NonFiniteError, ShapeError, TrainingError
)
from swinfi.model import (
    SwinFi, classify, cross_entropy, decode, encode, nmse_db, nmse_loss
)
from swinfi.runconfig import RunConfig
from swinfi.syndata import generate_dataset, split_indices
from swinfi.tensor import AdamState, adam_step, clip_grad_norm, no_grad, precision


StepCallback = Callable[[int, int, Dict[str, float]], None]


@dataclass
class MetricsReport:
    """Evaluation of one model on one split."""

    nmse_db: float
    nmse_db_usable: float
    accuracy_pct: Optional[float] = None
    confusion: Optional[np.ndarray] = None
    step: int = 0
    wall_time: float = 0.0
    split: str = "val"
    n_frames: int = 0

    def to_record(self) -> dict:
        return {
            "split": self.split,
            "step": self.step,
            "n_frames": self.n_frames,
            "nmse_db": self.nmse_db,
            "nmse_db_usable": self.nmse_db_usable,
            "accuracy_pct": self.accuracy_pct,
            "confusion": self.confusion,
            "wall_time": round(self.wall_time, 3),
        }


@dataclass
class TrainResult:
    model: SwinFi
    reports: List[MetricsReport] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)
    best: Optional[MetricsReport] = None
    test: Optional[MetricsReport] = None
    checkpoint: Optional[Path] = None

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history)


# ----------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------

def build_dataset(run: RunConfig) -> Dict[str, CsiFrameBatch]:
    """
    Produce standardized train/val/test batches from the configured source

    Synthetic data comes from the generator; captures are parsed, framed,
    and split per class. Normalization statistics come from the train split.
    """
    data = run.data
    mask = default_usable_mask(run.model.S)

    if data.source == "synth":
        dataset = generate_dataset(data.synth, T=data.frame_length, stride=data.stride,
                                   split_seed=data.split_seed, workers=data.workers, usable_mask=mask)
        return dataset.batches(data.mode, usable_mask=mask)

    run.check_paths()
    frames = []
    for path in data.captures:
        frames.extend(frame_windows(parse_capture(path), T=data.frame_length,
                                    stride=data.stride, usable_mask=mask))
    if not frames:
        raise DegenerateDataError("no capture is long enough to yield a frame")

    splits = split_indices([f.label for f in frames], data.split_seed)
    train = assemble_batch([frames[i] for i in splits["train"]], data.mode,
                           usable_mask=mask, frame_ids=splits["train"])
    result = {"train": train}
    for name in ("val", "test"):
        result[name] = assemble_batch([frames[i] for i in splits[name]], data.mode, train.norm_stats,
                                      usable_mask=mask, frame_ids=splits[name])
    return result


def load_dataset(run: RunConfig) -> Dict[str, CsiFrameBatch]:
    """Use the prepared frame archive when present, otherwise build the splits."""
    archive = run.io.path("frames")
    if archive.exists():
        get_logger().log_status("info", f"loading frame archive {archive}")
        return load_frame_archive(archive)
    return build_dataset(run)


def _eval_split(batches: Dict[str, CsiFrameBatch], name: str = "val") -> Tuple[str, CsiFrameBatch]:
    batch = batches.get(name)
    if batch is None or len(batch) == 0:
        return "train", batches["train"]
    return name, batch


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------

def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], n_classes: int) -> np.ndarray:
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return matrix


def accuracy_from_confusion(confusion: np.ndarray) -> float:
    total = int(confusion.sum())
    return 100.0 * float(np.trace(confusion)) / total if total else 0.0


def reconstruct(x: np.ndarray, model: SwinFi, workers: int = 1) -> np.ndarray:
    """decode(encode(x)) with the batch fanned out over `workers` threads."""
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros_like(x, dtype=np.float32)
    size = max(1, math.ceil(len(x) / max(1, workers)))
    parts = [x[i:i + size] for i in range(0, len(x), size)]

    def run(part: np.ndarray) -> np.ndarray:
        return decode(encode(part, model), model)

    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.concatenate(list(pool.map(run, parts)))
    return np.concatenate([run(p) for p in parts])


def evaluate(
    model: SwinFi,
    batch: CsiFrameBatch,
    step: int = 0,
    workers: int = 1,
    with_classifier: bool = False,
    split: str = "val",
    crop: Optional[Tuple[int, int]] = None,
) -> MetricsReport:
    """
    Reconstruction NMSE (all rows and usable rows) and optional accuracy

    Args:
        model: Trained model
        batch: Standardized frames
        step: Training step the report belongs to
        workers: Evaluation threads
        with_classifier: Also classify and fill accuracy/confusion
        split: Split name recorded in the report
        crop: Original (S, T) when frames were zero-padded; NMSE covers that region only
    """
    started = time.perf_counter()
    x = batch.data
    x_hat = reconstruct(x, model, workers)
    mask = batch.usable_mask
    if crop is not None:
        x, x_hat, mask = x[..., :crop[0], :crop[1]], x_hat[..., :crop[0], :crop[1]], mask[:crop[0]]

    report = MetricsReport(
        nmse_db=nmse_db(x, x_hat),
        nmse_db_usable=nmse_db(x, x_hat, row_mask=mask),
        step=step,
        split=split,
        n_frames=len(batch),
    )

    if with_classifier:
        logits = classify(encode(batch.data, model, workers=workers), model)
        report.confusion = confusion_matrix(batch.labels, logits.argmax(axis=1), model.cfg.n_classes)
        report.accuracy_pct = accuracy_from_confusion(report.confusion)

    report.wall_time = time.perf_counter() - started
    return report


# ----------------------------------------------------------------------
# Training loops
# ----------------------------------------------------------------------

def cosine_lr(base_lr: float, step: int, total_steps: int, enabled: bool = True) -> float:
    """Cosine decay from base_lr to 0 over total_steps (constant when disabled)."""
    if not enabled or total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def _prefixed(model: SwinFi, *prefixes: str) -> Dict[str, object]:
    return {name: p for name, p in model.named_parameters() if name.startswith(prefixes)}


class _DivergenceMonitor:
    """Loss above factor × initial loss for `patience` consecutive steps aborts training."""

    def __init__(self, factor: float, patience: int):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.run_length = 0

    def update(self, step: int, loss: float, lr: float, grad_norm: float):
        if not (math.isfinite(loss) and math.isfinite(grad_norm)):
            raise TrainingError(
                f"loss {loss}, gradient norm {grad_norm} at step {step}",
                {"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm, "initial_loss": self.initial},
            )
        if self.initial is None:
            self.initial = loss
            return
        self.run_length = self.run_length + 1 if loss > self.factor * self.initial else 0
        if self.run_length >= self.patience:
            raise TrainingError(
                f"loss diverged: above {self.factor:g}x the initial {self.initial:.4g} for {self.run_length} steps",
                {"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm, "initial_loss": self.initial},
            )


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index arrays; reshuffled every pass."""
    size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - size + 1, size):
            yield order[i:i + size]


def _checked_step(forward: Callable[[], object], step: int, lr: float):
    try:
        return forward()
    except NonFiniteError as e:
        raise TrainingError(f"non-finite value at step {step}: {e}", {"step": step, "lr": lr}) from e


def write_history(history: List[dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(history).to_csv(path, index=False)
    return path


def train_autoencoder(
    run: RunConfig,
    batches: Dict[str, CsiFrameBatch],
    checkpoint_path: Optional[Union[str, Path]] = None,
    history_path: Optional[Union[str, Path]] = None,
    on_step: Optional[StepCallback] = None,
    crop: Optional[Tuple[int, int]] = None,
) -> TrainResult:
    """
    Train encoder + decoder with Adam against the linear NMSE loss

    Args:
        run: Run configuration (model and train sections are used)
        batches: Standardized splits; "val" falls back to "train" when empty
        checkpoint_path: Where the best-validation model is saved
        history_path: CSV of per-step loss, lr and gradient norm
        on_step: Progress callback(step, total, values)
        crop: Original (S, T) when batches are zero-padded

    Returns:
        TrainResult with the final model, periodic reports and the best report

    Raises:
        TrainingError: non-finite loss or divergence
    """
    tc = run.train
    logger = get_logger()
    train = batches["train"]
    if len(train) == 0:
        raise DegenerateDataError("training split is empty")
    if tuple(train.data.shape[1:]) != (run.model.D, run.model.S, run.model.T):
        raise ShapeError(f"training frames {train.data.shape[1:]} do not fit model input "
                         f"{(run.model.D, run.model.S, run.model.T)}")
    val_name, val = _eval_split(batches)

    with precision(tc.precision):
        model = SwinFi(run.model, seed=tc.seed)
        params = _prefixed(model, "encoder.", "decoder.")
        state = AdamState.create(params, lr=tc.lr)
        sampler = _minibatches(len(train), tc.batch_size, np.random.default_rng([tc.seed, 1]))
        monitor = _DivergenceMonitor(tc.divergence_factor, tc.divergence_patience)
        result = TrainResult(model=model)

        logger.log_stage("train_ae", "started", f"{tc.max_steps} steps, {len(train)} frames")
        for step in range(1, tc.max_steps + 1):
            lr = cosine_lr(tc.lr, step - 1, tc.max_steps, tc.cosine_decay)
            xb = train.data[next(sampler)]

            model.zero_grad()
            loss = _checked_step(lambda: nmse_loss(xb, model(xb)[0]), step, lr)
            loss_value = float(loss.item())
            _checked_step(loss.backward, step, lr)
            grad_norm = clip_grad_norm(params.values(), tc.grad_clip)
            monitor.update(step, loss_value, lr, grad_norm)
            adam_step(params, None, state, lr=lr)

            record = {"step": step, "loss": loss_value, "lr": lr, "grad_norm": grad_norm}
            result.history.append(record)
            if on_step is not None:
                on_step(step, tc.max_steps, record)

            if step % tc.eval_every == 0 or step == tc.max_steps:
                report = evaluate(model, val, step=step, workers=tc.eval_workers, split=val_name, crop=crop)
                result.reports.append(report)
                logger.log_metrics({"event": "train_ae", **record, **report.to_record()})
                if result.best is None or report.nmse_db < result.best.nmse_db:
                    result.best = report
                    if checkpoint_path is not None:
                        result.checkpoint = save_checkpoint(
                            checkpoint_path, model, mode=train.mode, norm_stats=train.norm_stats,
                            meta={"stage": "autoencoder", "step": step, "seed": tc.seed,
                                  "nmse_db": report.nmse_db},
                        )

        if history_path is not None:
            write_history(result.history, history_path)
        logger.log_stage("train_ae", "completed",
                         f"best {result.best.nmse_db:.2f} dB" if result.best else "no steps run")
    return result


def train_classifier(
    run: RunConfig,
    ae_checkpoint: Union[str, Path, Checkpoint],
    batches: Dict[str, CsiFrameBatch],
    checkpoint_path: Optional[Union[str, Path]] = None,
    on_step: Optional[StepCallback] = None,
) -> TrainResult:
    """
    Train the linear head with cross-entropy on encoder features

    The encoder is frozen unless train.joint_finetune is set: features are
    computed once and only head parameters receive updates.

    Raises:
        IncompatibleCheckpointError: the autoencoder checkpoint belongs to another config
    """
    tc = run.train
    logger = get_logger()

    with precision(tc.precision):
        ckpt = ae_checkpoint if isinstance(ae_checkpoint, Checkpoint) \
            else load_checkpoint(ae_checkpoint, expected_digest=run.model.digest())
        if ckpt.digest != run.model.digest():
            raise IncompatibleCheckpointError("autoencoder checkpoint does not match the run config")
        model = ckpt.model
        train = batches["train"]
        val_name, val = _eval_split(batches)

        prefixes = ("head.", "encoder.") if tc.joint_finetune else ("head.",)
        params = _prefixed(model, *prefixes)
        state = AdamState.create(params, lr=tc.classifier_lr)
        sampler = _minibatches(len(train), tc.batch_size, np.random.default_rng([tc.seed, 2]))
        monitor = _DivergenceMonitor(tc.divergence_factor, tc.divergence_patience)
        result = TrainResult(model=model)

        features = None
        if not tc.joint_finetune:
            with no_grad():
                features = model.encode_tokens(train.data).data

        logger.log_stage("train_cls", "started", f"{tc.classifier_steps} steps, frozen={not tc.joint_finetune}")
        for step in range(1, tc.classifier_steps + 1):
            lr = cosine_lr(tc.classifier_lr, step - 1, tc.classifier_steps, tc.cosine_decay)
            index = next(sampler)
            labels = train.labels[index]

            model.zero_grad()
            if features is not None:
                forward = lambda: cross_entropy(model.classify_tokens(features[index]), labels)
            else:
                forward = lambda: cross_entropy(model.classify_tokens(model.encode_tokens(train.data[index])), labels)
            loss = _checked_step(forward, step, lr)
            loss_value = float(loss.item())
            _checked_step(loss.backward, step, lr)
            grad_norm = clip_grad_norm(params.values(), tc.grad_clip)
            monitor.update(step, loss_value, lr, grad_norm)
            adam_step(params, None, state, lr=lr)

            record = {"step": step, "loss": loss_value, "lr": lr, "grad_norm": grad_norm}
            result.history.append(record)
            if on_step is not None:
                on_step(step, tc.classifier_steps, record)
            if step % tc.eval_every == 0:
                logger.log_metrics({"event": "train_cls", **record})

        report = evaluate(model, val, step=tc.classifier_steps, workers=tc.eval_workers,
                          with_classifier=True, split=val_name)
        result.reports.append(report)
        result.best = report
        logger.log_metrics({"event": "train_cls", "step": tc.classifier_steps, **report.to_record()})

        held_out = batches.get("test")
        if held_out is not None and len(held_out):
            result.test = evaluate(model, held_out, step=tc.classifier_steps, workers=tc.eval_workers,
                                   with_classifier=True, split="test")
            result.reports.append(result.test)
            logger.log_metrics({"event": "train_cls", "step": tc.classifier_steps, **result.test.to_record()})

        if checkpoint_path is not None:
            result.checkpoint = save_checkpoint(
                checkpoint_path, model, mode=ckpt.mode, norm_stats=ckpt.norm_stats, has_head=True,
                meta={**ckpt.meta, "stage": "classifier", "classifier_steps": tc.classifier_steps,
                      "accuracy_pct": report.accuracy_pct,
                      "test_accuracy_pct": result.test.accuracy_pct if result.test else None},
            )
        summary = f"{val_name} accuracy {report.accuracy_pct:.1f}%"
        if result.test is not None:
            summary += f", test accuracy {result.test.accuracy_pct:.1f}%"
        logger.log_stage("train_cls", "completed", summary)
    return result
