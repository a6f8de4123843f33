#!/usr/bin/env python3
"""
SwinFi - Main Entry Point

Command-line front end for the CSI compression pipeline:
synth -> prep -> train-ae -> train-cls -> encode -> decode -> eval, plus
the experiment grid and an info report. Auto-creates a virtual environment
and installs dependencies when launched outside one.
"""

import sys
import subprocess
from pathlib import Path
import os


THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


def ensure_venv():
    """
    Ensure we're running in a virtual environment.
    If not, create one, install dependencies, and re-exec.
    Set SWINFI_NO_VENV=1 to run with the current interpreter.
    """
    if os.environ.get("SWINFI_NO_VENV"):
        return

    in_venv = hasattr(sys, 'real_prefix') or (
        hasattr(sys, 'base_prefix') and sys.base_prefix != sys.prefix
    )
    if in_venv:
        return

    venv_path = Path(__file__).parent / '.venv'

    if not venv_path.exists():
        print("Creating virtual environment...")
        print(f"Location: {venv_path}")
        print()

        try:
            subprocess.run([sys.executable, '-m', 'venv', str(venv_path)], check=True)
            print("✓ Virtual environment created")
        except subprocess.CalledProcessError as e:
            print(f"✗ Failed to create virtual environment: {e}")
            sys.exit(1)

        requirements_file = Path(__file__).parent / 'requirements.txt'
        if requirements_file.exists():
            print()
            print("Installing dependencies...")
            pip = venv_path / 'bin' / 'pip'
            try:
                subprocess.run([str(pip), 'install', '-r', str(requirements_file)], check=True)
                print("✓ Dependencies installed")
            except subprocess.CalledProcessError as e:
                print(f"✗ Failed to install dependencies: {e}")
                sys.exit(1)

    python = venv_path / 'bin' / 'python'
    os.execv(str(python), [str(python)] + sys.argv)


def ensure_single_thread(argv):
    """
    Pin BLAS/OpenMP to one thread for --deterministic runs.
    Must happen before numpy is imported.
    """
    if "--deterministic" in argv:
        for name in THREAD_VARIABLES:
            os.environ[name] = "1"


if __name__ == "__main__":
    ensure_venv()

ensure_single_thread(sys.argv)


import argparse
from contextlib import nullcontext
from typing import Optional

import numpy as np

from core.config import Config
from core.logger import get_logger
from core.state import COMMANDS as STAGE_COMMANDS, RunState
from core.ui import (
    console, show_banner, show_error, show_frame, show_key_value_list, show_spinner, show_status,
    show_success, show_table, show_warning, training_progress
)
from swinfi.checkpoint import load_checkpoint
from swinfi.csiprep import raw_bandwidth_bps, save_frame_archive, write_capture
from swinfi.errors import SwinFiError
from swinfi.grid import cells_from_config, run_experiment_grid, PRESETS
from swinfi.layers import effective_window
from swinfi.model import compression_ratio, complexity_estimate
from swinfi.runconfig import RunConfig
from swinfi.stream import cloud_decode_stream, edge_encode_stream
from swinfi.syndata import generate_capture
from swinfi.tensor import set_precision
from swinfi.training import (
    build_dataset, evaluate, load_dataset, train_autoencoder, train_classifier
)
from swinfi.wire import HEADER_SIZE, payload_size


# CLI command -> stage it completes
STAGE_OF = {command: stage for stage, command in STAGE_COMMANDS.items()}

RUN_CONFIG_FILE = "run_config.yaml"


class PrerequisiteError(Exception):
    """A stage was requested before the stages it reads from"""


def require(state: RunState, stage: str):
    hint = state.get_next_step(stage)
    if hint:
        raise PrerequisiteError(f"'{stage}' needs {', '.join(state.missing_prerequisites(stage))}. {hint}.")


def report_rows(reports):
    return [[r.split, r.step, r.n_frames, r.nmse_db, r.nmse_db_usable,
             r.accuracy_pct if r.accuracy_pct is not None else float("nan")] for r in reports]


REPORT_HEADERS = ["Split", "Step", "Frames", "NMSE (dB)", "NMSE usable (dB)", "Accuracy (%)"]


def _progress_callback(progress, task):
    def on_step(step, total, values):
        progress.update(task, completed=step, loss=values["loss"])
    return on_step


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_synth(run: RunConfig, state: RunState, args) -> int:
    """Write one synthetic CSI0 capture per class."""
    spec = run.data.synth
    spec.check()
    out_dir = run.io.path("capture_dir")
    rows = []
    for class_id in range(spec.n_classes):
        capture = generate_capture(spec, class_id)
        path = write_capture(capture, out_dir / f"class{class_id:02d}.csi")
        rows.append([class_id, path.name, capture.packet_count, capture.n_antennas, capture.n_subcarriers])

    show_table("Synthetic captures", ["Class", "File", "Packets", "Antennas", "Subcarriers"], rows)
    state.mark_complete("synth", out_dir)
    show_success(f"{spec.n_classes} captures written to {out_dir}")
    return 0


def cmd_prep(run: RunConfig, state: RunState, args) -> int:
    """Frame, sanitize, split and standardize; write the frame archive."""
    with show_spinner("Preparing frames..."):
        splits = build_dataset(run)
    path = save_frame_archive(run.io.path("frames"), splits)

    show_table("Frame splits", ["Split", "Frames", "Shape"],
               [[name, len(b), "x".join(str(d) for d in b.data.shape[1:])] for name, b in splits.items()])
    state.mark_complete("prep", path)
    show_success(f"Frame archive written: {path}")
    return 0


def cmd_train_ae(run: RunConfig, state: RunState, args) -> int:
    require(state, "train_ae")
    batches = load_dataset(run)

    with training_progress() as progress:
        task = progress.add_task("train-ae", total=run.train.max_steps, loss=float("nan"))
        result = train_autoencoder(
            run, batches,
            checkpoint_path=run.io.path("ae_checkpoint"),
            history_path=run.io.path("history"),
            on_step=_progress_callback(progress, task),
        )

    show_table("Autoencoder evaluation", REPORT_HEADERS, report_rows(result.reports))
    if result.checkpoint is None:
        show_warning("No evaluation ran; no checkpoint written (max_steps is 0)")
        return 1
    state.mark_complete("train_ae", result.checkpoint)
    show_success(f"Best {result.best.split} NMSE {result.best.nmse_db:.2f} dB at step {result.best.step}")
    return 0


def cmd_train_cls(run: RunConfig, state: RunState, args) -> int:
    require(state, "train_cls")
    batches = load_dataset(run)

    with training_progress() as progress:
        task = progress.add_task("train-cls", total=run.train.classifier_steps, loss=float("nan"))
        result = train_classifier(
            run, run.io.path("ae_checkpoint"), batches,
            checkpoint_path=run.io.path("cls_checkpoint"),
            on_step=_progress_callback(progress, task),
        )

    report = result.test or result.best
    show_table("Classifier evaluation", REPORT_HEADERS, report_rows(result.reports))
    show_table("Confusion matrix (rows: true, columns: predicted)",
               ["class"] + [str(c) for c in range(report.confusion.shape[1])],
               [[str(i)] + row for i, row in enumerate(report.confusion.tolist())])
    state.mark_complete("train_cls", result.checkpoint)
    message = f"Classifier {result.best.split} accuracy {result.best.accuracy_pct:.1f}%"
    if result.test is not None:
        message += f", test accuracy {result.test.accuracy_pct:.1f}%"
    show_success(message)
    return 0


def _checkpoint_for(run: RunConfig, state: RunState, override: Optional[str]):
    if override:
        return load_checkpoint(override, expected_digest=run.model.digest())
    name = "cls_checkpoint" if state.is_complete("train_cls") else "ae_checkpoint"
    return load_checkpoint(run.io.path(name), expected_digest=run.model.digest())


def cmd_encode(run: RunConfig, state: RunState, args) -> int:
    require(state, "encode")
    batch = load_dataset(run)[args.split]
    ckpt = _checkpoint_for(run, state, args.checkpoint)
    stats = edge_encode_stream(batch, ckpt, run.io.path("stream"))

    show_key_value_list({
        "Frames sent": stats.frames_sent,
        "Raw bytes": stats.raw_bytes,
        "Compressed bytes": stats.compressed_bytes,
        "Measured ratio": stats.measured_ratio,
        "Configured γ": str(stats.gamma),
    }, title="Edge stream")
    state.mark_complete("encode", run.io.path("stream"))
    return 0


def cmd_decode(run: RunConfig, state: RunState, args) -> int:
    require(state, "decode")
    batch = load_dataset(run)[args.split]
    ckpt = _checkpoint_for(run, state, args.checkpoint)
    result = cloud_decode_stream(run.io.path("stream"), ckpt, reference=batch)

    out = run.io.output_dir / "decoded.npz"
    arrays = {"frames": result.frames, "frame_ids": np.asarray(result.frame_ids, dtype=np.int64)}
    if result.logits is not None:
        arrays["logits"] = result.logits
    np.savez_compressed(out, **arrays)

    if result.stats.warnings:
        show_warning(f"{result.stats.warnings} malformed record(s) skipped")
    if result.report is not None:
        show_table("Cloud reconstruction", REPORT_HEADERS, report_rows([result.report]))
    state.mark_complete("decode", out)
    show_success(f"{result.stats.frames_received} frames decoded to {out}")
    return 0


def cmd_eval(run: RunConfig, state: RunState, args) -> int:
    require(state, "eval")
    batches = load_dataset(run)
    ckpt = _checkpoint_for(run, state, args.checkpoint)
    reports = []
    for name in ("val", "test"):
        if name in batches and len(batches[name]):
            report = evaluate(ckpt.model, batches[name], workers=run.train.eval_workers,
                              with_classifier=ckpt.has_head, split=name)
            get_logger().log_metrics({"event": "eval", **report.to_record()})
            reports.append(report)

    show_table("Evaluation", REPORT_HEADERS, report_rows(reports))
    state.mark_complete("eval")
    return 0


def cmd_grid(run: RunConfig, state: RunState, args, config: Config) -> int:
    tree = dict(config.config.get("grid") or {})
    if args.preset:
        tree = {"preset": args.preset}
    cells = cells_from_config(tree)
    train = bool(tree.get("train", True)) and not args.dry_run

    with training_progress() as progress:
        task = progress.add_task("grid", total=max(1, len(cells)), loss=float("nan"))
        frame = run_experiment_grid(
            run, cells, train=train, pad=bool(tree.get("pad", True)),
            on_cell=lambda i, n, row: progress.update(task, completed=i + 1),
        )

    out = run.io.path("results")
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)

    if len(frame):
        show_frame("Experiment grid", frame, ["cell", "mode", "window", "patch", "C", "depths", "gamma",
                                              "nmse_db", "accuracy_pct", "status"])
    failed = int((frame["status"] == "failed").sum()) if len(frame) else 0
    if failed:
        show_warning(f"{failed} of {len(frame)} cells failed (see {out})")
    state.mark_complete("grid", out)
    show_success(f"{len(frame)} rows written to {out}")
    return 0


def cmd_info(run: RunConfig, state: RunState, args) -> int:
    cfg = run.model
    grid = cfg.stage_grids()[0]
    window, shift = effective_window(grid, cfg.window)
    report = complexity_estimate(grid[0], grid[1], cfg.C, window[0] * window[1])
    spec = run.data.synth

    show_key_value_list({
        "Input (D×S×T)": f"{cfg.D}×{cfg.S}×{cfg.T}",
        "Patch / window": f"{cfg.p_S}×{cfg.p_T} / {cfg.M_S}×{cfg.M_T} (effective {window[0]}×{window[1]}, shift {shift})",
        "Stage grids": ", ".join(f"{g[0]}×{g[1]}" for g in cfg.stage_grids()),
        "Feature image": f"{cfg.feature_grid[0]}×{cfg.feature_grid[1]}×{cfg.C}",
        "γ": str(compression_ratio(cfg)),
        "Record bytes": f"{HEADER_SIZE} + {payload_size(cfg.feature_grid, cfg.C)}",
        "Raw frame bytes": cfg.raw_elements * 4,
        "Ω(MSA)": report.omega_msa,
        "Ω(W-MSA)": report.omega_wmsa,
        "W-MSA / MSA": f"{float(report.ratio):.5f}",
        "Raw CSI rate (Mbps)": raw_bandwidth_bps(spec.n_antennas, spec.n_subcarriers, spec.sample_rate_hz) / 1e6,
        "Config digest": f"{cfg.digest():#018x}",
    }, title="Model")

    summary = state.get_summary()
    show_table("Run state", ["Stage", "Complete", "Artifact"],
               [[s, "✓" if done else "", summary["artifacts"].get(s, "")] for s, done in summary["stages"].items()])
    if summary["next_step"]:
        show_status(f"Next: {summary['next_step']}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train-ae": cmd_train_ae,
    "train-cls": cmd_train_cls,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "info": cmd_info,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swinfi", description="Swin Transformer CSI compression pipeline")
    parser.add_argument("--config", type=Path, help="yaml config file (default: ./config.yaml)")
    parser.add_argument("--profile", help="preset from profiles/ merged over the config")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--output-dir", type=Path, help="override io.output_dir")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS and no worker threads")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="write synthetic CSI captures")
    sub.add_parser("prep", help="frame and standardize data into an archive")
    sub.add_parser("train-ae", help="train the autoencoder")
    sub.add_parser("train-cls", help="train the classifier head on the frozen encoder")
    for name, text in (("encode", "stream feature images to the stream file"),
                       ("decode", "decode the stream file"),
                       ("eval", "evaluate a checkpoint")):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--checkpoint", help="checkpoint to use instead of the run's")
        if name != "eval":
            cmd.add_argument("--split", default="test", choices=["train", "val", "test"])
    grid = sub.add_parser("grid", help="run the experiment grid")
    grid.add_argument("--preset", choices=sorted(PRESETS))
    grid.add_argument("--dry-run", action="store_true", help="γ and attention cost only, no training")
    sub.add_parser("info", help="γ, attention cost and raw bandwidth for the configured model")
    return parser


def load_run(args) -> tuple[Config, RunConfig]:
    config = Config(args.config)
    if args.profile:
        config.apply_profile(args.profile)
    if args.seed is not None:
        config.set("train", "seed", args.seed)
    if args.output_dir is not None:
        config.set("io", "output_dir", str(args.output_dir))
    if args.deterministic:
        config.set("train", "eval_workers", 1)
        config.set("data", "workers", 1)

    run = RunConfig.from_config(config)
    return config, run


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logger = get_logger()

    try:
        config, run = load_run(args)
    except SwinFiError as e:
        show_error(str(e))
        return 1
    except FileNotFoundError as e:
        show_error(f"profile not found: {e.filename}")
        return 1

    if run.logging_enabled:
        logger.set_log_dir(run.log_dir)
    with logger if run.logging_enabled else nullcontext():
        logger.log_separator(f"swinfi {args.command}")
        for section, values in run.to_dict().items():
            for key, value in values.items():
                logger.log_config("load", f"{section}.{key}", value)

        set_precision(run.train.precision)
        state = RunState(run.io.output_dir)
        show_banner(f"SwinFi · {args.command}")

        try:
            logger.log_stage(args.command, "started")
            stage = STAGE_OF.get(args.command)
            if stage is not None and state.is_complete(stage):
                state.reset_stage(stage)
            if args.command == "grid":
                code = cmd_grid(run, state, args, config)
            else:
                code = COMMANDS[args.command](run, state, args)
            logger.log_stage(args.command, "completed" if code == 0 else "failed")
            if code == 0 and stage is not None:
                config.save(run.io.output_dir / RUN_CONFIG_FILE)
            return code
        except PrerequisiteError as e:
            show_error(str(e))
            logger.log_stage(args.command, "skipped", str(e))
            return 1
        except SwinFiError as e:
            show_error(f"{type(e).__name__}: {e}")
            diagnostics = getattr(e, "diagnostics", None)
            if diagnostics:
                show_key_value_list(diagnostics, title="Diagnostics")
            logger.log_exception(e, context=f"{args.command} failed")
            return 1
        except KeyboardInterrupt:
            console.print("\n[yellow]Interrupted by user[/yellow]")
            logger.log_status("warning", "Session interrupted by user (Ctrl+C)")
            return 130


if __name__ == "__main__":
    sys.exit(main())
