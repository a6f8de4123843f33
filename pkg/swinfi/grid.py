"""
Experiment grid

Runs a list of model cells (patch, window, width, depths, input mode) over
one dataset and collects a results table: compression ratio, attention
cost, reconstruction NMSE and classification accuracy per cell. A failing
cell is recorded with its error and the grid moves on.

Cells whose patch or window does not divide the frame run on zero-padded
frames; NMSE is scored on the original region only.
"""

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.logger import get_logger
from swinfi.checkpoint import Checkpoint
from swinfi.csiprep import CsiFrameBatch, MODES, channels_for_mode
from swinfi.errors import ConfigError, SwinFiError
from swinfi.layers import effective_window
from swinfi.model import ModelConfig, compression_ratio, complexity_estimate
from swinfi.runconfig import RunConfig
from swinfi.training import build_dataset, evaluate, train_autoencoder, train_classifier


COLUMNS = [
    "cell", "mode", "window", "patch", "C", "depths", "D", "S", "T", "S_padded", "T_padded",
    "gamma", "gamma_exact", "latent_elements", "omega_wmsa", "omega_msa",
    "nmse_db", "nmse_db_usable", "accuracy_pct", "status", "error",
]

MAX_PAD_FACTOR = 4


@dataclass
class GridCell:
    name: str
    mode: str = "amplitude"
    p_S: int = 8
    p_T: int = 1
    M_S: int = 1
    M_T: int = 16
    C: int = 32
    depths: Tuple[int, ...] = (2, 2, 6, 2)

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)

    @classmethod
    def from_dict(cls, data: dict) -> "GridCell":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown grid cell keys: {sorted(unknown)}")
        return cls(**data)


def _ratios() -> List[GridCell]:
    cells = []
    for mode, widths in (("amplitude", (32, 16)), ("mixed", (64, 32))):
        wide, narrow = widths
        layouts = [
            (wide, (2, 2, 6, 2)), (narrow, (2, 2, 6, 2)),
            (wide, (2, 2, 2, 6, 2)), (narrow, (2, 2, 2, 6, 2)),
            (wide, (2, 2, 2, 2, 6, 2)),
        ]
        for C, depths in layouts:
            cells.append(GridCell(name=f"{mode}-C{C}-L{len(depths)}", mode=mode, C=C, depths=depths))
    return cells


def _ablation() -> List[GridCell]:
    cells = []
    for depths in ((2, 2, 6, 2), (2, 2, 2, 6, 2)):
        cells.append(GridCell(name=f"square-L{len(depths)}", p_S=3, p_T=3, M_S=4, M_T=4, depths=depths))
        cells.append(GridCell(name=f"rect-L{len(depths)}", depths=depths))
    return cells


PRESETS: Dict[str, Callable[[], List[GridCell]]] = {
    "ratios": _ratios,
    "ablation": _ablation,
}


def cells_from_config(tree: Optional[dict]) -> List[GridCell]:
    """Cells from a `grid` config section: a named preset, explicit cells, or both."""
    tree = tree or {}
    cells = []
    preset = tree.get("preset")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown grid preset '{preset}' (expected one of {sorted(PRESETS)})")
        cells.extend(PRESETS[preset]())
    cells.extend(GridCell.from_dict(c) for c in tree.get("cells") or [])
    return cells


def cell_config(base: ModelConfig, cell: GridCell, n_antennas: int) -> ModelConfig:
    """The base model with the cell's layout and the channel count its mode implies."""
    if cell.mode not in MODES:
        raise ConfigError(f"cell {cell.name}: unknown mode '{cell.mode}'")
    return replace(
        base, p_S=cell.p_S, p_T=cell.p_T, M_S=cell.M_S, M_T=cell.M_T, C=cell.C,
        depths=cell.depths, D=channels_for_mode(cell.mode, n_antennas),
    )


def padded_config(cfg: ModelConfig) -> ModelConfig:
    """
    Smallest S, T at or above the configured extents for which the model is valid

    Extents grow in steps of p·2^(len(depths)-1) until every stage grid is
    tiled by its window.

    Raises:
        ConfigError: nothing valid within MAX_PAD_FACTOR times the original extent
    """
    unit = 2 ** cfg.n_merges
    step_s, step_t = cfg.p_S * unit, cfg.p_T * unit
    start_s = -(-cfg.S // step_s) * step_s
    start_t = -(-cfg.T // step_t) * step_t

    for S in range(start_s, MAX_PAD_FACTOR * cfg.S + 1, step_s):
        for T in range(start_t, MAX_PAD_FACTOR * cfg.T + 1, step_t):
            candidate = replace(cfg, S=S, T=T)
            if candidate.validate()[0]:
                return candidate
    valid, errors = cfg.validate()
    raise ConfigError(f"no padded extent makes this layout valid: {'; '.join(errors)}", errors)


def pad_batch(batch: CsiFrameBatch, S: int, T: int) -> CsiFrameBatch:
    """Zero-pad frames to S×T; padded subcarrier rows are marked unusable."""
    _, _, s0, t0 = batch.data.shape
    if (S, T) == (s0, t0):
        return batch
    data = np.pad(batch.data, ((0, 0), (0, 0), (0, S - s0), (0, T - t0)))
    mask = np.concatenate([batch.usable_mask, np.zeros(S - s0, dtype=bool)])
    return replace(batch, data=data, usable_mask=mask)


def plan_row(cell: GridCell, cfg: ModelConfig, padded: ModelConfig) -> dict:
    """Static columns of a cell: γ recomputed from the layout and the first-stage attention cost."""
    grid = padded.stage_grids()[0]
    window, _ = effective_window(grid, padded.window)
    report = complexity_estimate(grid[0], grid[1], padded.C, window[0] * window[1])
    gamma = compression_ratio(padded)
    return {
        "cell": cell.name,
        "mode": cell.mode,
        "window": f"{cell.M_S}x{cell.M_T}",
        "patch": f"{cell.p_S}x{cell.p_T}",
        "C": cell.C,
        "depths": "[" + ",".join(str(d) for d in cell.depths) + "]",
        "D": cfg.D,
        "S": cfg.S,
        "T": cfg.T,
        "S_padded": padded.S,
        "T_padded": padded.T,
        "gamma": float(gamma),
        "gamma_exact": str(gamma),
        "latent_elements": padded.latent_elements,
        "omega_wmsa": report.omega_wmsa,
        "omega_msa": report.omega_msa,
        "nmse_db": np.nan,
        "nmse_db_usable": np.nan,
        "accuracy_pct": np.nan,
        "status": "planned",
        "error": "",
    }


def _train_cell(run: RunConfig, cfg: ModelConfig, mode: str, batches: Dict[str, CsiFrameBatch]) -> dict:
    crop = (run.model.S, run.model.T)
    padded = {name: pad_batch(b, cfg.S, cfg.T) for name, b in batches.items()}
    cell_run = replace(run, model=cfg, data=replace(run.data, mode=mode))

    ae = train_autoencoder(cell_run, padded, crop=crop)
    ckpt = Checkpoint(model=ae.model, mode=mode, norm_stats=padded["train"].norm_stats)
    cls = train_classifier(cell_run, ckpt, padded)
    test_name = "test" if len(padded.get("test", [])) else "train"
    report = evaluate(cls.model, padded[test_name], workers=run.train.eval_workers,
                      with_classifier=True, split=test_name, crop=crop)
    return {
        "nmse_db": report.nmse_db,
        "nmse_db_usable": report.nmse_db_usable,
        "accuracy_pct": report.accuracy_pct,
        "status": "ok",
    }


def run_experiment_grid(
    run: RunConfig,
    cells: Sequence[GridCell],
    train: bool = True,
    pad: bool = True,
    batches_for: Optional[Callable[[str], Dict[str, CsiFrameBatch]]] = None,
    on_cell: Optional[Callable[[int, int, dict], None]] = None,
) -> pd.DataFrame:
    """
    Evaluate every cell and return one results row per cell

    Args:
        run: Base run configuration (dataset, training settings, base model extents)
        cells: Layouts to try
        train: Train and score each cell; False emits planned rows (γ and attention cost only)
        pad: Zero-pad frames when a layout does not divide them
        batches_for: mode -> standardized splits (default: build from run.data)
        on_cell: Callback(index, total, row) after each cell

    Returns:
        DataFrame with COLUMNS; failed cells carry status "failed" and the error
    """
    logger = get_logger()
    cache: Dict[str, Dict[str, CsiFrameBatch]] = {}

    def splits(mode: str) -> Dict[str, CsiFrameBatch]:
        if mode not in cache:
            if batches_for is not None:
                cache[mode] = batches_for(mode)
            else:
                cache[mode] = build_dataset(replace(run, data=replace(run.data, mode=mode)))
        return cache[mode]

    rows = []
    for index, cell in enumerate(cells):
        row = {column: np.nan for column in COLUMNS}
        row.update(cell=cell.name, mode=cell.mode, status="failed", error="")
        try:
            cfg = cell_config(run.model, cell, run.n_antennas)
            padded = padded_config(cfg) if pad else cfg
            padded.check()
            row = plan_row(cell, cfg, padded)
            if train:
                row.update(_train_cell(run, padded, cell.mode, splits(cell.mode)))
        except SwinFiError as e:
            row.update(status="failed", error=f"{type(e).__name__}: {e}")
            logger.log_status("warning", f"grid cell {cell.name} failed: {e}")

        logger.log_metrics({"event": "grid", "index": index, **row})
        rows.append(row)
        if on_cell is not None:
            on_cell(index, len(cells), row)

    return pd.DataFrame(rows, columns=COLUMNS)

