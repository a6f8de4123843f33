"""
Checkpoint files

Layout (little-endian):

    magic "SWCK" | u16 version | u64 config digest | u32 header length |
    JSON header | float32 blobs in header parameter order

The JSON header carries the model config, input mode, normalization
statistics, parameter names and shapes, and whether the classifier head
was trained. Writes go to a temporary file in the same directory which is
then renamed over the target, so a reader sees either the old file or the
complete new one.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from core.logger import get_logger
from swinfi.csiprep import NormStats
from swinfi.errors import ConfigError, FormatError, IncompatibleCheckpointError, LengthError
from swinfi.model import ModelConfig, SwinFi
from swinfi.tensor import get_dtype


CHECKPOINT_MAGIC = b"SWCK"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sHQI")


@dataclass
class Checkpoint:
    model: SwinFi
    mode: str = "amplitude"
    norm_stats: Optional[NormStats] = None
    has_head: bool = False
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> int:
        return self.model.digest


def checkpoint_bytes(
    model: SwinFi,
    mode: str = "amplitude",
    norm_stats: Optional[NormStats] = None,
    has_head: bool = False,
    meta: Optional[Dict[str, Any]] = None,
) -> bytes:
    params = list(model.named_parameters())
    header = {
        "config": model.cfg.to_dict(),
        "mode": mode,
        "norm_stats": norm_stats.to_dict() if norm_stats is not None else None,
        "has_head": has_head,
        "params": [[name, list(p.shape)] for name, p in params],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.asarray(p.data, dtype="<f4").tobytes() for _, p in params)
    prefix = _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.digest, len(header_bytes))
    return prefix + header_bytes + blobs


def save_checkpoint(
    path: Union[str, Path],
    model: SwinFi,
    mode: str = "amplitude",
    norm_stats: Optional[NormStats] = None,
    has_head: bool = False,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Atomically write a checkpoint

    Args:
        path: Target file
        model: Model whose parameters are saved
        mode: Input mode the model was trained on
        norm_stats: Training-split statistics needed to standardize new frames
        has_head: The classifier head holds trained weights
        meta: Extra JSON-serializable fields (step, metrics, seed)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = checkpoint_bytes(model, mode, norm_stats, has_head, meta)

    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise

    get_logger().log_status("info", f"checkpoint saved: {path} ({len(payload)} bytes)")
    return path


def load_checkpoint(path: Union[str, Path], expected_digest: Optional[int] = None) -> Checkpoint:
    """
    Read a checkpoint and rebuild its model

    Raises:
        FormatError: bad magic, version or header
        LengthError: file truncated or carrying trailing bytes
        IncompatibleCheckpointError: digest does not match the stored config or expected_digest
    """
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise LengthError(f"{path}: {len(buf)} bytes is shorter than the checkpoint prefix")

    magic, version, digest, header_len = _PREFIX.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")

    start = _PREFIX.size
    if len(buf) < start + header_len:
        raise LengthError(f"{path}: truncated header")
    try:
        header = json.loads(buf[start:start + header_len].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e

    if cfg.digest() != digest:
        raise IncompatibleCheckpointError(f"{path}: stored digest does not match its config")
    if expected_digest is not None and digest != expected_digest:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint config {digest:#018x} does not match run config {expected_digest:#018x}"
        )

    model = SwinFi(cfg)
    params = model.param_dict()
    offset = start + header_len
    dtype = get_dtype()
    for name, shape in header["params"]:
        if name not in params or list(params[name].shape) != list(shape):
            raise IncompatibleCheckpointError(f"{path}: parameter '{name}' {shape} does not fit the model")
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(buf):
            raise LengthError(f"{path}: truncated at parameter '{name}'")
        params[name].data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset) \
            .reshape(shape).astype(dtype)
        offset = end
    if offset != len(buf):
        raise LengthError(f"{path}: {len(buf) - offset} trailing bytes")
    if len(header["params"]) != len(params):
        raise IncompatibleCheckpointError(f"{path}: holds {len(header['params'])} of {len(params)} parameters")

    stats = header.get("norm_stats")
    return Checkpoint(
        model=model,
        mode=header.get("mode", "amplitude"),
        norm_stats=NormStats.from_dict(stats) if stats else None,
        has_head=bool(header.get("has_head", False)),
        meta=header.get("meta", {}),
    )
