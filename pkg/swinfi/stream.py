"""
Edge -> cloud streaming

The edge side encodes frames one at a time, serializes each feature image
into a wire record and writes it to a sink (a file or a ByteChannel). The
cloud side reads records back, decodes them, optionally classifies, and
scores the reconstruction against a reference when one is supplied.

Byte accounting follows the wire format: every record costs a 24-byte
header plus g_S*g_T*C*4 payload bytes; the raw side counts D*S*T*4 bytes
per frame.
"""

import io
import queue
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, List, Optional, Sequence, Union

import numpy as np

from core.logger import get_logger
from swinfi.checkpoint import Checkpoint, load_checkpoint
from swinfi.csiprep import CsiFrameBatch
from swinfi.errors import FormatError, LengthError, ShapeError, StreamError
from swinfi.model import classify, compression_ratio, decode, encode, nmse_db
from swinfi.training import MetricsReport, accuracy_from_confusion, confusion_matrix
from swinfi.wire import deserialize_feature_image, iter_records, serialize_feature_image


CheckpointLike = Union[str, Path, Checkpoint]


@dataclass
class StreamStats:
    frames_sent: int = 0
    raw_bytes: int = 0
    compressed_bytes: int = 0
    gamma: Fraction = Fraction(0)
    frames_received: int = 0
    warnings: int = 0

    @property
    def measured_ratio(self) -> float:
        return self.raw_bytes / self.compressed_bytes if self.compressed_bytes else 0.0

    def to_record(self) -> dict:
        return {
            "frames_sent": self.frames_sent,
            "frames_received": self.frames_received,
            "raw_bytes": self.raw_bytes,
            "compressed_bytes": self.compressed_bytes,
            "measured_ratio": self.measured_ratio,
            "gamma": float(self.gamma),
            "warnings": self.warnings,
        }


@dataclass
class DecodeResult:
    frames: np.ndarray
    frame_ids: List[int] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    report: Optional[MetricsReport] = None
    stats: StreamStats = field(default_factory=StreamStats)


class ByteChannel:
    """
    In-memory byte pipe with a bounded buffer

    write() blocks while `capacity` chunks are queued; read() blocks until
    data arrives or the writer closes the channel.
    """

    _EOF = None

    def __init__(self, capacity: int = 16, timeout: Optional[float] = 30.0):
        self._queue: "queue.Queue[Optional[bytes]]" = queue.Queue(maxsize=capacity)
        self._buffer = bytearray()
        self._closed = False
        self._eof = False
        self.timeout = timeout

    def write(self, data: bytes) -> int:
        if self._closed:
            raise StreamError("write to a closed channel")
        try:
            self._queue.put(bytes(data), timeout=self.timeout)
        except queue.Full as e:
            raise StreamError(f"channel stayed full for {self.timeout}s") from e
        return len(data)

    def close(self):
        if not self._closed:
            self._closed = True
            self._queue.put(self._EOF, timeout=self.timeout)

    def read(self, n: int = -1) -> bytes:
        while not self._eof and (n < 0 or len(self._buffer) < n):
            try:
                chunk = self._queue.get(timeout=self.timeout)
            except queue.Empty as e:
                raise StreamError(f"no data on channel for {self.timeout}s") from e
            if chunk is self._EOF:
                self._eof = True
            else:
                self._buffer.extend(chunk)
        size = len(self._buffer) if n < 0 else min(n, len(self._buffer))
        out = bytes(self._buffer[:size])
        del self._buffer[:size]
        return out


def _resolve(checkpoint: CheckpointLike) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def edge_encode_stream(
    frames: Union[CsiFrameBatch, np.ndarray],
    checkpoint: CheckpointLike,
    sink: Union[str, Path, BinaryIO, ByteChannel],
    frame_ids: Optional[Sequence[int]] = None,
) -> StreamStats:
    """
    Encode and ship frames one record at a time

    Args:
        frames: Standardized B×D×S×T frames (a batch carries its own ids)
        checkpoint: Autoencoder checkpoint (path or loaded)
        sink: Output file path, writable binary stream or ByteChannel
        frame_ids: Ids written into records (default: batch ids or 0..B-1)

    Returns:
        StreamStats for the frames written

    Raises:
        StreamError: the sink failed; .stats holds what was sent before
    """
    ckpt = _resolve(checkpoint)
    model, cfg = ckpt.model, ckpt.model.cfg
    if isinstance(frames, CsiFrameBatch):
        frame_ids = frames.frame_ids if frame_ids is None else frame_ids
        x = frames.data
    else:
        x = np.asarray(frames)
    ids = list(range(len(x))) if frame_ids is None else [int(i) for i in frame_ids]
    if len(x) and tuple(x.shape[1:]) != (cfg.D, cfg.S, cfg.T):
        raise ShapeError(f"frames {x.shape[1:]} do not fit model input {(cfg.D, cfg.S, cfg.T)}")

    stats = StreamStats(gamma=compression_ratio(cfg))
    raw_per_frame = cfg.D * cfg.S * cfg.T * 4
    owned = isinstance(sink, (str, Path))
    out = open(sink, "wb") if owned else sink
    logger = get_logger()
    started = time.perf_counter()

    try:
        for i in range(len(x)):
            record = serialize_feature_image(encode(x[i:i + 1], model, frame_ids=[ids[i]])[0])
            try:
                out.write(record)
            except (OSError, ValueError, StreamError) as e:
                raise StreamError(f"sink write failed at frame {ids[i]}: {e}", stats) from e
            stats.frames_sent += 1
            stats.raw_bytes += raw_per_frame
            stats.compressed_bytes += len(record)
    finally:
        if owned:
            out.close()

    logger.log_metrics({"event": "edge_stream", **stats.to_record(),
                        "wall_time": round(time.perf_counter() - started, 3)})
    return stats


def cloud_decode_stream(
    source: Union[str, Path, BinaryIO, ByteChannel, bytes],
    checkpoint: CheckpointLike,
    reference: Optional[CsiFrameBatch] = None,
) -> DecodeResult:
    """
    Read records, decode each one, classify when the checkpoint has a trained head

    Malformed records (bad magic, version, dtype or a grid this model does
    not produce) are skipped and counted as warnings, and reading resumes
    at the next record magic; a stream that ends inside a record stops the read with one
    warning. A record from another model config raises.

    Args:
        source: File path, readable binary stream, ByteChannel or raw bytes
        checkpoint: Checkpoint matching the edge's
        reference: Original frames (matched by frame id) for NMSE/accuracy

    Raises:
        IncompatibleCheckpointError: record digest differs from the checkpoint's
    """
    ckpt = _resolve(checkpoint)
    model, cfg = ckpt.model, ckpt.model.cfg
    logger = get_logger()
    stats = StreamStats(gamma=compression_ratio(cfg))
    started = time.perf_counter()

    if isinstance(source, (bytes, bytearray)):
        stream, owned = io.BytesIO(source), False
    elif isinstance(source, (str, Path)):
        stream, owned = open(source, "rb"), True
    else:
        stream, owned = source, False

    def skipped(reason: str):
        stats.warnings += 1
        logger.log_status("warning", f"skipping malformed record: {reason}")

    decoded, logits, ids = [], [], []
    try:
        records = iter_records(stream, expected=(cfg.C, *cfg.feature_grid), on_skip=skipped)
        while True:
            try:
                raw = next(records)
            except StopIteration:
                break
            except LengthError as e:
                stats.warnings += 1
                logger.log_status("warning", f"stream truncated: {e}")
                break

            stats.compressed_bytes += len(raw)
            try:
                fi = deserialize_feature_image(raw, expected_digest=model.digest)
                frame = decode([fi], model)[0]
            except (FormatError, LengthError, ShapeError) as e:
                skipped(str(e))
                continue

            decoded.append(frame)
            if ckpt.has_head:
                logits.append(classify([fi], model)[0])
            ids.append(fi.frame_id)
            stats.frames_received += 1
            stats.raw_bytes += cfg.D * cfg.S * cfg.T * 4
    finally:
        if owned:
            stream.close()

    frames = np.stack(decoded) if decoded else np.zeros((0, cfg.D, cfg.S, cfg.T), dtype=np.float32)
    result = DecodeResult(
        frames=frames,
        frame_ids=ids,
        logits=np.stack(logits) if logits else None,
        stats=stats,
    )
    if reference is not None and decoded:
        result.report = _score(result, reference, cfg.n_classes)
        result.report.wall_time = time.perf_counter() - started

    logger.log_metrics({"event": "cloud_stream", **stats.to_record(),
                        **(result.report.to_record() if result.report else {})})
    return result


def _score(result: DecodeResult, reference: CsiFrameBatch, n_classes: int) -> MetricsReport:
    position = {int(fid): i for i, fid in enumerate(reference.frame_ids)}
    missing = [fid for fid in result.frame_ids if fid not in position]
    if missing:
        raise ShapeError(f"reference has no frames with ids {missing[:5]}")
    rows = np.asarray([position[fid] for fid in result.frame_ids])
    x = reference.data[rows]

    report = MetricsReport(
        nmse_db=nmse_db(x, result.frames),
        nmse_db_usable=nmse_db(x, result.frames, row_mask=reference.usable_mask),
        split="stream",
        n_frames=len(rows),
    )
    if result.logits is not None:
        report.confusion = confusion_matrix(reference.labels[rows], result.logits.argmax(axis=1), n_classes)
        report.accuracy_pct = accuracy_from_confusion(report.confusion)
    return report


def run_channel_stream(
    frames: CsiFrameBatch,
    checkpoint: CheckpointLike,
    capacity: int = 4,
    reference: Optional[CsiFrameBatch] = None,
):
    """
    Edge writer thread and cloud reader on one bounded ByteChannel

    Returns:
        (edge StreamStats, cloud DecodeResult)

    Raises:
        StreamError: the writer thread failed
    """
    ckpt = _resolve(checkpoint)
    channel = ByteChannel(capacity=capacity)
    outcome = {}

    def edge():
        try:
            outcome["stats"] = edge_encode_stream(frames, ckpt, channel)
        except Exception as e:
            outcome["error"] = e
        finally:
            channel.close()

    writer = threading.Thread(target=edge, name="swinfi-edge", daemon=True)
    writer.start()
    result = cloud_decode_stream(channel, ckpt, reference=reference)
    writer.join()

    if "error" in outcome:
        error = outcome["error"]
        raise error if isinstance(error, StreamError) else StreamError(f"edge writer failed: {error}") from error
    return outcome["stats"], result
