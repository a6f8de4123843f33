"""
Feature-image wire record

Little-endian layout, 24-byte header followed by the payload:

    magic "SWFI" (4) | u8 version | u8 dtype (0 = f32) | u16 C | u16 g_S |
    u16 g_T | u32 frame_id | u64 config_digest | g_S*g_T*C float32

The header sizes give the payload length once the header checks out; a
reader that meets a bad header scans forward to the next magic.
"""

import struct
from typing import BinaryIO, Callable, Iterator, Optional, Tuple

import numpy as np

from swinfi.errors import FormatError, IncompatibleCheckpointError, LengthError
from swinfi.model import FeatureImage


WIRE_MAGIC = b"SWFI"
WIRE_VERSION = 1
DTYPE_F32 = 0

HEADER = struct.Struct("<4sBBHHHIQ")
HEADER_SIZE = HEADER.size


def payload_size(grid, dim: int) -> int:
    return grid[0] * grid[1] * dim * 4


def record_size(grid, dim: int) -> int:
    return HEADER_SIZE + payload_size(grid, dim)


def serialize_feature_image(fi: FeatureImage) -> bytes:
    """Encode one feature image as a wire record."""
    gs, gt = fi.grid
    feats = np.asarray(fi.feats, dtype="<f4")
    if feats.shape != (gs * gt, fi.dim):
        raise LengthError(f"feature image {fi.frame_id}: feats {feats.shape} do not match grid {fi.grid}")
    for name, value, limit in (("C", fi.dim, 0xFFFF), ("g_S", gs, 0xFFFF), ("g_T", gt, 0xFFFF),
                               ("frame_id", fi.frame_id, 0xFFFFFFFF)):
        if not 0 <= value <= limit:
            raise FormatError(f"{name}={value} does not fit its header field")

    header = HEADER.pack(WIRE_MAGIC, WIRE_VERSION, DTYPE_F32, fi.dim, gs, gt,
                         fi.frame_id, fi.config_digest)
    return header + feats.tobytes()


def deserialize_feature_image(buf: bytes, expected_digest: Optional[int] = None) -> FeatureImage:
    """
    Decode one wire record

    Args:
        buf: Exactly one record
        expected_digest: Reject records encoded under another model config

    Raises:
        LengthError: truncated header or payload, or trailing bytes
        FormatError: bad magic, version or dtype
        IncompatibleCheckpointError: digest differs from expected_digest
    """
    if len(buf) < HEADER_SIZE:
        raise LengthError(f"record of {len(buf)} bytes is shorter than the {HEADER_SIZE}-byte header")

    magic, version, dtype, dim, gs, gt, frame_id, digest = HEADER.unpack_from(buf)
    if magic != WIRE_MAGIC:
        raise FormatError(f"bad magic {magic!r} (expected {WIRE_MAGIC!r})")
    if version != WIRE_VERSION:
        raise FormatError(f"unsupported wire version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported payload dtype {dtype}")

    expected = record_size((gs, gt), dim)
    if len(buf) != expected:
        raise LengthError(f"record is {len(buf)} bytes, header declares {expected}")
    if expected_digest is not None and digest != expected_digest:
        raise IncompatibleCheckpointError(
            f"record {frame_id} was encoded with config {digest:#018x}, expected {expected_digest:#018x}"
        )

    feats = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(gs * gt, dim).astype(np.float32)
    return FeatureImage(grid=(gs, gt), feats=feats, frame_id=frame_id, config_digest=digest)


def header_problem(header: bytes, expected: Optional[Tuple[int, int, int]] = None) -> Optional[str]:
    """
    Why a record header cannot be trusted, or None when it can

    Args:
        header: HEADER_SIZE bytes
        expected: (C, g_S, g_T) the reader's model produces
    """
    magic, version, dtype, dim, gs, gt, frame_id, _ = HEADER.unpack(header)
    if magic != WIRE_MAGIC:
        return f"bad magic {magic!r}"
    if version != WIRE_VERSION:
        return f"unsupported wire version {version}"
    if dtype != DTYPE_F32:
        return f"unsupported payload dtype {dtype}"
    if expected is not None and (dim, gs, gt) != tuple(expected):
        c, egs, egt = expected
        return f"record {frame_id} declares ({gs}, {gt})×{dim}, model expects ({egs}, {egt})×{c}"
    return None


def iter_records(
    stream: BinaryIO,
    expected: Optional[Tuple[int, int, int]] = None,
    on_skip: Optional[Callable[[str], None]] = None,
) -> Iterator[bytes]:
    """
    Split a byte stream into raw records

    A header that fails header_problem is not used to size anything: the
    reader scans forward to the next "SWFI" magic and carries on from
    there. Each corrupt stretch is reported once through on_skip.

    Args:
        stream: Readable binary stream (read(n) returns b"" at the end)
        expected: (C, g_S, g_T) every record must declare
        on_skip: Called with the reason when a stretch of bytes is dropped

    Raises:
        LengthError: the stream ends inside a record
    """
    buf = bytearray()
    eof = False
    skipping = False

    def fill(n: int) -> bool:
        nonlocal eof
        while len(buf) < n and not eof:
            chunk = stream.read(n - len(buf))
            if not chunk:
                eof = True
            else:
                buf.extend(chunk)
        return len(buf) >= n

    def resync():
        keep = len(WIRE_MAGIC) - 1
        while True:
            at = buf.find(WIRE_MAGIC)
            if at >= 0:
                del buf[:at]
                return
            del buf[:max(0, len(buf) - keep)]
            if eof:
                buf.clear()
                return
            fill(len(buf) + HEADER_SIZE)

    while True:
        if not fill(HEADER_SIZE):
            if not buf:
                return
            raise LengthError(f"stream ended inside a record header ({len(buf)} bytes)")

        header = bytes(buf[:HEADER_SIZE])
        problem = header_problem(header, expected)
        if problem is not None:
            if not skipping and on_skip is not None:
                on_skip(problem)
            skipping = True
            del buf[:1]
            resync()
            continue

        _, _, _, dim, gs, gt, _, _ = HEADER.unpack(header)
        size = record_size((gs, gt), dim)
        if not fill(size):
            raise LengthError(f"stream ended inside a payload ({len(buf) - HEADER_SIZE} of {size - HEADER_SIZE} bytes)")
        record = bytes(buf[:size])
        del buf[:size]
        skipping = False
        yield record
