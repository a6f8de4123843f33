"""
CSI Preprocessing

Turns raw complex CSI captures into model-ready amplitude/phase frame
batches:
- "CSI0" capture container read/write
- dB amplitude with a floor against nulled carriers
- phase unwrapping along subcarriers and linear phase-error fitting
- control/pilot subcarrier masking (versioned mask table)
- sliding-window framing and per-channel standardization
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from core.logger import get_logger
from swinfi.errors import (
    ConfigError, DegenerateDataError, DegenerateFitError, FormatError,
    LengthError, ShapeError
)


CAPTURE_MAGIC = b"CSI0"
CAPTURE_VERSION = 1
_CAPTURE_HEADER = struct.Struct("<4sBBHIBBI")

AMPLITUDE_FLOOR = 1e-12

MODES = ("amplitude", "phase", "mixed")

# Usable subcarriers per FFT size, by signed index k = i - S/2:
# dc < |k| <= edge and |k| not a pilot. Version bumps whenever an entry changes.
MASK_TABLE_VERSION = 1
MASK_TABLE: Dict[int, Dict[str, object]] = {
    256: {"band": "80MHz", "dc": 1, "edge": 122, "pilots": (11, 39, 75, 103)},
    128: {"band": "40MHz", "dc": 1, "edge": 58, "pilots": (11, 25, 53)},
    64: {"band": "20MHz", "dc": 0, "edge": 28, "pilots": (7, 21)},
}


# ----------------------------------------------------------------------
# Types
# ----------------------------------------------------------------------

@dataclass
class RawCsiCapture:
    """
    One capture session: complex CSI per packet, antenna and subcarrier

    packets has shape (packet_count, n_antennas, n_subcarriers), complex64,
    subcarriers ordered by ascending signed index.
    """

    packets: np.ndarray
    sample_rate_hz: float = 100.0
    label: int = 0
    source: str = ""

    def __post_init__(self):
        if self.packets.ndim != 3:
            raise ShapeError(f"packets must be (P, antennas, subcarriers), got {self.packets.shape}")
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        self.packets = np.ascontiguousarray(self.packets, dtype=np.complex64)

    @property
    def n_antennas(self) -> int:
        return self.packets.shape[1]

    @property
    def n_subcarriers(self) -> int:
        return self.packets.shape[2]

    @property
    def packet_count(self) -> int:
        return self.packets.shape[0]


@dataclass
class LinearFitParams:
    """Coefficients of the linear phase model; delta and beta are unobservable and default to 0."""

    n: int
    N: int = 256
    delta: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.n < 2:
            raise DegenerateFitError(f"linear fit needs at least 2 subcarriers, got {self.n}")
        if self.n > self.N:
            raise ConfigError(f"fitted subcarriers n={self.n} exceeds FFT size N={self.N}")


@dataclass
class PhaseRecord:
    k: np.ndarray
    phi_hat: np.ndarray
    phi_tilde: np.ndarray
    a_slope: float
    b_intercept: float


@dataclass
class NormStats:
    """Per-channel standardization statistics (training split only)."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> Dict[str, list]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "NormStats":
        return cls(mean=np.asarray(data["mean"], dtype=np.float64),
                   std=np.asarray(data["std"], dtype=np.float64))


@dataclass
class CsiFrame:
    """One window of per-packet features: (2*antennas, S, T), amplitude channels first."""

    data: np.ndarray
    label: int
    source: str = ""
    start: int = 0


@dataclass
class CsiFrameBatch:
    data: np.ndarray
    labels: np.ndarray
    mode: str
    norm_stats: NormStats
    usable_mask: np.ndarray
    frame_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.data.shape[0]

    def subset(self, index: Union[slice, np.ndarray]) -> "CsiFrameBatch":
        return CsiFrameBatch(
            data=self.data[index],
            labels=self.labels[index],
            mode=self.mode,
            norm_stats=self.norm_stats,
            usable_mask=self.usable_mask,
            frame_ids=self.frame_ids[index],
        )


# ----------------------------------------------------------------------
# Capture container
# ----------------------------------------------------------------------

def capture_to_bytes(capture: RawCsiCapture) -> bytes:
    """Serialize a capture to the "CSI0" little-endian container."""
    header = _CAPTURE_HEADER.pack(
        CAPTURE_MAGIC,
        CAPTURE_VERSION,
        capture.n_antennas,
        capture.n_subcarriers,
        int(round(capture.sample_rate_hz * 100)),
        capture.label,
        0,
        capture.packet_count,
    )
    return header + capture.packets.astype("<c8", copy=False).tobytes()


def capture_from_bytes(buf: bytes, source: str = "") -> RawCsiCapture:
    """
    Parse a "CSI0" container

    Raises:
        FormatError: bad magic or version
        LengthError: payload size differs from the declared packet count
    """
    if len(buf) < _CAPTURE_HEADER.size:
        raise LengthError(f"capture shorter than its {_CAPTURE_HEADER.size}-byte header")

    magic, version, n_ant, n_sub, rate_centihz, label, _reserved, count = \
        _CAPTURE_HEADER.unpack_from(buf, 0)

    if magic != CAPTURE_MAGIC:
        raise FormatError(f"bad capture magic {magic!r}")
    if version != CAPTURE_VERSION:
        raise FormatError(f"unsupported capture version {version}")
    if rate_centihz == 0:
        raise FormatError("capture declares a zero sample rate")

    payload = memoryview(buf)[_CAPTURE_HEADER.size:]
    expected = count * n_ant * n_sub * 8
    if len(payload) != expected:
        raise LengthError(
            f"capture declares {count} packets ({expected} bytes) but carries {len(payload)} bytes"
        )

    values = np.frombuffer(payload, dtype="<c8").reshape(count, n_ant, n_sub)
    return RawCsiCapture(
        packets=values.astype(np.complex64),
        sample_rate_hz=rate_centihz / 100.0,
        label=label,
        source=source,
    )


def parse_capture(path: Union[str, Path]) -> RawCsiCapture:
    path = Path(path)
    return capture_from_bytes(path.read_bytes(), source=path.name)


def write_capture(capture: RawCsiCapture, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(capture_to_bytes(capture))
    return path


def raw_bandwidth_bps(n_antennas: int, n_subcarriers: int, sample_rate_hz: float) -> float:
    """Raw CSI rate: two 32-bit floats per antenna and subcarrier per packet."""
    return float(n_antennas * n_subcarriers * sample_rate_hz * 2 * 4 * 8)


def raw_bandwidth(capture: RawCsiCapture) -> float:
    return raw_bandwidth_bps(capture.n_antennas, capture.n_subcarriers, capture.sample_rate_hz)


# ----------------------------------------------------------------------
# Subcarrier masks
# ----------------------------------------------------------------------

def subcarrier_indices(n_subcarriers: int) -> np.ndarray:
    """Signed subcarrier index k for each row, ascending."""
    return np.arange(n_subcarriers, dtype=np.int64) - n_subcarriers // 2


def default_usable_mask(n_subcarriers: int) -> np.ndarray:
    """
    Usable-subcarrier mask for an FFT size

    Sizes missing from MASK_TABLE are treated as fully usable.
    """
    entry = MASK_TABLE.get(n_subcarriers)
    if entry is None:
        return np.ones(n_subcarriers, dtype=bool)

    magnitude = np.abs(subcarrier_indices(n_subcarriers))
    usable = (magnitude > entry["dc"]) & (magnitude <= entry["edge"])
    usable &= ~np.isin(magnitude, entry["pilots"])
    return usable


def mask_subcarriers(matrix: np.ndarray, usable_mask: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Zero every non-usable subcarrier along `axis`

    Raises:
        ShapeError: mask length differs from the subcarrier extent
    """
    matrix = np.asarray(matrix)
    usable_mask = np.asarray(usable_mask, dtype=bool)
    if usable_mask.ndim != 1 or matrix.ndim == 0 or usable_mask.shape[0] != matrix.shape[axis]:
        raise ShapeError(
            f"mask of length {usable_mask.shape} does not match axis {axis} of {matrix.shape}"
        )

    shape = [1] * matrix.ndim
    shape[axis] = usable_mask.shape[0]
    return np.where(usable_mask.reshape(shape), matrix, 0).astype(matrix.dtype, copy=False)


# ----------------------------------------------------------------------
# Amplitude and phase
# ----------------------------------------------------------------------

def amplitude_db(capture: RawCsiCapture) -> np.ndarray:
    """Per-packet amplitude in dB, shape (P, antennas, subcarriers)."""
    magnitude = np.abs(capture.packets.astype(np.complex128))
    return 20.0 * np.log10(magnitude + AMPLITUDE_FLOOR)


def unwrap_phase(phi_raw: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Remove 2π jumps along the subcarrier axis

    Each consecutive difference of the result lies in (-π, π]; the first
    element is unchanged. Corrections are whole turns added to the input,
    so unwrapping an unwrapped vector returns it unchanged.
    """
    phi = np.asarray(phi_raw, dtype=np.float64)
    if phi.shape[axis] < 2:
        return phi.copy()

    diffs = np.diff(phi, axis=axis)
    turns = -np.ceil((diffs - np.pi) / (2.0 * np.pi))
    cumulative = np.cumsum(turns, axis=axis)

    pad = [(0, 0)] * phi.ndim
    pad[axis] = (1, 0)
    return phi + 2.0 * np.pi * np.pad(cumulative, pad)


def _fit_coefficients(phi_hat: np.ndarray, k: np.ndarray, params: LinearFitParams):
    """Slope and intercept over the last axis, vectorized across leading axes."""
    n, N = params.n, params.N
    a = (phi_hat[..., -1] - phi_hat[..., 0]) / (k[-1] - k[0]) - 2.0 * np.pi * params.delta / N
    b = (phi_hat.mean(axis=-1)
         - 2.0 * np.pi * params.delta / (n * N) * float(k.sum())
         + params.beta)
    return a, b


def _check_fit_indices(k: np.ndarray):
    if k[-1] == k[0]:
        raise DegenerateFitError("first and last subcarrier indices coincide")
    if np.any(np.diff(k) <= 0):
        raise ShapeError("subcarrier indices must be strictly increasing")


def linear_fit_correct(
    phi_hat: np.ndarray,
    k: np.ndarray,
    params: Optional[LinearFitParams] = None,
) -> PhaseRecord:
    """
    Remove the linear-in-subcarrier phase term (endpoint slope plus mean)

    Args:
        phi_hat: Unwrapped phase over the fitted subcarriers
        k: Signed subcarrier indices, strictly increasing
        params: Fit parameters (default: delta = beta = 0, N = 256)

    Returns:
        PhaseRecord with the corrected phase and fit coefficients
    """
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if params is None:
        params = LinearFitParams(n=len(phi_hat), N=max(256, len(phi_hat)))
    if not (phi_hat.ndim == 1 and len(phi_hat) == len(k) == params.n):
        raise ShapeError(
            f"phase ({phi_hat.shape}), indices ({k.shape}) and n={params.n} must agree"
        )
    _check_fit_indices(k)

    a, b = _fit_coefficients(phi_hat, k, params)
    return PhaseRecord(
        k=k,
        phi_hat=phi_hat,
        phi_tilde=phi_hat - (a * k + b),
        a_slope=float(a),
        b_intercept=float(b),
    )


def sanitize_phase(
    capture: RawCsiCapture,
    usable_mask: Optional[np.ndarray] = None,
    params: Optional[LinearFitParams] = None,
) -> np.ndarray:
    """
    Unwrap and linearly correct every packet and antenna independently

    Only usable subcarriers take part in unwrapping and fitting; the
    remaining rows are zero in the result.

    Returns:
        Corrected phase, shape (P, antennas, subcarriers), float64
    """
    S = capture.n_subcarriers
    usable = default_usable_mask(S) if usable_mask is None else np.asarray(usable_mask, dtype=bool)
    if usable.shape != (S,):
        raise ShapeError(f"mask length {usable.shape} != subcarrier count {S}")

    k = subcarrier_indices(S)[usable].astype(np.float64)
    if params is None:
        params = LinearFitParams(n=len(k), N=S)
    _check_fit_indices(k)

    raw = np.angle(capture.packets.astype(np.complex128))[..., usable]
    phi_hat = unwrap_phase(raw, axis=-1)
    a, b = _fit_coefficients(phi_hat, k, params)

    corrected = np.zeros(capture.packets.shape, dtype=np.float64)
    corrected[..., usable] = phi_hat - (a[..., None] * k + b[..., None])
    return corrected


# ----------------------------------------------------------------------
# Framing and batching
# ----------------------------------------------------------------------

def frame_windows(
    capture: RawCsiCapture,
    T: int = 256,
    stride: Optional[int] = None,
    usable_mask: Optional[np.ndarray] = None,
) -> List[CsiFrame]:
    """
    Cut a capture into (2*antennas, S, T) frames: masked dB amplitude
    channels followed by sanitized phase channels

    A capture shorter than T packets yields no frames.
    """
    stride = T if stride is None else stride
    if stride < 1 or T < 1:
        raise ConfigError(f"frame length and stride must be >= 1 (T={T}, stride={stride})")

    if capture.packet_count < T:
        logger = get_logger()
        if logger.is_active():
            logger.log_status(
                "warning", f"capture '{capture.source}' has {capture.packet_count} packets < T={T}; no frames"
            )
        return []

    usable = default_usable_mask(capture.n_subcarriers) if usable_mask is None else usable_mask
    amplitude = mask_subcarriers(amplitude_db(capture), usable, axis=-1)
    phase = sanitize_phase(capture, usable)
    features = np.concatenate([amplitude, phase], axis=1).astype(np.float32)

    frames = []
    for start in range(0, capture.packet_count - T + 1, stride):
        window = features[start:start + T].transpose(1, 2, 0)
        frames.append(CsiFrame(
            data=np.ascontiguousarray(window),
            label=capture.label,
            source=capture.source,
            start=start,
        ))
    return frames


def select_channels(data: np.ndarray, mode: str) -> np.ndarray:
    """Pick amplitude, phase or all channels from full (2*antennas)-channel frames."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode '{mode}' (expected one of {MODES})")
    half = data.shape[1] // 2
    if mode == "amplitude":
        return data[:, :half]
    if mode == "phase":
        return data[:, half:]
    return data


def compute_norm_stats(data: np.ndarray, usable_mask: np.ndarray) -> NormStats:
    """
    Per-channel mean/std over usable rows of a (B, D, S, T) array

    Raises:
        DegenerateDataError: no data, or zero spread on a channel
    """
    if data.shape[0] == 0:
        raise DegenerateDataError("cannot compute normalization statistics from zero frames")

    usable_rows = data[:, :, usable_mask, :].astype(np.float64)
    mean = usable_rows.mean(axis=(0, 2, 3))
    std = usable_rows.std(axis=(0, 2, 3))
    flat = np.flatnonzero(std == 0)
    if flat.size:
        raise DegenerateDataError(f"zero standard deviation on usable channel(s) {flat.tolist()}")
    return NormStats(mean=mean, std=std)


def assemble_batch(
    frames: Sequence[CsiFrame],
    mode: str,
    norm_stats: Optional[NormStats] = None,
    usable_mask: Optional[np.ndarray] = None,
    frame_ids: Optional[Sequence[int]] = None,
) -> CsiFrameBatch:
    """
    Stack frames into a standardized B×D×S×T batch

    Args:
        frames: Full-channel frames from frame_windows
        mode: amplitude (D=antennas), phase (D=antennas) or mixed (D=2*antennas)
        norm_stats: Training-split statistics; computed from these frames when absent
        usable_mask: Subcarrier mask (default table entry for S)
        frame_ids: Provenance ids carried into feature images (default 0..B-1)

    Returns:
        CsiFrameBatch with masked rows exactly zero
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode '{mode}' (expected one of {MODES})")
    if not frames and norm_stats is None:
        raise DegenerateDataError("cannot assemble an empty batch without normalization statistics")

    shapes = {f.data.shape for f in frames}
    if len(shapes) > 1:
        raise ShapeError(f"frames differ in shape: {sorted(shapes)}")

    if frames:
        stacked = select_channels(np.stack([f.data for f in frames]).astype(np.float64), mode)
    else:
        stacked = np.zeros((0, len(norm_stats.mean), 0, 0), dtype=np.float64)

    S = stacked.shape[2]
    usable = default_usable_mask(S) if usable_mask is None else np.asarray(usable_mask, dtype=bool)
    if usable.shape != (S,):
        raise ShapeError(f"mask length {usable.shape} != subcarrier count {S}")

    stats = compute_norm_stats(stacked, usable) if norm_stats is None else norm_stats
    if len(stats.mean) != stacked.shape[1]:
        raise ShapeError(
            f"normalization statistics cover {len(stats.mean)} channels, batch has {stacked.shape[1]}"
        )

    standardized = (stacked - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    standardized = mask_subcarriers(standardized, usable, axis=2)

    ids = np.arange(len(frames), dtype=np.int64) if frame_ids is None else np.asarray(frame_ids, dtype=np.int64)
    return CsiFrameBatch(
        data=standardized.astype(np.float32),
        labels=np.asarray([f.label for f in frames], dtype=np.int64),
        mode=mode,
        norm_stats=stats,
        usable_mask=usable,
        frame_ids=ids,
    )


def channels_for_mode(mode: str, n_antennas: int = 4) -> int:
    if mode not in MODES:
        raise ConfigError(f"unknown mode '{mode}' (expected one of {MODES})")
    return 2 * n_antennas if mode == "mixed" else n_antennas


# ----------------------------------------------------------------------
# Frame archives
# ----------------------------------------------------------------------

def save_frame_archive(path: Union[str, Path], splits: Dict[str, CsiFrameBatch]) -> Path:
    """Write standardized split batches (sharing one NormStats) to a compressed .npz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    arrays = {
        "mode": np.array(first.mode),
        "mask_version": np.array(MASK_TABLE_VERSION),
        "usable_mask": first.usable_mask,
        "norm_mean": first.norm_stats.mean,
        "norm_std": first.norm_stats.std,
    }
    for name, batch in splits.items():
        arrays[f"{name}_data"] = batch.data
        arrays[f"{name}_labels"] = batch.labels
        arrays[f"{name}_ids"] = batch.frame_ids
    with open(path, "wb") as f:
        np.savez_compressed(f, **arrays)
    return path


def load_frame_archive(path: Union[str, Path]) -> Dict[str, CsiFrameBatch]:
    with np.load(Path(path), allow_pickle=False) as archive:
        version = int(archive["mask_version"]) if "mask_version" in archive.files else MASK_TABLE_VERSION
        if version != MASK_TABLE_VERSION:
            raise FormatError(f"frame archive uses mask table v{version}, expected v{MASK_TABLE_VERSION}")
        stats = NormStats(mean=archive["norm_mean"], std=archive["norm_std"])
        names = sorted({key[:-len("_data")] for key in archive.files if key.endswith("_data")})
        return {
            name: CsiFrameBatch(
                data=archive[f"{name}_data"],
                labels=archive[f"{name}_labels"],
                mode=str(archive["mode"]),
                norm_stats=stats,
                usable_mask=archive["usable_mask"],
                frame_ids=archive[f"{name}_ids"],
            )
            for name in names
        }
