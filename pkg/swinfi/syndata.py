"""
Synthetic CSI Generator

Deterministic stand-in for a real capture campaign. A static multipath
room profile (shared by all classes) is modulated per class by Doppler-like
sinusoids confined to a band of subcarriers, then optionally corrupted by
AWGN and by a per-packet linear-in-subcarrier phase error (slope·k +
offset), the same distortion family the phase sanitizer removes.

Every random draw comes from a generator keyed by (seed, stream, class), so
a spec fully determines the output bytes.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from swinfi.csiprep import (
    CsiFrame, CsiFrameBatch, RawCsiCapture, assemble_batch, frame_windows,
    subcarrier_indices, default_usable_mask
)
from swinfi.errors import ConfigError


SUBCARRIER_SPACING_HZ = 312.5e3

# Generator streams
_ROOM, _SIGNATURE, _NOISE, _PHASE_ERROR, _AUTO_SIGNATURES = range(5)


@dataclass(frozen=True)
class ClassSignature:
    """One Doppler-like modulation: frequency, band centre (signed subcarrier index) and band width."""

    doppler_hz: float
    subcarrier_center: float
    bandwidth: float


@dataclass
class PhaseErrorSpec:
    """Per-packet phase corruption emulating detection delay and frequency offsets."""

    slope_range: Tuple[float, float] = (-0.2, 0.2)
    offset_range: Tuple[float, float] = (-math.pi, math.pi)
    noise_std: float = 0.0


@dataclass
class SynthSpec:
    seed: int = 7
    n_classes: int = 8
    packets_per_class: int = 4096
    n_antennas: int = 4
    n_subcarriers: int = 64
    sample_rate_hz: float = 100.0
    snr_db: float = 20.0
    signatures: Optional[List[List[ClassSignature]]] = None
    phase_error: Optional[PhaseErrorSpec] = field(default_factory=PhaseErrorSpec)
    n_paths: int = 4
    max_delay_s: float = 40e-9
    modulation_depth: float = 0.3
    phase_modulation: float = 0.5

    def resolved_signatures(self) -> List[List[ClassSignature]]:
        """Explicit signatures, or one seeded signature per class with distinct frequency and band."""
        if self.signatures is not None:
            return self.signatures

        rng = np.random.default_rng([self.seed, _AUTO_SIGNATURES])
        nyquist = self.sample_rate_hz / 2.0
        freqs = np.linspace(0.08 * nyquist, 0.8 * nyquist, self.n_classes) if self.n_classes > 1 \
            else np.array([0.2 * nyquist])
        half_span = 0.35 * self.n_subcarriers
        centers = rng.permutation(np.linspace(-half_span, half_span, self.n_classes))
        width = max(2.0, self.n_subcarriers / 16.0)
        return [
            [ClassSignature(float(round(f, 4)), float(round(c, 2)), width)]
            for f, c in zip(freqs, centers)
        ]

    def validate(self) -> Tuple[bool, List[str]]:
        errors = []
        for name in ("n_classes", "packets_per_class", "n_antennas", "n_subcarriers", "n_paths"):
            value = getattr(self, name)
            if value < 1 and not (name == "packets_per_class" and value == 0):
                errors.append(f"{name} must be >= 1 (got {value})")
        if self.sample_rate_hz <= 0:
            errors.append(f"sample_rate_hz must be positive (got {self.sample_rate_hz})")
        if errors:
            return False, errors

        signatures = self.resolved_signatures()
        if len(signatures) != self.n_classes:
            errors.append(f"{len(signatures)} signature sets for {self.n_classes} classes")

        nyquist = self.sample_rate_hz / 2.0
        seen = set()
        for c, triples in enumerate(signatures):
            if not triples:
                errors.append(f"class {c} has no signature")
            for sig in triples:
                if not 0 < sig.doppler_hz < nyquist:
                    errors.append(f"class {c}: doppler {sig.doppler_hz} Hz not in (0, {nyquist})")
                if sig.bandwidth <= 0:
                    errors.append(f"class {c}: bandwidth must be positive")
            key = tuple(sorted(triples, key=lambda s: (s.doppler_hz, s.subcarrier_center, s.bandwidth)))
            if key in seen:
                errors.append(f"class {c} repeats another class's signature")
            seen.add(key)

        if self.phase_error is not None:
            lo, hi = self.phase_error.slope_range
            if lo > hi or self.phase_error.offset_range[0] > self.phase_error.offset_range[1]:
                errors.append("phase error ranges must be (low, high) with low <= high")
            if self.phase_error.noise_std < 0:
                errors.append("phase noise std must be >= 0")

        return len(errors) == 0, errors

    def check(self):
        valid, errors = self.validate()
        if not valid:
            raise ConfigError("invalid synthetic data spec: " + "; ".join(errors), errors)

    def to_dict(self) -> dict:
        data = asdict(self)
        if self.signatures is None:
            data.pop("signatures")
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        data = dict(data)
        if data.get("signatures") is not None:
            data["signatures"] = [
                [ClassSignature(**s) if isinstance(s, dict) else ClassSignature(*s) for s in triples]
                for triples in data["signatures"]
            ]
        if "phase_error" in data and isinstance(data["phase_error"], dict):
            pe = dict(data["phase_error"])
            for key in ("slope_range", "offset_range"):
                if key in pe:
                    pe[key] = tuple(pe[key])
            data["phase_error"] = PhaseErrorSpec(**pe)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SynthDataset:
    spec: SynthSpec
    captures: List[RawCsiCapture]
    frames: List[CsiFrame]
    splits: Dict[str, np.ndarray]

    def split_frames(self, name: str) -> List[CsiFrame]:
        return [self.frames[i] for i in self.splits[name]]

    def batches(self, mode: str, usable_mask: Optional[np.ndarray] = None) -> Dict[str, CsiFrameBatch]:
        """Standardized batches per split; statistics come from the training split only."""
        train = assemble_batch(self.split_frames("train"), mode, usable_mask=usable_mask,
                               frame_ids=self.splits["train"])
        result = {"train": train}
        for name in ("val", "test"):
            result[name] = assemble_batch(self.split_frames(name), mode, train.norm_stats,
                                          usable_mask=usable_mask, frame_ids=self.splits[name])
        return result


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------

def _room_profile(spec: SynthSpec) -> np.ndarray:
    """Static complex channel (antennas, subcarriers): a dominant line-of-sight path plus weak reflections."""
    rng = np.random.default_rng([spec.seed, _ROOM])
    k = subcarrier_indices(spec.n_subcarriers).astype(np.float64)

    delays = np.sort(rng.uniform(0.0, spec.max_delay_s, spec.n_paths))
    gains = (rng.normal(size=(spec.n_antennas, spec.n_paths))
             + 1j * rng.normal(size=(spec.n_antennas, spec.n_paths))) * (0.1 / math.sqrt(2))
    gains[:, 0] = np.exp(1j * rng.uniform(-math.pi, math.pi, spec.n_antennas))

    steering = np.exp(-2j * math.pi * np.outer(delays, k) * SUBCARRIER_SPACING_HZ)
    return gains @ steering


def phase_error_terms(spec: SynthSpec, class_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-packet (slope, offset) injected into a class capture; zeros when phase error is off."""
    P = spec.packets_per_class
    if spec.phase_error is None:
        return np.zeros(P), np.zeros(P)
    rng = np.random.default_rng([spec.seed, _PHASE_ERROR, class_id])
    slopes = rng.uniform(*spec.phase_error.slope_range, size=P)
    offsets = rng.uniform(*spec.phase_error.offset_range, size=P)
    return slopes, offsets


def generate_capture(spec: SynthSpec, class_id: int) -> RawCsiCapture:
    """
    Synthesize one class capture

    Raises:
        ConfigError: invalid spec or class id
    """
    spec.check()
    if not 0 <= class_id < spec.n_classes:
        raise ConfigError(f"class_id {class_id} outside [0, {spec.n_classes})")

    P, D, S = spec.packets_per_class, spec.n_antennas, spec.n_subcarriers
    k = subcarrier_indices(S).astype(np.float64)
    t = np.arange(P) / spec.sample_rate_hz

    static = _room_profile(spec)
    amp_mod = np.ones((P, D, S))
    phase_mod = np.zeros((P, D, S))
    rng = np.random.default_rng([spec.seed, _SIGNATURE, class_id])
    for sig in spec.resolved_signatures()[class_id]:
        bump = np.exp(-0.5 * ((k - sig.subcarrier_center) / sig.bandwidth) ** 2)
        phase0 = rng.uniform(-math.pi, math.pi, D)
        arg = 2.0 * math.pi * sig.doppler_hz * t[:, None] + phase0[None, :]
        amp_mod += spec.modulation_depth * np.cos(arg)[:, :, None] * bump
        phase_mod += spec.phase_modulation * np.sin(arg)[:, :, None] * bump

    h = static[None, :, :] * amp_mod * np.exp(1j * phase_mod)

    if math.isfinite(spec.snr_db):
        noise_rng = np.random.default_rng([spec.seed, _NOISE, class_id])
        power = float(np.mean(np.abs(h) ** 2))
        sigma = math.sqrt(power / (10.0 ** (spec.snr_db / 10.0)) / 2.0)
        h = h + sigma * (noise_rng.normal(size=h.shape) + 1j * noise_rng.normal(size=h.shape))

    if spec.phase_error is not None:
        slopes, offsets = phase_error_terms(spec, class_id)
        error = slopes[:, None, None] * k[None, None, :] + offsets[:, None, None]
        if spec.phase_error.noise_std > 0:
            pe_rng = np.random.default_rng([spec.seed, _PHASE_ERROR, class_id, 1])
            error = error + pe_rng.normal(0.0, spec.phase_error.noise_std, size=h.shape)
        h = h * np.exp(1j * error)

    return RawCsiCapture(
        packets=h.astype(np.complex64),
        sample_rate_hz=spec.sample_rate_hz,
        label=class_id,
        source=f"synth-class{class_id:02d}",
    )


def split_indices(
    labels: Sequence[int],
    split_seed: int = 0,
    fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> Dict[str, np.ndarray]:
    """
    Per-class shuffled 70/15/15 split of frame indices

    Every class contributes the same val/test counts for the same frame
    count; the split seed only changes membership.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(split_seed)
    parts = {"train": [], "val": [], "test": []}

    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        n_val = int(round(fractions[1] * len(members)))
        n_test = int(round(fractions[2] * len(members)))
        n_train = len(members) - n_val - n_test
        parts["train"].extend(members[:n_train])
        parts["val"].extend(members[n_train:n_train + n_val])
        parts["test"].extend(members[n_train + n_val:])

    return {name: np.asarray(idx, dtype=np.int64) for name, idx in parts.items()}


def generate_dataset(
    spec: SynthSpec,
    T: int = 256,
    stride: Optional[int] = None,
    split_seed: int = 0,
    workers: int = 1,
    usable_mask: Optional[np.ndarray] = None,
) -> SynthDataset:
    """
    Generate every class capture, frame them, and split by frame

    Args:
        spec: Generator spec
        T: Frame length in packets
        stride: Frame hop (default T)
        split_seed: Seed for the per-class split shuffle
        workers: Threads used to generate classes in parallel
        usable_mask: Subcarrier mask (default table entry)
    """
    spec.check()
    mask = default_usable_mask(spec.n_subcarriers) if usable_mask is None else usable_mask

    def build(class_id: int):
        capture = generate_capture(spec, class_id)
        return capture, frame_windows(capture, T=T, stride=stride, usable_mask=mask)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(build, range(spec.n_classes)))
    else:
        results = [build(c) for c in range(spec.n_classes)]

    captures = [capture for capture, _ in results]
    frames = [frame for _, class_frames in results for frame in class_frames]
    splits = split_indices([f.label for f in frames], split_seed)
    return SynthDataset(spec=spec, captures=captures, frames=frames, splits=splits)
