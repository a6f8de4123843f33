"""
SwinFi Model

Encoder (patch embedding + Swin stages separated by Patch Merge), mirrored
decoder (Swin stages separated by Patch Split + unembedding) and a
mean-pool linear classifier over the compressed feature image.

Also holds the reconstruction/classification losses, the compression
ratio γ = p_S·p_T·D·4^(len(depths)-1)/C and the attention complexity
estimate Ω(MSA) = 4hwC² + 2(hw)²C vs Ω(W-MSA) = 4hwC² + 2·M·hwC.
"""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from swinfi.errors import (
    ConfigError, DegenerateMetricError, IncompatibleCheckpointError, LabelError, ShapeError
)
from swinfi.layers import (
    Grid, Linear, Module, PatchEmbed, PatchMerge, PatchSplit, PatchUnembed, SwinBlock,
    effective_window
)
from swinfi.tensor import Tensor, as_tensor, log_softmax, mean, no_grad, sum_of_squares


@dataclass
class ModelConfig:
    """Architecture of one SwinFi model; defaults are the γ = 64 amplitude setup."""

    p_S: int = 8
    p_T: int = 1
    M_S: int = 1
    M_T: int = 16
    C: int = 32
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    head_dim: int = 16
    mlp_ratio: int = 4
    n_classes: int = 21
    D: int = 4
    S: int = 256
    T: int = 256

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)

    @property
    def n_heads(self) -> int:
        return self.C // self.head_dim

    @property
    def n_merges(self) -> int:
        return len(self.depths) - 1

    @property
    def patch(self) -> Grid:
        return self.p_S, self.p_T

    @property
    def window(self) -> Grid:
        return self.M_S, self.M_T

    def stage_grids(self) -> List[Grid]:
        gs, gt = self.S // self.p_S, self.T // self.p_T
        return [(gs >> i, gt >> i) for i in range(len(self.depths))]

    @property
    def feature_grid(self) -> Grid:
        return self.stage_grids()[-1]

    @property
    def raw_elements(self) -> int:
        return self.D * self.S * self.T

    @property
    def latent_elements(self) -> int:
        gs, gt = self.feature_grid
        return gs * gt * self.C

    def validate(self) -> Tuple[bool, List[str]]:
        """
        Check the architecture invariants

        Returns:
            Tuple of (is_valid, error_messages)
        """
        errors = []
        positive = {"p_S": self.p_S, "p_T": self.p_T, "M_S": self.M_S, "M_T": self.M_T,
                    "C": self.C, "head_dim": self.head_dim, "mlp_ratio": self.mlp_ratio,
                    "n_classes": self.n_classes, "D": self.D, "S": self.S, "T": self.T}
        for name, value in positive.items():
            if value < 1:
                errors.append(f"{name} must be >= 1 (got {value})")
        if not self.depths:
            errors.append("depths must name at least one stage")
        if errors:
            return False, errors

        unit = 2 ** self.n_merges
        if self.S % (self.p_S * unit):
            errors.append(f"S={self.S} is not divisible by p_S*2^{self.n_merges}={self.p_S * unit}")
        if self.T % (self.p_T * unit):
            errors.append(f"T={self.T} is not divisible by p_T*2^{self.n_merges}={self.p_T * unit}")
        if self.C % self.head_dim:
            errors.append(f"C={self.C} is not divisible by head_dim={self.head_dim}")
        for i, depth in enumerate(self.depths):
            if depth < 1 or depth % 2:
                errors.append(f"depths[{i}]={depth} must be a positive even count")

        if not errors:
            for i, grid in enumerate(self.stage_grids()):
                window, _ = effective_window(grid, self.window)
                if grid[0] % window[0] or grid[1] % window[1]:
                    errors.append(f"window {window} does not tile stage {i} grid {grid}")

        return len(errors) == 0, errors

    def check(self):
        valid, errors = self.validate()
        if not valid:
            raise ConfigError("invalid model configuration: " + "; ".join(errors), errors)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["depths"] = list(self.depths)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> int:
        """64-bit fingerprint of the architecture (ties checkpoints and wire records to it)."""
        canonical = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.blake2b(canonical, digest_size=8).digest(), "little")


@dataclass
class FeatureImage:
    """Compressed latent of one frame: g_S·g_T tokens of C features."""

    grid: Grid
    feats: np.ndarray
    frame_id: int = 0
    config_digest: int = 0

    @property
    def dim(self) -> int:
        return self.feats.shape[-1]

    @property
    def elements(self) -> int:
        return self.feats.size


@dataclass
class ComplexityReport:
    h: int
    w: int
    C: int
    M_eff: int
    omega_msa: int
    omega_wmsa: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.omega_wmsa, self.omega_msa)


# ----------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------

class Stage(Module):
    """depth Swin blocks alternating unshifted/shifted windows on one grid."""

    def __init__(self, cfg: ModelConfig, grid: Grid, depth: int, rng: np.random.Generator):
        self.grid = grid
        self.blocks = [
            SwinBlock(cfg.C, cfg.n_heads, grid, cfg.window, i % 2 == 1, cfg.mlp_ratio, rng)
            for i in range(depth)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        grids = cfg.stage_grids()
        self.patch_embed = PatchEmbed(cfg.D, cfg.C, cfg.patch, rng)
        self.stages = []
        self.merges = []
        for i, depth in enumerate(cfg.depths):
            self.stages.append(Stage(cfg, grids[i], depth, rng))
            if i < cfg.n_merges:
                self.merges.append(PatchMerge(cfg.C, grids[i], rng))

    def forward(self, x: Tensor) -> Tensor:
        x = self.patch_embed(x)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.merges):
                x = self.merges[i](x)
        return x


class Decoder(Module):
    """Stages in reverse order, Patch Split between them, then unembedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        grids = cfg.stage_grids()
        self.stages = []
        self.splits = []
        for i in reversed(range(len(cfg.depths))):
            self.stages.append(Stage(cfg, grids[i], cfg.depths[i], rng))
            if i > 0:
                self.splits.append(PatchSplit(cfg.C, grids[i], rng))
        self.unembed = PatchUnembed(cfg.D, cfg.C, cfg.patch, grids[0], rng)

    def forward(self, z: Tensor) -> Tensor:
        for i, stage in enumerate(self.stages):
            z = stage(z)
            if i < len(self.splits):
                z = self.splits[i](z)
        return self.unembed(z)


class Classifier(Module):
    """Mean-pool over tokens, then one linear map C -> n_classes."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fc = Linear(cfg.C, cfg.n_classes, rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc(mean(z, axis=1))


class SwinFi(Module):
    """
    Encoder + decoder + classifier head

    Weights are truncated-normal (std 0.02) drawn from one generator seeded
    with `seed`, in construction order, so equal (cfg, seed) give equal
    parameters.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.check()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.head = Classifier(cfg, rng)

    @property
    def digest(self) -> int:
        return self.cfg.digest()

    def _check_input(self, x: Tensor):
        expected = (self.cfg.D, self.cfg.S, self.cfg.T)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model expects B×{expected[0]}×{expected[1]}×{expected[2]}, got {x.shape}")

    def encode_tokens(self, x) -> Tensor:
        x = as_tensor(x)
        self._check_input(x)
        return self.encoder(x)

    def decode_tokens(self, z) -> Tensor:
        return self.decoder(as_tensor(z))

    def classify_tokens(self, z) -> Tensor:
        return self.head(as_tensor(z))

    def forward(self, x) -> Tuple[Tensor, Tensor]:
        z = self.encode_tokens(x)
        return self.decode_tokens(z), z


# ----------------------------------------------------------------------
# Feature images
# ----------------------------------------------------------------------

def _chunks(n: int, workers: int) -> List[slice]:
    size = max(1, math.ceil(n / max(1, workers)))
    return [slice(i, min(n, i + size)) for i in range(0, n, size)]


def encode(
    x: np.ndarray,
    model: SwinFi,
    frame_ids: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> List[FeatureImage]:
    """
    Compress a B×D×S×T batch into feature images

    Args:
        x: Standardized input batch
        model: Model whose encoder is used (not modified)
        frame_ids: Provenance ids (default 0..B-1)
        workers: Threads to fan the batch out over

    Returns:
        One FeatureImage per frame
    """
    x = np.asarray(x)
    ids = list(range(len(x))) if frame_ids is None else [int(i) for i in frame_ids]
    if len(ids) != len(x):
        raise ShapeError(f"{len(ids)} frame ids for {len(x)} frames")

    def run(part: slice) -> np.ndarray:
        with no_grad():
            return model.encode_tokens(x[part]).data.astype(np.float32)

    if workers > 1 and len(x) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            feats = np.concatenate(list(pool.map(run, _chunks(len(x), workers))))
    else:
        feats = run(slice(0, len(x)))

    grid, digest = model.cfg.feature_grid, model.digest
    return [
        FeatureImage(grid=grid, feats=feats[i], frame_id=ids[i], config_digest=digest)
        for i in range(len(x))
    ]


def _stack_features(images: Sequence[FeatureImage], model: SwinFi) -> np.ndarray:
    digest = model.digest
    for fi in images:
        if fi.config_digest != digest:
            raise IncompatibleCheckpointError(
                f"feature image {fi.frame_id} was encoded with config {fi.config_digest:#018x}, "
                f"model is {digest:#018x}"
            )
        if tuple(fi.grid) != model.cfg.feature_grid or fi.dim != model.cfg.C:
            raise ShapeError(
                f"feature image {fi.frame_id} is {fi.grid}×{fi.dim}, "
                f"model expects {model.cfg.feature_grid}×{model.cfg.C}"
            )
    return np.stack([fi.feats for fi in images])


def decode(images: Sequence[FeatureImage], model: SwinFi) -> np.ndarray:
    """Reconstruct B×D×S×T frames from feature images."""
    if not images:
        cfg = model.cfg
        return np.zeros((0, cfg.D, cfg.S, cfg.T), dtype=np.float32)
    with no_grad():
        return model.decode_tokens(_stack_features(images, model)).data.astype(np.float32)


def classify(images: Sequence[FeatureImage], model: SwinFi) -> np.ndarray:
    """B×n_classes logits from feature images."""
    if not images:
        return np.zeros((0, model.cfg.n_classes), dtype=np.float32)
    with no_grad():
        return model.classify_tokens(_stack_features(images, model)).data.astype(np.float32)


# ----------------------------------------------------------------------
# Losses and metrics
# ----------------------------------------------------------------------

def nmse_loss(x: Union[np.ndarray, Tensor], x_hat: Tensor) -> Tensor:
    """
    Linear NMSE Σ‖X−X̂‖²/Σ‖X‖² as a differentiable scalar

    Raises:
        ShapeError: shapes differ
        DegenerateMetricError: the reference has zero energy
    """
    x = as_tensor(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"nmse: reference {x.shape} vs reconstruction {x_hat.shape}")
    energy = float(np.sum(x.data.astype(np.float64) ** 2))
    if energy == 0.0:
        raise DegenerateMetricError("nmse reference has zero energy")
    return sum_of_squares(x_hat - x.detach()) * (1.0 / energy)


def nmse_ratio(x: np.ndarray, x_hat: np.ndarray, row_mask: Optional[np.ndarray] = None) -> float:
    """
    Linear NMSE over B×D×S×T arrays, optionally restricted to usable subcarrier rows
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"nmse: reference {x.shape} vs reconstruction {x_hat.shape}")
    if row_mask is not None:
        x = x[..., row_mask, :]
        x_hat = x_hat[..., row_mask, :]
    energy = float(np.sum(x * x))
    if energy == 0.0:
        raise DegenerateMetricError("nmse reference has zero energy")
    return float(np.sum((x - x_hat) ** 2)) / energy


def nmse_db(x: np.ndarray, x_hat: np.ndarray, row_mask: Optional[np.ndarray] = None) -> float:
    """10·log10 of the NMSE ratio; a perfect reconstruction reports -inf."""
    ratio = nmse_ratio(x, x_hat, row_mask)
    return float("-inf") if ratio == 0.0 else 10.0 * math.log10(ratio)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """
    Mean of -log softmax(logits)[label] over the batch (log-sum-exp stable)

    Raises:
        LabelError: a label lies outside [0, n_classes)
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")

    picked = log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]
    return -mean(picked)


# ----------------------------------------------------------------------
# Formulas
# ----------------------------------------------------------------------

def compression_ratio(cfg: ModelConfig) -> Fraction:
    """γ = p_S·p_T·D·4^(len(depths)-1) / C, exact."""
    return Fraction(cfg.p_S * cfg.p_T * cfg.D * 4 ** cfg.n_merges, cfg.C)


def complexity_estimate(h: int, w: int, C: int, M_eff: int) -> ComplexityReport:
    """
    Attention operation counts for global MSA and windowed W-MSA

    M_eff is the number of patches per window (M_S·M_T), standing in for M²
    of a square window.
    """
    if min(h, w, C, M_eff) < 1:
        raise ConfigError(f"complexity extents must be positive (h={h}, w={w}, C={C}, M={M_eff})")
    hw = h * w
    projections = 4 * hw * C * C
    return ComplexityReport(
        h=h, w=w, C=C, M_eff=M_eff,
        omega_msa=projections + 2 * hw * hw * C,
        omega_wmsa=projections + 2 * M_eff * hw * C,
    )
