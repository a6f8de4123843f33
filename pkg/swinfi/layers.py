"""
SwinFi Layers

Parameterized building blocks on top of swinfi.tensor: a small Module base,
Linear, LayerNorm, rectangular patch embedding / unembedding, windowed
multi-head self-attention with a relative position bias table, the Swin
block (plain and shifted), and the 2×2 Patch Merge / Patch Split pair.

Token tensors are (B, L, C) with L = g_S * g_T laid out row-major
(subcarrier-major, then time).
"""

from typing import Iterator, List, Optional, Tuple

import numpy as np

from swinfi.errors import ConfigError, ShapeError
from swinfi.tensor import (
    Tensor, add, gelu, layer_norm, matmul, roll, softmax, take, trunc_normal
)


MASK_VALUE = -1e9

Grid = Tuple[int, int]


class Module:
    """Base class: parameters are Tensors with requires_grad, discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_dict(self) -> dict:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


# ----------------------------------------------------------------------
# Windowing
# ----------------------------------------------------------------------

def window_partition(x: Tensor, grid: Grid, window: Grid) -> Tensor:
    """(B, g_S, g_T, C) -> (B * windows, M_S * M_T, C), windows row-major."""
    (gs, gt), (ws, wt) = grid, window
    B, C = x.shape[0], x.shape[-1]
    x = x.reshape(B, gs // ws, ws, gt // wt, wt, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (gs // ws) * (gt // wt), ws * wt, C)


def window_reverse(windows: Tensor, grid: Grid, window: Grid) -> Tensor:
    """Exact inverse of window_partition."""
    (gs, gt), (ws, wt) = grid, window
    n_windows = (gs // ws) * (gt // wt)
    B, C = windows.shape[0] // n_windows, windows.shape[-1]
    x = windows.reshape(B, gs // ws, gt // wt, ws, wt, C)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gs, gt, C)


def relative_position_index(window: Grid) -> np.ndarray:
    """(N, N) index into a (2M_S-1)(2M_T-1) bias table for every token pair of a window."""
    ws, wt = window
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(wt), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + ws - 1) * (2 * wt - 1) + (rel[1] + wt - 1)


def shifted_window_mask(grid: Grid, window: Grid, shift: Grid) -> Optional[np.ndarray]:
    """
    Additive (windows, N, N) mask blocking attention between tokens that the
    cyclic shift brought together from opposite grid edges; None when unshifted.
    """
    if shift == (0, 0):
        return None

    def bands(extent: int, size: int, offset: int):
        if offset == 0:
            return (slice(0, extent),)
        return (slice(0, -size), slice(-size, -offset), slice(-offset, None))

    (gs, gt), (ws, wt) = grid, window
    regions = np.zeros((gs, gt))
    label = 0
    for rows in bands(gs, ws, shift[0]):
        for cols in bands(gt, wt, shift[1]):
            regions[rows, cols] = label
            label += 1

    tiles = regions.reshape(gs // ws, ws, gt // wt, wt).transpose(0, 2, 1, 3).reshape(-1, ws * wt)
    return np.where(tiles[:, :, None] != tiles[:, None, :], MASK_VALUE, 0.0)


def effective_window(grid: Grid, window: Grid) -> Tuple[Grid, Grid]:
    """
    Clamp a window to the stage grid and derive the cyclic shift

    Returns:
        (window, shift): shift is half the window on every axis the window
        does not already span
    """
    clamped = (min(window[0], grid[0]), min(window[1], grid[1]))
    shift = tuple(w // 2 if w < g else 0 for w, g in zip(clamped, grid))
    return clamped, shift


# ----------------------------------------------------------------------
# Attention and blocks
# ----------------------------------------------------------------------

class WindowAttention(Module):
    """Multi-head self-attention inside each window, plus a learned relative position bias."""

    def __init__(self, dim: int, n_heads: int, window: Grid, rng: np.random.Generator):
        if dim % n_heads:
            raise ConfigError(f"embed dim {dim} is not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.window = window
        self.scale = self.head_dim ** -0.5

        self.qkv = Linear(dim, 3 * dim, rng)
        table_size = (2 * window[0] - 1) * (2 * window[1] - 1)
        self.rel_bias = parameter(trunc_normal(rng, (table_size, n_heads)))
        self.proj = Linear(dim, dim, rng)
        self.rel_index = relative_position_index(window)

    def attention(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Attention weights (B_w, heads, N, N) and values (B_w, heads, N, head_dim)."""
        bw, n, c = x.shape
        if n != self.window[0] * self.window[1]:
            raise ShapeError(f"window holds {n} tokens, attention built for {self.window}")

        qkv = self.qkv(x).reshape(bw, n, 3, self.n_heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        scores = matmul(q, k.transpose(0, 1, 3, 2)) * self.scale
        bias = take(self.rel_bias, self.rel_index).transpose(2, 0, 1)
        scores = scores + bias

        if mask is not None:
            n_windows = mask.shape[0]
            scores = scores.reshape(bw // n_windows, n_windows, self.n_heads, n, n)
            scores = scores + mask[None, :, None, :, :]
            scores = scores.reshape(bw, self.n_heads, n, n)

        return softmax(scores, axis=-1), v

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        bw, n, c = x.shape
        attn, v = self.attention(x, mask)
        out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(bw, n, c)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SwinBlock(Module):
    """
    Pre-norm residual block: x += W-MSA(LN(x)); x += MLP(LN(x))

    The shifted variant rolls the grid by half a window before partitioning
    and masks attention across the wrap-around seams.
    """

    def __init__(
        self,
        dim: int,
        n_heads: int,
        grid: Grid,
        window: Grid,
        shifted: bool,
        mlp_ratio: int,
        rng: np.random.Generator,
    ):
        self.grid = grid
        self.window, shift = effective_window(grid, window)
        self.shift = shift if shifted else (0, 0)
        if grid[0] % self.window[0] or grid[1] % self.window[1]:
            raise ConfigError(f"window {self.window} does not tile stage grid {grid}")

        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, n_heads, self.window, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)
        self.attn_mask = shifted_window_mask(grid, self.window, self.shift)

    def forward(self, x: Tensor) -> Tensor:
        B, L, C = x.shape
        gs, gt = self.grid
        if L != gs * gt:
            raise ShapeError(f"block expects {gs}x{gt}={gs * gt} tokens, got {L}")

        h = self.norm1(x).reshape(B, gs, gt, C)
        if self.shift != (0, 0):
            h = roll(h, (-self.shift[0], -self.shift[1]), (1, 2))

        windows = self.attn(window_partition(h, self.grid, self.window), self.attn_mask)
        h = window_reverse(windows, self.grid, self.window)

        if self.shift != (0, 0):
            h = roll(h, self.shift, (1, 2))

        x = x + h.reshape(B, L, C)
        return x + self.mlp(self.norm2(x))


# ----------------------------------------------------------------------
# Patch embedding and resampling
# ----------------------------------------------------------------------

class PatchEmbed(Module):
    """Non-overlapping p_S×p_T×D blocks, flattened and projected to C."""

    def __init__(self, channels: int, dim: int, patch: Grid, rng: np.random.Generator):
        self.channels = channels
        self.patch = patch
        self.proj = Linear(patch[0] * patch[1] * channels, dim, rng)

    def grid_for(self, S: int, T: int) -> Grid:
        ps, pt = self.patch
        if S % ps or T % pt:
            raise ConfigError(f"input {S}x{T} is not divisible by patch {ps}x{pt}")
        return S // ps, T // pt

    def forward(self, x: Tensor) -> Tensor:
        B, D, S, T = x.shape
        if D != self.channels:
            raise ShapeError(f"patch embedding expects {self.channels} channels, got {D}")
        gs, gt = self.grid_for(S, T)
        ps, pt = self.patch
        x = x.reshape(B, D, gs, ps, gt, pt).transpose(0, 2, 4, 3, 5, 1)
        return self.proj(x.reshape(B, gs * gt, ps * pt * D))


class PatchUnembed(Module):
    """Mirror of PatchEmbed: C -> p_S·p_T·D per token, reassembled to B×D×S×T."""

    def __init__(self, channels: int, dim: int, patch: Grid, grid: Grid, rng: np.random.Generator):
        self.channels = channels
        self.patch = patch
        self.grid = grid
        self.proj = Linear(dim, patch[0] * patch[1] * channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        (gs, gt), (ps, pt), D = self.grid, self.patch, self.channels
        x = self.proj(x).reshape(B, gs, gt, ps, pt, D).transpose(0, 5, 1, 3, 2, 4)
        return x.reshape(B, D, gs * ps, gt * pt)


class PatchMerge(Module):
    """Concatenate each 2×2 token neighbourhood (4C) and project back to C."""

    def __init__(self, dim: int, grid: Grid, rng: np.random.Generator):
        if grid[0] % 2 or grid[1] % 2:
            raise ConfigError(f"patch merge needs even grid extents, got {grid}")
        self.grid = grid
        self.reduction = Linear(4 * dim, dim, rng)

    @property
    def out_grid(self) -> Grid:
        return self.grid[0] // 2, self.grid[1] // 2

    def forward(self, x: Tensor) -> Tensor:
        B, L, C = x.shape
        gs, gt = self.grid
        x = x.reshape(B, gs // 2, 2, gt // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        return self.reduction(x.reshape(B, L // 4, 4 * C))


class PatchSplit(Module):
    """Project C -> 4C and spread the four chunks over the 2×2 upsampled neighbourhood."""

    def __init__(self, dim: int, grid: Grid, rng: np.random.Generator):
        self.grid = grid
        self.expand = Linear(dim, 4 * dim, rng)

    @property
    def out_grid(self) -> Grid:
        return self.grid[0] * 2, self.grid[1] * 2

    def forward(self, x: Tensor) -> Tensor:
        B, L, C = x.shape
        gs, gt = self.grid
        x = self.expand(x).reshape(B, gs, gt, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, 4 * L, C)
