"""Patch tokenization of RGB frames and the inverse layout for dense outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class Grid:
    rows: int
    cols: int

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def position(self, n: int) -> tuple[int, int]:
        return divmod(n, self.cols)

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def positions(self) -> np.ndarray:
        """(N, 2) array of (row, col) in token order."""
        n = np.arange(self.n)
        return np.stack([n // self.cols, n % self.cols], axis=1)


@dataclass
class Frame:
    pixels: np.ndarray  # (U, V, 3) in [0, 1]
    frame_index: int

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise ShapeError(f"frame pixels must be U x V x 3, got {self.pixels.shape}")
        if self.frame_index < 0:
            raise ConfigError(f"frame_index must be >= 0, got {self.frame_index}")


@dataclass
class FrameTokens:
    tokens: Tensor  # (N, D)
    grid: Grid
    frame_index: int


def make_grid(height: int, width: int, patch: int) -> Grid:
    if height % patch or width % patch:
        raise ConfigError(f"resolution U={height}, V={width} not divisible by patch size P={patch}")
    return Grid(height // patch, width // patch)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(..., U, V, C) -> (..., N, P*P*C) with patches row-major and (pr, pc, c) inside."""
    *lead, u, v, c = image.shape
    grid = make_grid(u, v, patch)
    x = image.reshape(*lead, grid.rows, patch, grid.cols, patch, c)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, grid.n, patch * patch * c)


def unpatchify(patches: np.ndarray, grid: Grid, patch: int) -> np.ndarray:
    *lead, n, pp = patches.shape
    if n != grid.n or pp % (patch * patch):
        raise ShapeError(f"cannot unpatchify {patches.shape} onto grid {grid} with P={patch}")
    c = pp // (patch * patch)
    k = len(lead)
    x = patches.reshape(*lead, grid.rows, grid.cols, patch, patch, c)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, grid.rows * patch, grid.cols * patch, c)


def unpatchify_tensor(patches: Tensor, grid: Grid, patch: int) -> Tensor:
    """Differentiable version of :func:`unpatchify` for (B, N, P*P*C) input."""
    b, n, pp = patches.shape
    if n != grid.n or pp % (patch * patch):
        raise ShapeError(f"cannot unpatchify {patches.shape} onto grid {grid} with P={patch}")
    c = pp // (patch * patch)
    x = nx.reshape(patches, (b, grid.rows, grid.cols, patch, patch, c))
    x = nx.transpose(x, (0, 1, 3, 2, 4, 5))
    return nx.reshape(x, (b, grid.rows * patch, grid.cols * patch, c))


def tokenize_pixels(pixels: np.ndarray, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """Batched tokenization: (F, U, V, 3) pixels -> (F, N, D) tokens."""
    flat = patchify(np.asarray(pixels, dtype=weight.dtype), patch)
    return nx.linear(Tensor(flat), weight, bias)


def tokenize(frame: Frame, weight: Tensor, bias: Tensor, patch: int) -> FrameTokens:
    u, v, _ = frame.pixels.shape
    grid = make_grid(u, v, patch)
    tokens = tokenize_pixels(frame.pixels[None], weight, bias, patch)
    return FrameTokens(nx.reshape(tokens, tokens.shape[1:]), grid, frame.frame_index)
