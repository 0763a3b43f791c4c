"""Image-to-token conversion: patch extraction, positions, linear embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, matmul


@dataclass
class ImageGray:
    """Grayscale image with pixels in [0, 1], row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ConfigError(f"image must be 2-D, got shape {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(f"pixel values must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TokenSequence:
    """Embedded patch tokens with positional information already added."""

    tokens: Tensor  # (N, D)
    grid_h: int
    grid_w: int

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    def __post_init__(self):
        if self.tokens.shape[0] != self.n:
            raise ConfigError(
                f"token count {self.tokens.shape[0]} != grid {self.grid_h}x{self.grid_w}"
            )


def extract_patches(img: ImageGray, patch: int) -> np.ndarray:
    """Cut the image into non-overlapping patches, row-major over the grid.

    Each output row is one patch, itself flattened row-major; concatenating
    the rows back reconstructs the image losslessly.
    """
    h, w = img.height, img.width
    if patch <= 0 or h % patch or w % patch:
        raise ConfigError(
            f"patch size {patch} does not divide image {h}x{w}"
        )
    gh, gw = h // patch, w // patch
    tiles = img.pixels.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(tiles.reshape(gh * gw, patch * patch))


def reassemble_patches(patches: np.ndarray, grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    """Inverse of :func:`extract_patches` (testing / visual inspection)."""
    tiles = patches.reshape(grid_h, grid_w, patch, patch).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(tiles.reshape(grid_h * patch, grid_w * patch))


def sincos_pos_embed(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """2-D factorized sin/cos positional table for a grid, shape (N, dim).

    The first dim/2 channels encode the row coordinate and the last dim/2
    the column coordinate; within each half, channels 2k and 2k+1 hold
    sin/cos at geometric frequencies 1/10000^(2k/(dim/2)).  Parameter-free
    and independent of image content.
    """
    if dim % 4:
        raise ConfigError(f"embedding width must be divisible by 4, got {dim}")
    half = dim // 2
    quarter = half // 2
    omega = 1.0 / (10000.0 ** (2.0 * np.arange(quarter) / half))

    rows = np.repeat(np.arange(grid_h, dtype=np.float64), grid_w)
    cols = np.tile(np.arange(grid_w, dtype=np.float64), grid_h)

    out = np.empty((grid_h * grid_w, dim), dtype=np.float32)
    for coord, offset in ((rows, 0), (cols, half)):
        angles = coord[:, None] * omega[None, :]
        out[:, offset + 0 : offset + half : 2] = np.sin(angles)
        out[:, offset + 1 : offset + half : 2] = np.cos(angles)
    return out


def embed_tokens(
    patches,
    proj: Tensor,
    proj_bias: Tensor,
    pos,
    grid_h: int,
    grid_w: int,
) -> TokenSequence:
    """Project patches to embeddings and add positions: patches @ proj + bias + pos."""
    if not isinstance(patches, Tensor):
        patches = Tensor(patches)
    pos = np.asarray(pos, dtype=np.float32)
    if patches.shape[1] != proj.shape[0]:
        raise ShapeError(
            f"patch width {patches.shape[1]} does not match projection rows {proj.shape[0]}"
        )
    if pos.shape != (patches.shape[0], proj.shape[1]):
        raise ShapeError(
            f"positional table shape {pos.shape} does not match tokens "
            f"({patches.shape[0]}, {proj.shape[1]})"
        )
    tokens = add(add(matmul(patches, proj), proj_bias), pos)
    return TokenSequence(tokens=tokens, grid_h=grid_h, grid_w=grid_w)
