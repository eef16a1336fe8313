"""Non-overlapping patch tokenization and linear embedding.

An H x W image splits into (H/p)*(W/p) patches in row-major order; each
patch flattens row-major (row, col, channel) and projects affinely into the
model width d. The tensor path keeps the chain differentiable all the way
down to pixels.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .images import Image


class PatchGrid:
    """Geometry of the token grid: patch size, extents, and patch centers."""

    def __init__(self, height, width, patch_size):
        if height % patch_size or width % patch_size:
            raise ConfigError(
                f"image {height}x{width} not divisible by patch size {patch_size}"
            )
        self.patch_size = patch_size
        self.rows = height // patch_size
        self.cols = width // patch_size
        self.token_count = self.rows * self.cols
        self.height = height
        self.width = width
        half = patch_size // 2
        self.centers = [
            (r * patch_size + half, c * patch_size + half)
            for r in range(self.rows)
            for c in range(self.cols)
        ]


class PatchProjection:
    """Learnable affine map from flattened patches to d-vectors."""

    def __init__(self, patch_size, dim, rng=None, channels=3):
        fan_in = patch_size * patch_size * channels
        rng = rng or np.random.default_rng(0)
        self.w = Tensor(
            rng.normal(size=(fan_in, dim)) / np.sqrt(fan_in),
            requires_grad=True,
            name="patch.w",
        )
        self.b = Tensor(np.zeros(dim), requires_grad=True, name="patch.b")


def split_patches(img: Image, patch_size: int):
    """Return (patches, grid): row-major list of p x p x 3 pixel blocks."""
    grid = PatchGrid(img.height, img.width, patch_size)
    p = patch_size
    patches = [
        img.pixels[r * p : (r + 1) * p, c * p : (c + 1) * p, :]
        for r in range(grid.rows)
        for c in range(grid.cols)
    ]
    return patches, grid


def reassemble(patches, grid: PatchGrid) -> Image:
    """Inverse of split_patches; bit-exact."""
    p = grid.patch_size
    out = np.zeros((grid.height, grid.width, 3))
    for idx, patch in enumerate(patches):
        r, c = divmod(idx, grid.cols)
        out[r * p : (r + 1) * p, c * p : (c + 1) * p, :] = patch
    return Image(out)


def patch_matrix(pixels: Tensor, grid: PatchGrid) -> Tensor:
    """Differentiable (L, p*p*3) token matrix from an (H, W, 3) tensor."""
    p = grid.patch_size
    x = ad.reshape(pixels, (grid.rows, p, grid.cols, p, 3))
    x = ad.permute(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (grid.token_count, p * p * 3))


def embed(patches, proj: PatchProjection) -> Tensor:
    """E = flatten(P) W + b for every patch; accepts pixel blocks or a
    pre-flattened (L, p*p*3) tensor."""
    if isinstance(patches, Tensor):
        flat = patches
    else:
        flat = Tensor(np.stack([np.asarray(p).reshape(-1) for p in patches]))
    return ad.add(ad.matmul(flat, proj.w), proj.b)
