"""CNN decoder from transformer tokens back to an RGB image.

Tokens unflatten to an (H/p, W/p, d) grid, pass through log2(p) blocks of
conv -> relu -> nearest 2x upsample, and a final linear conv maps to three
channels. Output pixels are unclamped; clamping happens at save time so the
losses keep their gradients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .patches import PatchGrid


class DecoderParams:
    """log2(p) refinement conv blocks plus the final RGB projection."""

    def __init__(self, dim, patch_size, rng, prefix="up"):
        blocks = int(np.log2(patch_size))
        if 2**blocks != patch_size:
            raise ConfigError(
                f"patch size {patch_size} is not a power of two; "
                "2x upsampling cannot reach the image size"
            )
        self.dim = dim
        self.blocks = []
        for i in range(blocks):
            kernel = Tensor(
                rng.normal(size=(3, 3, dim, dim)) / np.sqrt(9 * dim),
                requires_grad=True,
                name=f"{prefix}.{i}.kernel",
            )
            bias = Tensor(np.zeros(dim), requires_grad=True, name=f"{prefix}.{i}.bias")
            self.blocks.append((kernel, bias))
        self.out_kernel = Tensor(
            rng.normal(size=(3, 3, dim, 3)) / np.sqrt(9 * dim),
            requires_grad=True,
            name=f"{prefix}.out.kernel",
        )
        self.out_bias = Tensor(np.zeros(3), requires_grad=True, name=f"{prefix}.out.bias")

    def tensors(self):
        out = []
        for kernel, bias in self.blocks:
            out += [kernel, bias]
        return out + [self.out_kernel, self.out_bias]


def tokens_to_grid(x: Tensor, grid: PatchGrid) -> Tensor:
    """Row-major unflatten of (L, d) into (rows, cols, d)."""
    length, dim = x.data.shape
    if length != grid.token_count:
        raise ContractError(
            f"token count {length} does not match grid {grid.rows}x{grid.cols}"
        )
    return ad.reshape(x, (grid.rows, grid.cols, dim))


def decode(x: Tensor, grid: PatchGrid, params: DecoderParams) -> Tensor:
    """Tokens to an (H, W, 3) image tensor, linear output."""
    feat = tokens_to_grid(x, grid)
    for kernel, bias in params.blocks:
        feat = ad.upsample_nearest_2x(ad.relu(ad.add(ad.conv2d(feat, kernel), bias)))
    return ad.add(ad.conv2d(feat, params.out_kernel), params.out_bias)
