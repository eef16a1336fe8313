"""Pyramid positional encoding: multi-scale context windows around each
patch center, per-(scale, kernel) convolutional encoders, and a learned
linear fusion into one d-vector per token.

A sinusoidal table and a zero ("none") mode back the ablation harness.
Window extraction resolves out-of-bounds coordinates by mirror reflection
(no edge repeat), so border tokens see plausible context instead of black.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .patches import PatchGrid

PPE = "ppe"
SINUSOIDAL = "sinusoidal"
NONE = "none"
ENCODING_MODES = (PPE, SINUSOIDAL, NONE)


class ScaleSpec:
    """Pyramid geometry: window sizes, encoder kernel sizes, channel width."""

    def __init__(self, scales, kernel_sizes=(1, 3, 5), channels=8):
        scales = tuple(scales)
        kernel_sizes = tuple(kernel_sizes)
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be strictly increasing, got {scales}")
        if any(k % 2 == 0 for k in kernel_sizes):
            raise ConfigError(f"kernel sizes must be odd, got {kernel_sizes}")
        if channels < 1:
            raise ConfigError("encoder channel count must be >= 1")
        self.scales = scales
        self.kernel_sizes = kernel_sizes
        self.channels = channels

    @classmethod
    def default_for(cls, patch_size, channels=8):
        return cls((patch_size, 2 * patch_size, 4 * patch_size), channels=channels)

    def validate_against(self, patch_size, height, width):
        if self.scales[0] != patch_size:
            raise ConfigError(
                f"smallest scale {self.scales[0]} must equal patch size {patch_size}"
            )
        limit = 3 * min(height, width)
        if self.scales[-1] > limit:
            raise ConfigError(
                f"scale {self.scales[-1]} exceeds 3x image extent {limit}; "
                "reflection is undefined"
            )


class PpeParams:
    """One conv encoder (kernel + bias) and one fusion matrix per
    (scale, kernel) pair."""

    def __init__(self, spec: ScaleSpec, dim, rng, prefix="ppe"):
        self.spec = spec
        self.encoders = {}
        for s in spec.scales:
            for k in spec.kernel_sizes:
                fan_in = k * k * 3
                kernel = Tensor(
                    rng.normal(size=(k, k, 3, spec.channels)) / np.sqrt(fan_in),
                    requires_grad=True,
                    name=f"{prefix}.s{s}k{k}.kernel",
                )
                bias = Tensor(
                    np.zeros(spec.channels),
                    requires_grad=True,
                    name=f"{prefix}.s{s}k{k}.bias",
                )
                fuse_w = Tensor(
                    rng.normal(size=(spec.channels, dim)) / np.sqrt(spec.channels),
                    requires_grad=True,
                    name=f"{prefix}.s{s}k{k}.fuse",
                )
                self.encoders[(s, k)] = (kernel, bias, fuse_w)

    def tensors(self):
        for kernel, bias, fuse_w in self.encoders.values():
            yield kernel
            yield bias
            yield fuse_w


def reflect_indices(start, length, extent):
    """Integer index row [start, start+length) mirrored into [0, extent)."""
    idx = np.arange(start, start + length)
    if extent == 1:
        return np.zeros(length, dtype=int)
    period = 2 * extent - 2
    idx = np.abs(idx) % period
    return np.where(idx >= extent, period - idx, idx)


def window_indices(grid: PatchGrid, scale: int):
    """Per-token (row, col) index maps for windows [c - s/2, c + s/2)."""
    half = scale // 2
    rows = np.stack(
        [reflect_indices(x - half, scale, grid.height) for x, _ in grid.centers]
    )
    cols = np.stack(
        [reflect_indices(y - half, scale, grid.width) for _, y in grid.centers]
    )
    return rows, cols


def extract_windows(pixels: Tensor, grid: PatchGrid, scale: int) -> Tensor:
    """All tokens' context windows at one scale: (L, scale, scale, 3)."""
    if scale > 3 * min(grid.height, grid.width):
        raise ConfigError(
            f"scale {scale} exceeds 3x image extent; reflection is undefined"
        )
    rows, cols = window_indices(grid, scale)
    return ad.take_windows(pixels, rows, cols)


def encode_windows(windows: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """conv (zero pad) -> relu -> global average pool; (L, C_e) features."""
    conv = ad.conv2d(windows, kernel, padding="zero")
    activated = ad.relu(ad.add(conv, bias))
    return ad.mean(activated, axis=(1, 2))


def fuse(features: dict, params: PpeParams) -> Tensor:
    """PE = sum over (scale, kernel) of F^(s,k) W^(s,k)."""
    missing = set(params.encoders) - set(features)
    if missing:
        raise ContractError(f"missing encoder features for pairs {sorted(missing)}")
    total = None
    for key in params.encoders:
        _, _, fuse_w = params.encoders[key]
        term = ad.matmul(features[key], fuse_w)
        total = term if total is None else ad.add(total, term)
    return total


def sinusoidal_table(token_count: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos over the flattened token index, 10000^(2i/d)."""
    position = np.arange(token_count)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angles = position / np.power(10000.0, i / dim)
    table = np.zeros((token_count, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
    return table


def encode_positions(pixels: Tensor, grid: PatchGrid, mode: str, params=None) -> Tensor:
    """Per-token positional encoding (L, d) under the selected mode."""
    if mode == NONE:
        dim = _require_dim(params)
        return Tensor(np.zeros((grid.token_count, dim)))
    if mode == SINUSOIDAL:
        dim = _require_dim(params)
        return Tensor(sinusoidal_table(grid.token_count, dim))
    if mode != PPE:
        raise ConfigError(f"unknown encoding mode {mode!r}; expected one of {ENCODING_MODES}")
    if not isinstance(params, PpeParams):
        raise ContractError("ppe mode requires PpeParams")
    params.spec.validate_against(grid.patch_size, grid.height, grid.width)
    windows_by_scale = {}
    features = {}
    for (s, k), (kernel, bias, _) in params.encoders.items():
        if s not in windows_by_scale:
            windows_by_scale[s] = extract_windows(pixels, grid, s)
        features[(s, k)] = encode_windows(windows_by_scale[s], kernel, bias)
    return fuse(features, params)


def _require_dim(params):
    if isinstance(params, int):
        return params
    if isinstance(params, PpeParams):
        for _, _, fuse_w in params.encoders.values():
            return fuse_w.data.shape[1]
    raise ContractError("sinusoidal/none modes need the embedding width")
