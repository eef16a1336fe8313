"""Deterministic synthetic images for demos and tests: gradients, blobs,
stripes, and checkerboards stand in for photographs and paintings."""

from __future__ import annotations

import numpy as np

from .images import Image, save

KINDS = ("ramp", "blobs", "stripes", "checker")


def synthetic_image(kind: str, size: int = 32, seed: int = 0) -> Image:
    rng = np.random.default_rng(seed)
    coords = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    if kind == "ramp":
        pixels = np.stack([yy, xx, 0.5 * (yy + xx)], axis=2)
    elif kind == "blobs":
        pixels = np.zeros((size, size, 3))
        for _ in range(4):
            cy, cx = rng.random(2)
            radius = 0.15 + 0.2 * rng.random()
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2))
            pixels[:, :, rng.integers(3)] += blob
        pixels /= max(pixels.max(), 1.0)
    elif kind == "stripes":
        phase = rng.random() * np.pi
        freq = 2 + int(rng.integers(4))
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * xx + phase)
        pixels = np.stack([wave, 1.0 - wave, np.full_like(wave, 0.3)], axis=2)
    elif kind == "checker":
        cell = max(size // 8, 1)
        board = ((yy * size // cell).astype(int) + (xx * size // cell).astype(int)) % 2
        pixels = np.stack([board, 0.5 * board, 1.0 - board], axis=2).astype(float)
    else:
        raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    return Image(np.clip(pixels, 0.0, 1.0))


def write_fixture_set(directory, kinds=KINDS, size: int = 32, seed: int = 0):
    """Write one PPM per kind into ``directory``; returns the paths."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, kind in enumerate(kinds):
        path = directory / f"{kind}.ppm"
        save(synthetic_image(kind, size, seed + i), path)
        paths.append(path)
    return paths
