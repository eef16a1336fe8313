"""Fixed convolutional feature extractor standing in for a pretrained
network, plus per-channel statistics for the style objective.

Weights are generated once from a named seed (normal entries scaled by
1/sqrt(fan_in)) and never trained; gradients flow through activations to
the input image only. A weight file can substitute externally trained
filters behind the same interface.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

STATS_EPS = 1e-5
DEFAULT_CHANNEL_PLAN = (8, 16, 32, 64)
_MAGIC = b"PSWT"


class FeatureExtractor:
    """Stack of 3x3 stride-2 conv + relu taps; every layer's map is a tap."""

    def __init__(self, seed=0, channel_plan=DEFAULT_CHANNEL_PLAN, weights=None):
        self.seed = seed
        self.channel_plan = tuple(channel_plan)
        if weights is not None:
            self.layers = [
                (Tensor(k), Tensor(b)) for k, b in weights
            ]
        else:
            rng = np.random.default_rng(seed)
            self.layers = []
            previous = 3
            for channels in self.channel_plan:
                fan_in = 9 * previous
                # float32-rounded values keep the weight-file round trip bit-exact
                kernel = (
                    rng.normal(size=(3, 3, previous, channels)) / np.sqrt(fan_in)
                ).astype(np.float32).astype(np.float64)
                bias = np.zeros(channels)
                self.layers.append((Tensor(kernel), Tensor(bias)))
                previous = channels
        for kernel, bias in self.layers:
            kernel.requires_grad = False
            bias.requires_grad = False

    @property
    def n_layers(self):
        return len(self.layers)

    def __call__(self, img: Tensor):
        """Feature maps at every tap; differentiable w.r.t. the image only."""
        maps = []
        x = img
        for kernel, bias in self.layers:
            x = ad.relu(ad.add(ad.conv2d(x, kernel, padding="zero", stride=2), bias))
            maps.append(x)
        return maps


def stats(feature_map: Tensor, eps=STATS_EPS):
    """Per-channel spatial mean and std (population variance, eps inside
    the square root so sigma stays differentiable at zero variance)."""
    mu = ad.mean(feature_map, axis=(0, 1))
    centered = ad.sub(feature_map, mu)
    var = ad.mean(ad.mul(centered, centered), axis=(0, 1))
    sigma = ad.sqrt(ad.add(var, eps))
    return mu, sigma


def save_weights(extractor: FeatureExtractor, path) -> None:
    """JSON manifest + concatenated little-endian float32 payloads."""
    manifest = {
        "version": 1,
        "seed": extractor.seed,
        "channel_plan": list(extractor.channel_plan),
        "layers": [],
    }
    payload = bytearray()
    for i, (kernel, bias) in enumerate(extractor.layers):
        for part, tensor in (("kernel", kernel), ("bias", bias)):
            raw = tensor.data.astype("<f4").tobytes()
            manifest["layers"].append(
                {
                    "name": f"layer{i}.{part}",
                    "shape": list(tensor.data.shape),
                    "offset": len(payload),
                }
            )
            payload.extend(raw)
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_weights(path) -> FeatureExtractor:
    path = Path(path)
    if not path.exists():
        raise DataError(f"weight file does not exist: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise DataError(f"not a feature-weight file: {path}")
    (length,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + length])
    if manifest.get("version") != 1:
        raise ConfigError(f"unsupported weight file version {manifest.get('version')}")
    payload = raw[8 + length :]
    arrays = {}
    for entry in manifest["layers"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = data.reshape(shape).astype(np.float64)
    weights = []
    for i in range(len(manifest["channel_plan"])):
        weights.append((arrays[f"layer{i}.kernel"], arrays[f"layer{i}.bias"]))
    return FeatureExtractor(
        seed=manifest["seed"], channel_plan=manifest["channel_plan"], weights=weights
    )
