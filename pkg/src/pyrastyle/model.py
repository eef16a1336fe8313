"""The full stylization model: tokenizer, positional encoding, content and
style encoders, cross-attention decoder, and the upsampling CNN head.

Content tokens receive positional encodings; style tokens do not. Content
and style encoder stacks share architecture but hold separate weights
unless the config says otherwise.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .errors import ConfigError
from .images import Image
from .losses import GammaParam
from .patches import PatchGrid, PatchProjection, embed, patch_matrix
from .positional import PPE, PpeParams, ScaleSpec, encode_positions
from .transformer import DecoderLayer, EncoderLayer, decoder_forward, encoder_forward
from .upsampler import DecoderParams, decode


class StyleModel:
    def __init__(self, config: TrainConfig, rng=None):
        self.config = config
        rng = rng or np.random.default_rng(config.seed)
        size, p, d = config.image_size, config.patch_size, config.dim
        self.grid = PatchGrid(size, size, p)

        self.projection = PatchProjection(p, d, rng)
        if config.encoding == PPE:
            spec = ScaleSpec(config.scales, config.kernel_sizes, config.encoder_channels)
            spec.validate_against(p, size, size)
            self.ppe = PpeParams(spec, d, rng)
        else:
            self.ppe = None

        hidden = config.ffn_hidden
        self.content_encoder = [
            EncoderLayer(d, config.n_heads, hidden, rng, f"enc_c.{i}")
            for i in range(config.encoder_layers)
        ]
        if config.share_encoders:
            self.style_encoder = self.content_encoder
        else:
            self.style_encoder = [
                EncoderLayer(d, config.n_heads, hidden, rng, f"enc_s.{i}")
                for i in range(config.encoder_layers)
            ]
        self.decoder = [
            DecoderLayer(d, config.n_heads, hidden, rng, f"dec.{i}")
            for i in range(config.decoder_layers)
        ]
        self.upsampler = DecoderParams(d, p, rng)
        self.gamma = GammaParam()
        self._params = self._collect_params()

    def _collect_params(self):
        tensors = [self.projection.w, self.projection.b]
        if self.ppe is not None:
            tensors += list(self.ppe.tensors())
        for layer in self.content_encoder:
            tensors += layer.tensors()
        if self.style_encoder is not self.content_encoder:
            for layer in self.style_encoder:
                tensors += layer.tensors()
        for layer in self.decoder:
            tensors += layer.tensors()
        tensors += self.upsampler.tensors()
        tensors.append(self.gamma.raw)
        named = {}
        for t in tensors:
            if t.name in named:
                raise ConfigError(f"duplicate parameter name {t.name}")
            named[t.name] = t
        return named

    def params(self) -> dict:
        """Name -> tensor, in stable construction order."""
        return self._params

    def _pixels_tensor(self, image):
        if isinstance(image, Tensor):
            return image
        pixels = image.pixels if isinstance(image, Image) else np.asarray(image)
        expected = (self.config.image_size, self.config.image_size, 3)
        if pixels.shape != expected:
            raise ConfigError(f"image shape {pixels.shape} != configured {expected}")
        return Tensor(pixels)

    def forward(self, content, style, attn_sink=None) -> Tensor:
        """Stylized image tensor (H, W, 3), unclamped."""
        x_c = self._pixels_tensor(content)
        x_s = self._pixels_tensor(style)

        tokens_c = embed(patch_matrix(x_c, self.grid), self.projection)
        tokens_s = embed(patch_matrix(x_s, self.grid), self.projection)

        pe = encode_positions(
            x_c, self.grid, self.config.encoding,
            self.ppe if self.ppe is not None else self.config.dim,
        )
        z_c = ad.add(tokens_c, pe)
        z_s = tokens_s  # style stream carries no positional term

        y_c = encoder_forward(z_c, self.content_encoder, attn_sink)
        y_s = encoder_forward(z_s, self.style_encoder, attn_sink)
        mixed = decoder_forward(y_c, y_s, self.decoder, attn_sink)
        return decode(mixed, self.grid, self.upsampler)

    def stylize(self, content: Image, style: Image) -> Image:
        """Forward pass without taping; pixels clamped into [0,1]."""
        out = self.forward(content, style)
        return Image(np.clip(out.data, 0.0, 1.0))

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_arrays(self, arrays):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ConfigError(
                f"checkpoint/model mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for name, tensor in self._params.items():
            incoming = np.asarray(arrays[name])
            if incoming.shape != tensor.data.shape:
                raise ConfigError(
                    f"parameter {name} shape {incoming.shape} != {tensor.data.shape}"
                )
            tensor.data = incoming.astype(np.float64).copy()
