"""Training configuration: desk-scale defaults, validation, and the flat
key=value config-file format (CLI flags override file values)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .positional import ENCODING_MODES, PPE


@dataclass
class TrainConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 32
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_multiplier: int = 4
    scales: tuple = ()  # empty means (p, 2p, 4p)
    kernel_sizes: tuple = (1, 3, 5)
    encoder_channels: int = 8
    feature_layers: int = 4
    weight_content: float = 10.0
    weight_style: float = 7.0
    weight_identity1: float = 50.0
    weight_identity2: float = 1.0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    encoding: str = PPE
    phi_seed: int = 0
    phi_weights: str = ""
    content_dir: str = ""
    style_dir: str = ""
    checkpoint_every: int = 50
    publish_every: int = 1
    time_inference: bool = False
    share_encoders: bool = False

    def __post_init__(self):
        if not self.scales:
            self.scales = (self.patch_size, 2 * self.patch_size, 4 * self.patch_size)
        self.scales = tuple(int(s) for s in self.scales)
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.validate()

    def validate(self):
        p = self.patch_size
        if p < 1 or (p & (p - 1)) != 0:
            raise ConfigError(f"patch_size must be a power of two, got {p}")
        if self.image_size % p:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {p}"
            )
        if self.dim % self.n_heads:
            raise ConfigError(
                f"dim {self.dim} not divisible by n_heads {self.n_heads}"
            )
        if self.encoding not in ENCODING_MODES:
            raise ConfigError(
                f"encoding must be one of {ENCODING_MODES}, got {self.encoding!r}"
            )
        if self.feature_layers < 1:
            raise ConfigError("feature_layers must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @property
    def ffn_hidden(self):
        return self.dim * self.ffn_multiplier

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            coerced[f.name] = _coerce(f.name, data[f.name], f.type)
        return cls(**coerced)

    def override(self, **kwargs):
        data = self.to_dict()
        for key, value in kwargs.items():
            if value is not None:
                data[key] = value
        return TrainConfig.from_dict(data)

    def describe(self):
        lines = []
        for key, value in sorted(self.to_dict().items()):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines)


def _coerce(name, value, annotation):
    if isinstance(value, str):
        text = value.strip()
        if name in ("scales", "kernel_sizes"):
            return tuple(int(v) for v in text.split(",") if v)
        if annotation == "bool" or isinstance(getattr(TrainConfig, name, None), bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"cannot parse boolean for {name}: {text!r}")
        if annotation == "int":
            try:
                return int(text)
            except ValueError as exc:
                raise ConfigError(f"cannot parse integer for {name}: {text!r}") from exc
        if annotation == "float":
            try:
                return float(text)
            except ValueError as exc:
                raise ConfigError(f"cannot parse float for {name}: {text!r}") from exc
        return text
    if name in ("scales", "kernel_sizes") and isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return value


def load_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
