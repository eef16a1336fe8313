"""Training loop: three forward passes per step (stylized + two identity
passes), reward-augmented loss, backprop, Adam updates, per-epoch metrics,
checkpoint/resume, and rating-queue consumption at step boundaries.

Determinism contract: a fixed seed yields byte-identical metrics CSVs and
bit-exact checkpoint resume. The CSV timestamp column is therefore a logical
clock (cumulative step count), and inference timing defaults to off during
training; the eval path always measures real wall time.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .config import TrainConfig
from .errors import ConfigError, DataError, TrainingError
from .features import DEFAULT_CHANNEL_PLAN, FeatureExtractor, load_weights
from .images import Image, load, resize_bilinear
from .losses import (
    LossReport,
    LossWeights,
    content_loss,
    identity_losses,
    rl_augmented_loss,
    style_loss,
    total_loss,
)
from .model import StyleModel

_CKPT_MAGIC = b"PSCK"
CSV_HEADER = "epoch,l_c,l_s,l_id1,l_id2,l_total,l_new,gamma,inference_seconds,timestamp"


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam update; returns (param, m, v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            p.data, self.m[name], self.v[name] = adam_update(
                p.data, p.grad, self.m[name], self.v[name],
                self.t, self.lr, self.beta1, self.beta2, self.eps,
            )


@dataclass
class StepReport:
    step: int
    epoch: int
    losses: LossReport
    gamma_used: float
    penalty: float
    rated_sample: str | None = None

    @property
    def rated(self):
        return self.rated_sample is not None


@dataclass
class MetricsRow:
    epoch: int
    l_c: float
    l_s: float
    l_id1: float
    l_id2: float
    l_total: float
    l_new: float
    gamma: float
    inference_seconds: float
    timestamp: int

    def to_csv(self):
        floats = [self.l_c, self.l_s, self.l_id1, self.l_id2,
                  self.l_total, self.l_new, self.gamma, self.inference_seconds]
        return ",".join([str(self.epoch)] + [f"{v:.6g}" for v in floats] + [str(self.timestamp)])

    def to_dict(self):
        return {
            "epoch": self.epoch, "l_c": self.l_c, "l_s": self.l_s,
            "l_id1": self.l_id1, "l_id2": self.l_id2, "l_total": self.l_total,
            "l_new": self.l_new, "gamma": self.gamma,
            "inference_seconds": self.inference_seconds, "timestamp": self.timestamp,
        }


def build_extractor(config: TrainConfig) -> FeatureExtractor:
    if config.phi_weights:
        return load_weights(config.phi_weights)
    plan = DEFAULT_CHANNEL_PLAN[: config.feature_layers]
    if len(plan) < config.feature_layers:
        plan = plan + tuple(plan[-1] * 2 for _ in range(config.feature_layers - len(plan)))
    return FeatureExtractor(seed=config.phi_seed, channel_plan=plan)


class Trainer:
    """Owns model, extractor, and optimizer state on a single thread."""

    def __init__(self, config: TrainConfig, phi=None):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.model = StyleModel(config, np.random.default_rng(seeds[0]))
        self.shuffle_rng = np.random.default_rng(seeds[1])
        self.phi = phi or build_extractor(config)
        self.weights = LossWeights(
            config.weight_content, config.weight_style,
            config.weight_identity1, config.weight_identity2,
        )
        self.optimizer = Adam(
            self.model.params(), config.learning_rate,
            config.beta1, config.beta2, config.adam_eps,
        )
        self.epoch = 0
        self.global_step = 0

    def _loss_forward(self, content, style, rating):
        output = self.model.forward(content, style)
        identity_c = self.model.forward(content, content)
        identity_s = self.model.forward(style, style)
        c_ref = self.model._pixels_tensor(content)
        s_ref = self.model._pixels_tensor(style)
        l_c = content_loss(output, c_ref, self.phi)
        l_s = style_loss(output, s_ref, self.phi)
        l_id1, l_id2 = identity_losses(identity_c, c_ref, identity_s, s_ref, self.phi)
        l_total = total_loss(l_c, l_s, l_id1, l_id2, self.weights)
        l_new = rl_augmented_loss(l_total, rating, self.model.gamma)
        report = LossReport(
            float(l_c.data), float(l_s.data), float(l_id1.data),
            float(l_id2.data), float(l_total.data), float(l_new.data),
        )
        return l_new, report, output

    def step(self, content: Image, style: Image, rating=None) -> StepReport:
        """One optimization step; consumes the rating if one is given."""
        gamma_used = self.model.gamma.value()
        self.optimizer.zero_grad()
        with Tape() as tape:
            try:
                l_new, report, _ = self._loss_forward(content, style, rating)
            except TrainingError as exc:
                culprit = tape.first_nonfinite()
                raise TrainingError(
                    f"aborting step {self.global_step + 1}: {exc}"
                    + (f" (first non-finite tensor from op {culprit!r})" if culprit else "")
                ) from exc
            if not np.isfinite(l_new.data):
                culprit = tape.first_nonfinite()
                raise TrainingError(
                    f"aborting step {self.global_step + 1}: non-finite objective"
                    + (f" (first non-finite tensor from op {culprit!r})" if culprit else "")
                )
            tape.backward(l_new)

        for name, tensor in self.model.params().items():
            if tensor.grad is None:
                raise TrainingError(f"parameter {name} received no gradient")
        self.optimizer.step()
        self.global_step += 1
        return StepReport(
            step=self.global_step,
            epoch=self.epoch,
            losses=report,
            gamma_used=gamma_used,
            penalty=rating.penalty if rating is not None else 0.0,
            rated_sample=rating.sample_id if rating is not None else None,
        )

    def evaluate_pair(self, content: Image, style: Image):
        """Forward-only losses of the current parameters (no tape, no update)."""
        l_new, report, output = self._loss_forward(content, style, None)
        return report, Image(np.clip(output.data, 0.0, 1.0))


def measure_inference(model: StyleModel, content: Image, style: Image, repeats=3) -> float:
    """Median wall-clock seconds for one full stylization forward pass."""
    times = []
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        model.stylize(content, style)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# Dataset ingestion

IMAGE_SUFFIXES = (".ppm", ".png")


def list_images(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"image directory does not exist: {directory}")
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        raise DataError(f"no .ppm/.png images found in {directory}")
    return paths


def load_sized(path, size) -> Image:
    img = load(path)
    if (img.height, img.width) != (size, size):
        img = resize_bilinear(img, size, size)
    return img


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw little-endian float64 payload


def save_checkpoint(trainer: Trainer, path) -> None:
    arrays = {}
    for name, tensor in trainer.model.params().items():
        arrays[f"param:{name}"] = tensor.data
    for name in trainer.model.params():
        arrays[f"adam_m:{name}"] = trainer.optimizer.m[name]
        arrays[f"adam_v:{name}"] = trainer.optimizer.v[name]

    manifest = {
        "version": 1,
        "config": trainer.config.to_dict(),
        "epoch": trainer.epoch,
        "global_step": trainer.global_step,
        "adam_t": trainer.optimizer.t,
        "rng_state": trainer.shuffle_rng.bit_generator.state,
        "tensors": [],
    }
    payload = bytearray()
    for name, data in arrays.items():
        manifest["tensors"].append(
            {"name": name, "shape": list(data.shape), "offset": len(payload)}
        )
        payload.extend(np.ascontiguousarray(data, dtype="<f8").tobytes())
    blob = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def read_checkpoint(path):
    """Returns (manifest, arrays) without building a trainer."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint does not exist: {path}")
    raw = path.read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ConfigError(f"not a checkpoint file: {path}")
    (length,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + length])
    if manifest.get("version") != 1:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('version')}")
    payload = raw[8 + length :]
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = data.reshape(shape).copy()
    return manifest, arrays


def load_checkpoint(path, epochs_override=None) -> Trainer:
    manifest, arrays = read_checkpoint(path)
    config = TrainConfig.from_dict(manifest["config"])
    if epochs_override is not None:
        config = config.override(epochs=epochs_override)
    trainer = Trainer(config)
    params = {}
    for key, value in arrays.items():
        kind, name = key.split(":", 1)
        if kind == "param":
            params[name] = value
        elif kind == "adam_m":
            trainer.optimizer.m[name] = value.copy()
        elif kind == "adam_v":
            trainer.optimizer.v[name] = value.copy()
    trainer.model.load_state_arrays(params)
    trainer.epoch = manifest["epoch"]
    trainer.global_step = manifest["global_step"]
    trainer.optimizer.t = manifest["adam_t"]
    trainer.shuffle_rng.bit_generator.state = manifest["rng_state"]
    return trainer


# ---------------------------------------------------------------------------
# The epoch loop


def run_training(config=None, out_dir=None, rating_source=None, observer=None,
                 resume=None, trainer=None):
    """Train to config.epochs; returns (trainer, metrics rows).

    ``rating_source`` is drained one rating per step, at step boundaries
    only. ``observer`` may implement on_step(report) and
    on_epoch(row, sample_image, trainer); both are called on the training
    thread.
    """
    if trainer is None:
        if resume is not None:
            epochs_override = config.epochs if config is not None else None
            trainer = load_checkpoint(resume, epochs_override)
        else:
            if config is None:
                raise ConfigError("run_training needs a config, trainer, or checkpoint")
            trainer = Trainer(config)
    config = trainer.config

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "samples").mkdir(exist_ok=True)

    contents = list_images(config.content_dir)
    styles = list_images(config.style_dir)
    size = config.image_size
    cache = {}

    def fetch(path):
        if path not in cache:
            cache[path] = load_sized(path, size)
        return cache[path]

    pairs = [(c, s) for c in contents for s in styles]

    rows = []
    csv_path = out / "metrics.csv" if out is not None else None
    csv_file = None
    if csv_path is not None:
        csv_file = open(csv_path, "w")
        csv_file.write(CSV_HEADER + "\n")
        csv_file.flush()

    try:
        while trainer.epoch < config.epochs:
            trainer.epoch += 1
            order = trainer.shuffle_rng.permutation(len(pairs))
            for idx in order:
                content_path, style_path = pairs[idx]
                rating = rating_source() if rating_source is not None else None
                report = trainer.step(fetch(content_path), fetch(style_path), rating)
                if observer is not None and hasattr(observer, "on_step"):
                    observer.on_step(report)

            # post-update evaluation of the lexicographically first pair
            eval_report, sample = trainer.evaluate_pair(
                fetch(pairs[0][0]), fetch(pairs[0][1])
            )
            seconds = 0.0
            if config.time_inference:
                seconds = measure_inference(
                    trainer.model, fetch(pairs[0][0]), fetch(pairs[0][1])
                )
            row = MetricsRow(
                epoch=trainer.epoch,
                l_c=eval_report.l_c, l_s=eval_report.l_s,
                l_id1=eval_report.l_id1, l_id2=eval_report.l_id2,
                l_total=eval_report.l_total, l_new=eval_report.l_new,
                gamma=trainer.model.gamma.value(),
                inference_seconds=seconds,
                timestamp=trainer.global_step,
            )
            rows.append(row)
            if csv_file is not None:
                csv_file.write(row.to_csv() + "\n")
                csv_file.flush()

            published = None
            if config.publish_every and trainer.epoch % config.publish_every == 0:
                published = sample
                if out is not None:
                    from .images import save

                    save(sample, out / "samples" / f"epoch_{trainer.epoch:05d}.ppm")
            if observer is not None and hasattr(observer, "on_epoch"):
                observer.on_epoch(row, published, trainer)

            if (
                out is not None
                and config.checkpoint_every
                and trainer.epoch % config.checkpoint_every == 0
            ):
                save_checkpoint(trainer, out / f"checkpoint_epoch{trainer.epoch:05d}.ckpt")
    finally:
        if csv_file is not None:
            csv_file.close()

    if out is not None:
        save_checkpoint(trainer, out / "checkpoint_final.ckpt")
    return trainer, rows
