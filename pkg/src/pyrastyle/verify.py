"""Gradient verification: per-operation checks against central finite
differences, and a whole-model sweep of the reward-augmented objective.

Inputs are seeded and nudged away from relu kinks so the finite-difference
probe never straddles a nondifferentiable point.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, grad_check
from .config import TrainConfig
from .features import FeatureExtractor, stats
from .fixtures import synthetic_image
from .losses import RatingFeedback
from .patches import PatchGrid, PatchProjection, embed, patch_matrix
from .positional import extract_windows
from .training import Trainer
from .transformer import AttentionParams, mha

OP_THRESHOLD = 1e-5
MODEL_THRESHOLD = 1e-4


def _away_from_kinks(rng, shape, margin=0.2):
    data = rng.normal(size=shape)
    return data + margin * np.sign(data)


def _weighted_sum(t, weigh):
    return ad.sum_all(ad.mul(t, weigh))


def op_checks(seed: int) -> dict:
    """Max relative FD error for each differentiable operation at one seed."""
    r = np.random.default_rng(seed)
    errors = {}

    w = Tensor(r.normal(size=(4, 3)))
    errors["matmul"] = grad_check(lambda t: ad.sum_all(ad.matmul(t, w)), Tensor(r.normal(size=(3, 4))))

    kernel = Tensor(r.normal(size=(3, 3, 2, 2)))
    errors["conv2d_zero"] = grad_check(
        lambda t: ad.sum_all(ad.conv2d(t, kernel, padding="zero")), Tensor(r.normal(size=(5, 5, 2)))
    )
    errors["conv2d_reflect"] = grad_check(
        lambda t: ad.sum_all(ad.conv2d(t, kernel, padding="reflect")), Tensor(r.normal(size=(5, 5, 2)))
    )
    x_fixed = Tensor(r.normal(size=(5, 5, 2)))
    errors["conv2d_kernel"] = grad_check(
        lambda t: ad.sum_all(ad.conv2d(x_fixed, t)), Tensor(r.normal(size=(3, 3, 2, 2)))
    )

    errors["relu"] = grad_check(
        lambda t: ad.sum_all(ad.relu(t)), Tensor(_away_from_kinks(r, (4, 4)))
    )

    weigh = Tensor(r.normal(size=(3, 5)))
    errors["softmax_rows"] = grad_check(
        lambda t: _weighted_sum(ad.softmax_rows(t), weigh), Tensor(r.normal(size=(3, 5)))
    )

    gain, bias = Tensor(r.normal(size=6)), Tensor(r.normal(size=6))
    errors["layer_norm"] = grad_check(
        lambda t: ad.sum_all(ad.layer_norm(t, gain, bias)), Tensor(r.normal(size=(3, 6)))
    )

    errors["upsample_nearest_2x"] = grad_check(
        lambda t: ad.sum_all(ad.upsample_nearest_2x(t)), Tensor(r.normal(size=(3, 3, 2)))
    )

    errors["softplus"] = grad_check(lambda t: ad.sum_all(ad.softplus(t)), Tensor(r.normal(size=7)))
    errors["sqrt"] = grad_check(lambda t: ad.sum_all(ad.sqrt(t)), Tensor(r.random(size=7) + 0.5))
    mean_w = Tensor(r.normal(size=4))
    errors["mean_axis"] = grad_check(
        lambda t: ad.sum_all(ad.mul(ad.mean(t, axis=(0,)), mean_w)),
        Tensor(r.normal(size=(3, 4))),
    )

    grid = PatchGrid(16, 16, 8)
    rows_w = Tensor(r.normal(size=(4, 16, 16, 3)))
    errors["extract_windows"] = grad_check(
        lambda t: _weighted_sum(extract_windows(t, grid, 16), rows_w),
        Tensor(r.random(size=(16, 16, 3))),
    )

    proj = PatchProjection(8, 6, r)
    token_w = Tensor(r.normal(size=(4, 6)))
    errors["embed"] = grad_check(
        lambda t: _weighted_sum(embed(patch_matrix(t, grid), proj), token_w),
        Tensor(r.random(size=(16, 16, 3))),
    )

    attn = AttentionParams(8, 2, r, "v")
    seq_w = Tensor(r.normal(size=(4, 8)))
    kv = Tensor(r.normal(size=(4, 8)))
    errors["mha"] = grad_check(
        lambda t: _weighted_sum(mha(t, kv, kv, attn), seq_w), Tensor(r.normal(size=(4, 8)))
    )

    phi = FeatureExtractor(seed=seed, channel_plan=(4, 8))
    feat_w = Tensor(r.normal(size=(2, 2, 8)))
    errors["features"] = grad_check(
        lambda t: _weighted_sum(phi(t)[-1], feat_w), Tensor(r.random(size=(8, 8, 3)))
    )

    stat_w = Tensor(r.normal(size=3))
    errors["stats"] = grad_check(
        lambda t: _weighted_sum(ad.add(*stats(t)), stat_w), Tensor(r.normal(size=(4, 4, 3)))
    )

    return errors


def run_op_scale(seeds=range(5)):
    """(worst error per op over seeds, pass flag)."""
    worst = {}
    for seed in seeds:
        for name, err in op_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst, all(err < OP_THRESHOLD for err in worst.values())


def model_check_config():
    """16x16 fixture configuration exercising every parameter group."""
    return TrainConfig(image_size=16, patch_size=8, epochs=1, seed=0)


def run_model_scale(seed=0, samples=200):
    """FD-check >= 200 sampled coordinates of the full objective.

    Every named parameter contributes at least one coordinate, so the report
    doubles as the gradient-coverage listing. A pending rating keeps
    gamma.raw active. Returns (per-tensor worst error, pass flag).
    """
    config = model_check_config()
    trainer = Trainer(config)
    content = synthetic_image("ramp", config.image_size, seed=seed)
    style = synthetic_image("stripes", config.image_size, seed=seed + 1)
    rating = RatingFeedback("gradcheck", 2)

    def objective():
        l_new, _, _ = trainer._loss_forward(content, style, rating)
        return l_new

    params = trainer.model.params()
    trainer.optimizer.zero_grad()
    with Tape() as tape:
        loss = objective()
    tape.backward(loss)
    analytic = {name: np.array(t.grad).reshape(-1) for name, t in params.items()}

    rng = np.random.default_rng(seed)
    names = list(params)
    # one coordinate from every tensor, then round-robin until the budget
    schedule = [(name, int(rng.integers(params[name].data.size))) for name in names]
    while len(schedule) < samples:
        name = names[int(rng.integers(len(names)))]
        schedule.append((name, int(rng.integers(params[name].data.size))))

    h = 1e-5
    report = {name: 0.0 for name in names}
    for name, coord in schedule:
        flat = params[name].data.reshape(-1)
        original = flat[coord]
        flat[coord] = original + h
        up = float(objective().data)
        flat[coord] = original - h
        down = float(objective().data)
        flat[coord] = original
        fd = (up - down) / (2 * h)
        a = analytic[name][coord]
        rel = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
        report[name] = max(report[name], rel)
    return report, all(err < MODEL_THRESHOLD for err in report.values())
