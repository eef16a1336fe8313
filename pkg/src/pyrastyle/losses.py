"""Training objectives: content fidelity, global style effects, the two
identity losses, their weighted total, and the human-rating augmented loss.

All squared norms are realized as means of squared differences so loss
magnitudes stay comparable across resolutions. Ratings map to penalties by
(5 - rating)/4, so a top rating adds exactly nothing and gamma (kept
positive through softplus) can never reward a poor one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, TrainingError


@dataclass
class LossWeights:
    content: float = 10.0
    style: float = 7.0
    identity1: float = 50.0
    identity2: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    l_c: float
    l_s: float
    l_id1: float
    l_id2: float
    l_total: float
    l_new: float

    def values(self):
        return [self.l_c, self.l_s, self.l_id1, self.l_id2, self.l_total, self.l_new]


@dataclass
class RatingFeedback:
    sample_id: str
    rating: int
    received_at: float = field(default_factory=time.time)

    def __post_init__(self):
        if not isinstance(self.rating, int) or not 1 <= self.rating <= 5:
            raise ConfigError(f"rating must be an integer in 1..5, got {self.rating!r}")

    @property
    def penalty(self):
        return (5 - self.rating) / 4.0


class GammaParam:
    """Learnable rating weight, positive via softplus of a raw scalar."""

    def __init__(self, raw=0.0):
        self.raw = Tensor(np.asarray(float(raw)), requires_grad=True, name="gamma.raw")

    def gamma(self) -> Tensor:
        return ad.softplus(self.raw)

    def value(self) -> float:
        return float(np.logaddexp(0.0, self.raw.data))


def mse(a: Tensor, b: Tensor) -> Tensor:
    diff = ad.sub(a, b)
    return ad.mean(ad.mul(diff, diff))


def content_loss(output: Tensor, content: Tensor, phi) -> Tensor:
    """Mean over taps of the MSE between feature maps of output and content."""
    out_maps = phi(output)
    ref_maps = phi(content)
    total = None
    for o, r in zip(out_maps, ref_maps):
        term = mse(o, r)
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(len(out_maps)))


def style_loss(output: Tensor, style: Tensor, phi) -> Tensor:
    """Mean over taps of MSE between channel means plus MSE between stds."""
    from .features import stats

    out_maps = phi(output)
    ref_maps = phi(style)
    total = None
    for o, r in zip(out_maps, ref_maps):
        mu_o, sigma_o = stats(o)
        mu_r, sigma_r = stats(r)
        term = ad.add(mse(mu_o, mu_r), mse(sigma_o, sigma_r))
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(len(out_maps)))


def identity_losses(i_cc: Tensor, i_c: Tensor, i_ss: Tensor, i_s: Tensor, phi):
    """Pixel- and feature-space penalties on the self-reproduction passes."""
    l_id1 = ad.add(mse(i_cc, i_c), mse(i_ss, i_s))
    total = None
    cc_maps, c_maps = phi(i_cc), phi(i_c)
    ss_maps, s_maps = phi(i_ss), phi(i_s)
    for cc, c, ss, s in zip(cc_maps, c_maps, ss_maps, s_maps):
        term = ad.add(mse(cc, c), mse(ss, s))
        total = term if total is None else ad.add(total, term)
    l_id2 = ad.div(total, float(len(cc_maps)))
    return l_id1, l_id2


def total_loss(l_c: Tensor, l_s: Tensor, l_id1: Tensor, l_id2: Tensor, weights: LossWeights) -> Tensor:
    parts = {"l_c": l_c, "l_s": l_s, "l_id1": l_id1, "l_id2": l_id2}
    for name, part in parts.items():
        if not np.isfinite(part.data):
            raise TrainingError(f"loss term {name} is not finite: {part.data}")
    return ad.add(
        ad.add(ad.mul(l_c, weights.content), ad.mul(l_s, weights.style)),
        ad.add(ad.mul(l_id1, weights.identity1), ad.mul(l_id2, weights.identity2)),
    )


def rl_augmented_loss(l_total: Tensor, rating, gamma: GammaParam) -> Tensor:
    """l_total + gamma * penalty; the penalty is 0 when no rating is pending.

    The zero-penalty multiply keeps gamma on the tape every step, so the
    gradient-coverage check holds on unrated steps too (the gradient is then
    exactly zero).
    """
    penalty = rating.penalty if rating is not None else 0.0
    return ad.add(l_total, ad.mul(gamma.gamma(), penalty))
