"""Training objectives.

All losses average over the batch.  Adversarial terms take raw discriminator
logits; each logit map is averaged over its cells and the per-scale values
are summed.
"""

import math
from dataclasses import dataclass, asdict
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .errors import ShapeError
from .model import DiscriminatorOutput, Encoder, TransformerBlock

LOG_FLOOR = 1e-12
_LOG_FLOOR = math.log(LOG_FLOOR)

Logits = Union[DiscriminatorOutput, torch.Tensor, Sequence[torch.Tensor]]


@dataclass
class LossReport:
    l_content: float
    l_transformed: float
    l_adv_d: float
    l_adv_g: float
    total_eg: float
    lam: float
    d_accuracy_batch: float

    def to_dict(self):
        return asdict(self)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _per_sample_mse(a, b):
    return (a - b).pow(2).flatten(1).mean(dim=1)


def style_aware_content_loss(z_in: torch.Tensor, z_out: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ||z_in - z_out||^2 / d, d = elements per sample."""
    _check_same_shape(z_in, z_out, "style_aware_content_loss")
    return _per_sample_mse(z_in, z_out).mean()


def transformed_image_loss(x: torch.Tensor, y: torch.Tensor, transformer: TransformerBlock) -> torch.Tensor:
    """Squared difference of T(x) and T(y), normalised by C*H*W of the images."""
    _check_same_shape(x, y, "transformed_image_loss")
    c, h, w = x.shape[1:]
    diff = transformer(x) - transformer(y)
    return (diff.pow(2).flatten(1).sum(dim=1) / (c * h * w)).mean()


def conv1_feature_loss(x: torch.Tensor, y: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    """Normalised squared distance between the encoder's first conv-layer
    activations.  Ablation alternative to the transformed image loss."""
    _check_same_shape(x, y, "conv1_feature_loss")
    return _per_sample_mse(encoder.conv1_features(x), encoder.conv1_features(y)).mean()


def _as_maps(out: Logits):
    if isinstance(out, DiscriminatorOutput):
        return out.maps()
    if isinstance(out, torch.Tensor):
        return [out]
    return list(out)


def log_d(logits: torch.Tensor) -> torch.Tensor:
    """log(sigmoid(logits)), floored at log(1e-12)."""
    return F.logsigmoid(logits).clamp_min(_LOG_FLOOR)


def log_one_minus_d(logits: torch.Tensor) -> torch.Tensor:
    """log(1 - sigmoid(logits)), floored at log(1e-12)."""
    return F.logsigmoid(-logits).clamp_min(_LOG_FLOOR)


def adversarial_d_loss(d_real: Logits, d_fake: Logits) -> torch.Tensor:
    """E[log D(y)] + E[log(1 - D(G(E(x))))], summed over scales.

    This is the quantity the discriminator *maximises*; use
    ``discriminator_objective`` for a minimisable loss.
    """
    real_maps, fake_maps = _as_maps(d_real), _as_maps(d_fake)
    if len(real_maps) != len(fake_maps):
        raise ShapeError(f"real has {len(real_maps)} logit maps, fake has {len(fake_maps)}")
    total = 0.0
    for r, f in zip(real_maps, fake_maps):
        total = total + log_d(r).mean() + log_one_minus_d(f).mean()
    return total


def discriminator_objective(d_real: Logits, d_fake: Logits) -> torch.Tensor:
    return -adversarial_d_loss(d_real, d_fake)


def adversarial_g_loss(d_fake: Logits, saturating: bool = False) -> torch.Tensor:
    """Generator-side adversarial term, summed over scales.

    Default is the non-saturating ``-E[log D(G(E(x)))]``; ``saturating=True``
    gives ``E[log(1 - D(G(E(x))))]`` as it appears in the min-max objective.
    """
    total = 0.0
    for f in _as_maps(d_fake):
        if saturating:
            total = total + log_one_minus_d(f).mean()
        else:
            total = total - log_d(f).mean()
    return total


def total_loss(l_c, l_t, l_adv_g, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return l_c + l_t + lam * l_adv_g
