"""Generator and discriminator objectives.

All norms are reduced by the mean so the default weights do not depend on
image resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .config import LossWeights


def gan_loss_generator(scores: torch.Tensor) -> torch.Tensor:
    """Least-squares adversarial loss: mean((D(G(x), x) - 1)^2)."""
    return ((scores - 1.0) ** 2).mean()


def gan_loss_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((real_scores - 1.0) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()


def pixel_loss(target: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
    return (target - output).abs().mean()


def inverse_masks(masks: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [1.0 - m for m in masks]


def feature_discard_loss(intermediates: Sequence[torch.Tensor], masks: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over mask steps of mean|y_i * (1 - M_i)|."""
    if len(intermediates) != len(masks):
        raise ValueError(f"{len(intermediates)} intermediates but {len(masks)} masks")
    if not masks:
        return torch.zeros(())
    return sum((y * inv).abs().mean() for y, inv in zip(intermediates, inverse_masks(masks)))


def mask_sparsity_loss(masks: Sequence[torch.Tensor]) -> torch.Tensor:
    if not masks:
        return torch.zeros(())
    return sum(inv.abs().mean() for inv in inverse_masks(masks))


@dataclass
class LossReport:
    gan: torch.Tensor
    pixel: torch.Tensor
    feature: torch.Tensor
    mask: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("gan", "pixel", "feature", "mask", "total")}

    def is_finite(self) -> bool:
        return all(torch.isfinite(torch.as_tensor(v)).item() for v in self.as_floats().values())


def total_generator_loss(gan, pixel, feature, mask, weights: LossWeights | None = None) -> LossReport:
    w = weights or LossWeights()
    total = gan + w.lambda_pixel * pixel + w.lambda_feature * feature + w.lambda_mask * mask
    return LossReport(gan=gan, pixel=pixel, feature=feature, mask=mask, total=total, weights=w)


def generator_objective(scores: torch.Tensor, target: torch.Tensor, out,
                        weights: LossWeights | None = None) -> LossReport:
    """Full objective for one translated batch (``out`` is a TranslationOutput)."""
    return total_generator_loss(
        gan_loss_generator(scores),
        pixel_loss(target, out.final),
        feature_discard_loss(out.intermediates, out.masks),
        mask_sparsity_loss(out.masks),
        weights,
    )
