"""Conditional 70x70 patch discriminator producing a grid of real/fake logits."""
from __future__ import annotations

import torch
import torch.nn as nn


def _block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 4, stride, 1, bias=False),
        nn.InstanceNorm2d(cout),
        nn.LeakyReLU(0.2),
    )


class PatchDiscriminator(nn.Module):
    """Scores ``(candidate, condition)`` pairs; 256x256 inputs give a 30x30 logit map."""

    def __init__(self, in_channels: int = 3, base_width: int = 64):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(2 * in_channels, w, 4, 2, 1),
            nn.LeakyReLU(0.2),
            _block(w, 2 * w, 2),
            _block(2 * w, 4 * w, 2),
            _block(4 * w, 8 * w, 1),
            nn.Conv2d(8 * w, 1, 4, 1, 1),
        )

    def forward(self, candidate: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if candidate.shape != condition.shape:
            raise ValueError(f"candidate {tuple(candidate.shape)} and condition "
                             f"{tuple(condition.shape)} must have the same shape")
        return self.net(torch.cat([candidate, condition], dim=1))

    discriminate = forward


def output_size(input_size: int) -> int:
    """Logit grid side for a square input, from the fixed stride arithmetic."""
    s = input_size
    for _ in range(3):
        s = (s + 2 - 4) // 2 + 1
    for _ in range(2):
        s = s + 2 - 4 + 1
    return s


def build_discriminator(seed: int, base_width: int = 64) -> PatchDiscriminator:
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        return PatchDiscriminator(base_width=base_width)
    finally:
        torch.random.set_rng_state(state)
