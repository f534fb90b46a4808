"""U-Net generator with per-stage frozen-encoder fusion, bottleneck soft clamp
and a sequential multiplicative mask head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import FrozenEncoder

SOFT_CLAMP_ALPHA = 1e-3
MAX_STAGES = 8
FUSE_KERNEL = 3


def soft_clamp(z: torch.Tensor, alpha: float = SOFT_CLAMP_ALPHA) -> torch.Tensor:
    """Identity on [0, 1], slope ``alpha`` outside."""
    v = torch.clamp(z, 0.0, 1.0)
    return v + alpha * (torch.clamp(z, max=0.0) + torch.clamp(z - 1.0, min=0.0))


@dataclass(frozen=True)
class StagePlan:
    image_size: int
    widths: tuple[int, ...]

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(self.image_size // 2 ** (i + 1) for i in range(self.n_stages))

    @classmethod
    def default(cls, image_size: int = 256, base_width: int = 64) -> "StagePlan":
        # 8 stages take 256 down to 1x1; smaller inputs get log2(size) stages
        n = min(MAX_STAGES, int(math.log2(image_size)))
        if 2 ** n > image_size:
            raise ValueError(f"image size {image_size} is too small")
        widths = tuple(base_width * min(2 ** i, 8) for i in range(n))
        return cls(image_size=image_size, widths=widths)

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(image_size=int(d["image_size"]), widths=tuple(int(w) for w in d["widths"]))


@dataclass
class TranslationOutput:
    y0: torch.Tensor
    masks: list[torch.Tensor] = field(default_factory=list)
    intermediates: list[torch.Tensor] = field(default_factory=list)

    @property
    def final(self) -> torch.Tensor:
        return self.intermediates[-1] if self.intermediates else self.y0


def _norm_act(width: int, spatial: int, act: nn.Module) -> list[nn.Module]:
    # instance norm is undefined on a 1x1 map
    layers = [nn.InstanceNorm2d(width)] if spatial > 1 else []
    return layers + [act]


class MaskHead(nn.Module):
    """conv3x3 -> IN -> ReLU -> conv3x3 -> sigmoid, reflect padding."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1, padding_mode="reflect", bias=False),
            nn.InstanceNorm2d(hidden),
            nn.ReLU(),
            nn.Conv2d(hidden, 1, 3, padding=1, padding_mode="reflect"),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(y))


class Generator(nn.Module):
    def __init__(self, plan: StagePlan, encoder: FrozenEncoder | None = None, n_masks: int = 2,
                 mask_hidden: int = 32, in_channels: int = 3, out_channels: int = 3):
        super().__init__()
        if n_masks < 0:
            raise ValueError("n_masks must be >= 0")
        self.plan = plan
        self.n_masks = n_masks
        self.fusion = encoder is not None
        self.sam = encoder
        w, sizes = plan.widths, plan.sizes

        self.down = nn.ModuleList()
        for i, (width, size) in enumerate(zip(w, sizes)):
            cin = in_channels if i == 0 else w[i - 1]
            self.down.append(nn.Sequential(nn.Conv2d(cin, width, 4, 2, 1, bias=size == 1),
                                           *_norm_act(width, size, nn.LeakyReLU(0.2))))

        if self.fusion:
            c_sam = encoder.channels
            self.adaptors = nn.ModuleList(nn.Conv2d(c_sam, width, 1) for width in w)
            self.fuse = nn.ModuleList(
                nn.Sequential(nn.Conv2d(2 * width, width, FUSE_KERNEL, padding=FUSE_KERNEL // 2, bias=size == 1),
                              *_norm_act(width, size, nn.LeakyReLU(0.2)))
                for width, size in zip(w, sizes)
            )

        self.up = nn.ModuleList()
        n = plan.n_stages
        for j in range(n - 1, -1, -1):
            cin = w[j] if j == n - 1 else 2 * w[j]
            if j > 0:
                self.up.append(nn.Sequential(
                    nn.ConvTranspose2d(cin, w[j - 1], 4, 2, 1, bias=False),
                    nn.InstanceNorm2d(w[j - 1]),
                    nn.ReLU(),
                ))
            else:
                self.up.append(nn.Sequential(nn.ConvTranspose2d(cin, out_channels, 4, 2, 1), nn.Tanh()))

        self.mask_heads = nn.ModuleList(MaskHead(out_channels, mask_hidden) for _ in range(n_masks))

    # -- encoder side -------------------------------------------------------
    def sam_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.sam.encode(x)

    def adapt_sam(self, feats: torch.Tensor, stage: int) -> torch.Tensor:
        """Project frozen features to the stage width, then resize to the stage grid.

        ``stage`` is 1-based.
        """
        if not 1 <= stage <= self.plan.n_stages:
            raise ValueError(f"stage must be in 1..{self.plan.n_stages}, got {stage}")
        a = self.adaptors[stage - 1](feats)
        s = self.plan.sizes[stage - 1]
        if a.shape[-2:] != (s, s):
            a = F.interpolate(a, size=(s, s), mode="bilinear", align_corners=False)
        return a

    def fuse_stage(self, e: torch.Tensor, a: torch.Tensor, stage: int) -> torch.Tensor:
        if e.shape[-2:] != a.shape[-2:]:
            raise ValueError(f"spatial mismatch at stage {stage}: {tuple(e.shape)} vs {tuple(a.shape)}")
        return self.fuse[stage - 1](torch.cat([e, a], dim=1))

    def encode_stages(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Return raw stage features ``e`` and fused features ``E`` (equal when fusion is off)."""
        feats = self.sam_features(x) if self.fusion else None
        raw, fused = [], []
        h = x
        for i, down in enumerate(self.down, start=1):
            e = down(h)
            h = self.fuse_stage(e, self.adapt_sam(feats, i), i) if self.fusion else e
            raw.append(e)
            fused.append(h)
        return raw, fused

    # -- decoder side -------------------------------------------------------
    def decode(self, fused: list[torch.Tensor]) -> torch.Tensor:
        """Decoder from fused stage features; the deepest one is soft-clamped first."""
        d = soft_clamp(fused[-1])
        for k, up in enumerate(self.up):
            j = self.plan.n_stages - 1 - k
            if k > 0:
                d = torch.cat([d, fused[j]], dim=1)
            d = up(d)
        return d

    def apply_masks(self, y0: torch.Tensor, n: int | None = None,
                    force_masks: list[torch.Tensor] | None = None) -> TranslationOutput:
        """Sequentially gate ``y0``: M_k = sigmoid(psi_k(y_{k-1})), y_k = y_{k-1} * M_k."""
        n = self.n_masks if n is None else n
        if not 0 <= n <= self.n_masks:
            raise ValueError(f"n must be in 0..{self.n_masks}")
        out = TranslationOutput(y0=y0)
        y = y0
        for k in range(n):
            m = force_masks[k] if force_masks is not None else self.mask_heads[k](y)
            y = y * m
            out.masks.append(m)
            out.intermediates.append(y)
        return out

    def forward(self, x: torch.Tensor) -> TranslationOutput:
        _, fused = self.encode_stages(x)
        return self.apply_masks(self.decode(fused))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def describe(self) -> dict:
        return {"plan": self.plan.to_dict(), "n_masks": self.n_masks, "fusion": self.fusion}


def build_generator(model_cfg, encoder: FrozenEncoder | None, seed: int) -> Generator:
    plan = StagePlan.default(model_cfg.image_size, model_cfg.base_width)
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        g = Generator(plan, encoder if model_cfg.fusion == "on" else None,
                      n_masks=model_cfg.n_masks, mask_hidden=model_cfg.mask_hidden)
    finally:
        torch.random.set_rng_state(state)
    return g

