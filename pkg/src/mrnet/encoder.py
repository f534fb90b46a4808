"""Frozen ViT image encoder supplying the SAM feature map to every fusion stage.

The module layout and parameter names follow the SAM image encoder so that a
``sam_vit_b`` checkpoint (bare or with the ``image_encoder.`` prefix) loads
directly. ``stub_encoder`` builds a tiny instance of the same network with
seeded weights for desk-scale runs and tests.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = {
    "vit_b": dict(embed_dim=768, depth=12, num_heads=12, global_attn_indexes=(2, 5, 8, 11)),
    "vit_l": dict(embed_dim=1024, depth=24, num_heads=16, global_attn_indexes=(5, 11, 17, 23)),
    "vit_h": dict(embed_dim=1280, depth=32, num_heads=16, global_attn_indexes=(7, 15, 23, 31)),
}
SAM_IMG_SIZE = 1024


class EncoderWeightsError(RuntimeError):
    pass


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLPBlock(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.lin2(F.gelu(self.lin1(x)))


def _rel_pos(q_size: int, k_size: int, rel_pos: torch.Tensor) -> torch.Tensor:
    max_dist = 2 * max(q_size, k_size) - 1
    if rel_pos.shape[0] != max_dist:
        rel_pos = F.interpolate(rel_pos.T[None], size=max_dist, mode="linear")[0].T
    q = torch.arange(q_size)[:, None] * max(k_size / q_size, 1.0)
    k = torch.arange(k_size)[None, :] * max(q_size / k_size, 1.0)
    idx = (q - k) + (k_size - 1) * max(q_size / k_size, 1.0)
    return rel_pos[idx.long()]


class Attention(nn.Module):
    def __init__(self, dim, num_heads, use_rel_pos=False, input_size=None):
        super().__init__()
        self.num_heads = num_heads
        head_dim = dim // num_heads
        self.scale = head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.use_rel_pos = use_rel_pos
        if use_rel_pos:
            self.rel_pos_h = nn.Parameter(torch.zeros(2 * input_size[0] - 1, head_dim))
            self.rel_pos_w = nn.Parameter(torch.zeros(2 * input_size[1] - 1, head_dim))

    def forward(self, x):
        b, h, w, _ = x.shape
        qkv = self.qkv(x).reshape(b, h * w, 3, self.num_heads, -1).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.reshape(3, b * self.num_heads, h * w, -1).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.use_rel_pos:
            rh = _rel_pos(h, h, self.rel_pos_h)
            rw = _rel_pos(w, w, self.rel_pos_w)
            rq = q.reshape(b * self.num_heads, h, w, -1)
            bias_h = torch.einsum("bhwc,hkc->bhwk", rq, rh)
            bias_w = torch.einsum("bhwc,wkc->bhwk", rq, rw)
            attn = (attn.view(-1, h, w, h, w) + bias_h[..., None] + bias_w[:, :, :, None, :])
            attn = attn.view(-1, h * w, h * w)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).view(b, self.num_heads, h, w, -1).permute(0, 2, 3, 1, 4).reshape(b, h, w, -1)
        return self.proj(out)


def _window_partition(x, ws):
    b, h, w, c = x.shape
    ph, pw = (ws - h % ws) % ws, (ws - w % ws) % ws
    if ph or pw:
        x = F.pad(x, (0, 0, 0, pw, 0, ph))
    hp, wp = h + ph, w + pw
    x = x.view(b, hp // ws, ws, wp // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws, ws, c), (hp, wp)


def _window_unpartition(windows, ws, pad_hw, hw):
    hp, wp = pad_hw
    h, w = hw
    b = windows.shape[0] // (hp * wp // ws // ws)
    x = windows.view(b, hp // ws, wp // ws, ws, ws, -1).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hp, wp, -1)[:, :h, :w, :].contiguous()


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0, use_rel_pos=False, window_size=0, input_size=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads, use_rel_pos,
                              input_size if window_size == 0 else (window_size, window_size))
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))
        self.window_size = window_size

    def forward(self, x):
        shortcut = x
        x = self.norm1(x)
        if self.window_size > 0:
            h, w = x.shape[1:3]
            x, pad_hw = _window_partition(x, self.window_size)
            x = self.attn(x)
            x = _window_unpartition(x, self.window_size, pad_hw, (h, w))
        else:
            x = self.attn(x)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, in_chans, embed_dim):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).permute(0, 2, 3, 1)


class ImageEncoderViT(nn.Module):
    def __init__(self, img_size=1024, patch_size=16, in_chans=3, embed_dim=768, depth=12,
                 num_heads=12, mlp_ratio=4.0, out_chans=256, use_rel_pos=False,
                 window_size=0, global_attn_indexes=()):
        super().__init__()
        self.img_size = img_size
        self.patch_size = patch_size
        grid = img_size // patch_size
        self.patch_embed = PatchEmbed(patch_size, in_chans, embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid, grid, embed_dim))
        self.blocks = nn.ModuleList(
            Block(embed_dim, num_heads, mlp_ratio, use_rel_pos,
                  0 if i in global_attn_indexes else window_size, (grid, grid))
            for i in range(depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(embed_dim, out_chans, 1, bias=False),
            LayerNorm2d(out_chans),
            nn.Conv2d(out_chans, out_chans, 3, padding=1, bias=False),
            LayerNorm2d(out_chans),
        )

    def forward(self, x):
        x = self.patch_embed(x)
        pos = self.pos_embed
        if pos.shape[1:3] != x.shape[1:3]:
            pos = F.interpolate(pos.permute(0, 3, 1, 2), size=x.shape[1:3], mode="bilinear",
                                align_corners=False).permute(0, 2, 3, 1)
        x = x + pos
        for blk in self.blocks:
            x = blk(x)
        return self.neck(x.permute(0, 3, 1, 2))


class FrozenEncoder(nn.Module):
    """Wraps an image encoder so it never trains and never passes gradients."""

    def __init__(self, vit: ImageEncoderViT, input_size: int = 0, kind: str = "stub"):
        super().__init__()
        self.vit = vit
        self.input_size = input_size
        self.kind = kind
        for p in self.vit.parameters():
            p.requires_grad_(False)
        self.vit.eval()

    @property
    def stride(self) -> int:
        return self.vit.patch_size

    @property
    def channels(self) -> int:
        return self.vit.neck[0].out_channels

    def train(self, mode: bool = True):
        # stays in eval mode regardless of the parent module
        return super().train(False)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        squeeze = image.dim() == 3
        if squeeze:
            image = image[None]
        h, w = image.shape[-2:]
        if self.input_size:
            image = F.interpolate(image, size=(self.input_size, self.input_size),
                                  mode="bilinear", align_corners=False)
        elif h % self.stride or w % self.stride:
            raise ValueError(f"input {h}x{w} is not divisible by the encoder stride {self.stride}")
        with torch.no_grad():
            feats = self.vit(image.detach())
        return feats[0] if squeeze else feats

    forward = encode

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.vit.state_dict().items()):
            digest.update(name.encode())
            digest.update(p.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def stub_encoder(seed: int, image_size: int = 256, channels: int = 256, stride: int = 16,
                 embed_dim: int = 64, depth: int = 2, num_heads: int = 4) -> FrozenEncoder:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        vit = ImageEncoderViT(img_size=image_size, patch_size=stride, embed_dim=embed_dim,
                              depth=depth, num_heads=num_heads, out_chans=channels)
        nn.init.trunc_normal_(vit.pos_embed, std=0.02)
    finally:
        torch.random.set_rng_state(gen_state)
    return FrozenEncoder(vit, kind="stub")


def build_arch(arch: str | dict) -> ImageEncoderViT:
    if isinstance(arch, dict):
        return ImageEncoderViT(**arch)
    if arch not in ARCHS:
        raise EncoderWeightsError(f"unknown encoder architecture {arch!r}; expected one of {sorted(ARCHS)}")
    return ImageEncoderViT(img_size=SAM_IMG_SIZE, use_rel_pos=True, window_size=14, **ARCHS[arch])


def _extract_state(obj) -> tuple[dict, dict | None]:
    if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
        return obj["state_dict"], obj.get("arch")
    if not isinstance(obj, dict):
        raise EncoderWeightsError("weight file does not contain a state dict")
    if any(k.startswith("image_encoder.") for k in obj):
        obj = {k[len("image_encoder."):]: v for k, v in obj.items() if k.startswith("image_encoder.")}
    return obj, None


def load_pretrained(path: str | Path, arch: str | dict = "vit_b", input_size: int = 0) -> FrozenEncoder:
    """Load frozen encoder weights from ``path``.

    Accepts a full SAM checkpoint, a bare image-encoder state dict, or a file
    written by :func:`save_encoder` (which carries its own architecture).
    """
    path = Path(path)
    if not path.is_file():
        raise EncoderWeightsError(f"encoder weight file not found: {path}")
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # pickle / zip errors vary by torch version
        raise EncoderWeightsError(f"cannot read encoder weights from {path}: {exc}") from None
    state, stored_arch = _extract_state(raw)
    vit = build_arch(stored_arch if stored_arch is not None else arch)
    expected = vit.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    bad_shape = [f"{k}: file {tuple(state[k].shape)} vs model {tuple(expected[k].shape)}"
                 for k in expected if k in state and state[k].shape != expected[k].shape]
    if missing or unexpected or bad_shape:
        parts = []
        if missing:
            parts.append(f"missing {len(missing)} keys (e.g. {missing[:3]})")
        if unexpected:
            parts.append(f"unexpected {len(unexpected)} keys (e.g. {unexpected[:3]})")
        if bad_shape:
            parts.append(f"shape mismatch: {'; '.join(bad_shape[:3])}")
        raise EncoderWeightsError(f"{path} does not match architecture {arch!r}: " + ", ".join(parts))
    vit.load_state_dict(state)
    return FrozenEncoder(vit, input_size=input_size, kind="pretrained")


def save_encoder(encoder: FrozenEncoder, path: str | Path, arch: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"arch": arch, "state_dict": encoder.vit.state_dict()}, path)
    return path


def stub_arch(image_size: int = 256, channels: int = 256, stride: int = 16,
              embed_dim: int = 64, depth: int = 2, num_heads: int = 4) -> dict:
    return dict(img_size=image_size, patch_size=stride, embed_dim=embed_dim, depth=depth,
                num_heads=num_heads, out_chans=channels)
