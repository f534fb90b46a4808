"""Procedural paired two-modality head phantoms.

Both modalities are rendered from one label volume, so anatomy is shared
exactly and only the intensity statistics differ: an MR-like source and a
CT-like target with bright bone.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch.utils.data import Dataset

from .config import substream_seed
from .rawio import read_array, save_png, write_array

AXES = ("x", "y", "z")

BACKGROUND, BONE, GRAY, WHITE, CSF, LESION = range(6)

# latent tissue value per label; each modality maps these through its own
# piecewise curve followed by a monotone contrast curve
_SOURCE_LEVELS = {BONE: 0.12, GRAY: 0.50, WHITE: 0.70, CSF: 0.22, LESION: 0.90}
_TARGET_LEVELS = {BONE: 0.95, GRAY: 0.42, WHITE: 0.36, CSF: 0.28, LESION: 0.52}
_FOREGROUND_FLOOR = 0.08
# air carries a small noise floor in both modalities; it always stays below this
GEOMETRY_THRESHOLD = 0.04


@dataclass
class PairedVolume:
    source: np.ndarray
    target: np.ndarray
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.metadata["labels"]

    @property
    def volume_id(self) -> str:
        return self.metadata.get("volume_id", f"seed{self.seed}")


@dataclass
class PairedSlice:
    source: np.ndarray  # 3 x S x S in [-1, 1]
    target: np.ndarray
    axis: str
    index: int
    volume_id: str


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    val: list
    test: list
    ratio: tuple = (0.8, 0.1, 0.1)
    seed: int = 2024

    def split_of(self, volume_id) -> str:
        for name in ("train", "val", "test"):
            if volume_id in getattr(self, name):
                return name
        raise KeyError(volume_id)


def _check_size(size: Sequence[int]) -> tuple[int, int, int]:
    try:
        dims = tuple(int(s) for s in size)
    except (TypeError, ValueError):
        raise ValueError(f"volume size must be three integers (D, H, W), got {size!r}") from None
    if len(dims) != 3 or any(d < 16 for d in dims):
        raise ValueError(f"volume size must be three integers each >= 16, got {size!r}")
    return dims


def _ellipsoid(zz, yy, xx, center, radii):
    return (((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2) <= 1.0


def _labels(rng: np.random.Generator, dims: tuple[int, int, int]) -> tuple[np.ndarray, dict]:
    zz, yy, xx = np.meshgrid(*(np.linspace(-1, 1, d) for d in dims), indexing="ij")
    center = rng.uniform(-0.05, 0.05, size=3)
    outer = rng.uniform(0.86, 0.95, size=3)
    skull = rng.uniform(0.84, 0.9)
    core = rng.uniform(0.55, 0.7)

    labels = np.zeros(dims, dtype=np.uint8)
    labels[_ellipsoid(zz, yy, xx, center, outer)] = BONE
    brain = _ellipsoid(zz, yy, xx, center, outer * skull)
    labels[brain] = GRAY
    labels[_ellipsoid(zz, yy, xx, center, outer * skull * core)] = WHITE

    offset = rng.uniform(0.15, 0.25)
    vent_r = rng.uniform(0.12, 0.2, size=3) * outer
    for side in (-1, 1):
        c = center + np.array([0.0, rng.uniform(-0.05, 0.05), side * offset])
        labels[_ellipsoid(zz, yy, xx, c, vent_r)] = CSF

    n_lesions = int(rng.integers(1, 5))
    lesions = []
    for _ in range(n_lesions):
        c = center + rng.uniform(-0.55, 0.55, size=3) * outer * skull
        r = rng.uniform(0.06, 0.12)
        lesion = _ellipsoid(zz, yy, xx, c, (r, r, r)) & brain
        labels[lesion] = LESION
        lesions.append({"center": c.tolist(), "radius": float(r)})

    params = {"center": center.tolist(), "outer_radii": outer.tolist(), "skull_ratio": float(skull),
              "core_ratio": float(core), "ventricle_offset": float(offset), "lesions": lesions}
    return labels, params


def _render(labels, levels, texture, tex_amp, curve, rng, noise, air_noise, rician):
    fg = labels > 0
    base = np.zeros(labels.shape)
    for lab, value in levels.items():
        base[labels == lab] = value
    v = curve(np.clip(base + tex_amp * texture, 0.0, 1.0))
    if rician:
        v = np.sqrt((v + noise * rng.standard_normal(v.shape)) ** 2
                    + (noise * rng.standard_normal(v.shape)) ** 2)
        air = air_noise * np.hypot(rng.standard_normal(v.shape), rng.standard_normal(v.shape))
    else:
        v = v + noise * rng.standard_normal(v.shape)
        air = np.abs(air_noise * rng.standard_normal(v.shape))
    air = np.minimum(air, GEOMETRY_THRESHOLD / 2)
    out = np.where(fg, np.clip(v, _FOREGROUND_FLOOR, 1.0), air)
    return out.astype(np.float32)


def _source_curve(v):
    return v ** 0.8


def _target_curve(v):
    # CT-like windowing: compress soft tissue, keep bone near the top
    return np.interp(v, [0.0, 0.25, 0.6, 0.9, 1.0], [0.0, 0.2, 0.45, 0.9, 1.0])


def generate_volume(seed: int, size: Sequence[int] = (32, 64, 64)) -> PairedVolume:
    dims = _check_size(size)
    rng = np.random.default_rng(seed)
    labels, params = _labels(rng, dims)

    texture = gaussian_filter(rng.standard_normal(dims), sigma=1.5)
    texture /= max(np.abs(texture).max(), 1e-12)
    zz, yy, xx = np.meshgrid(*(np.linspace(-1, 1, d) for d in dims), indexing="ij")
    g = rng.uniform(-0.08, 0.08, size=3)
    bias = 1.0 + g[0] * zz + g[1] * yy + g[2] * xx

    source = _render(labels, _SOURCE_LEVELS, texture, 0.06, lambda v: _source_curve(v) * bias,
                     rng, noise=0.02, air_noise=0.005, rician=True)
    target = _render(labels, _TARGET_LEVELS, texture, 0.03, _target_curve,
                     rng, noise=0.01, air_noise=0.004, rician=False)
    params["bias_gradient"] = g.tolist()
    return PairedVolume(source=source, target=target, seed=int(seed),
                        metadata={"labels": labels, "size": dims, "params": params})


def geometry_mask(modality: np.ndarray) -> np.ndarray:
    """Foreground (anatomy) mask recovered from either rendered modality."""
    return np.asarray(modality) > GEOMETRY_THRESHOLD


def _axis_stack(vol: np.ndarray, axis: str) -> np.ndarray:
    # volume axes are (z, y, x)
    if axis == "z":
        return vol
    if axis == "y":
        return np.moveaxis(vol, 1, 0)
    return np.moveaxis(vol, 2, 0)


def _resize_stack(stack: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32))[:, None]
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[:, 0].numpy()


def slice_volume(v: PairedVolume, axes: Iterable[str] = AXES, size: int = 256,
                 volume_id: str | None = None) -> list[PairedSlice]:
    """Cut every index along each requested axis, stretch to ``size`` and map [0, 1] to [-1, 1]."""
    axes = set(axes)
    if not axes:
        raise ValueError("at least one slicing axis is required")
    unknown = axes - set(AXES)
    if unknown:
        raise ValueError(f"unknown axes {sorted(unknown)}; expected a subset of {AXES}")
    vid = volume_id or v.volume_id
    out = []
    for axis in AXES:
        if axis not in axes:
            continue
        src = _resize_stack(_axis_stack(v.source, axis), size)
        tgt = _resize_stack(_axis_stack(v.target, axis), size)
        for i in range(src.shape[0]):
            out.append(PairedSlice(
                source=_to_signed_rgb(src[i]),
                target=_to_signed_rgb(tgt[i]),
                axis=axis, index=i, volume_id=vid,
            ))
    return out


def _to_signed_rgb(gray: np.ndarray) -> np.ndarray:
    signed = np.clip(gray * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)
    return np.broadcast_to(signed[None], (3,) + signed.shape)


def split_dataset(volumes: Sequence, seed: int = 2024) -> DatasetSplit:
    ids = [v.volume_id if isinstance(v, PairedVolume) else v for v in volumes]
    n = len(ids)
    if n < 10:
        raise ValueError(f"an 8:1:1 split needs at least 10 volumes, got {n}")
    if len(set(ids)) != n:
        raise ValueError("volume identifiers must be unique")
    n_hold = int(n * 0.1 + 0.5)
    order = np.random.default_rng(seed).permutation(n)
    picked = [ids[i] for i in order]
    return DatasetSplit(
        train=picked[2 * n_hold:],
        val=picked[:n_hold],
        test=picked[n_hold:2 * n_hold],
        seed=seed,
    )


def volume_seed(root_seed: int, index: int) -> int:
    return substream_seed(root_seed, f"data/volume/{index}")


def make_volumes(n: int, size: Sequence[int], seed: int = 2024) -> list[PairedVolume]:
    vols = []
    for i in range(n):
        v = generate_volume(volume_seed(seed, i), size)
        v.metadata["volume_id"] = f"vol{i:04d}"
        vols.append(v)
    return vols


MANIFEST_FIELDS = ("volume_id", "axis", "index", "split", "source", "target", "preview")


def write_dataset(out_dir: str | Path, n_volumes: int, size: Sequence[int], seed: int = 2024,
                  image_size: int = 256, axes: Iterable[str] = AXES, previews: bool = True) -> Path:
    """Generate, slice, split and store a dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    dims = _check_size(size)
    axes = tuple(a for a in AXES if a in set(axes))
    vols = make_volumes(n_volumes, dims, seed)
    split = split_dataset(vols, seed)
    rows = []
    for v in vols:
        which = split.split_of(v.volume_id)
        for s in slice_volume(v, axes, image_size):
            stem = f"{s.volume_id}_{s.axis}{s.index:03d}"
            src = Path("slices") / f"{stem}_src.raw"
            tgt = Path("slices") / f"{stem}_tgt.raw"
            write_array(out_dir / src, s.source[:1], (-1.0, 1.0))
            write_array(out_dir / tgt, s.target[:1], (-1.0, 1.0))
            preview = ""
            if previews:
                preview = str(Path("previews") / f"{stem}.png")
                pair = np.concatenate([s.source[0], s.target[0]], axis=1)
                save_png(out_dir / preview, pair)
            rows.append({"volume_id": s.volume_id, "axis": s.axis, "index": s.index, "split": which,
                         "source": str(src), "target": str(tgt), "preview": preview})
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(rows)
    (out_dir / "dataset.json").write_text(json.dumps({
        "volumes": n_volumes, "size": list(dims), "seed": seed, "image_size": image_size,
        "axes": list(axes), "split": {"train": split.train, "val": split.val, "test": split.test},
    }, indent=2))
    return manifest


def read_manifest(data_dir: str | Path, split: str | None = None) -> list[dict]:
    path = Path(data_dir) / "manifest.csv"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.csv in {data_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    return rows


class SliceDataset(Dataset):
    """Paired slices as ``(source, target, info)``; tensors are 3 x S x S float32."""

    def __init__(self, slices: Sequence[PairedSlice]):
        self.slices = list(slices)

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i):
        s = self.slices[i]
        info = {"volume_id": s.volume_id, "axis": s.axis, "index": s.index}
        return torch.from_numpy(np.array(s.source)), torch.from_numpy(np.array(s.target)), info

    @classmethod
    def from_volumes(cls, volumes: Sequence[PairedVolume], image_size: int,
                     axes: Iterable[str] = AXES) -> "SliceDataset":
        return cls([s for v in volumes for s in slice_volume(v, axes, image_size)])

    @classmethod
    def from_manifest(cls, data_dir: str | Path, split: str) -> "SliceDataset":
        data_dir = Path(data_dir)
        slices = []
        for r in read_manifest(data_dir, split):
            src, _ = read_array(data_dir / r["source"])
            tgt, _ = read_array(data_dir / r["target"])
            slices.append(PairedSlice(
                source=np.broadcast_to(src[:1].astype(np.float32), (3,) + src.shape[1:]),
                target=np.broadcast_to(tgt[:1].astype(np.float32), (3,) + tgt.shape[1:]),
                axis=r["axis"], index=int(r["index"]), volume_id=r["volume_id"],
            ))
        return cls(slices)
