"""PSNR / SSIM, error maps and dataset-level aggregation.

Metrics run on single-channel images in [0, 1] (data range 1.0); model
outputs in [-1, 1] are rescaled first.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import matplotlib
import numpy as np
import torch
from scipy.ndimage import correlate1d

from .rawio import save_rgb_png

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def to_unit(img) -> np.ndarray:
    """[-1, 1] -> [0, 1], first channel of a C x H x W stack."""
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    return (arr + 1.0) / 2.0


def psnr(a, b, data_range: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def cap_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2-D images, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    g = gaussian_window()

    def filt(img):
        return correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    r = SSIM_WIN // 2
    # keep only windows that lie fully inside the image
    return s[r:-r, r:-r]


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(ssim_map(a, b, data_range).mean())


def error_map(a, b, data_range: float = 1.0, cmap: str = "inferno") -> np.ndarray:
    """Per-pixel |a - b| scaled to [0, 1] and colour-mapped; returns H x W x 3 uint8."""
    err = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) / data_range
    rgba = matplotlib.colormaps[cmap](np.clip(err, 0.0, 1.0))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


@dataclass
class MetricRecord:
    image_id: str
    axis: str
    psnr: float
    ssim: float
    errmap: str = ""


METRIC_FIELDS = ("image_id", "axis", "psnr", "ssim", "errmap")


def aggregate(records: Iterable[MetricRecord]) -> dict[str, dict[str, float]]:
    groups: dict[str, list[MetricRecord]] = {}
    for r in records:
        groups.setdefault("overall", []).append(r)
        groups.setdefault(r.axis, []).append(r)
    return {
        name: {"psnr": float(np.mean([cap_psnr(r.psnr) for r in rs])),
               "ssim": float(np.mean([r.ssim for r in rs])),
               "n": len(rs)}
        for name, rs in groups.items()
    }


def write_metrics_csv(records: Iterable[MetricRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow([r.image_id, r.axis, repr(cap_psnr(r.psnr)), repr(r.ssim), r.errmap])
    return path


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        return [MetricRecord(row["image_id"], row["axis"], float(row["psnr"]), float(row["ssim"]),
                             row["errmap"]) for row in csv.DictReader(fh)]


@torch.no_grad()
def translate_batches(generator, dataset, batch_size: int = 8, max_batches: int = 0):
    """Yield ``(source, target, prediction, infos)`` batches in dataset order."""
    loader = torch.utils.data.DataLoader(dataset, batch_size=batch_size, shuffle=False,
                                         collate_fn=_collate)
    was_training = generator.training
    generator.eval()
    try:
        for i, (src, tgt, infos) in enumerate(loader):
            if max_batches and i >= max_batches:
                break
            yield src, tgt, generator(src).final, infos
    finally:
        generator.train(was_training)


def _collate(batch):
    src = torch.stack([b[0] for b in batch])
    tgt = torch.stack([b[1] for b in batch])
    return src, tgt, [b[2] for b in batch]


def evaluate_dataset(generator, dataset, out_dir: str | Path | None = None, batch_size: int = 8,
                     max_batches: int = 0, errmaps: bool = True):
    """Translate every slice, score it against its target, optionally write CSV + error maps."""
    out_dir = Path(out_dir) if out_dir is not None else None
    records = []
    for _, tgt, pred, infos in translate_batches(generator, dataset, batch_size, max_batches):
        for t, p, info in zip(tgt, pred, infos):
            a, b = to_unit(p), to_unit(t)
            image_id = f"{info['volume_id']}_{info['axis']}{info['index']:03d}"
            rec = MetricRecord(image_id, info["axis"], psnr(a, b), ssim(a, b))
            if out_dir is not None and errmaps:
                rel = Path("errmaps") / f"{image_id}.png"
                save_rgb_png(out_dir / rel, error_map(a, b))
                rec.errmap = str(rel)
            records.append(rec)
    if out_dir is not None:
        write_metrics_csv(records, out_dir / "metrics.csv")
    return records, aggregate(records)


def identity_baseline(dataset, max_items: int = 0) -> dict[str, float]:
    """Scores of passing the source through unchanged."""
    recs = []
    for i in range(len(dataset)):
        if max_items and i >= max_items:
            break
        src, tgt, info = dataset[i]
        a, b = to_unit(src), to_unit(tgt)
        recs.append(MetricRecord(str(i), info["axis"], psnr(a, b), ssim(a, b)))
    return aggregate(recs)["overall"]
