"""Power spectra of feature maps and the raw-vs-fused low-frequency comparison."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from matplotlib.figure import Figure

DEFAULT_R0_FRACTION = 0.1


@dataclass
class SpectrumProfile:
    power: np.ndarray          # log1p of DC-centred power
    radial: np.ndarray         # mean linear power per integer radius
    low_freq_ratio: float
    linear: np.ndarray         # DC-centred |F|^2


def _radius_grid(shape) -> np.ndarray:
    h, w = shape
    yy, xx = np.indices((h, w))
    return np.hypot(yy - h // 2, xx - w // 2)


def low_freq_radius(shape, fraction: float = DEFAULT_R0_FRACTION) -> float:
    return fraction * min(shape) / 2.0


def profile_from_power(linear: np.ndarray, r0_fraction: float = DEFAULT_R0_FRACTION) -> SpectrumProfile:
    r = _radius_grid(linear.shape)
    n_bins = min(linear.shape) // 2
    bins = np.rint(r).astype(int)
    keep = bins < n_bins
    sums = np.bincount(bins[keep], weights=linear[keep], minlength=n_bins)
    counts = np.bincount(bins[keep], minlength=n_bins)
    radial = sums / np.maximum(counts, 1)
    total = linear.sum()
    # an all-zero map has no energy anywhere; report it as fully low-frequency
    ratio = 1.0 if total <= 0 else float(linear[r <= low_freq_radius(linear.shape, r0_fraction)].sum() / total)
    return SpectrumProfile(power=np.log1p(linear), radial=radial, low_freq_ratio=ratio, linear=linear)


def centered_power(feature: np.ndarray) -> np.ndarray:
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {f.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(f))) ** 2


def power_spectrum(feature, r0_fraction: float = DEFAULT_R0_FRACTION) -> SpectrumProfile:
    return profile_from_power(centered_power(feature), r0_fraction)


def spectral_energy(profile: SpectrumProfile) -> float:
    """Energy in the frequency domain, normalised so it equals sum(x**2) (Parseval)."""
    return float(profile.linear.sum() / profile.linear.size)


def channel_averaged(features, r0_fraction: float = DEFAULT_R0_FRACTION) -> SpectrumProfile:
    """Average the linear power over channels of a C x H x W map, then profile it."""
    arr = features.detach().cpu().numpy() if isinstance(features, torch.Tensor) else np.asarray(features)
    if arr.ndim == 2:
        arr = arr[None]
    mean_power = np.mean([centered_power(c) for c in arr], axis=0)
    return profile_from_power(mean_power, r0_fraction)


@dataclass
class FusionSpectraReport:
    raw: SpectrumProfile        # first encoder stage e_1
    fused: SpectrumProfile      # fused E_1 passed to the decoder
    image: np.ndarray

    @property
    def ratios(self) -> dict[str, float]:
        return {"low_freq_ratio_e1": self.raw.low_freq_ratio, "low_freq_ratio_E1": self.fused.low_freq_ratio}


@torch.no_grad()
def compare_fusion_spectra(model, image, r0_fraction: float = DEFAULT_R0_FRACTION) -> FusionSpectraReport:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.dim() == 2:
        x = x[None].expand(3, -1, -1)
    was_training = model.training
    model.eval()
    try:
        raw, fused = model.encode_stages(x[None])
    finally:
        model.train(was_training)
    return FusionSpectraReport(raw=channel_averaged(raw[0][0], r0_fraction),
                               fused=channel_averaged(fused[0][0], r0_fraction),
                               image=x[0].numpy())


def save_report(report: FusionSpectraReport, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig = Figure(figsize=(12, 4))
    axes = fig.subplots(1, 3)
    axes[0].imshow(report.image, cmap="gray", vmin=-1, vmax=1)
    axes[0].set_title("input")
    axes[1].imshow(report.raw.power, cmap="magma")
    axes[1].set_title(f"e1 power (low-freq {report.raw.low_freq_ratio:.3f})")
    axes[2].imshow(report.fused.power, cmap="magma")
    axes[2].set_title(f"E1 power (low-freq {report.fused.low_freq_ratio:.3f})")
    for ax in axes:
        ax.set_axis_off()
    panels = out_dir / "spectra.png"
    fig.savefig(panels, dpi=100, bbox_inches="tight")

    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    ax.semilogy(report.raw.radial, label="e1")
    ax.semilogy(report.fused.radial, label="E1")
    ax.set_xlabel("radius (frequency bin)")
    ax.set_ylabel("mean power")
    ax.legend()
    radial = out_dir / "radial.png"
    fig.savefig(radial, dpi=100, bbox_inches="tight")

    table = out_dir / "ratios.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(report.ratios.keys())
        w.writerow([repr(v) for v in report.ratios.values()])
    return {"panels": panels, "radial": radial, "csv": table}
