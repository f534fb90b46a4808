"""Ablation harness: train named config variants on one shared split and compare them.

Spec files use the config text format. Keys before the first header are the
shared base; each ``[variant NAME]`` section lists that variant's delta::

    train.max_steps = 200
    [variant masks-1]
    model.n_masks = 1
    [variant baseline-loss]
    loss.lambda_feature = 0
    loss.lambda_mask = 0
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .config import Config, ConfigError, _pairs_to_dict, diff, parse_text, resolve_config
from .evaluation import aggregate, evaluate_dataset, read_metrics_csv
from .training import train

# Reference rows from the original full-scale MRI->CT study; context only.
REFERENCE_MASK_SWEEP = {1: (28.3605, 0.8845), 2: (29.9598, 0.8977), 3: (29.6911, 0.8893),
                    4: (20.7559, 0.8094), 6: (20.4624, 0.7585), 7: (18.2125, 0.6373)}
REFERENCE_LOSS_TOGGLE = {"baseline": (28.4141, 0.8495), "full": (29.9598, 0.8977)}

ABLATION_FIELDS = ("rank", "variant", "psnr", "ssim", "n", "delta")


@dataclass
class Variant:
    name: str
    delta: dict[str, Any]


@dataclass
class AblationSpec:
    base: dict[str, Any] = field(default_factory=dict)
    variants: list[Variant] = field(default_factory=list)

    def base_config(self) -> Config:
        return resolve_config(overrides=self.base)

    def variant_config(self, variant: Variant) -> Config:
        base = self.base_config()
        cfg = base.with_updates(variant.delta)
        changed = set(diff(base, cfg))
        if changed != set(variant.delta):
            noop = sorted(set(variant.delta) - changed)
            raise ConfigError(f"variant {variant.name!r}: delta keys {noop} do not change the base config")
        return cfg


def parse_spec(text: str, source: str = "<spec>") -> AblationSpec:
    blocks = parse_text(text, source=source)
    spec = AblationSpec(base=_pairs_to_dict(blocks.pop(""), source))
    for header, pairs in blocks.items():
        kind, _, name = header.partition(" ")
        if kind != "variant" or not name.strip():
            raise ConfigError(f"{source}: section headers must look like [variant NAME], got [{header}]")
        spec.variants.append(Variant(name.strip(), _pairs_to_dict(pairs, source)))
    if not spec.variants:
        raise ConfigError(f"{source}: no [variant ...] sections")
    for v in spec.variants:
        spec.variant_config(v)
    return spec


def load_spec(path: str | Path) -> AblationSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"ablation spec not found: {path}")
    return parse_spec(path.read_text(), source=str(path))


def mask_sweep_spec(counts=(0, 1, 2, 3, 4, 6, 7), base: dict | None = None) -> AblationSpec:
    """Mask-count sweep; the count equal to the base value is the unmodified reference run."""
    base = dict(base or {})
    ref = resolve_config(overrides=base).model.n_masks
    variants = [Variant(f"masks-{n}", {} if n == ref else {"model.n_masks": n}) for n in counts]
    return AblationSpec(base=base, variants=variants)


def loss_toggle_spec(base: dict | None = None) -> AblationSpec:
    return AblationSpec(base=dict(base or {}), variants=[
        Variant("baseline-loss", {"loss.lambda_feature": 0.0, "loss.lambda_mask": 0.0}),
        Variant("full-loss", {}),
    ])


@dataclass
class AblationRow:
    variant: str
    psnr: float
    ssim: float
    n: int
    delta: dict[str, Any]


def run_ablation(spec: AblationSpec, train_set, val_set, test_set, out_dir: str | Path) -> list[AblationRow]:
    out_dir = Path(out_dir)
    names = [v.name for v in spec.variants]
    if len(set(names)) != len(names):
        raise ConfigError("variant names must be unique")
    rows = []
    for v in spec.variants:
        cfg = spec.variant_config(v)
        vdir = out_dir / v.name
        vdir.mkdir(parents=True, exist_ok=True)
        (vdir / "config.txt").write_text(cfg.to_text())
        result = train(cfg, train_set, val_set, out_dir=vdir / "train")
        _, agg = evaluate_dataset(result.generator, test_set, out_dir=vdir / "eval",
                                  batch_size=cfg.train.batch_size, errmaps=False)
        rows.append(AblationRow(v.name, agg["overall"]["psnr"], agg["overall"]["ssim"],
                                agg["overall"]["n"], v.delta))
    rows.sort(key=lambda r: (-r.psnr, -r.ssim, r.variant))
    write_table(rows, out_dir)
    return rows


def _delta_text(delta: dict) -> str:
    return "; ".join(f"{k}={v}" for k, v in sorted(delta.items())) or "(reference)"


def write_table(rows: list[AblationRow], out_dir: Path):
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for rank, r in enumerate(rows, 1):
            w.writerow([rank, r.variant, repr(r.psnr), repr(r.ssim), r.n, _delta_text(r.delta)])
    lines = ["| rank | variant | PSNR (dB) | SSIM | slices | delta |",
             "|---:|---|---:|---:|---:|---|"]
    for rank, r in enumerate(rows, 1):
        lines.append(f"| {rank} | {r.variant} | {r.psnr:.4f} | {r.ssim:.4f} | {r.n} | {_delta_text(r.delta)} |")
    lines += ["", "Full-scale reference (context only, not expected at desk scale):", "",
              "| masks | PSNR | SSIM |", "|---:|---:|---:|"]
    lines += [f"| {n} | {p} | {s} |" for n, (p, s) in REFERENCE_MASK_SWEEP.items()]
    lines += ["", "| loss | PSNR | SSIM |", "|---|---:|---:|"]
    lines += [f"| {k} | {p} | {s} |" for k, (p, s) in REFERENCE_LOSS_TOGGLE.items()]
    (out_dir / "ablation.md").write_text("\n".join(lines) + "\n")


def read_table(out_dir: str | Path) -> list[dict]:
    with open(Path(out_dir) / "ablation.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def audit(out_dir: str | Path, tol: float = 1e-9) -> list[str]:
    """Re-derive every row of ``ablation.csv`` from the variant's own metrics CSV.

    Returns a list of discrepancies (empty when the table is consistent).
    """
    out_dir = Path(out_dir)
    problems = []
    for row in read_table(out_dir):
        metrics = out_dir / row["variant"] / "eval" / "metrics.csv"
        if not metrics.is_file():
            problems.append(f"{row['variant']}: missing {metrics}")
            continue
        agg = aggregate(read_metrics_csv(metrics))["overall"]
        for key in ("psnr", "ssim"):
            if not math.isclose(agg[key], float(row[key]), rel_tol=0, abs_tol=tol):
                problems.append(f"{row['variant']}: {key} {row[key]} != recomputed {agg[key]!r}")
        if agg["n"] != int(row["n"]):
            problems.append(f"{row['variant']}: n {row['n']} != {agg['n']}")
    return problems
