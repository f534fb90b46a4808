"""``mrnet`` command line: synth-data | train | translate | evaluate | spectrum | ablate.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config, ConfigError, resolve_config
from .encoder import EncoderWeightsError
from .rawio import RawFormatError, load_image, save_png, write_array
from .runs import now, resolve_out_dir, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mrnet")


class DataError(RuntimeError):
    pass


def _parse_size(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be D,H,W integers, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"size must have three components, got {text!r}")
    return dims


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("n_masks", "model.n_masks"), ("image_size", "model.image_size"),
                      ("seed", "train.seed"), ("max_steps", "train.max_steps"),
                      ("epochs", "train.epochs"), ("fusion", "model.fusion")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--n-masks", dest="n_masks", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--fusion", choices=("on", "off"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrnet", description="Cross-modality slice translation with a SAM-fused U-Net GAN.",
                                     epilog="exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate paired phantom slices")
    p.add_argument("--volumes", type=int, required=True)
    p.add_argument("--size", type=_parse_size, default=(32, 64, 64), help="D,H,W")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--axes", default="xyz")
    p.add_argument("--no-previews", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("train", help="adversarial training")
    _add_overrides(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out")

    p = sub.add_parser("translate", help="map source slices through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="directory of .raw or .png source slices")
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="PSNR/SSIM and error maps on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")

    p = sub.add_parser("spectrum", help="raw vs fused first-stage power spectra")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train and compare config variants")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    return parser


# -- subcommands -------------------------------------------------------------

def cmd_synth_data(args, out: Path) -> dict:
    from .synthdata import write_dataset
    if args.volumes < 10:
        raise DataError("--volumes must be >= 10 for an 8:1:1 split")
    write_dataset(out, args.volumes, args.size, args.seed, args.image_size, args.axes,
                  previews=not args.no_previews)
    return {"seed": args.seed, "config": None}


def _datasets(data_dir, image_size: int, splits=("train", "val")):
    from .synthdata import SliceDataset
    sets = []
    for split in splits:
        try:
            ds = SliceDataset.from_manifest(data_dir, split)
        except (FileNotFoundError, RawFormatError, KeyError) as exc:
            raise DataError(str(exc)) from None
        if len(ds) == 0:
            raise DataError(f"split {split!r} in {data_dir} is empty")
        size = ds[0][0].shape[-1]
        if size != image_size:
            raise DataError(f"slices in {data_dir} are {size}x{size} but model.image_size is {image_size}")
        sets.append(ds)
    return sets


def cmd_train(args, out: Path) -> dict:
    from .training import resume, train
    cfg = resolve_config(args.config, _overrides(args))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    train_set, val_set = _datasets(args.data, cfg.model.image_size)
    if args.resume:
        result = resume(args.resume, train_set, val_set, out_dir=out, cfg=cfg)
    else:
        result = train(cfg, train_set, val_set, out_dir=out)
    log.info("finished at step %d, best val PSNR %.3f", result.state.step, result.state.best_val_psnr)
    return {"seed": cfg.train.seed, "config": cfg.flat()}


def _load(ckpt) -> tuple[Config, torch.nn.Module]:
    from .training import load_checkpoint
    if not Path(ckpt).is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    cfg, g, _, _ = load_checkpoint(ckpt)
    return cfg, g


def _fit(img: np.ndarray, size: int) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].expand(3, -1, -1).clamp(-1, 1)


def cmd_translate(args, out: Path) -> dict:
    cfg, g = _load(args.ckpt)
    files = sorted(p for p in Path(args.input).iterdir() if p.suffix.lower() in (".raw", ".png")) \
        if Path(args.input).is_dir() else []
    if not files:
        raise DataError(f"no .raw or .png slices in {args.input}")
    with torch.no_grad():
        for p in files:
            try:
                x = _fit(load_image(p), cfg.model.image_size)
            except RawFormatError as exc:
                raise DataError(str(exc)) from None
            y = g(x[None]).final[0]
            write_array(out / f"{p.stem}.raw", y[:1].numpy(), (-1.0, 1.0))
            save_png(out / f"{p.stem}.png", y[0].numpy())
    return {"seed": cfg.train.seed, "config": cfg.flat()}


def cmd_evaluate(args, out: Path) -> dict:
    from .evaluation import evaluate_dataset
    cfg, g = _load(args.ckpt)
    (ds,) = _datasets(args.data, cfg.model.image_size, (args.split,))
    _, agg = evaluate_dataset(g, ds, out_dir=out, batch_size=cfg.train.batch_size)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2))
    log.info("overall PSNR %.4f SSIM %.4f over %d slices", agg["overall"]["psnr"],
             agg["overall"]["ssim"], agg["overall"]["n"])
    return {"seed": cfg.train.seed, "config": cfg.flat()}


def cmd_spectrum(args, out: Path) -> dict:
    from .spectrum import compare_fusion_spectra, save_report
    cfg, g = _load(args.ckpt)
    try:
        img = load_image(args.image)
    except (FileNotFoundError, RawFormatError) as exc:
        raise DataError(str(exc)) from None
    report = compare_fusion_spectra(g, _fit(img, cfg.model.image_size).numpy())
    save_report(report, out)
    log.info("low-frequency ratio e1 %.4f, E1 %.4f", *report.ratios.values())
    return {"seed": cfg.train.seed, "config": cfg.flat()}


def cmd_ablate(args, out: Path) -> dict:
    from .ablation import load_spec, run_ablation
    spec = load_spec(args.spec)
    base = spec.base_config()
    train_set, val_set, test_set = _datasets(args.data, base.model.image_size, ("train", "val", "test"))
    run_ablation(spec, train_set, val_set, test_set, out)
    return {"seed": base.train.seed, "config": base.flat()}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "spectrum": cmd_spectrum,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    from .training import NumericalError
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    started = now()
    try:
        out = resolve_out_dir(args.out, args.command)
        out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.command](args, out)
        write_manifest(out, command=args.command, seed=info["seed"], config=info["config"],
                       started=started, args={k: v for k, v in vars(args).items() if k != "command"})
    except (ConfigError, EncoderWeightsError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, RawFormatError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
