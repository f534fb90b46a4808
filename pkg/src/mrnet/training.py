"""Adversarial training: D step on (real, detached fake), then G step on the full objective."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .config import Config, from_flat, substream_seed
from .discriminator import PatchDiscriminator, build_discriminator
from .encoder import FrozenEncoder, build_arch, load_pretrained, stub_arch, stub_encoder
from .evaluation import evaluate_dataset
from .generator import Generator, build_generator
from .losses import gan_loss_discriminator, generator_objective

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("step", "epoch", "gan", "pixel", "feature", "mask", "total", "d_loss", "val_psnr", "val_ssim")


class NumericalError(RuntimeError):
    """A loss went non-finite; ``snapshot`` holds the offending batch and loss values."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def make_encoder(cfg: Config) -> tuple[FrozenEncoder | None, dict | str | None]:
    if cfg.model.fusion == "off":
        return None, None
    enc_cfg = cfg.encoder
    if enc_cfg.kind == "pretrained":
        return load_pretrained(enc_cfg.weights, enc_cfg.arch, enc_cfg.input_size), enc_cfg.arch
    seed = substream_seed(cfg.train.seed, "init/encoder")
    enc = stub_encoder(seed, cfg.model.image_size, enc_cfg.channels, enc_cfg.stride)
    return enc, stub_arch(cfg.model.image_size, enc_cfg.channels, enc_cfg.stride)


def build_models(cfg: Config) -> tuple[Generator, PatchDiscriminator, dict | str | None]:
    encoder, arch = make_encoder(cfg)
    g = build_generator(cfg.model, encoder, substream_seed(cfg.train.seed, "init/generator"))
    d = build_discriminator(substream_seed(cfg.train.seed, "init/discriminator"), cfg.model.base_width)
    return g, d, arch


def _set_requires_grad(module: torch.nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[torch.Tensor]:
    gen = torch.Generator().manual_seed(substream_seed(seed, f"shuffle/{epoch}"))
    perm = torch.randperm(n, generator=gen)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _stack(dataset, idx):
    items = [dataset[int(i)] for i in idx]
    return torch.stack([it[0] for it in items]), torch.stack([it[1] for it in items])


@dataclass
class TrainState:
    epoch: int = 0
    batch_in_epoch: int = 0
    step: int = 0
    best_val_psnr: float = -math.inf
    bad_epochs: int = 0


@dataclass
class TrainResult:
    generator: Generator
    discriminator: PatchDiscriminator
    history: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)
    stopped_early: bool = False
    checkpoint: dict | None = None


class Trainer:
    def __init__(self, cfg: Config, train_set, val_set, out_dir: str | Path | None = None):
        if len(train_set) == 0 or len(val_set) == 0:
            raise ValueError("training needs non-empty train and validation sets")
        self.cfg = cfg
        self.train_set = train_set
        self.val_set = val_set
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.g, self.d, self.encoder_arch = build_models(cfg)
        t = cfg.train
        self.opt_g = torch.optim.Adam(self.g.trainable_parameters(), lr=t.lr, betas=(t.beta1, t.beta2))
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=t.lr, betas=(t.beta1, t.beta2))
        self.state = TrainState()
        self.history: list[dict] = []
        self.last_checkpoint: dict | None = None

    # -- one optimisation step ---------------------------------------------
    def step(self, x: torch.Tensor, y: torch.Tensor) -> dict:
        self.g.train()
        self.d.train()
        out = self.g(x)

        _set_requires_grad(self.d, True)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss = gan_loss_discriminator(self.d(y, x), self.d(out.final.detach(), x))
        if not torch.isfinite(d_loss):
            raise self._numerical("discriminator", x, y, {"d_loss": float(d_loss.detach())})
        d_loss.backward()
        self.opt_d.step()

        _set_requires_grad(self.d, False)
        self.opt_g.zero_grad(set_to_none=True)
        report = generator_objective(self.d(out.final, x), y, out, self.cfg.loss)
        if not report.is_finite():
            raise self._numerical("generator", x, y, report.as_floats())
        report.total.backward()
        self.opt_g.step()
        _set_requires_grad(self.d, True)

        return {**report.as_floats(), "d_loss": float(d_loss.detach())}

    def _numerical(self, which, x, y, losses) -> NumericalError:
        snapshot = {"step": self.state.step, "epoch": self.state.epoch, "losses": losses,
                    "source": x.detach().clone(), "target": y.detach().clone()}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            torch.save(snapshot, self.out_dir / "nonfinite_snapshot.pt")
        return NumericalError(f"non-finite {which} loss at step {self.state.step}: {losses}", snapshot)

    # -- loop ---------------------------------------------------------------
    def validate(self) -> dict:
        _, agg = evaluate_dataset(self.g, self.val_set, batch_size=self.cfg.train.batch_size,
                                  max_batches=self.cfg.train.val_max_batches)
        return agg["overall"]

    def run(self, on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
        t = self.cfg.train
        stopped_early = False
        done = False
        while self.state.epoch < t.epochs and not done:
            batches = _batches(len(self.train_set), t.batch_size, t.seed, self.state.epoch)
            row = None
            while self.state.batch_in_epoch < len(batches):
                x, y = _stack(self.train_set, batches[self.state.batch_in_epoch])
                losses = self.step(x, y)
                self.state.step += 1
                self.state.batch_in_epoch += 1
                row = {"step": self.state.step, "epoch": self.state.epoch, **losses,
                       "val_psnr": "", "val_ssim": ""}
                self.history.append(row)
                if on_step is not None:
                    on_step(self.state.step, losses)
                if t.max_steps and self.state.step >= t.max_steps:
                    done = True
                    break
            epoch_complete = self.state.batch_in_epoch >= len(batches)
            val = self.validate()
            if row is not None:
                row["val_psnr"], row["val_ssim"] = val["psnr"], val["ssim"]
            log.info("epoch %d step %d val psnr %.3f ssim %.4f", self.state.epoch, self.state.step,
                     val["psnr"], val["ssim"])
            improved = val["psnr"] > self.state.best_val_psnr
            if improved:
                self.state.best_val_psnr = val["psnr"]
                self._save("ckpt_best")
            if epoch_complete:
                self.state.bad_epochs = 0 if improved else self.state.bad_epochs + 1
                self.state.epoch += 1
                self.state.batch_in_epoch = 0
                if self.state.bad_epochs > t.patience:
                    stopped_early = True
                    done = True
            self.last_checkpoint = self._save("ckpt_last")
        self._write_history()
        return TrainResult(self.g, self.d, self.history, self.state, stopped_early, self.last_checkpoint)

    # -- persistence ----------------------------------------------------------
    def checkpoint(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.flat(),
            "plan": self.g.plan.to_dict(),
            "n_masks": self.g.n_masks,
            "encoder_arch": self.encoder_arch,
            "generator": {k: v.clone() for k, v in self.g.state_dict().items()},
            "discriminator": {k: v.clone() for k, v in self.d.state_dict().items()},
            "opt_g": _clone_state(self.opt_g.state_dict()),
            "opt_d": _clone_state(self.opt_d.state_dict()),
            "state": vars(self.state).copy(),
        }

    def _save(self, name: str) -> dict:
        ckpt = self.checkpoint()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            torch.save(ckpt, self.out_dir / f"{name}.pt")
        return ckpt

    def load(self, ckpt: dict):
        _check_version(ckpt)
        self.g.load_state_dict(ckpt["generator"])
        self.d.load_state_dict(ckpt["discriminator"])
        self.opt_g.load_state_dict(ckpt["opt_g"])
        self.opt_d.load_state_dict(ckpt["opt_d"])
        self.state = TrainState(**ckpt["state"])

    def _write_history(self):
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        new = not path.exists() or self.state.step == len(self.history)
        with open(path, "w" if new else "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
            if new:
                w.writeheader()
            w.writerows(self.history)


def _clone_state(sd):
    if isinstance(sd, torch.Tensor):
        return sd.clone()
    if isinstance(sd, dict):
        return {k: _clone_state(v) for k, v in sd.items()}
    if isinstance(sd, list):
        return [_clone_state(v) for v in sd]
    return sd


def _check_version(ckpt: dict):
    v = ckpt.get("format_version")
    if v != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {v!r} (expected {CHECKPOINT_VERSION})")


def train(cfg: Config, train_set, val_set, out_dir=None, on_step=None) -> TrainResult:
    return Trainer(cfg, train_set, val_set, out_dir).run(on_step)


def resume(checkpoint: dict | str | Path, train_set, val_set, out_dir=None, cfg: Config | None = None,
           on_step=None) -> TrainResult:
    """Continue a run from a checkpoint; ``cfg`` may raise ``train.max_steps`` / ``train.epochs``."""
    ckpt = torch.load(checkpoint, map_location="cpu", weights_only=False) \
        if isinstance(checkpoint, (str, Path)) else checkpoint
    _check_version(ckpt)
    base = from_flat(ckpt["config"])
    if cfg is None:
        cfg = base
    trainer = Trainer(cfg, train_set, val_set, out_dir)
    trainer.load(ckpt)
    return trainer.run(on_step)


def load_checkpoint(path: str | Path) -> tuple[Config, Generator, PatchDiscriminator, dict]:
    """Rebuild generator and discriminator from a checkpoint without touching any weight file."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    _check_version(ckpt)
    cfg = from_flat(ckpt["config"])
    arch = ckpt.get("encoder_arch")
    encoder = None
    if cfg.model.fusion == "on":
        encoder = FrozenEncoder(build_arch(arch), input_size=cfg.encoder.input_size, kind=cfg.encoder.kind)
    g = build_generator(cfg.model, encoder, 0)
    g.load_state_dict(ckpt["generator"])
    d = PatchDiscriminator(base_width=cfg.model.base_width)
    d.load_state_dict(ckpt["discriminator"])
    g.eval()
    d.eval()
    return cfg, g, d, ckpt

