"""Run configuration: typed sections, dotted-key text files, override precedence.

A config file is plain text, one ``section.key = value`` per line, ``#`` starts
a comment. Resolution order is CLI override > file > built-in defaults.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_masks: int = 2
    base_width: int = 64
    image_size: int = 256
    fusion: str = "on"
    mask_hidden: int = 32

    def __post_init__(self):
        if self.n_masks < 0:
            raise ConfigError("model.n_masks must be >= 0")
        if self.fusion not in ("on", "off"):
            raise ConfigError("model.fusion must be 'on' or 'off'")
        if self.image_size < 16 or self.image_size & (self.image_size - 1):
            raise ConfigError("model.image_size must be a power of two >= 16")
        if self.base_width <= 0 or self.mask_hidden <= 0:
            raise ConfigError("model widths must be positive")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "stub"
    weights: str = ""
    arch: str = "vit_b"
    channels: int = 256
    stride: int = 16
    # 0 feeds the image at native resolution; otherwise it is resized to this
    # square size before encoding (SAM was trained at 1024)
    input_size: int = 0

    def __post_init__(self):
        if self.kind not in ("stub", "pretrained"):
            raise ConfigError("encoder.kind must be 'stub' or 'pretrained'")
        if self.kind == "pretrained" and not self.weights:
            raise ConfigError("encoder.weights is required when encoder.kind = pretrained")


@dataclass(frozen=True)
class LossWeights:
    lambda_pixel: float = 100.0
    lambda_feature: float = 0.1
    lambda_mask: float = 0.05

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss.{f.name} must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 40
    batch_size: int = 4
    seed: int = 2024
    patience: int = 5
    max_steps: int = 0  # 0 = no step cap
    val_max_batches: int = 0  # 0 = full validation split

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("train.lr, train.epochs and train.batch_size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1)")
        if self.patience < 0 or self.max_steps < 0 or self.val_max_batches < 0:
            raise ConfigError("train.patience, train.max_steps, train.val_max_batches must be >= 0")


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def flat(self) -> dict[str, Any]:
        out = {}
        for section in dataclasses.fields(self):
            sub = getattr(self, section.name)
            for f in dataclasses.fields(sub):
                out[f"{section.name}.{f.name}"] = getattr(sub, f.name)
        return out

    def with_updates(self, updates: Mapping[str, Any]) -> "Config":
        return from_flat({**self.flat(), **_coerce_all(updates)})

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())


def _known_keys() -> dict[str, type]:
    return {k: type(v) for k, v in Config().flat().items()}


def _format(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: Any) -> Any:
    types = _known_keys()
    if key not in types:
        raise ConfigError(f"unknown config key: {key!r}")
    t = types[key]
    if not isinstance(raw, str):
        if t is float and isinstance(raw, (int, float)):
            return float(raw)
        if isinstance(raw, t):
            return raw
        raise ConfigError(f"{key}: expected {t.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if t is int:
            return int(text)
        if t is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {t.__name__}") from None
    return text


def _coerce_all(updates: Mapping[str, Any]) -> dict[str, Any]:
    return {k: _coerce(k, v) for k, v in updates.items()}


def from_flat(flat: Mapping[str, Any]) -> Config:
    sections: dict[str, dict[str, Any]] = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        sections.setdefault(section, {})[name] = _coerce(key, value)
    try:
        return Config(
            model=ModelConfig(**sections.get("model", {})),
            encoder=EncoderConfig(**sections.get("encoder", {})),
            loss=LossWeights(**sections.get("loss", {})),
            train=TrainConfig(**sections.get("train", {})),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_text(text: str, *, source: str = "<string>") -> dict[str, list[tuple[str, str]]]:
    """Parse key/value text into ``{section_header: [(key, value), ...]}``.

    Lines before any ``[header]`` go under the empty header. Headers are only
    used by ablation specs; plain config files have none.
    """
    blocks: dict[str, list[tuple[str, str]]] = {"": []}
    current = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in blocks:
                raise ConfigError(f"{source}:{lineno}: duplicate section [{current}]")
            blocks[current] = []
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        blocks[current].append((key, value))
    return blocks


def load_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    blocks = parse_text(path.read_text(), source=str(path))
    if set(blocks) != {""}:
        raise ConfigError(f"{path}: section headers are not allowed in a config file")
    return _pairs_to_dict(blocks[""], str(path))


def _pairs_to_dict(pairs: list[tuple[str, str]], source: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise ConfigError(f"{source}: key {key!r} given twice")
        out[key] = _coerce(key, value)
    return out


def resolve_config(file: str | Path | None = None,
                   overrides: Mapping[str, Any] | None = None) -> Config:
    values = Config().flat()
    if file is not None:
        values.update(load_file(file))
    if overrides:
        values.update(_coerce_all(overrides))
    return from_flat(values)


def diff(a: Config, b: Config) -> dict[str, tuple[Any, Any]]:
    fa, fb = a.flat(), b.flat()
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k]}


def substream_seed(root: int, name: str) -> int:
    """Derive an independent 63-bit seed for the named random substream."""
    ss = np.random.SeedSequence([root, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
