"""Run directories and the manifest that makes each run auditable."""
from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_NAME = "run_manifest.json"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def resolve_out_dir(out: str | None, subcommand: str) -> Path:
    if out:
        return Path(out)
    root = os.environ.get("MRNET_RUN_DIR")
    if not root:
        raise ValueError("no --out given and MRNET_RUN_DIR is not set")
    return Path(root) / subcommand


def write_manifest(out_dir: str | Path, *, command: str, seed: int | None, config: dict | None,
                   started: str, args: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            outputs[str(p.relative_to(out_dir))] = sha256_file(p)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "args": args or {},
        "started": started,
        "finished": now(),
        "outputs": outputs,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def verify_manifest(out_dir: str | Path) -> list[str]:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / MANIFEST_NAME).read_text())
    problems = []
    for rel, digest in manifest["outputs"].items():
        p = out_dir / rel
        if not p.is_file():
            problems.append(f"missing: {rel}")
        elif sha256_file(p) != digest:
            problems.append(f"checksum mismatch: {rel}")
    return problems
