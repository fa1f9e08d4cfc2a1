"""Checkpoints: a JSON manifest plus one ``torch.save`` blob per component.

Layout of a stage directory::

    stage1/manifest.json   {"stage", "step", "config_hash", "config", "blobs", "extra"}
    stage1/<name>.pt       state dicts
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from .errors import DependencyError, FormatError, StateError

MANIFEST = "manifest.json"


def stage_dir(run_dir, stage):
    return Path(run_dir) / f"stage{stage}"


@dataclass
class Checkpoint:
    path: Path
    manifest: dict

    @property
    def step(self):
        return self.manifest["step"]

    @property
    def stage(self):
        return self.manifest["stage"]

    @property
    def config_text(self):
        return self.manifest["config"]

    @property
    def extra(self):
        return self.manifest.get("extra", {})

    def blob(self, name):
        if name not in self.manifest["blobs"]:
            raise FormatError(f"checkpoint {self.path} has no blob {name!r}")
        return torch.load(self.path / self.manifest["blobs"][name], map_location="cpu",
                          weights_only=True)


def save_checkpoint(directory, stage, step, config, blobs, extra=None):
    """Write atomically: build in a sibling temp dir, then swap it in."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    names = {}
    for name, state in blobs.items():
        fname = f"{name}.pt"
        torch.save(state, tmp / fname)
        names[name] = fname
    manifest = {
        "stage": stage,
        "step": step,
        "config_hash": config.hash(),
        "config": config.to_ini(),
        "blobs": names,
        "extra": extra or {},
    }
    with open(tmp / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    old = directory.with_name(directory.name + ".old")
    if directory.exists():
        os.replace(directory, old)
    os.replace(tmp, directory)
    if old.exists():
        shutil.rmtree(old)
    return Checkpoint(directory, manifest)


def load_checkpoint(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt manifest {path}: {exc}") from None
    return Checkpoint(directory, manifest)


def require_stage(run_dir, stage):
    """Load the finished checkpoint of ``stage`` or raise :class:`DependencyError`."""
    ckpt = load_checkpoint(stage_dir(run_dir, stage))
    if ckpt is None or not ckpt.extra.get("complete", False):
        raise DependencyError(stage)
    return ckpt


class RunLock:
    """Exclusive ownership of a run directory while training."""

    def __init__(self, run_dir):
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(Path(run_dir) / ".lock"))

    def __enter__(self):
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise StateError("run directory is locked by another training process") from None
        return self

    def __exit__(self, *exc):
        self._lock.release()
