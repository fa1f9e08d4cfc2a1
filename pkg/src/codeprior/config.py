"""Run configuration: sectioned key/value text (INI) with named profiles."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

from .errors import ConfigError
from .vq import VQConfig


@dataclass
class DataConfig:
    source: str = "procedural"  # manifest CSV, image directory, or "procedural"
    patch_size: int = 64
    train_patches: int = 256
    test_patches: int = 32
    augment: bool = True


@dataclass
class CodebookConfig:
    n_codes: int = 64
    dim: int = 32
    downsample: int = 8
    base_channels: int = 16
    max_channels: int = 512
    res_blocks: int = 2


@dataclass
class OptimConfig:
    lr: float = 1e-5
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class Stage1Config:
    iterations: int = 5000
    batch: int = 8
    cosine_start: int = 3000
    adv_start: int = 1000
    dead_code_patience: int = 2000
    alpha: float = 0.25
    max_adv_weight: float = 1e4
    disc_channels: int = 32


@dataclass
class Stage2Config:
    iterations: int = 5000
    batch: int = 8
    milestones: tuple = (4000, 4500)
    lam2: float = 0.5
    layers: int = 4
    heads: int = 8


@dataclass
class Stage3Config:
    iterations: int = 2000
    batch: int = 2
    heads: tuple = (4, 2, 2)
    blocks: int = 2
    adv_start: int = 0
    lr_scale: float = 1.0  # multiplies optim.lr for this fine-tuning stage
    use_prior: bool = True
    disc_channels: int = 32


@dataclass
class CodecConfig:
    codec: str = "stub"
    rate_index: int = 0
    stub_scale: int = 2
    stub_bits: int = 4


@dataclass
class TrainConfig:
    log_every: int = 50
    checkpoint_every: int = 500
    eval_every: int = 500
    patience: int = 0  # evaluations without improvement before stopping; 0 disables


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    stage: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def vq_config(self):
        c = self.codebook
        return VQConfig(c.n_codes, c.dim, c.downsample, c.base_channels, c.max_channels, c.res_blocks)

    def batch_for(self, stage):
        return getattr(self, f"stage{stage}").batch

    def validate(self):
        bad = []
        for s in (1, 2, 3):
            if self.batch_for(s) < 1:
                bad.append(f"stage{s}.batch")
            if getattr(self, f"stage{s}").iterations < 0:
                bad.append(f"stage{s}.iterations")
        if self.optim.lr <= 0:
            bad.append("optim.lr")
        if not 0 <= self.optim.lr_min <= self.optim.lr:
            bad.append("optim.lr_min")
        if self.stage not in (1, 2, 3):
            bad.append("run.stage")
        if self.profile not in PROFILES:
            bad.append("run.profile")
        if self.codec.codec not in ("stub", "mini"):
            bad.append("codec.codec")
        if self.data.patch_size % self.codebook.downsample:
            bad.append("data.patch_size")
        try:
            self.vq_config()
        except ValueError:
            bad.append("codebook")
        if self.codebook.dim % self.stage2.heads:
            bad.append("stage2.heads")
        if bad:
            raise ConfigError("invalid configuration values", bad)
        return self

    # -- serialization ------------------------------------------------------

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp["run"] = {"profile": self.profile, "seed": str(self.seed), "stage": str(self.stage)}
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self):
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()[:16]


SECTIONS = ("data", "codebook", "optim", "stage1", "stage2", "stage3", "codec", "train")

PROFILES = {
    # desk-scale: 64x64 patches, small codebook, budgets in the low thousands
    "toy": {
        "optim": {"lr": 1e-3, "lr_min": 1e-4},
        "stage3": {"lr_scale": 0.1},
    },
    # full-scale settings (256x256 patches, 1024 codes); not desk-runnable
    "full": {
        "data": {"patch_size": 256, "train_patches": 27319, "test_patches": 100},
        "codebook": {"n_codes": 1024, "dim": 512, "downsample": 16, "base_channels": 64},
        "optim": {"lr": 1e-5, "lr_min": 1e-6},
        "stage1": {"iterations": 1_600_000, "cosine_start": 30_000},
        "stage2": {"iterations": 500_000, "milestones": (400_000, 450_000), "layers": 9},
        "stage3": {"iterations": 500_000},
        "train": {"checkpoint_every": 10_000, "eval_every": 10_000, "patience": 10},
    },
}


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw, typ, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError("malformed value", [key]) from None


def _apply(cfg, section, values, bad, parse=False):
    if section == "run":
        target = cfg
        allowed = {"profile", "seed", "stage"}
    elif section in SECTIONS:
        target = getattr(cfg, section)
        allowed = {f.name for f in dataclasses.fields(target)}
    else:
        bad.extend([f"{section}.{k}" for k in values] or [section])
        return
    for key, val in values.items():
        if key not in allowed:
            bad.append(f"{section}.{key}")
            continue
        default = getattr(target, key)
        if parse:
            val = _parse(val, type(default), default, f"{section}.{key}")
        setattr(target, key, val)


def make_config(profile="toy", path=None, overrides=None, seed=None):
    """Build a config: defaults, then ``profile``, then file ``path``, then
    ``overrides`` (``{"section.key": value}``), then ``seed``."""
    if profile not in PROFILES:
        raise ConfigError("unknown profile", [profile])
    cfg = RunConfig(profile=profile)
    bad = []
    for section, values in PROFILES[profile].items():
        _apply(cfg, section, values, bad)
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if cp.has_option("run", "profile") and cp.get("run", "profile") != profile:
            # the file names its own profile: rebuild from that one
            return make_config(cp.get("run", "profile"), path, overrides, seed)
        for section in cp.sections():
            _apply(cfg, section, dict(cp[section]), bad, parse=True)
    for dotted, val in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _apply(cfg, section, {key: val}, bad, parse=isinstance(val, str))
    if bad:
        raise ConfigError("unknown configuration keys", bad)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def config_from_ini(text):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    profile = cp.get("run", "profile", fallback="toy")
    cfg = RunConfig(profile=profile)
    bad = []
    for section in cp.sections():
        _apply(cfg, section, dict(cp[section]), bad, parse=True)
    if bad:
        raise ConfigError("unknown configuration keys", bad)
    return cfg
