"""Three-stage training with deterministic, resumable state.

Every random draw inside the loop (batch indices, augmentation, dead-code
re-seeding) is derived from ``(seed, stage, step)``, so a run resumed from a
checkpoint at step ``k`` replays exactly what an uninterrupted run would do.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .checkpoint import RunLock, load_checkpoint, require_stage, save_checkpoint, stage_dir
from .codec import MiniCodec, StubCompressor
from .config import config_from_ini
from .data import (PatchSpec, augment, cached_array, crop_patches, derive_seed, load_corpus,
                   procedural_corpus, read_manifest, to_tensor)
from .errors import ConfigError, DataError, DependencyError
from .fusion import HPIN, hpin_decode, stage3_forward, stage3_loss
from .lookup import CodePredictor, code_accuracy, stage2_loss
from .losses import Discriminator, FeatureExtractor, discriminator_loss
from .metrics import perceptual_proxy
from .vq import (VQAutoencoder, decode_hq, encode_hq, gather_codes, quantize_nearest,
                 refresh_dead_codes, stage1_total_loss)

log = logging.getLogger(__name__)

FEATURE_SEED = 1234
IMAGE_SUFFIXES = ("*.png", "*.bmp", "*.tif", "*.tiff", "*.ppm")


# --------------------------------------------------------------------------
# data


def _patches_from(paths, cfg, count, salt):
    images, _ = load_corpus(paths)
    if not images:
        raise DataError("no usable lossless images found")
    per = math.ceil(count / len(images))
    out = []
    for i, img in enumerate(images):
        spec = PatchSpec(cfg.data.patch_size, per, derive_seed(cfg.seed, salt, i))
        out.extend(crop_patches(img, spec))
    return np.stack(out[:count])


def load_images(cfg):
    """``(train, test)`` float32 arrays of shape ``(n, P, P, 3)``."""
    d = cfg.data
    if d.source == "procedural":
        key = f"procedural:{d.patch_size}:{cfg.seed}"
        train = cached_array(f"{key}:train:{d.train_patches}",
                             lambda: procedural_corpus(d.train_patches, d.patch_size, derive_seed(cfg.seed, 101)))
        test = cached_array(f"{key}:test:{d.test_patches}",
                            lambda: procedural_corpus(d.test_patches, d.patch_size, derive_seed(cfg.seed, 202)))
        return train.astype(np.float32), test.astype(np.float32)
    src = Path(d.source)
    if src.is_dir():
        paths = sorted(p for pat in IMAGE_SUFFIXES for p in src.glob(pat))
        n_test = max(1, len(paths) // 10)
        split = {"train": paths[n_test:], "test": paths[:n_test]}
    elif src.is_file():
        split = read_manifest(src)
    else:
        raise DataError(f"data source {src} does not exist")
    key = f"{src.resolve()}:{d.patch_size}:{cfg.seed}"
    train = cached_array(f"{key}:train:{d.train_patches}",
                         lambda: _patches_from(split["train"], cfg, d.train_patches, 101))
    test = cached_array(f"{key}:test:{d.test_patches}",
                        lambda: _patches_from(split["test"] or split["train"], cfg, d.test_patches, 202))
    return train, test


def codec_path(run_dir, rate_index):
    return Path(run_dir) / "codec" / f"mini_r{rate_index}.pt"


def make_compressor(cfg, run_dir=None):
    c = cfg.codec
    if c.codec == "stub":
        return StubCompressor(c.stub_scale, c.stub_bits)
    path = codec_path(run_dir or ".", c.rate_index)
    if not path.exists():
        raise DependencyError("codec", f"no trained mini codec at {path}; run train-codec first")
    return MiniCodec.from_state(torch.load(path, map_location="cpu", weights_only=True))


def sample_batch(images, cfg, stage, step, batch):
    rng = np.random.default_rng(derive_seed(cfg.seed, stage, step))
    idx = rng.integers(0, len(images), size=batch)
    out = []
    for slot, i in enumerate(idx):
        img = images[i]
        if cfg.data.augment:
            img = augment(img, derive_seed(cfg.seed, stage, step, slot))
        out.append(img)
    return np.stack(out)


def degrade_batch(images, compressor):
    return np.stack([compressor.degrade(img) for img in images])


# --------------------------------------------------------------------------
# schedules and model construction


def lr_at(cfg, stage, step):
    lr, lr_min = cfg.optim.lr, cfg.optim.lr_min
    if stage == 1:
        s = cfg.stage1
        if step < s.cosine_start:
            return lr
        span = max(1, s.iterations - s.cosine_start)
        t = min(1.0, (step - s.cosine_start) / span)
        return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * t))
    if stage == 2:
        return lr * 0.5 ** sum(step >= m for m in cfg.stage2.milestones)
    return lr * cfg.stage3.lr_scale


def _seeded(cfg, *salt):
    torch.manual_seed(derive_seed(cfg.seed, *salt))


def build_vq(cfg):
    _seeded(cfg, 1, 0)
    return VQAutoencoder(cfg.vq_config())


def build_predictor(cfg, vq):
    _seeded(cfg, 2, 0)
    f = cfg.codebook.downsample
    grid = (cfg.data.patch_size // f,) * 2
    return CodePredictor.from_stage1(vq, grid, cfg.stage2.layers, cfg.stage2.heads)


def build_hpin(cfg):
    _seeded(cfg, 3, 0)
    return HPIN(cfg.vq_config(), cfg.stage3.heads, cfg.stage3.blocks)


def build_disc(cfg, stage, channels):
    _seeded(cfg, stage, 1)
    return Discriminator(channels)


def adam(cfg, params):
    return torch.optim.Adam(params, lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2))


def freeze(module):
    module.requires_grad_(False)
    module.eval()
    return module


def load_vq(run_dir):
    ckpt = require_stage(run_dir, 1)
    cfg = config_from_ini(ckpt.config_text)
    vq = VQAutoencoder(cfg.vq_config())
    vq.load_state_dict(ckpt.blob("vq"))
    return cfg, vq


def load_predictor(run_dir, stage=2):
    ckpt = require_stage(run_dir, stage)
    cfg, vq = load_vq(run_dir)
    p = build_predictor(config_from_ini(ckpt.config_text), vq)
    p.load_state_dict(ckpt.blob("predictor"))
    return cfg, vq, p


def load_pipeline(run_dir):
    """Frozen ``(cfg, vq, predictor, hpin)`` from a finished Stage III run."""
    ckpt = require_stage(run_dir, 3)
    cfg = config_from_ini(ckpt.config_text)
    _, vq = load_vq(run_dir)
    p = build_predictor(cfg, vq)
    p.load_state_dict(ckpt.blob("predictor"))
    hpin = build_hpin(cfg)
    hpin.load_state_dict(ckpt.blob("hpin"))
    return cfg, freeze(vq), freeze(p), freeze(hpin)


# --------------------------------------------------------------------------
# trainers


class StageTrainer:
    stage = 0

    def __init__(self, cfg, run_dir, images=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.train_images, self.test_images = images if images is not None else load_images(cfg)
        self.fx = FeatureExtractor(seed=FEATURE_SEED)
        self.history = []
        self.best = math.inf
        self.bad_evals = 0
        self.build()

    @property
    def section(self):
        return getattr(self.cfg, f"stage{self.stage}")

    @property
    def directory(self):
        return stage_dir(self.run_dir, self.stage)

    # subclasses ------------------------------------------------------------
    def build(self):
        raise NotImplementedError

    def modules(self):
        """Name -> object with ``state_dict``/``load_state_dict``."""
        raise NotImplementedError

    def train_step(self, step):
        raise NotImplementedError

    def validate(self):
        raise NotImplementedError

    # shared ----------------------------------------------------------------
    def set_lr(self, step):
        lr = lr_at(self.cfg, self.stage, step)
        for opt in self.optimizers():
            for g in opt.param_groups:
                g["lr"] = lr
        return lr

    def optimizers(self):
        return [v for v in self.modules().values() if isinstance(v, torch.optim.Optimizer)]

    def save(self, step, complete=False):
        blobs = {k: v.state_dict() for k, v in self.modules().items()}
        blobs["history"] = self.history
        extra = {"complete": complete, "best": self.best if math.isfinite(self.best) else None,
                 "bad_evals": self.bad_evals}
        return save_checkpoint(self.directory, self.stage, step, self.cfg, blobs, extra)

    def restore(self, ckpt):
        if ckpt.manifest["config_hash"] != self.cfg.hash():
            raise ConfigError("checkpoint was written with a different configuration",
                              [str(ckpt.path)])
        for name, mod in self.modules().items():
            mod.load_state_dict(ckpt.blob(name))
        self.history = list(ckpt.blob("history"))
        best = ckpt.extra.get("best")
        self.best = math.inf if best is None else best
        self.bad_evals = ckpt.extra.get("bad_evals", 0)
        return ckpt.step

    def run(self, resume=True, max_steps=None):
        """Train up to ``iterations`` (or ``max_steps``) and checkpoint.

        Returns the history of logged diagnostics.
        """
        total = self.section.iterations
        stop_at = total if max_steps is None else min(total, max_steps)
        t = self.cfg.train
        with RunLock(self.run_dir):
            start = 0
            ckpt = load_checkpoint(self.directory) if resume else None
            if ckpt is not None:
                if ckpt.extra.get("complete"):
                    self.restore(ckpt)
                    return self.history
                start = self.restore(ckpt)
            stopped = False
            step = start
            for step in range(start, stop_at):
                lr = self.set_lr(step)
                diag = self.train_step(step)
                if step % t.log_every == 0 or step == total - 1:
                    self.history.append({"step": step, "lr": lr, **diag})
                    log.info("stage %d step %d %s", self.stage, step,
                             " ".join(f"{k}={v:.4g}" for k, v in diag.items()))
                if t.eval_every and (step + 1) % t.eval_every == 0:
                    score = self.validate()
                    self.history.append({"step": step, "val_proxy": score})
                    if score < self.best - 1e-6:
                        self.best, self.bad_evals = score, 0
                    else:
                        self.bad_evals += 1
                    if t.patience and self.bad_evals >= t.patience:
                        log.info("early stopping at step %d", step)
                        stopped = True
                if stopped:
                    break
                if t.checkpoint_every and (step + 1) % t.checkpoint_every == 0 and step + 1 < stop_at:
                    self.save(step + 1)
            else:
                step = stop_at - 1 if stop_at > start else start - 1
            done = stopped or stop_at == total
            self.save(step + 1, complete=done)
            if done:
                self.write_curves()
        return self.history

    def write_curves(self):
        rows = [h for h in self.history if "val_proxy" not in h]
        if not rows:
            return
        keys = sorted({k for h in rows for k in h})
        keys.remove("step")
        with open(self.directory / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + keys)
            for h in rows:
                w.writerow([h["step"]] + [h.get(k, "") for k in keys])
        plotting.loss_figure(rows, self.directory / "loss_curve.png")

    def clean_batch(self, step):
        return sample_batch(self.train_images, self.cfg, self.stage, step, self.section.batch)


class Stage1Trainer(StageTrainer):
    """Codebook, encoder and decoder learning from clean images."""

    stage = 1

    def build(self):
        s = self.cfg.stage1
        self.vq = build_vq(self.cfg)
        self.disc = build_disc(self.cfg, 1, s.disc_channels)
        self.opt = adam(self.cfg, self.vq.parameters())
        self.opt_d = adam(self.cfg, self.disc.parameters())

    def modules(self):
        return {"vq": self.vq, "disc": self.disc, "opt": self.opt, "opt_d": self.opt_d}

    def train_step(self, step):
        s = self.cfg.stage1
        x = to_tensor(self.clean_batch(step))
        self.vq.train()
        out = self.vq(x)
        adv_on = step >= s.adv_start
        loss, diag = stage1_total_loss(
            x, out["x_rec"], out["f_h"], out["f_c"], self.disc, s.alpha,
            fx=self.fx, last_layer=self.vq.decoder.final_layer, adv_enabled=adv_on,
            max_weight=s.max_adv_weight,
        )
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        if adv_on:
            self.opt_d.zero_grad(set_to_none=True)
            d_loss = discriminator_loss(self.disc, x, out["x_rec"].detach())
            d_loss.backward()
            self.opt_d.step()
            diag["disc"] = d_loss.item()
        diag["reseeded"] = refresh_dead_codes(
            self.vq, out["indices"], out["f_h"], step + 1,
            derive_seed(self.cfg.seed, 1, step, 99), s.dead_code_patience,
        )
        diag["used"] = int(out["indices"].unique().numel())
        return diag

    @torch.no_grad()
    def reconstruct(self, images):
        self.vq.eval()
        x = to_tensor(images)
        f_c, _ = quantize_nearest(encode_hq(x, self.vq), self.vq.codebook.weight)
        return decode_hq(f_c, self.vq)

    def validate(self):
        x = to_tensor(self.test_images)
        return perceptual_proxy(x, self.reconstruct(self.test_images), self.fx)


class _FrozenPriorTrainer(StageTrainer):
    """Shared set-up for the stages that keep the codebook and decoder fixed."""

    def load_prior(self):
        _, vq = load_vq(self.run_dir)
        self.vq = freeze(vq)
        self.compressor = make_compressor(self.cfg, self.run_dir)
        self._test_lq = None

    def pair_batch(self, step):
        hq = self.clean_batch(step)
        return to_tensor(hq), to_tensor(degrade_batch(hq, self.compressor))

    @torch.no_grad()
    def teacher(self, hq):
        return quantize_nearest(encode_hq(hq, self.vq), self.vq.codebook.weight)

    def test_lq(self):
        if self._test_lq is None:
            self._test_lq = degrade_batch(self.test_images, self.compressor)
        return self._test_lq


class Stage2Trainer(_FrozenPriorTrainer):
    """Code prediction from degraded images."""

    stage = 2

    def build(self):
        self.load_prior()
        self.predictor = build_predictor(self.cfg, self.vq)
        self.opt = adam(self.cfg, self.predictor.parameters())

    def modules(self):
        return {"predictor": self.predictor, "opt": self.opt}

    def train_step(self, step):
        hq, lq = self.pair_batch(step)
        f_c, codes = self.teacher(hq)
        self.predictor.train()
        f_l, logits, _ = self.predictor(lq)
        loss, diag = stage2_loss(logits, codes, f_l, f_c, self.cfg.stage2.lam2)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        diag["acc"] = code_accuracy(logits.detach(), codes)
        return diag

    @torch.no_grad()
    def predict(self, lq_images):
        self.predictor.eval()
        _, _, codes = self.predictor(to_tensor(lq_images))
        return codes

    def validate(self):
        codes = self.predict(self.test_lq())
        out = decode_hq(gather_codes(codes, self.vq.codebook.weight), self.vq)
        return perceptual_proxy(to_tensor(self.test_images), out, self.fx)


class Stage3Trainer(_FrozenPriorTrainer):
    """Hierarchical prior integration on top of the Stage II predictor."""

    stage = 3

    def build(self):
        require_stage(self.run_dir, 2)
        self.load_prior()
        _, _, self.predictor = load_predictor(self.run_dir)
        self.hpin = build_hpin(self.cfg)
        s = self.cfg.stage3
        self.disc = build_disc(self.cfg, 3, s.disc_channels)
        params = list(self.predictor.parameters()) + list(self.hpin.parameters())
        self.opt = adam(self.cfg, params)
        self.opt_d = adam(self.cfg, self.disc.parameters())

    def modules(self):
        return {"predictor": self.predictor, "hpin": self.hpin, "disc": self.disc,
                "opt": self.opt, "opt_d": self.opt_d}

    def train_step(self, step):
        s = self.cfg.stage3
        hq, lq = self.pair_batch(step)
        f_c, codes = self.teacher(hq)
        self.predictor.train()
        self.hpin.train()
        out = stage3_forward(lq, self.predictor, self.vq, self.hpin, use_prior=s.use_prior)
        s2, d2 = stage2_loss(out["logits"], codes, out["f_l"], f_c, self.cfg.stage2.lam2)
        adv_on = step >= s.adv_start
        loss, diag = stage3_loss(hq, out["x_hat"], s2, self.disc, fx=self.fx,
                                 last_layer=self.hpin.final_layer, adv_enabled=adv_on)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        if adv_on:
            self.opt_d.zero_grad(set_to_none=True)
            d_loss = discriminator_loss(self.disc, hq, out["x_hat"].detach())
            d_loss.backward()
            self.opt_d.step()
            diag["disc"] = d_loss.item()
        diag["ce"] = d2["ce"]
        return diag

    def enhance(self, lq_images):
        return hpin_decode(to_tensor(lq_images), self.predictor, self.vq, self.hpin,
                           use_prior=self.cfg.stage3.use_prior)

    def validate(self):
        out = self.enhance(self.test_lq())
        return perceptual_proxy(to_tensor(self.test_images), out, self.fx)


TRAINERS = {1: Stage1Trainer, 2: Stage2Trainer, 3: Stage3Trainer}


def train_stage(cfg, run_dir, stage, resume=True, max_steps=None, images=None):
    if stage > 1:
        require_stage(run_dir, stage - 1)
    trainer = TRAINERS[stage](cfg, run_dir, images)
    trainer.run(resume=resume, max_steps=max_steps)
    return trainer
