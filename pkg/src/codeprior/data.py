"""Image corpora, patch extraction, augmentation and (degraded, clean) pairs.

Images are ``float32`` numpy arrays shaped ``(H, W, 3)`` with values in
``[0, 1]``.  Every random choice is derived from an explicit integer seed so
that a sample is a pure function of ``(inputs, seed)``.
"""

from __future__ import annotations

import csv
import hashlib
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError, DimensionError, DomainError

LOSSLESS_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm"}
CACHE_ENV = "CODE_RSIC_CACHE"


def derive_seed(*parts):
    """Mix integers into one 63-bit seed (stable across runs and platforms)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def check_image(x, name="image"):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise DimensionError(f"{name} must be HxWx3, got shape {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DomainError(f"{name} values must lie in [0, 1]")
    return x


def to_tensor(images):
    """HxWx3 array (or list / NxHxWx3 array) -> float32 Nx3xHxW tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t):
    """Nx3xHxW (N == 1) or 3xHxW tensor -> HxWx3 float32 array."""
    t = t.detach()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise DimensionError("to_image expects a single image")
        t = t[0]
    return t.permute(1, 2, 0).to(torch.float32).cpu().numpy().copy()


# --------------------------------------------------------------------------
# storage


def load_image(path):
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise DataError(f"{path}: lossy or unknown source format rejected")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path, x):
    x = check_image(x)
    Image.fromarray(np.round(x * 255.0).astype(np.uint8)).save(path)


def load_corpus(paths):
    """Load lossless images; lossy sources are skipped with a warning.

    Returns ``(images, rejected)`` where ``rejected`` lists skipped paths.
    """
    images, rejected = [], []
    for p in paths:
        if Path(p).suffix.lower() not in LOSSLESS_SUFFIXES:
            warnings.warn(f"skipping lossy source {p}", stacklevel=2)
            rejected.append(str(p))
            continue
        images.append(load_image(p))
    return images, rejected


def read_manifest(path):
    """Read a ``path,split`` CSV manifest. Relative paths resolve against it."""
    path = Path(path)
    out = {"train": [], "test": []}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "split"} <= set(reader.fieldnames):
            raise DataError(f"{path}: manifest needs 'path' and 'split' columns")
        for lineno, row in enumerate(reader, start=2):
            split = row["split"].strip()
            if split not in out:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            p = Path(row["path"].strip())
            out[split].append(p if p.is_absolute() else path.parent / p)
    return out


def write_manifest(path, entries):
    """``entries`` is an iterable of ``(path, split)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "split"])
        for p, split in entries:
            w.writerow([str(p), split])


# --------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchSpec:
    size: int
    count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise DomainError("patch size must be positive")
        if self.count < 1:
            raise DomainError("patch count must be >= 1")


def crop_corners(height, width, spec):
    if spec.size > min(height, width):
        raise DimensionError(
            f"patch size {spec.size} exceeds source dimensions {height}x{width}"
        )
    rng = np.random.default_rng(spec.seed)
    tops = rng.integers(0, height - spec.size, size=spec.count, endpoint=True)
    lefts = rng.integers(0, width - spec.size, size=spec.count, endpoint=True)
    return np.stack([tops, lefts], axis=1)


def crop_patches(source, spec):
    source = check_image(source, "source")
    h, w, _ = source.shape
    s = spec.size
    return [
        source[t : t + s, l : l + s].copy()
        for t, l in crop_corners(h, w, spec)
    ]


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPlan:
    hflip: bool
    vflip: bool
    crop: tuple | None  # (fraction, top_frac, left_frac) or None


def augment_plan(seed):
    rng = np.random.default_rng(seed)
    hflip, vflip, do_crop = (rng.random(3) < 0.5).tolist()
    crop = None
    if do_crop:
        frac, top, left = rng.uniform(0.8, 1.0), rng.random(), rng.random()
        crop = (float(frac), float(top), float(left))
    return AugmentPlan(hflip, vflip, crop)


def hflip(x):
    return x[:, ::-1].copy()


def vflip(x):
    return x[::-1].copy()


def crop_resize(x, fraction, top_frac, left_frac):
    h, w, _ = x.shape
    ch, cw = max(1, round(h * fraction)), max(1, round(w * fraction))
    top = min(int(top_frac * (h - ch + 1)), h - ch)
    left = min(int(left_frac * (w - cw + 1)), w - cw)
    sub = to_tensor(x[top : top + ch, left : left + cw])
    out = F.interpolate(sub, size=(h, w), mode="bilinear", align_corners=False)
    return np.clip(to_image(out), 0.0, 1.0)


def apply_plan(patch, plan):
    out = np.asarray(patch, dtype=np.float32)
    if plan.hflip:
        out = hflip(out)
    if plan.vflip:
        out = vflip(out)
    if plan.crop is not None:
        out = crop_resize(out, *plan.crop)
    return np.ascontiguousarray(out)


def augment(patch, seed):
    check_image(patch, "patch")
    return apply_plan(patch, augment_plan(seed))


# --------------------------------------------------------------------------
# training pairs


@dataclass
class TrainingPair:
    lq: np.ndarray
    hq: np.ndarray
    rate_param: float

    def __post_init__(self):
        if self.lq.shape != self.hq.shape:
            raise DimensionError(f"pair shapes differ: {self.lq.shape} vs {self.hq.shape}")


def build_pairs(hq_patches, compressor, rate_param):
    pairs = []
    for i, hq in enumerate(hq_patches):
        try:
            lq = compressor.roundtrip(hq)
        except Exception as exc:
            raise DataError(f"compressor failed on patch {i}: {exc}", index=i) from exc
        pairs.append(TrainingPair(lq=lq, hq=hq, rate_param=float(rate_param)))
    return pairs


# --------------------------------------------------------------------------
# synthetic corpus


# typical RGB of land-cover classes: building, road, water, barren, forest,
# agriculture, background
LAND_COVER = np.array([
    [0.62, 0.55, 0.52],
    [0.45, 0.45, 0.47],
    [0.16, 0.26, 0.33],
    [0.70, 0.62, 0.46],
    [0.18, 0.33, 0.20],
    [0.48, 0.58, 0.30],
    [0.40, 0.42, 0.36],
])
ROAD = 1


def procedural_texture(size, seed):
    """One remote-sensing-flavoured texture: field patches with striped crops,
    smooth terrain shading and a couple of linear features (roads/rivers)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    # field patchwork: nearest of a few random sites
    n_sites = int(rng.integers(3, 7))
    sites = rng.random((n_sites, 2))
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    label = d2.argmin(-1)
    classes = rng.integers(0, len(LAND_COVER), size=n_sites)
    palette = LAND_COVER[classes] + rng.normal(0.0, 0.03, size=(n_sites, 3))
    img = palette[label]

    # stripes inside each field with its own orientation and period
    theta = rng.uniform(0, np.pi, size=n_sites)
    freq = rng.uniform(3.0, 10.0, size=n_sites)
    amp = rng.uniform(0.0, 0.12, size=n_sites)
    proj = np.cos(theta)[label] * xx + np.sin(theta)[label] * yy
    img = img + (amp[label] * np.sin(2 * np.pi * freq[label] * proj))[..., None]

    # low-frequency shading
    k = rng.normal(size=(2, 2))
    shade = 0.08 * np.sin(2 * np.pi * (k[0, 0] * xx + k[0, 1] * yy) + rng.uniform(0, 6.3))
    img = img + shade[..., None]

    # linear features
    for _ in range(int(rng.integers(0, 3))):
        a = rng.uniform(0, np.pi)
        c = rng.uniform(0.2, 0.8)
        dist = np.abs(np.cos(a) * xx + np.sin(a) * yy - c * (np.cos(a) + np.sin(a)))
        mask = dist < rng.uniform(0.01, 0.03)
        img[mask] = LAND_COVER[ROAD] + rng.normal(0.0, 0.03, size=3)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def procedural_corpus(n, size, seed):
    return np.stack([procedural_texture(size, derive_seed(seed, i)) for i in range(n)])


# --------------------------------------------------------------------------
# cache


def cache_dir():
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cached_array(key, build):
    """Return ``build()``; memoised on disk under ``$CODE_RSIC_CACHE`` if set."""
    root = cache_dir()
    if root is None:
        return build()
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:24]
    path = root / f"{digest}.npy"
    if path.exists():
        return np.load(path)
    arr = np.asarray(build())
    tmp = path.with_suffix(".tmp.npy")
    np.save(tmp, arr)
    os.replace(tmp, path)
    return arr
