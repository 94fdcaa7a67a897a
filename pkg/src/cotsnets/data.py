"""Datasets, synthetic two-domain phantoms, augmentation and paired-domain batching.

On-disk layout (also produced by :func:`write_dataset`)::

    <root>/images/<id>.png   8-bit RGB or grayscale
    <root>/masks/<id>.png    8-bit, values {0, 255}
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .geometry import GaussianSpec, boundary_map

STYLES = ("ellipse_speckle", "blob_texture")
DEFAULT_STYLE_DOMAIN = {"ellipse_speckle": "target", "blob_texture": "source"}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    image: np.ndarray      # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray       # (H, W) uint8 in {0, 1}
    boundary: np.ndarray   # (H, W) float64 in [0, 1]
    domain: str
    id: str


@dataclass
class DomainBatch:
    images: torch.Tensor       # (B, 3, H, W)
    masks: torch.Tensor        # (B, 1, H, W)
    boundaries: torch.Tensor   # (B, 1, H, W)
    domain: str
    ids: list

    def __len__(self):
        return self.images.shape[0]


@dataclass
class DatasetSpec:
    root: str
    split: str = "train"
    resize_to: tuple = (256, 256)
    augmentation: bool = True
    seed: int = 0
    domain: str = "target"


def make_sample(image, mask, domain: str, id: str, gaussian: GaussianSpec | None = None) -> ImageSample:
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.uint8)
    if image.shape[:2] != mask.shape:
        raise DatasetError(f"{id}: image {image.shape[:2]} and mask {mask.shape} differ in size")
    return ImageSample(image, mask, boundary_map(mask, gaussian).values, domain, id)


def make_batch(samples, domain: str | None = None) -> DomainBatch:
    domain = domain or samples[0].domain
    if any(s.domain != domain for s in samples):
        raise DatasetError("a DomainBatch may only hold samples from one domain")
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float()
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).float()[:, None]
    bounds = torch.from_numpy(np.stack([s.boundary for s in samples])).float()[:, None]
    return DomainBatch(images.contiguous(), masks, bounds, domain, [s.id for s in samples])


# --------------------------------------------------------------------------- loading

def _find_image(folder: Path, stem: str) -> Path | None:
    for suf in IMAGE_SUFFIXES:
        p = folder / f"{stem}{suf}"
        if p.exists():
            return p
    return None


def read_mask(path, max_nonbinary: float = 0.01) -> np.ndarray:
    """Read an 8-bit mask and binarise it at 127."""
    arr = np.asarray(Image.open(path).convert("L"))
    odd = np.count_nonzero((arr != 0) & (arr != 255)) / arr.size
    if odd > max_nonbinary:
        raise DatasetError(f"{path}: {odd:.1%} of pixels are neither 0 nor 255")
    return (arr > 127).astype(np.uint8)


def load_dataset(spec: DatasetSpec, gaussian: GaussianSpec | None = None) -> list[ImageSample]:
    root = Path(spec.root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root} must contain images/ and masks/ subdirectories")
    h, w = spec.resize_to
    samples = []
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        mpath = _find_image(mask_dir, path.stem)
        if mpath is None:
            raise DatasetError(f"missing mask for image {path.name} in {mask_dir}")
        img = Image.open(path).convert("RGB")
        mask = read_mask(mpath)
        if img.size != (mask.shape[1], mask.shape[0]):
            raise DatasetError(f"{path.name}: image and mask sizes differ")
        img = np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
        mask = np.asarray(Image.fromarray(mask * 255).resize((w, h), Image.NEAREST)) > 127
        samples.append(make_sample(img, mask, spec.domain, path.stem, gaussian))
    if not samples:
        raise DatasetError(f"no images found in {img_dir}")
    return samples


def write_dataset(samples, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8) * 255).save(root / "masks" / f"{s.id}.png")


# ------------------------------------------------------------------------- synthetic

def _single_component(mask: np.ndarray) -> np.ndarray:
    mask = ndimage.binary_fill_holes(mask)
    labels, n = ndimage.label(mask)
    if n > 1:
        sizes = ndimage.sum(mask, labels, range(1, n + 1))
        mask = labels == (int(np.argmax(sizes)) + 1)
    return mask.astype(np.uint8)


def _ellipse_speckle(rng: np.random.Generator, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    a, b = rng.uniform(0.13, 0.25, size=2) * size
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    mask = _single_component((u / a) ** 2 + (v / b) ** 2 <= 1.0)

    clean = np.where(mask > 0, 0.35, 0.55)
    clean = ndimage.gaussian_filter(clean, 1.0)
    speckle = ndimage.gaussian_filter(rng.gamma(10.0, 0.1, size=(size, size)), 0.6)
    speckle /= speckle.mean()
    img = np.clip(clean * speckle, 0.0, 1.0)
    return img, mask


def _blob_texture(rng: np.random.Generator, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    r0 = rng.uniform(0.14, 0.24) * size
    amps = rng.uniform(0.0, 0.12, size=3)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    ang = np.arctan2(yy - cy, xx - cx)
    radius = r0 * (1.0 + sum(amps[k] * np.cos((k + 2) * ang + phases[k]) for k in range(3)))
    mask = _single_component(np.hypot(yy - cy, xx - cx) <= radius)

    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(size, size)), 3.0)
    texture /= texture.std() + 1e-12
    bg = 0.40 + 0.08 * texture
    fg = 0.70 + 0.06 * rng.normal(0.0, 1.0, size=(size, size))
    img = np.where(mask > 0, fg, bg)
    img = np.clip(ndimage.gaussian_filter(img, 0.7), 0.0, 1.0)
    return img, mask


def generate_synthetic(style: str, n: int, seed: int = 0, size: int = 64, domain: str | None = None,
                       gaussian: GaussianSpec | None = None) -> list[ImageSample]:
    """Ultrasound-like phantoms with one lesion each; deterministic per (seed, index).

    ``ellipse_speckle`` is a dark ellipse under multiplicative speckle,
    ``blob_texture`` a bright wavy blob on a smooth textured background.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    if n < 1:
        raise ValueError("n must be >= 1")
    domain = domain or DEFAULT_STYLE_DOMAIN[style]
    make = _ellipse_speckle if style == "ellipse_speckle" else _blob_texture
    code = STYLES.index(style)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, code])
        img, mask = make(rng, size)
        rgb = np.repeat(img[:, :, None], 3, axis=2)
        out.append(make_sample(rgb, mask, domain, f"{style}_{seed}_{i:04d}", gaussian))
    return out


# ---------------------------------------------------------------------- augmentation

def flip(sample: ImageSample, axis: int) -> ImageSample:
    """Flip along ``axis`` (0 = vertical, 1 = horizontal); the boundary map flips with it."""
    return replace(sample,
                   image=np.ascontiguousarray(np.flip(sample.image, axis=axis)),
                   mask=np.ascontiguousarray(np.flip(sample.mask, axis=axis)),
                   boundary=np.ascontiguousarray(np.flip(sample.boundary, axis=axis)))


def warp(image, mask, angle_deg=0.0, scale=1.0, shift=(0.0, 0.0)):
    """Rotate/scale about the centre, then shift by ``shift`` = (dy, dx) pixels.

    Images use bilinear sampling with edge replication; masks nearest-neighbour
    with zero fill.
    """
    h, w = mask.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.asarray(shift, dtype=np.float64)
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    inv = rot.T / scale
    offset = c - inv @ (c + t)
    if image is not None:
        chans = [ndimage.affine_transform(image[..., k], inv, offset, order=1, mode="nearest")
                 for k in range(image.shape[2])]
        image = np.stack(chans, axis=-1).astype(np.float32)
    mask = ndimage.affine_transform(mask.astype(np.uint8), inv, offset, order=0, mode="constant", cval=0)
    return image, mask.astype(np.uint8)


def augment(sample: ImageSample, rng: np.random.Generator, p: float = 0.5,
            gaussian: GaussianSpec | None = None) -> ImageSample:
    """Random flips, affine jitter, brightness/contrast and Gaussian noise.

    Each transform fires independently with probability ``p``. The boundary
    map is recomputed from the transformed mask.
    """
    image, mask = sample.image.copy(), sample.mask.copy()
    h, w = mask.shape
    geometric = False
    if rng.random() < p:
        image, mask, geometric = image[:, ::-1], mask[:, ::-1], True
    if rng.random() < p:
        image, mask, geometric = image[::-1], mask[::-1], True

    shift = rng.uniform(-0.1, 0.1, size=2) * np.array([h, w]) if rng.random() < p else np.zeros(2)
    scale = 1.0 + rng.uniform(-0.1, 0.1) if rng.random() < p else 1.0
    angle = rng.uniform(-15.0, 15.0) if rng.random() < p else 0.0
    if np.any(shift) or scale != 1.0 or angle != 0.0:
        image, mask = warp(np.ascontiguousarray(image), np.ascontiguousarray(mask), angle, scale, shift)
        geometric = True

    if rng.random() < p:
        mean = image.mean()
        image = (image - mean) * (1.0 + rng.uniform(-0.2, 0.2)) + mean
        image = image * (1.0 + rng.uniform(-0.2, 0.2))
    if rng.random() < p:
        image = image + rng.normal(0.0, rng.uniform(0.01, 0.05), size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)

    bnd = boundary_map(mask, gaussian).values if geometric else sample.boundary
    return replace(sample, image=np.ascontiguousarray(image), mask=mask, boundary=bnd)


# -------------------------------------------------------------------------- batching

def iterations_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return math.ceil(max(n_source, n_target) / batch_size)


def _index_stream(n: int, count: int, seed: int, epoch: int, stream: int) -> np.ndarray:
    """First ``count`` indices of back-to-back fresh permutations of range(n)."""
    perms, total, cycle = [], 0, 0
    while total < count:
        perms.append(np.random.default_rng([seed, epoch, stream, cycle]).permutation(n))
        total += n
        cycle += 1
    return np.concatenate(perms)[:count]


def paired_iterator(source_set, target_set, batch_size: int, seed: int = 0, epoch: int = 0,
                    transform=None):
    """Yield ``(source_batch, target_batch)`` pairs for one epoch.

    An epoch has ``ceil(max(N_s, N_t) / B)`` iterations. Each domain draws from
    a stream of reshuffled permutations, so the shorter set cycles and every
    batch is full. ``transform(sample, rng)`` is applied per drawn sample.
    """
    if not source_set or not target_set:
        raise DatasetError("paired_iterator needs non-empty source and target sets")
    n_iter = iterations_per_epoch(len(source_set), len(target_set), batch_size)
    streams = []
    for k, dataset in enumerate((source_set, target_set)):
        idx = _index_stream(len(dataset), n_iter * batch_size, seed, epoch, k)
        streams.append((dataset, idx))
    for it in range(n_iter):
        pair = []
        for k, (dataset, idx) in enumerate(streams):
            chosen = idx[it * batch_size:(it + 1) * batch_size]
            picked = [dataset[i] for i in chosen]
            if transform is not None:
                picked = [transform(s, np.random.default_rng([seed, epoch, k, it, j]))
                          for j, s in enumerate(picked)]
            pair.append(make_batch(picked))
        yield pair[0], pair[1]
