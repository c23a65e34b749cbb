"""Dataset ingestion, augmentation, test-mixture assembly, statistics, and a
synthetic blob generator standing in for clinical corpora.

Disk layout: ``<root>/images/*.png|pgm`` and ``<root>/masks/*.png|pgm`` with
matching stems, 8-bit grayscale; an optional ``manifest.txt`` with one
``stem,source,volume_id`` line per sample. Without a manifest entry the
source defaults to "unknown" and the volume id to the stem prefix before the
last underscore.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .util import child_rng

IMAGE_EXTENSIONS = (".png", ".pgm")
MASK_THRESHOLD = 128  # 8-bit masks are tool exports; >= 128 means foreground


@dataclass
class Sample:
    image: np.ndarray  # (h, w) float64 in [0, 1]
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    source: str = "unknown"
    volume_id: str = ""

    def validate(self) -> None:
        if self.image.shape != self.mask.shape:
            raise DataError(
                f"sample image/mask shapes differ: {self.image.shape} vs {self.mask.shape}"
            )
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DataError("sample image values must lie in [0, 1]")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError("sample mask must be binary")


def volume_from_stem(stem: str) -> str:
    """Volume grouping rule: the filename prefix before the last underscore."""
    if "_" in stem:
        return stem.rsplit("_", 1)[0]
    return stem


def _read_gray(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc


def load_dataset(root: str, manifest: Optional[str] = None) -> List[Sample]:
    """Load image/mask pairs under ``root`` in deterministic stem order."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise DataError(f"dataset root {root} must contain images/ and masks/")

    manifest_path = manifest or os.path.join(root, "manifest.txt")
    tags: Dict[str, Tuple[str, str]] = {}
    if os.path.isfile(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise DataError(
                        f"{manifest_path}:{line_no}: expected 'stem,source,volume_id'"
                    )
                tags[parts[0]] = (parts[1], parts[2])
    elif manifest is not None:
        raise DataError(f"manifest file not found: {manifest}")

    samples = []
    for fname in sorted(os.listdir(img_dir)):
        stem, ext = os.path.splitext(fname)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        mask_path = None
        for mext in IMAGE_EXTENSIONS:
            candidate = os.path.join(mask_dir, stem + mext)
            if os.path.isfile(candidate):
                mask_path = candidate
                break
        if mask_path is None:
            raise DataError(f"image {stem!r} has no matching mask file")
        image = _read_gray(os.path.join(img_dir, fname)) / 255.0
        mask = (_read_gray(mask_path) >= MASK_THRESHOLD).astype(np.uint8)
        if image.shape != mask.shape:
            raise DataError(
                f"{stem!r}: image shape {image.shape} != mask shape {mask.shape}"
            )
        source, volume = tags.get(stem, ("unknown", volume_from_stem(stem)))
        samples.append(Sample(image=image, mask=mask, source=source, volume_id=volume))
    return samples


def save_dataset(samples: Sequence[Sample], root: str, stems: Optional[List[str]] = None) -> None:
    """Write samples in the standard layout (8-bit PNGs plus manifest)."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    if stems is None:
        stems = [f"{s.volume_id or 'sample'}_{i:05d}" for i, s in enumerate(samples)]
    lines = []
    for stem, s in zip(stems, samples):
        s.validate()
        Image.fromarray(np.round(s.image * 255.0).astype(np.uint8), mode="L").save(
            os.path.join(img_dir, stem + ".png")
        )
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(
            os.path.join(mask_dir, stem + ".png")
        )
        lines.append(f"{stem},{s.source},{s.volume_id}")
    with open(os.path.join(root, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(sorted(lines)) + "\n")


def crop_to_size(sample: Sample, size: Tuple[int, int], anchor="center") -> Sample:
    """Crop image and mask with one transform; anchor is 'center' or (top, left)."""
    th, tw = size
    h, w = sample.image.shape
    if th > h or tw > w:
        raise DataError(f"crop target {size} exceeds source {(h, w)}")
    if anchor == "center":
        top, left = (h - th) // 2, (w - tw) // 2
    else:
        top, left = anchor
        if top < 0 or left < 0 or top + th > h or left + tw > w:
            raise DataError(f"crop offset {anchor} with size {size} leaves source {(h, w)}")
    return replace(
        sample,
        image=np.ascontiguousarray(sample.image[top : top + th, left : left + tw]),
        mask=np.ascontiguousarray(sample.mask[top : top + th, left : left + tw]),
    )


@dataclass
class ComboSpec:
    """Per-source mixing proportions for assembling a test set."""

    proportions: Dict[str, float]
    total: int

    def validate(self) -> None:
        if self.total < 0:
            raise ConfigError(f"combo total must be >= 0, got {self.total}")
        if any(p < 0 for p in self.proportions.values()):
            raise ConfigError("combo proportions must be non-negative")
        s = sum(self.proportions.values())
        if abs(s - 1.0) > 1e-9:
            raise ConfigError(f"combo proportions must sum to 1, got {s}")


def largest_remainder_counts(proportions: Dict[str, float], total: int) -> Dict[str, int]:
    """Integer quotas hitting ``total`` exactly; remainders break ties by the
    larger fractional part, then source name."""
    quotas = {s: p * total for s, p in proportions.items()}
    counts = {s: int(np.floor(q)) for s, q in quotas.items()}
    remaining = total - sum(counts.values())
    order = sorted(proportions, key=lambda s: (-(quotas[s] - counts[s]), s))
    for s in order[:remaining]:
        counts[s] += 1
    return counts


def make_combo(
    pools: Dict[str, Sequence[Sample]],
    spec: ComboSpec,
    seed: int = 0,
    exclude: Optional[Dict[str, Set[int]]] = None,
) -> List[Sample]:
    """Draw a mixture without replacement, disjoint from ``exclude`` indices."""
    spec.validate()
    exclude = exclude or {}
    counts = largest_remainder_counts(spec.proportions, spec.total)
    out: List[Sample] = []
    for source in sorted(counts):
        count = counts[source]
        if count == 0:
            continue
        pool = pools.get(source, [])
        banned = exclude.get(source, set())
        available = [i for i in range(len(pool)) if i not in banned]
        if len(available) < count:
            raise DataError(
                f"combo needs {count} samples from source {source!r}, "
                f"only {len(available)} available"
            )
        rng = child_rng(seed, "combo", source)
        picks = rng.choice(len(available), size=count, replace=False)
        out.extend(pool[available[int(i)]] for i in np.sort(picks))
    return out


@dataclass
class AugmentSpec:
    """Per-transform probabilities and parameters; 0 disables a transform.

    Geometric transforms (crop, affine, flips) apply identically to image and
    mask with nearest-neighbor mask resampling; photometric ones (noise,
    blur, brightness, contrast) touch only the image.
    """

    hflip: float = 0.0
    vflip: float = 0.0
    crop: float = 0.0
    crop_scale: Tuple[float, float] = (0.8, 1.0)
    affine: float = 0.0
    rotate_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    noise: float = 0.0
    noise_sigma: float = 0.05
    blur: float = 0.0
    blur_sigma: float = 1.0
    brightness: float = 0.0
    brightness_delta: float = 0.1
    contrast: float = 0.0
    contrast_range: Tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def validate(self) -> None:
        for name in ("hflip", "vflip", "crop", "affine", "noise", "blur", "brightness", "contrast"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augment probability {name} must be in [0, 1], got {p}")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi")

    def any_enabled(self) -> bool:
        return any(
            getattr(self, name) > 0
            for name in (
                "hflip", "vflip", "crop", "affine", "noise", "blur", "brightness", "contrast",
            )
        )


def _affine_pair(
    image: np.ndarray, mask: np.ndarray, matrix: np.ndarray, offset: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    new_img = ndimage.affine_transform(
        image, matrix, offset=offset, output_shape=image.shape, order=1, mode="nearest"
    )
    new_mask = ndimage.affine_transform(
        mask, matrix, offset=offset, output_shape=mask.shape, order=0, mode="nearest"
    )
    return new_img, new_mask.astype(np.uint8)


def augment(sample: Sample, spec: AugmentSpec, rng) -> Sample:
    """Apply each enabled transform with its probability, deterministically
    under the given generator (or integer seed)."""
    spec.validate()
    gen = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    image = np.array(sample.image, copy=True)
    mask = np.array(sample.mask, copy=True)
    h, w = image.shape

    if spec.crop > 0 and gen.random() < spec.crop:
        scale = gen.uniform(*spec.crop_scale)
        ch, cw = max(2, int(round(h * scale))), max(2, int(round(w * scale)))
        top = int(gen.integers(0, h - ch + 1))
        left = int(gen.integers(0, w - cw + 1))
        matrix = np.diag([ch / h, cw / w])
        offset = np.array([top, left], dtype=np.float64)
        image, mask = _affine_pair(image, mask, matrix, offset)

    if spec.affine > 0 and gen.random() < spec.affine:
        theta = np.deg2rad(gen.uniform(-spec.rotate_deg, spec.rotate_deg))
        scale = gen.uniform(*spec.scale_range)
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        ) / scale
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - rot @ center
        image, mask = _affine_pair(image, mask, rot, offset)

    if spec.hflip > 0 and gen.random() < spec.hflip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    if spec.vflip > 0 and gen.random() < spec.vflip:
        image = image[::-1, :]
        mask = mask[::-1, :]
    if spec.noise > 0 and gen.random() < spec.noise:
        image = image + gen.normal(0.0, spec.noise_sigma, image.shape)
    if spec.blur > 0 and gen.random() < spec.blur:
        image = ndimage.gaussian_filter(image, spec.blur_sigma)
    if spec.brightness > 0 and gen.random() < spec.brightness:
        image = image + gen.uniform(-spec.brightness_delta, spec.brightness_delta)
    if spec.contrast > 0 and gen.random() < spec.contrast:
        factor = gen.uniform(*spec.contrast_range)
        mean = image.mean()
        image = (image - mean) * factor + mean

    return replace(
        sample,
        image=np.ascontiguousarray(np.clip(image, 0.0, 1.0)),
        mask=np.ascontiguousarray(mask),
    )


def dataset_stats(samples: Sequence[Sample]) -> Tuple[float, float]:
    """Population mean and standard deviation over all image pixels."""
    if not samples:
        raise DataError("dataset_stats: empty sample list")
    total = 0.0
    total_sq = 0.0
    count = 0
    for s in samples:
        total += float(s.image.sum())
        total_sq += float((s.image**2).sum())
        count += s.image.size
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return mean, float(np.sqrt(var))


def synth_blobs(
    count: int,
    size: int,
    seed: int = 0,
    blob_count: Tuple[int, int] = (1, 4),
    radius_frac: Tuple[float, float] = (0.08, 0.18),
    intensity: Tuple[float, float] = (0.55, 0.9),
    background: Tuple[float, float] = (0.15, 0.3),
    texture_sigma: float = 0.02,
    noise_sigma: float = 0.015,
    tiny_prob: float = 0.25,
    tiny_radius_frac: Tuple[float, float] = (0.03, 0.05),
    tiny_contrast: float = 0.15,
    samples_per_volume: int = 8,
) -> List[Sample]:
    """Deterministic synthetic dataset: soft-edged bright elliptical blobs
    over textured background, plus occasional small low-contrast blobs; masks
    mark every blob interior and keep foreground fraction inside (0, 0.5)."""
    if size < 4:
        raise ConfigError(f"synth_blobs: size must be >= 4, got {size}")
    samples = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(count):
        rng = child_rng(seed, "synth", i)
        for _attempt in range(50):
            image, mask = _render_blobs(
                rng, size, yy, xx, blob_count, radius_frac, intensity, background,
                texture_sigma, noise_sigma, tiny_prob, tiny_radius_frac, tiny_contrast,
            )
            frac = mask.mean()
            if 0.0 < frac < 0.5:
                break
        else:
            raise DataError("synth_blobs: could not satisfy foreground fraction bound")
        samples.append(
            Sample(
                image=image,
                mask=mask,
                source="synthetic",
                volume_id=f"vol{i // samples_per_volume:04d}",
            )
        )
    return samples


def _render_blobs(
    rng, size, yy, xx, blob_count, radius_frac, intensity, background,
    texture_sigma, noise_sigma, tiny_prob, tiny_radius_frac, tiny_contrast,
):
    base = rng.uniform(*background)
    image = base + ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 3.0) * (
        texture_sigma / 0.1
    )
    mask = np.zeros((size, size), dtype=np.uint8)

    def add_blob(r_lo, r_hi, amp):
        cy = rng.uniform(0.2, 0.8) * size
        cx = rng.uniform(0.2, 0.8) * size
        ry = max(rng.uniform(r_lo, r_hi) * size, 2.0)
        rx = max(rng.uniform(r_lo, r_hi) * size, 2.0)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        dist = np.sqrt((u / ry) ** 2 + (v / rx) ** 2)
        profile = np.clip((1.25 - dist) / 0.25, 0.0, 1.0)
        np.maximum(image, base + amp * profile, out=image)
        mask[dist <= 1.0] = 1

    n_blobs = int(rng.integers(blob_count[0], blob_count[1] + 1))
    for _ in range(n_blobs):
        add_blob(radius_frac[0], radius_frac[1], rng.uniform(*intensity) - base)
    if rng.random() < tiny_prob:
        for _ in range(int(rng.integers(1, 3))):
            add_blob(tiny_radius_frac[0], tiny_radius_frac[1], tiny_contrast)

    if noise_sigma > 0:
        image = image + rng.normal(0.0, noise_sigma, (size, size))
    return np.clip(image, 0.0, 1.0), mask
