"""Seeded procedural image-classification data.

Each class is a parametric pattern family (stripes, disks, rings, checkers,
...) drawn in a class-dependent colour palette, with random placement,
phase, scale and additive Gaussian noise. Generation only uses numpy's
PCG64 generator, so the same arguments give identical arrays everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container

FAMILIES = ("hstripes", "vstripes", "disk", "ring", "checker", "diagonal")
# Foreground colour centres; classes sharing a pattern differ by palette.
PALETTES = np.array([[0.9, 0.35, 0.15], [0.15, 0.45, 0.9], [0.3, 0.85, 0.25]])
MIN_IMAGE_SIZE = 8


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    class_count: int
    seed: int

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.class_count, self.seed)


def _pattern(family, rng, yy, xx, freq):
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    if family == "hstripes":
        return np.sin(2 * np.pi * freq * yy + phase) > 0
    if family == "vstripes":
        return np.sin(2 * np.pi * freq * xx + phase) > 0
    if family == "diagonal":
        return np.sin(2 * np.pi * freq * (xx + yy) / np.sqrt(2) + phase) > 0
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if family == "disk":
        return d < rng.uniform(0.18, 0.3)
    if family == "ring":
        r = rng.uniform(0.2, 0.3)
        return np.abs(d - r) < 0.06
    if family == "checker":
        return np.sin(2 * np.pi * freq * (xx - cx)) * np.sin(2 * np.pi * freq * (yy - cy)) > 0
    raise ValueError(family)


def class_recipe(k: int):
    """(pattern family, palette index, base frequency) for class ``k``."""
    family = FAMILIES[k % len(FAMILIES)]
    palette = (k // len(FAMILIES)) % len(PALETTES)
    freq = 2.0 + (k // (len(FAMILIES) * len(PALETTES)))
    return family, palette, freq


def render(k: int, rng: np.random.Generator, image_size: int, channels: int = 3,
           noise: float = 0.2) -> np.ndarray:
    family, palette, freq = class_recipe(k)
    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = _pattern(family, rng, yy, xx, freq * rng.uniform(0.85, 1.15))
    fg = np.resize(PALETTES[palette], channels) + rng.normal(0, 0.08, channels)
    bg = rng.uniform(0.2, 0.55) + rng.normal(0, 0.05, channels)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0, noise, img.shape)
    return img - 0.5


def generate(seed: int, n_samples: int, class_count: int, image_size: int = 32,
             channels: int = 3) -> Dataset:
    if class_count < 2 or n_samples < class_count:
        raise ValueError("need n_samples >= class_count >= 2")
    if image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image_size must be >= {MIN_IMAGE_SIZE} for the pattern families")
    rng = np.random.default_rng([seed, n_samples, class_count, image_size])
    labels = rng.permutation(np.arange(n_samples) % class_count).astype(np.int64)
    images = np.stack([render(int(k), rng, image_size, channels) for k in labels])
    return Dataset(images, labels, class_count, seed)


def train_test_split(dataset: Dataset, test_fraction: float = 0.2):
    """Fixed seeded split; 80/20 by default."""
    n = len(dataset)
    perm = np.random.default_rng([dataset.seed, n, 8020]).permutation(n)
    n_test = int(round(n * test_fraction))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def batches(dataset: Dataset, batch_size: int, seed: int):
    """Seeded permutation of ``dataset`` cut into batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return [
        (dataset.images[perm[i : i + batch_size]], dataset.labels[perm[i : i + batch_size]])
        for i in range(0, len(dataset), batch_size)
    ]


def save(dataset: Dataset, path):
    rec = container.Record("dataset", {}, {"images": dataset.images,
                                           "labels": dataset.labels.astype(np.float64)})
    meta = {"class_count": dataset.class_count, "seed": dataset.seed}
    with open(path, "wb") as f:
        f.write(container.dumps(b"SWDS", meta, [rec]))


def load(path) -> Dataset:
    with open(path, "rb") as f:
        meta, records = container.loads(f.read(), b"SWDS")
    t = records[0].tensors
    return Dataset(t["images"], t["labels"].astype(np.int64), meta["class_count"], meta["seed"])
