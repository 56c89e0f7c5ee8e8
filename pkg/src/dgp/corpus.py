"""Procedural toy image corpus: coloured shapes on low-chroma textured backgrounds.

Each class is a (shape, base hue) pair. The object carries nearly all of the
image's chroma, so a class is identifiable from its mean hue, and colour is
predictable from the class label alone.
"""
from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError

SHAPES = ("circle", "square", "triangle", "diamond", "ring")


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_classes: int = 10
    images_per_class: int = 200
    resolution: int = 32
    seed: int = 7

    def validate(self):
        if self.n_classes < 2:
            raise ConfigurationError(f"corpus needs at least two classes, got {self.n_classes}")
        if self.images_per_class < 1:
            raise ConfigurationError("images_per_class must be >= 1")
        if self.resolution < 8:
            raise ConfigurationError(f"resolution too small: {self.resolution}")

    def class_definition(self, label: int) -> tuple[str, float]:
        return SHAPES[label % len(SHAPES)], label / self.n_classes


@dataclass
class ToyDataset:
    images: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64
    spec: ToyCorpusSpec

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]


def _shape_mask(shape: str, xs, ys, cx, cy, r, rot):
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(rot), np.sin(rot)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape == "circle":
        return u**2 + v**2 <= r**2
    if shape == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if shape == "ring":
        d2 = u**2 + v**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "triangle":
        # equilateral, circumradius r
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3 - np.pi / 2
            inside &= (u * np.cos(a) + v * np.sin(a)) <= 0.5 * r
        return inside
    raise ConfigurationError(f"unknown shape {shape!r}")


def render_image(rng: np.random.Generator, shape: str, hue: float, size: int) -> np.ndarray:
    """One (3, size, size) image in [0, 1]."""
    ss = 2  # supersampling for anti-aliased edges
    n = size * ss
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64) / ss / size

    base = rng.uniform(0.3, 0.7)
    gx, gy = rng.uniform(-0.2, 0.2, size=2)
    tint = rng.uniform(-0.03, 0.03, size=3)
    bg = base + gx * (xs - 0.5) + gy * (ys - 0.5)
    freq = rng.uniform(2, 5)
    phase = rng.uniform(0, 2 * np.pi)
    bg = bg + 0.06 * np.sin(2 * np.pi * freq * (xs + ys) + phase)
    img = np.stack([bg + t for t in tint])

    cx, cy = rng.uniform(0.35, 0.65, size=2)
    r = rng.uniform(0.2, 0.32)
    rot = rng.uniform(0, 2 * np.pi)
    inside = _shape_mask(shape, xs, ys, cx, cy, r, rot)

    h = (hue + rng.normal(0, 0.015)) % 1.0
    sat = rng.uniform(0.65, 0.9)
    val = rng.uniform(0.65, 0.95)
    rgb = np.array(colorsys.hsv_to_rgb(h, sat, val))
    shade = 1.0 - 0.25 * ((xs - cx) * np.cos(rot) + (ys - cy) * np.sin(rot)) / r
    obj = rgb[:, None, None] * np.clip(shade, 0.7, 1.2)[None]
    img = np.where(inside[None], obj, img)

    img = img.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    img = img + rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_corpus(spec: ToyCorpusSpec = ToyCorpusSpec(), resolution: int | None = None) -> ToyDataset:
    """Render the corpus; identical output for identical spec.

    ``resolution``, when given, is the architecture resolution the corpus must match.
    """
    spec.validate()
    if resolution is not None and resolution != spec.resolution:
        raise ConfigurationError(
            f"corpus resolution {spec.resolution} does not match architecture resolution {resolution}"
        )
    images, labels = [], []
    for label in range(spec.n_classes):
        shape, hue = spec.class_definition(label)
        rng = np.random.default_rng([spec.seed, label])
        for _ in range(spec.images_per_class):
            images.append(render_image(rng, shape, hue, spec.resolution))
            labels.append(label)
    # interleave classes so any prefix is roughly balanced
    order = np.argsort(np.tile(np.arange(spec.images_per_class), spec.n_classes), kind="stable")
    imgs = torch.from_numpy(np.stack(images)[order])
    labs = torch.tensor(labels, dtype=torch.long)[order]
    return ToyDataset(imgs, labs, spec)


def class_hue_signatures(dataset: ToyDataset) -> torch.Tensor:
    """Hue angle of the mean chroma vector of each class, shape (C,)."""
    from .color import mean_ab

    ab = mean_ab(dataset.images.double())
    C = dataset.spec.n_classes
    sig = torch.stack([ab[dataset.labels == c].mean(dim=0) for c in range(C)])
    return torch.atan2(sig[:, 1], sig[:, 0])


def save_corpus(dataset: ToyDataset, directory) -> Path:
    """Write ``NNNNN.png`` files plus ``labels.csv`` (filename,label)."""
    from .imageio import write_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "label"])
        for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
            name = f"{i:05d}.png"
            write_png(img, directory / name)
            w.writerow([name, int(lab)])
    return directory


def load_corpus(directory, spec: ToyCorpusSpec | None = None) -> ToyDataset:
    from .imageio import read_png

    directory = Path(directory)
    images, labels = [], []
    with open(directory / "labels.csv", newline="") as f:
        for row in csv.DictReader(f):
            images.append(read_png(directory / row["filename"]))
            labels.append(int(row["label"]))
    imgs = torch.stack(images)
    if spec is None:
        spec = ToyCorpusSpec(max(labels) + 1, len(labels) // (max(labels) + 1), imgs.shape[-1], -1)
    return ToyDataset(imgs, torch.tensor(labels), spec)
