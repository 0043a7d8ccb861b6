"""Synthetic localization dataset and CSV manifest I/O."""
from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .boxes import BBox
from .ppm import CodecError, read_ppm, write_ppm

SHAPES = ("disk", "triangle", "cross", "diamond", "ring", "square")
MANIFEST_FIELDS = ["filename", "label", "x_min", "y_min", "x_max", "y_max"]


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    gt_box: BBox
    mask: np.ndarray | None = None  # shape pixels; only set by the generator


def class_names(num_classes):
    return [f"{SHAPES[c % len(SHAPES)]}_h{c:02d}" for c in range(num_classes)]


def class_color(c, num_classes):
    return np.array(colorsys.hsv_to_rgb(c / num_classes, 0.85, 0.95))


def shape_mask(shape, size):
    """Boolean (size, size) mask of ``shape`` inscribed in the square."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = size / 2.0
    dx, dy = xx - c, yy - c
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if shape == "triangle":
        return np.abs(dx) <= (yy + 0.5) / size * r
    if shape == "cross":
        arm = max(size / 6.0, 0.5)
        return (np.abs(dx) <= arm) | (np.abs(dy) <= arm)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    raise ValueError(f"unknown shape {shape!r}")


def tight_box(mask):
    ys, xs = np.nonzero(mask)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def render_sample(label, num_classes, side, rng):
    """Draw one image: noisy background, distractor stripes, one class shape.

    The shape body carries the class hue at full strength only on a random
    half (the discriminative part); the other half is a faded version, so the
    full extent of the object is only weakly signalled.  Returns
    (image, shape_mask).
    """
    base = rng.uniform(0.3, 0.6)
    img = base + rng.normal(0.0, 0.06, size=(side, side, 3))
    # distractor: striped patch in a random hue
    ds = max(3, int(round(rng.uniform(0.2, 0.3) * side)))
    dx0, dy0 = rng.integers(0, side - ds + 1, size=2)
    stripe_color = np.array(colorsys.hsv_to_rgb(rng.uniform(), 0.5, 0.8))
    period = int(rng.integers(2, 4))
    rows = (np.arange(ds) // period) % 2 == 0
    patch = img[dy0:dy0 + ds, dx0:dx0 + ds]
    patch[rows] = 0.5 * patch[rows] + 0.5 * stripe_color
    # object
    size = max(3, int(round(rng.uniform(0.2, 0.6) * side)))
    x0, y0 = rng.integers(0, side - size + 1, size=2)
    local = shape_mask(SHAPES[label % len(SHAPES)], size)
    color = class_color(label, num_classes)
    faded = 0.55 * color + 0.45 * base
    yy, xx = np.mgrid[0:size, 0:size]
    orient = int(rng.integers(4))
    half = (xx < size / 2, xx >= size / 2, yy < size / 2, yy >= size / 2)[orient]
    shade = np.where(half[..., None], color, faded)
    shade = shade + rng.normal(0.0, 0.03, size=shade.shape)
    region = img[y0:y0 + size, x0:x0 + size]
    region[local] = shade[local]
    mask = np.zeros((side, side), dtype=bool)
    mask[y0:y0 + size, x0:x0 + size] = local
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, mask


def generate_synthetic(num_classes=4, per_class_train=100, per_class_test=25, side=32, seed=0):
    """Balanced train/test splits; each sample comes from its own substream."""
    if side < 16:
        raise ValueError("side must be >= 16")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class_train < 0 or per_class_test < 0:
        raise ValueError("per-class counts must be non-negative")
    splits = []
    for purpose, count in ((rngmod.DATA_TRAIN, per_class_train), (rngmod.DATA_TEST, per_class_test)):
        samples = []
        for i in range(count):
            for c in range(num_classes):
                img, mask = render_sample(c, num_classes, side, rngmod.substream(seed, purpose, c, i))
                samples.append(Sample(img, c, tight_box(mask), mask))
        splits.append(samples)
    return splits[0], splits[1], class_names(num_classes)


def save_dataset(samples, root, names):
    """Write images as P6 files plus ``manifest.csv`` and ``classes.txt``."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    manifest = os.path.join(root, "manifest.csv")
    with open(os.path.join(root, "classes.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{n}\n" for n in names)
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for i, s in enumerate(samples):
            fname = f"images/{i:06d}.ppm"
            write_ppm(s.image, os.path.join(root, fname))
            writer.writerow([fname, s.label, *s.gt_box.as_tuple()])
    return manifest


def load_class_names(manifest_path):
    path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "classes.txt")
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def load_dataset(manifest_path):
    """Read a manifest and every referenced image; all-or-nothing."""
    if not os.path.exists(manifest_path):
        raise DatasetError(f"{manifest_path}: manifest not found")
    root = os.path.dirname(os.path.abspath(manifest_path))
    names = load_class_names(manifest_path)
    samples = []
    seen = set()
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_FIELDS:
            raise DatasetError(f"{manifest_path}:1: expected header {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{manifest_path}:{lineno}"
            if len(row) != len(MANIFEST_FIELDS):
                raise DatasetError(f"{where}: expected 6 fields, got {len(row)}")
            fname = row[0]
            if fname in seen:
                raise DatasetError(f"{where}: duplicate filename {fname}")
            seen.add(fname)
            try:
                label, x0, y0, x1, y1 = (int(v) for v in row[1:])
            except ValueError:
                raise DatasetError(f"{where}: label and box fields must be integers") from None
            if label < 0 or (names is not None and label >= len(names)):
                raise DatasetError(f"{where}: label {label} out of range")
            try:
                box = BBox(x0, y0, x1, y1)
            except ValueError as exc:
                raise DatasetError(f"{where}: {exc}") from None
            path = os.path.join(root, fname)
            if not os.path.exists(path):
                raise DatasetError(f"{where}: missing image {fname}")
            try:
                img = read_ppm(path)
            except CodecError as exc:
                raise DatasetError(f"{where}: {fname}: {exc}") from None
            if not box.fits(img.shape[1], img.shape[0]):
                raise DatasetError(f"{where}: box exceeds image bounds {img.shape[1]}x{img.shape[0]}")
            samples.append(Sample(img, label, box))
    return samples
