"""Hide-and-Seek grid masking, GoogLeNet-style resized cropping, and bilinear resampling.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1];
heatmaps are (H, W).  Every random operation takes a ``numpy`` Generator and
consumes draws in a fixed order, so a substream fully determines the output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

POLICIES = ("none", "hns", "gr", "gr_then_hns", "hns_then_gr")


@dataclass
class AugmentSpec:
    policy: str = "none"
    hns_grid_sizes: list = field(default_factory=lambda: [0, 4, 8, 16])
    hide_prob: float = 0.5
    # None = per-channel mean of the training set, resolved by the trainer
    fill_value: list | None = None
    area_range: list = field(default_factory=lambda: [0.08, 1.0])
    aspect_range: list = field(default_factory=lambda: [0.75, 1.3333])
    max_attempts: int = 10

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown augment policy {self.policy!r}; choose from {POLICIES}")
        if not self.hns_grid_sizes or any(int(g) < 0 for g in self.hns_grid_sizes):
            raise ValueError("hns_grid_sizes must be a non-empty list of non-negative ints")
        if not 0.0 <= self.hide_prob <= 1.0:
            raise ValueError("hide_prob must lie in [0, 1]")
        lo, hi = self.area_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("area_range must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.aspect_range
        if not 0 < lo <= 1 <= hi:
            raise ValueError("aspect_range must satisfy 0 < lo <= 1 <= hi")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.fill_value is not None and len(self.fill_value) != 3:
            raise ValueError("fill_value needs one value per channel")


def bilinear_resize(img, out_w, out_h):
    """Align-corners bilinear resampling of an (H, W) or (H, W, C) array.

    Output pixel i samples source coordinate i*(S-1)/(D-1) (0 when D == 1).
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    src_h, src_w = img.shape[:2]
    if (src_h, src_w) == (out_h, out_w):
        return img.copy()

    def axis_weights(src, dst):
        if dst == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(dst) * ((src - 1) / (dst - 1))
        i0 = np.minimum(np.floor(pos).astype(np.int64), src - 1)
        i1 = np.minimum(i0 + 1, src - 1)
        return i0, i1, pos - i0

    y0, y1, ty = axis_weights(src_h, out_h)
    x0, x1, tx = axis_weights(src_w, out_w)
    extra = (None,) * (img.ndim - 2)
    top, bot = img[y0], img[y1]
    ty = ty[(slice(None), None) + extra]
    rows = top + (bot - top) * ty
    left, right = rows[:, x0], rows[:, x1]
    tx = tx[(None, slice(None)) + extra]
    return left + (right - left) * tx


def hns_mask(img, grid_sizes, hide_prob, fill_value, rng):
    """Hide random square patches of a uniformly chosen size.

    Draw order: one integer picking the patch side g, then one uniform per
    patch in row-major order.  g == 0 leaves the image untouched.
    """
    h, w = img.shape[:2]
    for g in grid_sizes:
        if g > min(h, w):
            raise ValueError(f"grid size {g} exceeds image side {min(h, w)}")
    g = int(grid_sizes[rng.integers(len(grid_sizes))])
    out = np.array(img, dtype=np.float64, copy=True)
    if g == 0:
        return out
    ny, nx = -(-h // g), -(-w // g)
    hide = rng.random((ny, nx)) < hide_prob
    fill = np.asarray(fill_value, dtype=np.float64)
    for py, px in zip(*np.nonzero(hide)):
        out[py * g:(py + 1) * g, px * g:(px + 1) * g] = fill
    return out


def sample_crop_box(height, width, area_range, aspect_range, max_attempts, rng):
    """Pick a crop (x0, y0, cw, ch) for GoogLeNet-style resizing.

    The target area fraction is drawn once; each attempt draws a log-uniform
    aspect ratio and accepts the rounded box if it fits inside the image with
    a realized aspect still inside ``aspect_range``.  Accepted boxes draw the
    top-left corner uniformly.  If every attempt fails the centered largest
    square is returned without further draws.
    """
    total = height * width
    area = rng.uniform(area_range[0], area_range[1]) * total
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    for _ in range(max_attempts):
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(area * ratio)))
        ch = int(round(math.sqrt(area / ratio)))
        if 1 <= cw <= width and 1 <= ch <= height and aspect_range[0] <= cw / ch <= aspect_range[1]:
            x0 = int(rng.integers(0, width - cw + 1))
            y0 = int(rng.integers(0, height - ch + 1))
            return x0, y0, cw, ch
    side = min(height, width)
    return (width - side) // 2, (height - side) // 2, side, side


def gr_crop(img, area_range, aspect_range, out_w, out_h, max_attempts, rng):
    """Random crop followed by a bilinear resize to (out_w, out_h)."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be >= 1")
    h, w = img.shape[:2]
    x0, y0, cw, ch = sample_crop_box(h, w, area_range, aspect_range, max_attempts, rng)
    patch = np.asarray(img, dtype=np.float64)[y0:y0 + ch, x0:x0 + cw]
    # clip guards one-ulp overshoot of the interpolation
    return np.clip(bilinear_resize(patch, out_w, out_h), 0.0, 1.0)


def apply_policy(spec: AugmentSpec, img, rng, fill_value=None):
    """Apply ``spec.policy``; compositions run left to right on one stream."""
    fill = spec.fill_value if fill_value is None else fill_value
    h, w = img.shape[:2]

    def hns(x):
        if fill is None:
            raise ValueError("hns needs a fill_value; none was given or resolved")
        return hns_mask(x, spec.hns_grid_sizes, spec.hide_prob, fill, rng)

    def gr(x):
        return gr_crop(x, spec.area_range, spec.aspect_range, w, h, spec.max_attempts, rng)

    if spec.policy == "none":
        return np.array(img, dtype=np.float64, copy=True)
    if spec.policy == "hns":
        return hns(img)
    if spec.policy == "gr":
        return gr(img)
    if spec.policy == "gr_then_hns":
        return hns(gr(img))
    if spec.policy == "hns_then_gr":
        return gr(hns(img))
    raise ValueError(f"unknown augment policy {spec.policy!r}")
