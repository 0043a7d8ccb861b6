"""Class activation maps and heatmap-to-box conversion."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .augment import bilinear_resize
from .boxes import BBox
from .model import Network, forward

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def compute_cam(features, class_weights):
    """Weighted channel sum of a [K, h, w] feature stack."""
    features = np.asarray(features, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if features.ndim != 3 or class_weights.shape != (features.shape[0],):
        raise ValueError(f"compute_cam: {class_weights.shape} weights for features {features.shape}")
    return np.tensordot(class_weights, features, axes=1)


def normalize(heatmap):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = heatmap.min(), heatmap.max()
    if hi <= lo:
        return np.zeros_like(heatmap)
    return (heatmap - lo) / (hi - lo)


def largest_component_box(binary, connectivity=8):
    """Tight box of the largest connected foreground component.

    Ties go to the smallest (y_min, x_min).  Returns None on an empty map.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    labels, count = ndimage.label(binary, structure=_STRUCTURES[connectivity])
    if count == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    slices = ndimage.find_objects(labels)
    best = None
    for lab, (sy, sx) in enumerate(slices, start=1):
        key = (-int(sizes[lab - 1]), sy.start, sx.start)
        if best is None or key < best[0]:
            best = (key, BBox(sx.start, sy.start, sx.stop, sy.stop))
    return best[1]


def localize(heatmap, input_side, threshold_frac=0.2, connectivity=8):
    """Upsample, normalize, threshold and box the dominant blob."""
    if not 0 < threshold_frac < 1:
        raise ValueError("threshold_frac must lie in (0, 1)")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.max() <= heatmap.min():
        return BBox.full(input_side, input_side)
    up = normalize(bilinear_resize(heatmap, input_side, input_side))
    box = largest_component_box(up >= threshold_frac, connectivity)
    return box if box is not None else BBox.full(input_side, input_side)


def predict_and_localize(net: Network, image, target_class=None, threshold_frac=0.2,
                         connectivity=8):
    """Eval-mode forward on one (H, W, 3) image.

    The CAM uses ``target_class`` when given (GT-known path), otherwise the
    predicted class.  Returns (predicted_class, bbox, heatmap).
    """
    num_classes = net.config.num_classes
    if target_class is not None and not 0 <= target_class < num_classes:
        raise ValueError(f"target_class {target_class} outside [0, {num_classes})")
    batch = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]
    logits, feats = forward(net, batch, "eval")
    pred = int(np.argmax(logits[0]))
    cls = pred if target_class is None else int(target_class)
    heat = compute_cam(feats[0], net.classifier_w[:, cls])
    return pred, localize(heat, net.config.input_side, threshold_frac, connectivity), heat
