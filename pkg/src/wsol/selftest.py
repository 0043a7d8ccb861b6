"""Executable oracle and invariant checks behind ``wsol selftest``."""
from __future__ import annotations

import math
import sys
import time
from collections import deque

import numpy as np

from . import tensor as T
from .augment import AugmentSpec, apply_policy, bilinear_resize, hns_mask, sample_crop_box
from .boxes import BBox, iou
from .cam import compute_cam, largest_component_box
from .evaluation import SampleResult, evaluate
from .model import ModelConfig, backprop, build_network, forward
from .ppm import decode_ppm, encode_ppm
from .rng import substream
from .train import TrainConfig, lr_at_epoch, nesterov_step, OptimizerState

CHECKS = []


def check(slow=False):
    def deco(fn):
        CHECKS.append((fn, slow))
        return fn
    return deco


def _close(a, b, tol, what):
    if not np.allclose(a, b, rtol=0, atol=tol):
        raise AssertionError(f"{what}: {a} != {b}")


@check()
def conv_hand_example():
    y, _ = T.conv2d(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3), np.ones((1, 1, 2, 2)))
    _close(y[0, 0], [[12, 16], [24, 28]], 0, "conv2d")


@check()
def batchnorm_hand_example():
    p = T.BatchNormParams(np.array([2.0]), np.array([1.0]), np.zeros(1), np.ones(1))
    y, _ = T.batch_norm(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), p, "train")
    _close(y.ravel(), [-1, 3], 1e-4, "batch_norm")


@check()
def cross_entropy_values():
    loss, _ = T.softmax_cross_entropy(np.zeros((1, 4)), [0])
    _close(loss, math.log(4), 1e-12, "uniform logits")
    loss, _ = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    _close(loss, 0.0, 1e-12, "large logit")


def _fd_network_check(seed):
    cfg = ModelConfig("toy10", 3, 8, stage_widths=(3, 4), blocks_per_stage=(1, 1))
    net = build_network(cfg, seed)
    rng = np.random.default_rng(seed)
    for p in net.params.values():
        p += 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((4, 3, 8, 8))
    labels = rng.integers(0, 3, 4)
    _, _, grads = backprop(net, x, labels)

    def probe():
        logits = forward(net, x, "train", keep_cache=True)[0]
        masks = _relu_masks(net)
        net.cache = None
        return T.softmax_cross_entropy(logits, labels)[0], masks

    # coordinates whose perturbation flips a ReLU straddle a kink; skip them
    worst, used, total = 0.0, 0, 0
    for name, p in net.params.items():
        num = np.full(p.shape, np.nan)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + 1e-4
            fp, mp = probe()
            flat[i] = old - 1e-4
            fm, mm = probe()
            flat[i] = old
            if np.array_equal(mp, mm):
                nflat[i] = (fp - fm) / 2e-4
        ok = ~np.isnan(num)
        used, total = used + ok.sum(), total + ok.size
        a, b = num[ok], grads[name][ok]
        if a.size:
            worst = max(worst, np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))
    if used < 0.6 * total:
        raise AssertionError(f"only {used}/{total} coordinates away from ReLU kinks")
    if worst > 1e-3:
        raise AssertionError(f"finite-difference mismatch, relative error {worst:.2e}")


def _relu_masks(net):
    masks = []
    for cache in net.cache[1:-1]:
        masks += [cache[1].ravel(), cache[5].ravel()]
    masks.append(net.cache[-1][1].ravel())
    return np.concatenate(masks)


@check(slow=True)
def network_gradients_match_finite_differences():
    for seed in range(5):
        _fd_network_check(seed)


@check()
def cam_gap_identity():
    for seed in range(10):
        net = build_network(ModelConfig("toy10", 4, 16), seed)
        rng = np.random.default_rng(seed)
        net.params["fc.b"][...] = rng.standard_normal(4)
        logits, feats = forward(net, rng.random((2, 3, 16, 16)), "eval")
        for n in range(2):
            for c in range(4):
                cam = compute_cam(feats[n], net.classifier_w[:, c])
                _close(cam.mean() + net.classifier_b[c], logits[n, c], 1e-9, "CAM/GAP identity")


def _flood_fill_box(binary, connectivity):
    h, w = binary.shape
    seen = np.zeros_like(binary)
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    best = None
    for y in range(h):
        for x in range(w):
            if not binary[y, x] or seen[y, x]:
                continue
            seen[y, x] = True
            queue, pix = deque([(y, x)]), []
            while queue:
                cy, cx = queue.popleft()
                pix.append((cy, cx))
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            ys, xs = zip(*pix)
            key = (-len(pix), min(ys), min(xs))
            if best is None or key < best[0]:
                best = (key, BBox(min(xs), min(ys), max(xs) + 1, max(ys) + 1))
    return None if best is None else best[1]


@check()
def component_boxes_match_flood_fill():
    rng = np.random.default_rng(0)
    for _ in range(100):
        binary = rng.random((16, 16)) < rng.uniform(0.1, 0.6)
        for conn in (4, 8):
            if largest_component_box(binary, conn) != _flood_fill_box(binary, conn):
                raise AssertionError("component labeling disagrees with flood fill")


@check()
def metric_hand_fixture():
    box = BBox(0, 0, 4, 4)
    # (true, predicted, iou on both paths)
    rows = [(0, 0, 0.6), (1, 1, 0.4), (0, 1, 0.9), (1, 0, 0.1)]
    results = [SampleResult(i, t, p, box, box, v, v) for i, (t, p, v) in enumerate(rows)]
    if evaluate(results).as_tuple() != (50.0, 25.0, 50.0):
        raise AssertionError(f"hand fixture gave {evaluate(results).as_tuple()}")
    _close(iou(BBox(0, 0, 10, 10), BBox(5, 5, 15, 15)), 25 / 175, 1e-12, "iou")


@check()
def lr_schedule():
    cfg = TrainConfig(epochs=1500)
    got = (lr_at_epoch(cfg, 0), lr_at_epoch(cfg, 249), lr_at_epoch(cfg, 250), lr_at_epoch(cfg, 1250))
    if got != (0.1, 0.1, 0.01, 1e-6):
        raise AssertionError(f"schedule gave {got}")


@check()
def nesterov_two_steps():
    theta = {"p": np.array([1.0])}
    state = OptimizerState(theta)
    seen = []
    for _ in range(2):
        nesterov_step(theta, {"p": np.array([1.0])}, state, 0.1, 0.9, 0.0)
        seen.append(theta["p"][0])
    _close(seen, [0.81, 0.539], 1e-12, "nesterov")


@check()
def augmentation_statistics():
    areas = []
    for i in range(4000):
        _, _, cw, ch = sample_crop_box(64, 64, (0.08, 1.0), (0.75, 4 / 3), 10, substream(0, 9, 0, i))
        areas.append(cw * ch / 4096)
    if min(areas) < 0.076 or abs(np.mean(areas) - 0.54) > 0.03:
        raise AssertionError(f"GR areas: min {min(areas):.3f}, mean {np.mean(areas):.3f}")
    img = np.full((64, 64, 3), 0.5)
    hidden = [np.mean(hns_mask(img, [8], 0.5, (0, 0, 0), substream(0, 9, 1, i))[..., 0] == 0)
              for i in range(2000)]
    if abs(np.mean(hidden) - 0.5) > 0.02:
        raise AssertionError(f"HnS hidden fraction {np.mean(hidden):.3f}")


@check()
def augmentation_determinism():
    img = np.random.default_rng(0).random((32, 32, 3))
    for policy in ("hns", "gr", "gr_then_hns", "hns_then_gr"):
        spec = AugmentSpec(policy=policy, fill_value=[0.5, 0.5, 0.5])
        a = apply_policy(spec, img, substream(1, 1, 2, 3))
        b = apply_policy(spec, img, substream(1, 1, 2, 3))
        if not np.array_equal(a, b):
            raise AssertionError(f"{policy} is not deterministic")


@check()
def bilinear_hand_example():
    out = bilinear_resize(np.array([[0.0, 1.0], [2.0, 3.0]]), 3, 3)
    _close(out, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]], 1e-12, "bilinear")


@check()
def ppm_codec():
    img = decode_ppm(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    _close(img.reshape(-1), [1, 0, 0, 0, 0, 1], 0, "P6 decode")
    rand = np.random.default_rng(0).random((5, 4, 3))
    _close(decode_ppm(encode_ppm(rand)), rand, 1 / 510 + 1e-12, "P6 round trip")


def run_all(quick=False, stream=sys.stdout):
    failures = ran = 0
    for fn, slow in CHECKS:
        if quick and slow:
            continue
        ran += 1
        t0 = time.perf_counter()
        try:
            fn()
            status = "PASS"
        except Exception as exc:  # report every failure, keep going
            status = f"FAIL ({exc})"
            failures += 1
        print(f"{status[:4]}  {fn.__name__}  [{time.perf_counter() - t0:.2f}s]"
              + ("" if status == "PASS" else f"  {status[5:]}"), file=stream)
    print(f"{ran - failures} checks passed, {failures} failed", file=stream)
    return failures == 0
