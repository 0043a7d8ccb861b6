import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import oracle_box
from wsol.boxes import BBox
from wsol.cam import compute_cam, largest_component_box, localize, predict_and_localize
from wsol.model import ModelConfig, build_network, forward


def test_cam_single_channel(rng):
    f = rng.random((1, 4, 5))
    np.testing.assert_array_equal(compute_cam(f, [1.0]), f[0])


def test_cam_cancellation(rng):
    f = rng.random((1, 4, 4))
    assert not compute_cam(np.concatenate([f, f]), [1.0, -1.0]).any()


def test_cam_length_mismatch(rng):
    with pytest.raises(ValueError):
        compute_cam(rng.random((3, 4, 4)), [1.0, 2.0])


def test_cam_linear_in_weights(rng):
    f = rng.random((5, 4, 4))
    w1, w2 = rng.standard_normal((2, 5))
    np.testing.assert_allclose(compute_cam(f, 2 * w1 - w2), 2 * compute_cam(f, w1) - compute_cam(f, w2),
                               atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cam_gap_identity(seed):
    r = np.random.default_rng(seed)
    net = build_network(ModelConfig("toy10", 5, 16), seed)
    net.params["fc.b"][...] = r.standard_normal(5)
    logits, feats = forward(net, r.random((2, 3, 16, 16)), "eval")
    for n in range(2):
        for c in range(5):
            cam = compute_cam(feats[n], net.classifier_w[:, c])
            assert abs(cam.mean() - (logits[n, c] - net.classifier_b[c])) <= 1e-9


def test_localize_single_pixel():
    heat = np.zeros((8, 8))
    heat[3, 5] = 1.0
    assert localize(heat, 8, 0.2) == BBox(5, 3, 6, 4)


def test_localize_uniform_map():
    assert localize(np.full((8, 8), 3.0), 32) == BBox(0, 0, 32, 32)


def test_localize_picks_larger_blob():
    heat = np.zeros((16, 16))
    heat[1, 1:4] = 1.0                     # 3 pixels
    heat[10:12, 10:12] = 1.0
    heat[12, 10] = 1.0                     # 5 pixels
    assert localize(heat, 16, 0.5) == BBox(10, 10, 12, 13)


def test_localize_tie_break_top_left():
    heat = np.zeros((10, 10))
    heat[6, 1:3] = 1.0
    heat[2, 7:9] = 1.0
    assert localize(heat, 10, 0.5) == BBox(7, 2, 9, 3)


def test_localize_connectivity_changes_result():
    heat = np.zeros((6, 6))
    for i in range(4):
        heat[i, i] = 1.0                   # diagonal: one blob under 8-connectivity only
    heat[5, 4:6] = 1.0
    assert localize(heat, 6, 0.5, connectivity=8) == BBox(0, 0, 4, 4)
    assert localize(heat, 6, 0.5, connectivity=4) == BBox(4, 5, 6, 6)


def test_localize_threshold_range():
    with pytest.raises(ValueError):
        localize(np.eye(4), 4, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.floats(1e-3, 1e3), st.floats(0.05, 0.95), st.sampled_from([4, 8]))
def test_localize_scale_invariant_and_valid(seed, scale, thr, conn):
    heat = np.random.default_rng(seed).standard_normal((6, 6))
    box = localize(heat, 24, thr, conn)
    assert box == localize(heat * scale, 24, thr, conn)
    assert 0 <= box.x_min < box.x_max <= 24 and 0 <= box.y_min < box.y_max <= 24


@pytest.mark.parametrize("conn", [4, 8])
def test_components_match_flood_fill(conn):
    r = np.random.default_rng(conn)
    for _ in range(200):
        side = int(r.integers(1, 33))
        binary = r.random((side, side)) < r.uniform(0.05, 0.7)
        assert largest_component_box(binary, conn) == oracle_box(binary, conn)


def _left_half_network():
    """Toy network whose class-0 CAM is driven by a left-half feature channel."""
    net = build_network(ModelConfig("toy10", 2, 16), 0)
    for name, p in net.params.items():
        if name.endswith(".w"):
            p[...] = 0
    # stem channel 0 copies the red channel; identity skips carry it to the end
    net.params["stem.w"][0, 0, 1, 1] = 1.0
    for blk in net.blocks:
        if blk.has_proj:
            proj = net.params[f"{blk.name}.proj.w"]
            proj[0, 0, 0, 0] = 1.0
    # class 0 reads channel 0; class 1 has zero weights, so its CAM is constant
    net.params["fc.w"][0, 0] = 1.0
    return net


def test_constructed_feature_left_half():
    net = _left_half_network()
    img = np.zeros((16, 16, 3))
    img[:, :4, 0] = 1.0   # left quarter, so upsampling blur stays in the left half
    pred, box, _ = predict_and_localize(net, img, target_class=0)
    assert box.x_max <= 8
    assert pred == 0


def test_target_class_overrides_prediction():
    net = _left_half_network()
    img = np.zeros((16, 16, 3))
    img[:, :4, 0] = 1.0
    net.params["fc.b"][...] = [0.0, 100.0]
    pred, box1, _ = predict_and_localize(net, img)
    _, box0, _ = predict_and_localize(net, img, target_class=0)
    assert pred == 1
    assert box1 == BBox(0, 0, 16, 16)      # class 1 CAM is constant here
    assert box0.x_max <= 8


def test_zero_network_predicts_max_bias(rng):
    net = build_network(ModelConfig("toy10", 3, 16), 0)
    for name, p in net.params.items():
        if name.endswith(".w"):
            p[...] = 0
    net.params["fc.b"][...] = [3.0, 1.0, 2.0]
    pred, _, _ = predict_and_localize(net, rng.random((16, 16, 3)))
    assert pred == 0
    with pytest.raises(ValueError):
        predict_and_localize(net, rng.random((16, 16, 3)), target_class=3)
