import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asfusion import numerics as nx
from asfusion.boxes import Box
from asfusion.fusion import ALL_COMBOS, AvailabilityMask
from asfusion.headloss import (
    IGNORE,
    NEG,
    AnchorGrid,
    Detection,
    build_targets,
    decode_boxes,
    decode_detections,
    detection_loss,
    encode_boxes,
    focal_loss,
    frame_loss,
    head_forward,
    init_head_params,
    match_anchors,
    nms,
    scl_loss,
    smooth_l1,
)
from asfusion.numerics import ConfigurationError, ParamStore, Tape, backward
from asfusion.training import build_model
from conftest import random_maps, tiny_config
from gradcheck import directional_errors
from oracles import brute_force_match, quadratic_nms


def bce(p, t):
    return -(t * np.log(p) + (1 - t) * np.log(1 - p))


# ---------------------------------------------------------------- losses


def test_focal_closed_form(f64):
    got = float(focal_loss(np.array([0.9]), np.array([1.0]), 0.25, 2.0).data)
    assert got == pytest.approx(0.25 * 0.1**2 * -math.log(0.9), rel=1e-12)


def test_focal_gamma0_alpha_half_is_half_bce(f64):
    p = np.array([0.2, 0.7, 0.99, 0.01])
    t = np.array([1.0, 0.0, 1.0, 0.0])
    got = float(focal_loss(p, t, 0.5, 0.0).data)
    assert got == pytest.approx(0.5 * bce(p, t).sum(), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 0.95))
def test_focal_gamma0_is_alpha_weighted_bce(seed, alpha):
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-3, 1 - 1e-3, size=20)
    t = (rng.uniform(size=20) < 0.5).astype(float)
    with nx.precision(64):
        got = float(focal_loss(p, t, alpha, 0.0).data)
    want = float(np.sum(np.where(t > 0, alpha, 1 - alpha) * bce(p, t)))
    assert abs(got - want) < 1e-9


def test_focal_limit_and_clamp(f64):
    assert float(focal_loss(np.array([1 - 1e-12]), np.array([1.0])).data) < 1e-12
    v = float(focal_loss(np.array([0.0]), np.array([1.0])).data)
    assert np.isfinite(v) and v == pytest.approx(0.25 * (1 - 1e-7) ** 2 * -math.log(1e-7))


def test_smooth_l1_examples(f64):
    z = np.zeros(1)
    assert float(smooth_l1(z, z).data) == 0.0
    assert float(smooth_l1(np.array([0.5]), z).data) == 0.125
    assert float(smooth_l1(np.array([2.0]), z).data) == 1.5


def test_smooth_l1_once_differentiable_at_beta(f64):
    beta, h = 1.0, 1e-7

    def f(d):
        return float(smooth_l1(np.array([d]), np.zeros(1), beta).data)

    left = (f(beta) - f(beta - h)) / h
    right = (f(beta + h) - f(beta)) / h
    assert abs(left - right) < 1e-6
    assert abs(f(beta + 1e-12) - f(beta - 1e-12)) < 1e-11


def test_smooth_l1_shape_error():
    with pytest.raises(nx.DimensionError):
        smooth_l1(np.zeros(3), np.zeros(2))


# ---------------------------------------------------------------- anchors, coding


def test_anchor_count_and_index_layout():
    cfg = tiny_config(grid=4)
    grid = AnchorGrid.build(cfg.scenes, 2)
    assert len(grid) == 4 * 4 * 2 * 2
    r, c, k, o = 2, 3, 1, 1
    i = ((r * 4 + c) * 2 + k) * 2 + o
    b = grid.box(i)
    assert grid.classes[i] == k
    assert b.x == pytest.approx(cfg.scenes.x_min + (r + 0.5) * cfg.scenes.cell_x)
    assert b.y == pytest.approx(cfg.scenes.y_min + (c + 0.5) * cfg.scenes.cell_y)
    assert b.yaw == pytest.approx(math.pi / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = 10
    anchors = np.column_stack([rng.uniform(-5, 5, (n, 3)), rng.uniform(1, 5, (n, 3)),
                               *(lambda y: (np.cos(y), np.sin(y)))(rng.choice([0, np.pi / 2], n))])
    yaw = rng.uniform(-np.pi, np.pi, n)
    gts = np.column_stack([rng.uniform(-5, 5, (n, 3)), rng.uniform(1, 5, (n, 3)), np.cos(yaw), np.sin(yaw)])
    back = decode_boxes(anchors, encode_boxes(anchors, gts))
    np.testing.assert_allclose(back, gts, atol=1e-9)


def test_decode_normalizes_heading():
    anchors = np.array([[0, 0, 0, 4, 2, 1, 1.0, 0.0]])
    out = decode_boxes(anchors, np.array([[0, 0, 0, 0, 0, 0, 3.0, 4.0]]))
    assert abs(out[0, 6] ** 2 + out[0, 7] ** 2 - 1) < 1e-6 and np.all(out[0, 3:6] > 0)


# ---------------------------------------------------------------- head


def test_head_zero_input_zero_final_layers(f64):
    cfg = tiny_config()
    store = ParamStore()
    init_head_params(store, cfg.head, 10, np.random.default_rng(0), zero_final=True)
    logits, deltas = head_forward(np.zeros((2, 10, 4, 4)), store, cfg.head)
    assert logits.shape == (2, 4 * 4 * 4) and deltas.shape == (2, 64, 8)
    assert np.all(logits.data == 0) and np.all(deltas.data == 0)


def test_head_width_error(f64):
    cfg = tiny_config()
    store = ParamStore()
    init_head_params(store, cfg.head, 10, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        head_forward(np.zeros((9, 4, 4)), store, cfg.head)


def test_head_gradient_check(f64):
    cfg = tiny_config()
    rng = np.random.default_rng(1)
    store = ParamStore()
    init_head_params(store, cfg.head, 5, rng)
    x = nx.Tensor(rng.normal(size=(2, 5, 4, 4)), requires_grad=True)
    wl, wd = rng.normal(size=(2, 64)), rng.normal(size=(2, 64, 8))

    def loss():
        lg, dl = head_forward(x, store, cfg.head)
        return nx.add(nx.sum(nx.mul(lg, wl)), nx.sum(nx.mul(dl, wd)))

    errs = directional_errors(loss, dict(store.params, input=x), rng)
    assert max(errs.values()) < 1e-4, errs


def test_one_head_serves_every_combination(f64):
    cfg = tiny_config()
    model = build_model(cfg)
    maps = random_maps(np.random.default_rng(2))
    from asfusion.fusion import asf_forward

    for combo in ALL_COMBOS:
        fm, _ = asf_forward(maps, AvailabilityMask.from_combo(combo), cfg.fusion, model.store)
        logits, _ = head_forward(fm, model.store, cfg.head)
        assert logits.shape == (len(model.anchors),)


# ---------------------------------------------------------------- matching


def random_gts(rng, cfg, n):
    sc = cfg.scenes
    out, cls = [], []
    for _ in range(n):
        k = int(rng.integers(0, 2))
        l, w, h = [(4.4, 1.85, 1.55), (7.8, 2.5, 3.0)][k]
        s = rng.uniform(0.8, 1.2)
        yaw = rng.choice([0.0, math.pi / 2]) + rng.normal(0, 0.3)
        out.append(Box.from_yaw(rng.uniform(sc.x_min, sc.x_max), rng.uniform(sc.y_min, sc.y_max), h / 2,
                                l * s, w * s, h, yaw))
        cls.append(k)
    return out, cls


def test_match_no_gts_all_negative():
    grid = AnchorGrid.build(tiny_config().scenes)
    assert np.all(match_anchors(grid, []) == NEG)


def test_match_identical_anchor_is_positive():
    grid = AnchorGrid.build(tiny_config().scenes)
    labels = match_anchors(grid, [grid.box(13)], gt_classes=[int(grid.classes[13])])
    assert labels[13] == 0


def test_match_threshold_validation():
    grid = AnchorGrid.build(tiny_config().scenes)
    with pytest.raises(ValueError):
        match_anchors(grid, [], pos_iou=0.3, neg_iou=0.5)


@pytest.mark.parametrize("seed", range(20))
def test_match_vs_exhaustive_oracle(seed):
    cfg = tiny_config(grid=4)
    grid = AnchorGrid.build(cfg.scenes)
    rng = np.random.default_rng(seed)
    gts, cls = random_gts(rng, cfg, int(rng.integers(1, 4)))
    got = match_anchors(grid, gts, 0.6, 0.45, cls)
    want = brute_force_match([grid.box(i) for i in range(len(grid))], grid.classes, gts, cls, 0.6, 0.45)
    want = np.where(want == -2, IGNORE, want)
    assert np.array_equal(got, want)


def test_targets_weights():
    cfg = tiny_config()
    grid = AnchorGrid.build(cfg.scenes)
    t = build_targets(grid, [grid.box(5)], [int(grid.classes[5])], cfg.head)
    assert t.num_pos >= 1 and t.cls_target[5] == 1 and t.reg_weight[5] == 1
    np.testing.assert_allclose(t.reg_target[5], [0, 0, 0, 0, 0, 0, 1, 0], atol=1e-12)
    assert np.all(t.cls_weight[t.labels == IGNORE] == 0)


# ---------------------------------------------------------------- NMS


def _det(i, score, box, cls=0):
    return Detection(box, cls, score, i)


def test_nms_examples():
    b = Box(0, 0, 0, 4, 2, 1)
    kept = nms([_det(0, 0.8, b), _det(1, 0.9, b)], 0.5)
    assert [d.score for d in kept] == [0.9]
    far = [_det(i, 0.5, Box(10.0 * i, 0, 0, 4, 2, 1)) for i in range(4)]
    assert len(nms(far, 0.1)) == 4


def random_dets(rng, n=50):
    dets = []
    for i in range(n):
        yaw = rng.uniform(-math.pi, math.pi)
        box = Box.from_yaw(rng.uniform(0, 12), rng.uniform(0, 12), 0, rng.uniform(1, 5), rng.uniform(1, 3), 1, yaw)
        dets.append(_det(i, round(float(rng.uniform()), 1), box))
    return dets


@pytest.mark.parametrize("seed", range(10))
def test_nms_vs_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    dets = random_dets(rng)
    kept = nms(dets, 0.2)
    want = quadratic_nms([(d.score, d.anchor_index, d.box) for d in dets], 0.2)
    assert sorted(d.anchor_index for d in kept) == want
    # survivors keep their original scores
    assert all(d in dets for d in kept)
    # input order does not matter
    shuffled = [dets[i] for i in rng.permutation(len(dets))]
    assert nms(shuffled, 0.2) == kept


def test_decode_detections_thresholds_and_top_k():
    cfg = tiny_config()
    grid = AnchorGrid.build(cfg.scenes)
    logits = np.full(len(grid), -10.0)
    logits[[3, 40]] = 5.0
    deltas = np.tile([0, 0, 0, 0, 0, 0, 1.0, 0], (len(grid), 1))
    dets = decode_detections(logits, deltas, grid, cfg.head)
    assert sorted(d.anchor_index for d in dets) == [3, 40]
    assert all(abs(d.box.cos**2 + d.box.sin**2 - 1) < 1e-6 for d in dets)


# ---------------------------------------------------------------- SCL


def scl_setup(seed=0, batch=2):
    cfg = tiny_config()
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    maps = random_maps(rng, batch=batch)
    targets = []
    for _ in range(batch):
        gts, cls = random_gts(rng, cfg, 2)
        targets.append(build_targets(model.anchors, gts, cls, cfg.head))
    return cfg, model, maps, targets


def test_scl_single_combination_equals_plain_loss(f64):
    cfg, model, maps, targets = scl_setup()
    total, parts = scl_loss(maps, ("CLR",), model.store, cfg.fusion, cfg.head, targets)
    cls, reg = frame_loss(maps, None, cfg.fusion, cfg.head, model.store, targets)
    assert float(total.data) == float(nx.add(cls, reg).data)
    assert list(parts) == ["CLR"]


def test_scl_breakdown_sums_to_total(f64):
    cfg, model, maps, targets = scl_setup(1)
    total, parts = scl_loss(maps, ALL_COMBOS, model.store, cfg.fusion, cfg.head, targets)
    assert list(parts) == list(ALL_COMBOS)
    assert all(c >= 0 and r >= 0 and t >= 0 for c, r, t in parts.values())
    acc = 0.0
    for combo in ALL_COMBOS:
        acc = acc + parts[combo][2]
    assert acc == pytest.approx(float(total.data), rel=1e-15)


def test_scl_equal_terms_is_seven_times(f64):
    # with one sensor rendered, every combination collapses to the same mask
    cfg, model, maps, targets = scl_setup(2)
    only = AvailabilityMask.from_combo("L")
    total, parts = scl_loss(maps, ("L", "LR", "CL", "CLR"), model.store, cfg.fusion, cfg.head, targets, only)
    single = parts["L"][2]
    assert all(p[2] == single for p in parts.values())
    assert float(total.data) == pytest.approx(4 * single, rel=1e-14)


def scl_gradients(cfg, model, maps, targets, combos):
    model.store.zero_grad()
    with Tape() as tape:
        total, _ = scl_loss(maps, combos, model.store, cfg.fusion, cfg.head, targets)
    backward(tape, total, model.store)
    return {k: g.copy() for k, g in model.store.grads.items()}


def test_scl_gradient_is_sum_of_combination_gradients(f64):
    cfg, model, maps, targets = scl_setup(3)
    full = scl_gradients(cfg, model, maps, targets, ALL_COMBOS)
    acc = {k: np.zeros_like(g) for k, g in full.items()}
    for combo in ALL_COMBOS:
        for k, g in scl_gradients(cfg, model, maps, targets, (combo,)).items():
            acc[k] += g
    for k in full:
        np.testing.assert_allclose(full[k], acc[k], atol=1e-10, rtol=0, err_msg=k)


def test_detection_loss_normalized_by_positives(f64):
    cfg, model, maps, targets = scl_setup(4, batch=1)
    logits = np.zeros((1, len(model.anchors)))
    deltas = np.zeros((1, len(model.anchors), 8))
    cls, reg = detection_loss(logits, deltas, targets, cfg.head)
    t = targets[0]
    norm = max(t.num_pos, 1)
    p = np.full(len(model.anchors), 0.5)
    want = float(np.sum(t.cls_weight * np.where(t.cls_target > 0, 0.25, 0.75) * 0.25 * -np.log(p)))
    assert float(cls.data) == pytest.approx(want / norm, rel=1e-12)
    assert float(reg.data) >= 0
