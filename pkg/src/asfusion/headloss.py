"""Anchor-based single-shot head on the fused map, its losses, NMS, and the
sensor-combination loss summed over sensor subsets with one set of weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .boxes import Box
from .config import FusionConfig, HeadConfig, SceneConfig
from .fusion import AvailabilityMask, FusedFM, asf_forward
from .metrics import rotated_iou_bev
from .numerics import ConfigurationError, ParamStore, Tensor

# (length, width, height) priors: sedan-like, truck-like
CLASS_PRIORS = ((4.4, 1.85, 1.55), (7.8, 2.5, 3.0))
ANCHOR_YAWS = (0.0, math.pi / 2)

NEG = -1
IGNORE = -2


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    anchor_index: int = -1


@dataclass
class AnchorGrid:
    """Two anchors (0 and 90 degrees) per class at every BEV cell center.

    ``boxes`` is [H * W * num_classes * 2, 8]; anchor index is
    ((row * W + col) * num_classes + cls) * 2 + orientation.
    """

    height: int
    width: int
    num_classes: int
    boxes: np.ndarray
    classes: np.ndarray

    @classmethod
    def build(cls, scenes: SceneConfig, num_classes: int = 2) -> "AnchorGrid":
        if num_classes > len(CLASS_PRIORS):
            raise ConfigurationError(f"no size prior for {num_classes} classes")
        h, w = scenes.grid_h, scenes.grid_w
        xs = scenes.x_min + (np.arange(h) + 0.5) * scenes.cell_x
        ys = scenes.y_min + (np.arange(w) + 0.5) * scenes.cell_y
        rows = []
        labels = []
        for x in xs:
            for y in ys:
                for k in range(num_classes):
                    l, wd, ht = CLASS_PRIORS[k]
                    for yaw in ANCHOR_YAWS:
                        rows.append([x, y, ht / 2, l, wd, ht, math.cos(yaw), math.sin(yaw)])
                        labels.append(k)
        return cls(h, w, num_classes, np.array(rows), np.array(labels))

    def __len__(self):
        return len(self.boxes)

    def box(self, i: int) -> Box:
        return Box(*(float(v) for v in self.boxes[i]))


# --------------------------------------------------------------------------
# box coding


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Center/size/angle residuals of ``gts`` against ``anchors`` (both [N, 8])."""
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    ayaw = np.arctan2(anchors[:, 7], anchors[:, 6])
    gyaw = np.arctan2(gts[:, 7], gts[:, 6])
    return np.stack(
        [
            (gts[:, 0] - anchors[:, 0]) / diag,
            (gts[:, 1] - anchors[:, 1]) / diag,
            (gts[:, 2] - anchors[:, 2]) / anchors[:, 5],
            np.log(gts[:, 3] / anchors[:, 3]),
            np.log(gts[:, 4] / anchors[:, 4]),
            np.log(gts[:, 5] / anchors[:, 5]),
            np.cos(gyaw - ayaw),
            np.sin(gyaw - ayaw),
        ],
        axis=1,
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    ayaw = np.arctan2(anchors[:, 7], anchors[:, 6])
    yaw = ayaw + np.arctan2(deltas[:, 7], deltas[:, 6])
    sizes = anchors[:, 3:6] * np.exp(np.clip(deltas[:, 3:6], -4.0, 4.0))
    return np.column_stack(
        [
            anchors[:, 0] + deltas[:, 0] * diag,
            anchors[:, 1] + deltas[:, 1] * diag,
            anchors[:, 2] + deltas[:, 2] * anchors[:, 5],
            sizes,
            np.cos(yaw),
            np.sin(yaw),
        ]
    )


# --------------------------------------------------------------------------
# head


def init_head_params(store: ParamStore, cfg: HeadConfig, in_channels: int, rng, zero_final: bool = False) -> ParamStore:
    k = cfg.kernel
    n_anchor = cfg.num_classes * len(ANCHOR_YAWS)
    fan_in = k * k * in_channels
    store.add("head.trunk.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cfg.trunk_channels)))
    store.add("head.trunk.b", np.zeros(cfg.trunk_channels))
    if zero_final:
        store.add("head.cls.w", np.zeros((cfg.trunk_channels, n_anchor)))
        store.add("head.cls.b", np.zeros(n_anchor))
        store.add("head.reg.w", np.zeros((cfg.trunk_channels, n_anchor * 8)))
        store.add("head.reg.b", np.zeros(n_anchor * 8))
        return store
    prior = -math.log((1.0 - cfg.prior_prob) / cfg.prior_prob)
    store.add("head.cls.w", rng.normal(0.0, 0.01, size=(cfg.trunk_channels, n_anchor)))
    store.add("head.cls.b", np.full(n_anchor, prior))
    store.add("head.reg.w", rng.normal(0.0, 0.01, size=(cfg.trunk_channels, n_anchor * 8)))
    # cos residual starts at 1 so fresh predictions keep the anchor heading
    store.add("head.reg.b", np.tile([0, 0, 0, 0, 0, 0, 1.0, 0], n_anchor))
    return store


def head_forward(fm, store: ParamStore, cfg: HeadConfig):
    """[B, C, H, W] (or [C, H, W]) -> (logits [B, A], deltas [B, A, 8])."""
    if isinstance(fm, FusedFM):
        fm = fm.data
    x = nx.as_tensor(fm)
    squeeze = x.ndim == 3
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    expect = store["head.trunk.w"].shape[0] // (cfg.kernel * cfg.kernel)
    if c != expect:
        raise ConfigurationError(f"head expects {expect} input channels, fused map has {c}")
    x = nx.transpose(x, (0, 2, 3, 1))
    x = nx.neighborhood(x, cfg.kernel)
    x = nx.gelu(nx.linear(x, store["head.trunk.w"], store["head.trunk.b"]))
    logits = nx.linear(x, store["head.cls.w"], store["head.cls.b"])
    deltas = nx.linear(x, store["head.reg.w"], store["head.reg.b"])
    n_anchor = logits.shape[-1]
    logits = nx.reshape(logits, (b, h * w * n_anchor))
    deltas = nx.reshape(deltas, (b, h * w * n_anchor, 8))
    if squeeze:
        logits = nx.reshape(logits, logits.shape[1:])
        deltas = nx.reshape(deltas, deltas.shape[1:])
    return logits, deltas


# --------------------------------------------------------------------------
# losses


def focal_loss(p, target, alpha: float = 0.25, gamma: float = 2.0, weight=None) -> Tensor:
    """Summed sigmoid focal loss on probabilities (clamped to [1e-7, 1 - 1e-7])."""
    return nx.focal_loss(p, target, alpha, gamma, weight)


def smooth_l1(pred, target, beta: float = 1.0, weight=None) -> Tensor:
    return nx.smooth_l1(pred, target, beta, weight)


@dataclass
class Targets:
    """Per-frame training targets; independent of the network weights."""

    labels: np.ndarray  # [A] gt index, NEG or IGNORE
    cls_target: np.ndarray  # [A] 0/1
    cls_weight: np.ndarray  # [A] 0 for ignored anchors
    reg_target: np.ndarray  # [A, 8]
    reg_weight: np.ndarray  # [A] 1 for positives

    @property
    def num_pos(self) -> int:
        return int(self.reg_weight.sum())


def iou_matrix(anchors: AnchorGrid, gts: Sequence[Box], gt_classes: Sequence[int] | None = None) -> np.ndarray:
    """BEV IoU of every anchor with every GT (class-restricted when classes are given)."""
    a = anchors.boxes
    out = np.zeros((len(a), len(gts)))
    radius = 0.5 * np.hypot(a[:, 3], a[:, 4])
    for j, g in enumerate(gts):
        rg = 0.5 * math.hypot(g.xl, g.yl)
        near = np.hypot(a[:, 0] - g.x, a[:, 1] - g.y) <= radius + rg
        if gt_classes is not None:
            near &= anchors.classes == gt_classes[j]
        for i in np.flatnonzero(near):
            out[i, j] = rotated_iou_bev(anchors.box(i), g)
    return out


def match_anchors(
    anchors: AnchorGrid,
    gts: Sequence[Box],
    pos_iou: float = 0.6,
    neg_iou: float = 0.45,
    gt_classes: Sequence[int] | None = None,
) -> np.ndarray:
    """Label anchors: GT index if positive, NEG, or IGNORE.

    Positive when IoU >= pos_iou, or when the anchor is a GT's best match
    (lowest index on ties, IoU > 0). Negative when max IoU < neg_iou.
    """
    if not 0 <= neg_iou <= pos_iou <= 1:
        raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
    n = len(anchors)
    if len(gts) == 0:
        return np.full(n, NEG, dtype=np.int64)
    iou = iou_matrix(anchors, gts, gt_classes)
    best_gt = iou.argmax(axis=1)
    best = iou.max(axis=1)
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best < neg_iou] = NEG
    pos = best >= pos_iou
    labels[pos] = best_gt[pos]
    for j in range(len(gts)):
        i = int(iou[:, j].argmax())
        if iou[i, j] > 0:
            labels[i] = j
    return labels


def build_targets(anchors: AnchorGrid, gts: Sequence[Box], gt_classes: Sequence[int], cfg: HeadConfig) -> Targets:
    labels = match_anchors(anchors, gts, cfg.pos_iou, cfg.neg_iou, gt_classes)
    n = len(anchors)
    pos = labels >= 0
    cls_target = pos.astype(np.float64)
    cls_weight = (labels != IGNORE).astype(np.float64)
    reg_target = np.zeros((n, 8))
    if pos.any():
        g = np.array([gts[j].as_array() for j in labels[pos]])
        reg_target[pos] = encode_boxes(anchors.boxes[pos], g)
    return Targets(labels, cls_target, cls_weight, reg_target, pos.astype(np.float64))


def detection_loss(logits, deltas, targets: Sequence[Targets], cfg: HeadConfig):
    """(classification, regression) losses for a batch, each normalized by the batch's positives."""
    logits = nx.as_tensor(logits)
    deltas = nx.as_tensor(deltas)
    if logits.ndim == 1:
        logits = nx.reshape(logits, (1,) + logits.shape)
        deltas = nx.reshape(deltas, (1,) + deltas.shape)
    ct = np.stack([t.cls_target for t in targets])
    cw = np.stack([t.cls_weight for t in targets])
    rt = np.stack([t.reg_target for t in targets])
    rw = np.stack([t.reg_weight for t in targets])[..., None]
    norm = 1.0 / max(float(rw.sum()), 1.0)
    p = nx.sigmoid(logits)
    cls = nx.scale(nx.focal_loss(p, ct, cfg.alpha, cfg.gamma, cw), norm)
    reg = nx.scale(nx.smooth_l1(deltas, rt, cfg.smooth_l1_beta, rw), norm)
    return cls, reg


def frame_loss(maps, mask, fusion_cfg: FusionConfig, head_cfg: HeadConfig, store: ParamStore, targets):
    fm, _ = asf_forward(maps, mask, fusion_cfg, store)
    logits, deltas = head_forward(fm.data, store, head_cfg)
    return detection_loss(logits, deltas, targets, head_cfg)


def scl_loss(
    maps: Mapping[str, np.ndarray],
    combos: Sequence[str],
    store: ParamStore,
    fusion_cfg: FusionConfig,
    head_cfg: HeadConfig,
    targets: Sequence[Targets],
    availability: AvailabilityMask | None = None,
):
    """Sum of detection losses over sensor combinations, with shared weights.

    ``availability`` restricts every combination to the sensors actually
    rendered for the batch. Returns (total, {combo: (cls, reg, total)}).
    """
    total = None
    breakdown = {}
    for combo in combos:
        mask = AvailabilityMask.from_combo(combo)
        if availability is not None:
            mask = mask.intersect(availability)
            if not mask.available:
                continue
        cls, reg = frame_loss(maps, mask, fusion_cfg, head_cfg, store, targets)
        term = nx.add(cls, reg)
        breakdown[combo] = (float(cls.data), float(reg.data), float(term.data))
        total = term if total is None else nx.add(total, term)
    if total is None:
        raise ValueError("no combination has an available sensor")
    return total, breakdown


# --------------------------------------------------------------------------
# inference


def decode_detections(logits: np.ndarray, deltas: np.ndarray, anchors: AnchorGrid, cfg: HeadConfig) -> list[Detection]:
    logits = np.asarray(logits, dtype=np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits))
    keep = np.flatnonzero(scores >= cfg.score_thresh)
    if len(keep) > cfg.pre_nms_top_k:
        order = np.lexsort((keep, -scores[keep]))
        keep = keep[order[: cfg.pre_nms_top_k]]
    boxes = decode_boxes(anchors.boxes[keep], np.asarray(deltas, dtype=np.float64)[keep])
    dets = [
        Detection(Box(*(float(v) for v in boxes[n])).normalized(), int(anchors.classes[i]), float(scores[i]), int(i))
        for n, i in enumerate(keep)
    ]
    return nms(dets, cfg.nms_iou)


def nms(dets: Sequence[Detection], iou_thresh: float, per_class: bool = False) -> list[Detection]:
    """Greedy suppression in (score desc, anchor index asc) order."""
    order = sorted(dets, key=lambda d: (-d.score, d.anchor_index))
    kept: list[Detection] = []
    for d in order:
        if all(
            (per_class and k.class_id != d.class_id) or rotated_iou_bev(k.box, d.box) <= iou_thresh
            for k in kept
        ):
            kept.append(d)
    return kept

