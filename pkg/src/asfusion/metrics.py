"""Rotated IoU, average precision, attention-ratio tables, RoI feature export."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .boxes import Box

SENSOR_NAMES = ("camera", "lidar", "radar")


# --------------------------------------------------------------------------
# rotated rectangle geometry


def _corners(b: Box) -> list[tuple[float, float]]:
    n = math.hypot(b.cos, b.sin) or 1.0
    c, s = b.cos / n, b.sin / n
    hx, hy = b.xl / 2.0, b.yl / 2.0
    return [
        (b.x + c * px - s * py, b.y + s * px + c * py)
        for px, py in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy))
    ]


def _area(poly: Sequence[tuple[float, float]]) -> float:
    a = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        a += x1 * y2 - x2 * y1
    return 0.5 * a


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman: clip ``subject`` by convex counter-clockwise ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_intersection_area(a: Box, b: Box) -> float:
    # canonical argument order makes the result exactly symmetric
    if (a.x, a.y, a.xl, a.yl, a.cos, a.sin) > (b.x, b.y, b.xl, b.yl, b.cos, b.sin):
        a, b = b, a
    # cheap circumscribed-circle rejection
    ra = 0.5 * math.hypot(a.xl, a.yl)
    rb = 0.5 * math.hypot(b.xl, b.yl)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    poly = clip_polygon(_corners(a), _corners(b))
    if len(poly) < 3:
        return 0.0
    return max(_area(poly), 0.0)


def rotated_iou_bev(a: Box, b: Box) -> float:
    """BEV IoU of two rotated rectangles via polygon clipping."""
    area_a = a.xl * a.yl
    area_b = b.xl * b.yl
    if area_a <= 1e-12 or area_b <= 1e-12:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    if union <= 1e-12:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box, b: Box) -> float:
    """3D IoU of yaw-only boxes: BEV overlap area times vertical overlap."""
    va, vb = a.volume, b.volume
    if va <= 1e-12 or vb <= 1e-12:
        return 0.0
    zlo = max(a.z - a.zl / 2, b.z - b.zl / 2)
    zhi = min(a.z + a.zl / 2, b.z + b.zl / 2)
    dz = zhi - zlo
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = va + vb - inter
    if union <= 1e-12:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


IOU_FUNCS: dict[str, Callable[[Box, Box], float]] = {"BEV": rotated_iou_bev, "3D": iou_3d}


# --------------------------------------------------------------------------
# average precision


@dataclass
class APResult:
    cls: int
    iou_threshold: float
    mode: str
    ap: float | None  # None when undefined (no ground truth)
    num_gt: int = 0
    num_det: int = 0
    condition: str = "all"
    breakdown: dict = field(default_factory=dict)

    @property
    def skipped(self) -> bool:
        return self.ap is None


def precision_recall(dets, gts, iou_fn, threshold: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy one-to-one matching in score order.

    ``dets`` is a sequence of (frame, score, Box); ``gts`` maps frame to a
    list of Box. Returns cumulative precision, recall and the GT count.
    """
    num_gt = sum(len(v) for v in gts.values())
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {f: np.zeros(len(v), dtype=bool) for f, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        frame, _, box = dets[i]
        cands = gts.get(frame, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if used[frame][j]:
                continue
            v = iou_fn(box, g)
            if v >= threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[frame][best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / num_gt if num_gt else np.zeros_like(ctp)
    return precision, recall, num_gt


def all_point_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the precision envelope at every recall step."""
    if len(precision) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([precision, [0.0]])
    env = np.maximum.accumulate(mpre[::-1])[::-1][:-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * env))


def average_precision(dets, gts, iou_fn=rotated_iou_bev, threshold: float = 0.5, cls: int = -1, mode: str = "BEV") -> APResult:
    if isinstance(iou_fn, str):
        mode, iou_fn = iou_fn, IOU_FUNCS[iou_fn]
    precision, recall, num_gt = precision_recall(dets, gts, iou_fn, threshold)
    ap = None if num_gt == 0 else min(max(all_point_ap(precision, recall), 0.0), 1.0)
    return APResult(cls, threshold, mode, ap, num_gt, len(dets))


AP_COLUMNS = ("class", "mode", "iou", "condition", "ap", "num_gt", "num_det")


def evaluate_ap(
    dets_by_frame: dict,
    gts_by_frame: dict,
    conditions: dict,
    classes: Sequence[int],
    modes: Sequence[str] = ("BEV", "3D"),
    thresholds: Sequence[float] = (0.3, 0.5),
) -> list[APResult]:
    """AP per class, mode and threshold over all frames and per condition.

    ``dets_by_frame[f]`` holds (class, score, Box); ``gts_by_frame[f]`` holds
    (class, Box); ``conditions[f]`` is the condition label of frame ``f``.
    """
    groups: dict[str, list] = defaultdict(list)
    for f in sorted(gts_by_frame):
        groups[conditions[f]].append(f)
    results = []
    for c in classes:
        for mode in modes:
            for t in thresholds:
                def run(frames):
                    d = [(f, s, b) for f in frames for (k, s, b) in dets_by_frame.get(f, []) if k == c]
                    g = {f: [b for (k, b) in gts_by_frame[f] if k == c] for f in frames}
                    return average_precision(d, g, IOU_FUNCS[mode], t, c, mode)

                overall = run(sorted(gts_by_frame))
                for cond in sorted(groups):
                    r = run(groups[cond])
                    r.condition = cond
                    overall.breakdown[cond] = r.ap
                    results.append(r)
                results.append(overall)
    return results


def write_ap_csv(path, results: Iterable[APResult], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("# interpolation=all-point\n")
        w = csv.writer(fh)
        w.writerow(AP_COLUMNS)
        for r in results:
            ap = "skip" if r.ap is None else f"{r.ap:.6f}"
            w.writerow([r.cls, r.mode, r.iou_threshold, r.condition, ap, r.num_gt, r.num_det])


# --------------------------------------------------------------------------
# attention ratio tables


@dataclass
class AttnRatioTable:
    key: str  # "weather" or "distance"
    rows: dict = field(default_factory=dict)  # label -> per-sensor percent
    counts: dict = field(default_factory=dict)  # label -> patches aggregated
    notes: list = field(default_factory=list)

    def ratio(self, label: str, sensor: str) -> float:
        return float(self.rows[label][SENSOR_NAMES.index(sensor)])

    def write_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            for n in self.notes:
                fh.write(f"# note: {n}\n")
            w = csv.writer(fh)
            w.writerow([self.key, *SENSOR_NAMES, "patches"])
            for label, r in self.rows.items():
                w.writerow([label, *(f"{v:.2f}" for v in r), self.counts[label]])


def _percent(total: np.ndarray) -> np.ndarray:
    s = total.sum()
    return 100.0 * total / s if s > 0 else np.zeros_like(total)


def patch_ranges(grid: tuple[int, int], patch_h: int, patch_w: int, x_min: float, y_min: float, cell_x: float, cell_y: float) -> np.ndarray:
    """Distance from the ego origin to each patch center, row-major."""
    rows, cols = grid
    xc = x_min + (np.arange(rows) + 0.5) * patch_h * cell_x
    yc = y_min + (np.arange(cols) + 0.5) * patch_w * cell_y
    gx, gy = np.meshgrid(xc, yc, indexing="ij")
    return np.hypot(gx, gy).ravel()


def attention_ratio_report(
    records: Iterable,
    ranges: np.ndarray | None = None,
    bin_width: float = 3.2,
    weather_order: Sequence[str] | None = None,
) -> tuple[AttnRatioTable, AttnRatioTable]:
    """Per-weather and per-distance sensor attention percentages.

    ``records`` yields (SensorAttentionMap, weather). Masses are already
    averaged over heads and queries; here they are averaged over banks and
    patches, then normalized to percent.
    """
    by_w: dict[str, np.ndarray] = {}
    n_w: dict[str, int] = defaultdict(int)
    by_d: dict[int, np.ndarray] = {}
    n_d: dict[int, int] = defaultdict(int)
    for sam, weather in records:
        per_patch = np.asarray(sam.masses, dtype=np.float64).mean(axis=0)  # [N_p, 3]
        by_w[weather] = by_w.get(weather, np.zeros(3)) + per_patch.sum(axis=0)
        n_w[weather] += per_patch.shape[0]
        if ranges is not None:
            bins = np.floor(np.asarray(ranges) / bin_width).astype(int)
            for b in np.unique(bins):
                sel = per_patch[bins == b]
                by_d[b] = by_d.get(b, np.zeros(3)) + sel.sum(axis=0)
                n_d[b] += sel.shape[0]
    wt = AttnRatioTable("weather")
    order = list(weather_order) if weather_order else sorted(by_w)
    for w in order:
        if w in by_w:
            wt.rows[w] = _percent(by_w[w])
            wt.counts[w] = n_w[w]
        else:
            wt.notes.append(f"no frames for weather {w}")
    dt = AttnRatioTable("distance")
    if by_d:
        for b in range(0, max(by_d) + 1):
            label = f"[{b * bin_width:g},{(b + 1) * bin_width:g})"
            if b in by_d:
                dt.rows[label] = _percent(by_d[b])
                dt.counts[label] = n_d[b]
            else:
                dt.notes.append(f"empty distance bin {label}")
    return wt, dt


# --------------------------------------------------------------------------
# per-object feature export


STAGES = ("encoder", "post-UCP", "post-CASAP")


def bilinear_sample(fm: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample [C, H, W] at fractional cell coordinates (cell centers are integers).

    Coordinates are clamped to the grid; returns [C, len(u)].
    """
    c, h, w = fm.shape
    u = np.clip(np.asarray(u, dtype=np.float64), 0, h - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0, w - 1)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, h - 1)
    v1 = np.minimum(v0 + 1, w - 1)
    du, dv = u - u0, v - v0
    out = (
        fm[:, u0, v0] * (1 - du) * (1 - dv)
        + fm[:, u1, v0] * du * (1 - dv)
        + fm[:, u0, v1] * (1 - du) * dv
        + fm[:, u1, v1] * du * dv
    )
    return out


@dataclass
class ObjectFeature:
    frame: int
    stage: str
    sensor: str
    cls: int
    weather: str
    vector: np.ndarray


def export_object_features(
    fm: np.ndarray,
    boxes: Sequence[Box],
    pool_size: int,
    extent: tuple[float, float, float, float],
    tags: dict | None = None,
    classes: Sequence[int] | None = None,
    notes: list | None = None,
) -> list[ObjectFeature]:
    """Pool each box's axis-aligned bounding rectangle to pool_size x pool_size.

    ``extent`` is (x_min, x_max, y_min, y_max) of the grid in meters. Rows index
    x and columns index y.
    """
    fm = np.asarray(fm, dtype=np.float64)
    c, h, w = fm.shape
    x_min, x_max, y_min, y_max = extent
    cx, cy = (x_max - x_min) / h, (y_max - y_min) / w
    tags = tags or {}
    out = []
    for k, b in enumerate(boxes):
        pts = b.corners_bev()
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        lo_c = np.maximum(lo, (x_min, y_min))
        hi_c = np.minimum(hi, (x_max, y_max))
        if np.any(hi_c <= lo_c):
            if notes is not None:
                notes.append(f"object {k} outside grid, skipped")
            continue
        frac = (np.arange(pool_size) + 0.5) / pool_size
        xs = lo_c[0] + frac * (hi_c[0] - lo_c[0])
        ys = lo_c[1] + frac * (hi_c[1] - lo_c[1])
        gu, gv = np.meshgrid((xs - x_min) / cx - 0.5, (ys - y_min) / cy - 0.5, indexing="ij")
        vec = bilinear_sample(fm, gu.ravel(), gv.ravel()).reshape(-1)
        out.append(
            ObjectFeature(
                int(tags.get("frame", -1)),
                tags.get("stage", "encoder"),
                tags.get("sensor", "fused"),
                int(classes[k]) if classes is not None else -1,
                tags.get("weather", ""),
                vec,
            )
        )
    return out


def write_object_features(out_dir, feats: Sequence[ObjectFeature], header_comment: str | None = None) -> None:
    from .numerics import encode_records

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = {f"obj{i:06d}": f.vector for i, f in enumerate(feats)}
    (out / "features.bin").write_bytes(encode_records(recs, width=4))
    with open(out / "index.csv", "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["record", "frame", "stage", "sensor", "class", "weather", "length"])
        for i, f in enumerate(feats):
            w.writerow([f"obj{i:06d}", f.frame, f.stage, f.sensor, f.cls, f.weather, len(f.vector)])
