"""Training with the sensor-combination loss, and evaluation across combinations."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ExperimentConfig
from .fusion import ALL_COMBOS, SENSORS, AvailabilityMask, asf_forward, write_sam_csv
from .headloss import AnchorGrid, Targets, build_targets, decode_detections, head_forward, scl_loss
from .metrics import APResult, attention_ratio_report, evaluate_ap, patch_ranges
from .numerics import NonFiniteError, ParamStore, Tape, adamw_step, backward, save_checkpoint
from .scenes import SENSOR_CHANNELS, WEATHERS, Frame, apply_failure

log = logging.getLogger(__name__)

# named failure variants evaluated alongside the plain combinations
FAILURE_VARIANTS = {
    "C*+L+R": "camera=damaged:full:0.7",
    "C+L*+R": "lidar=damaged:front-half:1.0",
}


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, last_good: str | None, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class Model:
    cfg: ExperimentConfig
    store: ParamStore
    anchors: AnchorGrid


def build_model(cfg: ExperimentConfig, seed: int | None = None) -> Model:
    from .fusion import init_fusion_params
    from .headloss import init_head_params

    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParamStore()
    with nx.precision(cfg.precision):
        init_fusion_params(store, cfg.fusion, SENSOR_CHANNELS, rng)
        init_head_params(store, cfg.head, cfg.fusion.fused_channels, rng)
    return Model(cfg, store, AnchorGrid.build(cfg.scenes, cfg.head.num_classes))


def frame_targets(model: Model, frames: Sequence[Frame]) -> list[Targets]:
    return [build_targets(model.anchors, f.boxes, f.classes, model.cfg.head) for f in frames]


def make_batches(frames: Sequence[Frame], batch: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches whose frames share one availability pattern."""
    groups: dict[str, list[int]] = {}
    for i in rng.permutation(len(frames)):
        groups.setdefault(frames[i].mask().combo, []).append(int(i))
    batches = []
    for key in sorted(groups):
        idx = groups[key]
        batches += [idx[k : k + batch] for k in range(0, len(idx), batch)]
    order = rng.permutation(len(batches))
    return [batches[k] for k in order]


def stack_maps(frames: Sequence[Frame]) -> dict[str, np.ndarray]:
    return {s: np.stack([f.maps[s] for f in frames]) for s in SENSORS}


@dataclass
class TrainResult:
    steps: int
    history: list = field(default_factory=list)  # (step, combo, cls, reg, total)
    step_totals: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


LOSS_COLUMNS = ("step", "combo", "cls_loss", "reg_loss", "total")


def train(
    model: Model,
    frames: Sequence[Frame],
    out_dir: str | Path | None = None,
    header_comment: str | None = None,
) -> TrainResult:
    """AdamW over the sensor-combination loss (or the all-sensor loss when SCL is off)."""
    cfg = model.cfg
    tc = cfg.train
    combos = tuple(tc.combos) if tc.scl else ("CLR",)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    targets = frame_targets(model, frames)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(0)
    last_good = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "loss.csv", "w", newline="")
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
    step = 0
    try:
        with nx.precision(cfg.precision):
            model.store.cast(nx.get_dtype())
            for epoch in range(tc.epochs):
                for idx in make_batches(frames, tc.batch, rng):
                    if tc.max_steps and step >= tc.max_steps:
                        break
                    batch = [frames[i] for i in idx]
                    try:
                        with Tape() as tape:
                            total, parts = scl_loss(
                                stack_maps(batch), combos, model.store, cfg.fusion, cfg.head,
                                [targets[i] for i in idx], availability=batch[0].mask(),
                            )
                        backward(tape, total, model.store)
                    except NonFiniteError as e:
                        raise TrainingAborted(step, last_good, str(e)) from e
                    if not np.isfinite(float(total.data)):
                        raise TrainingAborted(step, last_good, "non-finite loss")
                    adamw_step(model.store, lr=tc.lr, weight_decay=tc.weight_decay)
                    for combo, (c, r, t) in parts.items():
                        result.history.append((step, combo, c, r, t))
                        if fh is not None:
                            writer.writerow([step, combo, repr(c), repr(r), repr(t)])
                    result.step_totals.append(float(total.data))
                    step += 1
                    if tc.log_every and step % max(tc.log_every, 1) == 0:
                        log.debug("step %d loss %.5f", step, float(total.data))
                    if out is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                        path = out / f"checkpoint_{step:06d}.bin"
                        save_checkpoint(model.store, path)
                        result.checkpoints.append(str(path))
                        last_good = str(path)
            if out is not None:
                path = out / "checkpoint.bin"
                save_checkpoint(model.store, path)
                result.checkpoints.append(str(path))
    finally:
        if fh is not None:
            fh.close()
    result.steps = step
    return result


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ComboEval:
    name: str
    detections: dict  # frame -> [(class, score, Box)]
    sams: list  # (frame, SensorAttentionMap, weather)
    ap: list  # APResult rows


def _forward_frames(model: Model, frames: Sequence[Frame], combo_mask: AvailabilityMask, batch: int):
    """Run frames grouped by effective availability; yields (frame, logits, deltas, sam)."""
    groups: dict[str, list[int]] = {}
    for i, f in enumerate(frames):
        m = combo_mask.intersect(f.mask())
        if m.available:
            groups.setdefault(m.combo, []).append(i)
    for key in sorted(groups):
        idx = groups[key]
        mask = AvailabilityMask.from_combo(key)
        for k in range(0, len(idx), batch):
            sel = [frames[i] for i in idx[k : k + batch]]
            fm, sams = asf_forward(stack_maps(sel), mask, model.cfg.fusion, model.store)
            logits, deltas = head_forward(fm.data, model.store, model.cfg.head)
            for j, f in enumerate(sel):
                yield f, logits.data[j], deltas.data[j], sams[j]


def evaluate_combo(model: Model, frames: Sequence[Frame], name: str, combo: str, batch: int = 8) -> ComboEval:
    cfg = model.cfg
    dets: dict[int, list] = {}
    sams = []
    with nx.precision(cfg.precision):
        model.store.cast(nx.get_dtype())
        for f, logits, deltas, sam in _forward_frames(model, frames, AvailabilityMask.from_combo(combo), batch):
            found = decode_detections(logits, deltas, model.anchors, cfg.head)
            dets[f.frame_id] = [(d.class_id, d.score, d.box) for d in found]
            sams.append((f.frame_id, sam, f.weather))
    gts = {f.frame_id: [(c, b) for b, c in f.objects] for f in frames}
    conditions = {f.frame_id: f.weather for f in frames}
    ap = evaluate_ap(dets, gts, conditions, range(cfg.head.num_classes))
    for r in ap:
        r.condition = f"{name}|{r.condition}"
    return ComboEval(name, dets, sams, ap)


def evaluation_plan(combos: Sequence[str] = ALL_COMBOS, failures: dict | None = None) -> list[tuple[str, str, str]]:
    """(row name, combo, failure spec) for every requested pass."""
    plan = [(c, c, "none") for c in combos]
    for name, spec in (FAILURE_VARIANTS if failures is None else failures).items():
        plan.append((name, "CLR", spec))
    return plan


def evaluate(
    model: Model,
    frames: Sequence[Frame],
    combos: Sequence[str] = ALL_COMBOS,
    failures: dict | None = None,
) -> dict[str, ComboEval]:
    """One pass per combination and failure variant, all with the same weights."""
    out = {}
    for name, combo, spec in evaluation_plan(combos, failures):
        use = frames if spec == "none" else [apply_failure(f, spec, model.cfg.scenes) for f in frames]
        out[name] = evaluate_combo(model, use, name, combo)
    return out


def ap_lookup(results: Sequence[APResult], cls: int | None = None, mode: str = "BEV", iou: float = 0.3) -> float:
    """Overall AP for one row, averaged over classes when ``cls`` is None."""
    vals = [
        r.ap for r in results
        if r.mode == mode and r.iou_threshold == iou and r.condition.endswith("|all")
        and (cls is None or r.cls == cls) and r.ap is not None
    ]
    return float(np.mean(vals)) if vals else float("nan")


def ratio_tables(model: Model, ev: ComboEval):
    fc, sc = model.cfg.fusion, model.cfg.scenes
    grid = (sc.grid_h // fc.patch_h, sc.grid_w // fc.patch_w)
    ranges = patch_ranges(grid, fc.patch_h, fc.patch_w, sc.x_min, sc.y_min, sc.cell_x, sc.cell_y)
    return attention_ratio_report(((s, w) for _, s, w in ev.sams), ranges, sc.distance_bin, WEATHERS)


def write_eval_outputs(model: Model, evals: dict[str, ComboEval], out_dir: str | Path, header_comment: str) -> list[Path]:
    from .metrics import write_ap_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = [r for ev in evals.values() for r in ev.ap]
    write_ap_csv(out / "ap.csv", rows, header_comment)
    written.append(out / "ap.csv")
    for name, ev in evals.items():
        safe = name.replace("*", "s").replace("+", "")
        sam_path = out / f"sam_{safe}.csv"
        write_sam_csv(sam_path, [(f, s) for f, s, _ in ev.sams], header_comment)
        written.append(sam_path)
    if "CLR" in evals:
        wt, dt = ratio_tables(model, evals["CLR"])
        wt.write_csv(out / "attn_ratio_weather.csv", header_comment)
        dt.write_csv(out / "attn_ratio_distance.csv", header_comment)
        written += [out / "attn_ratio_weather.csv", out / "attn_ratio_distance.csv"]
    with open(out / "summary.csv", "w", newline="") as fh:
        fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["combo", "ap_bev_03", "ap_bev_05", "ap_3d_03", "ap_3d_05"])
        for name, ev in evals.items():
            w.writerow([name] + [f"{ap_lookup(ev.ap, None, m, t):.6f}" for m in ("BEV", "3D") for t in (0.3, 0.5)])
    written.append(out / "summary.csv")
    return written
