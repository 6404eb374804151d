"""Synthetic BEV scenes and procedural per-sensor feature renderers.

The renderers stand in for frozen sensor encoders: each splats object
footprints into a sensor-specific channel pattern, attenuates it by weather,
applies dropout and additive noise, and finally injects failures.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .boxes import Box, contains_points
from .config import SceneConfig
from .fusion import SENSORS, AvailabilityMask, FeatureMap
from .metrics import rotated_iou_bev
from .numerics import decode_records, encode_records

WEATHERS = ("Normal", "Overcast", "Fog", "Rain", "Sleet", "LightSnow", "HeavySnow")
# order along which degradation must not improve any sensor
SEVERITY_ORDER = ("Normal", "Overcast", "Rain", "Sleet", "HeavySnow")
CLASS_NAMES = ("sedan", "truck")
# mean camera appearance per class; the camera's semantic cue
CLASS_APPEARANCE = ((0.8, 0.4, 0.3), (0.3, 0.5, 0.9))
# per-channel strength of the camera veil in haze
HAZE_PROFILE = (1.0, 0.2, 0.5, 0.8, 0.8, 0.9)
DATASET_VERSION = 1

STATUS_CODES = {"available": 0.0, "absent": 1.0, "damaged": 2.0}


@dataclass
class SensorModel:
    sensor: str
    channels: int
    base_snr: float  # signal scale over unit noise
    noise_std: float
    dropout_rate: float
    blur: float  # footprint blur in cells
    weather_attenuation: dict
    weather_clutter: dict  # extra noise multiplier per weather
    weather_dropout: dict = field(default_factory=dict)  # extra blocked-cell rate
    range_sparsity: float = 0.0  # extra dropout per 30 m of range
    spurious_rate: dict = field(default_factory=dict)  # false returns per cell (lidar)
    haze: dict = field(default_factory=dict)  # additive veil amplitude (camera)

    def attenuation(self, weather: str) -> float:
        return self.weather_attenuation[weather]


def default_sensor_models() -> dict[str, SensorModel]:
    return {
        "camera": SensorModel(
            "camera", 6, base_snr=1.0, noise_std=0.08, dropout_rate=0.0, blur=0.8,
            weather_attenuation={"Normal": 1.0, "Overcast": 0.85, "Fog": 0.45, "Rain": 0.6,
                                 "Sleet": 0.4, "LightSnow": 0.5, "HeavySnow": 0.25},
            weather_clutter={"Normal": 0.0, "Overcast": 0.2, "Fog": 1.5, "Rain": 1.0,
                             "Sleet": 1.5, "LightSnow": 1.0, "HeavySnow": 2.5},
            haze={"Normal": 0.0, "Overcast": 0.1, "Fog": 0.6, "Rain": 0.3,
                  "Sleet": 0.4, "LightSnow": 0.35, "HeavySnow": 0.6},
        ),
        "lidar": SensorModel(
            "lidar", 8, base_snr=1.0, noise_std=0.05, dropout_rate=0.05, blur=0.0,
            weather_attenuation={"Normal": 1.0, "Overcast": 0.98, "Fog": 0.6, "Rain": 0.8,
                                 "Sleet": 0.6, "LightSnow": 0.75, "HeavySnow": 0.45},
            weather_clutter={"Normal": 0.0, "Overcast": 0.0, "Fog": 1.0, "Rain": 0.6,
                             "Sleet": 1.2, "LightSnow": 0.8, "HeavySnow": 2.0},
            weather_dropout={"Normal": 0.0, "Overcast": 0.0, "Fog": 0.15, "Rain": 0.1,
                             "Sleet": 0.2, "LightSnow": 0.12, "HeavySnow": 0.35},
            range_sparsity=0.5,
            spurious_rate={"Normal": 0.0, "Overcast": 0.0, "Fog": 0.03, "Rain": 0.03,
                           "Sleet": 0.06, "LightSnow": 0.05, "HeavySnow": 0.12},
        ),
        "radar": SensorModel(
            "radar", 4, base_snr=1.0, noise_std=0.12, dropout_rate=0.0, blur=1.3,
            weather_attenuation={"Normal": 1.0, "Overcast": 1.0, "Fog": 1.05, "Rain": 0.97,
                                 "Sleet": 0.93, "LightSnow": 0.97, "HeavySnow": 0.9},
            weather_clutter={"Normal": 0.0, "Overcast": 0.0, "Fog": 0.0, "Rain": 0.1,
                             "Sleet": 0.2, "LightSnow": 0.1, "HeavySnow": 0.3},
        ),
    }


SENSOR_CHANNELS = {s: m.channels for s, m in default_sensor_models().items()}


# --------------------------------------------------------------------------
# failures


@dataclass(frozen=True)
class Failure:
    kind: str = "none"  # none | absent | damaged
    region: str = "full"
    severity: float = 1.0


REGIONS = ("full", "front-half", "near-half", "left-half", "right-half")


@dataclass
class FailureSpec:
    per_sensor: dict = field(default_factory=dict)

    def get(self, sensor: str) -> Failure:
        return self.per_sensor.get(sensor, Failure())

    def __str__(self) -> str:
        parts = []
        for s in SENSORS:
            f = self.get(s)
            if f.kind == "absent":
                parts.append(f"{s}=absent")
            elif f.kind == "damaged":
                parts.append(f"{s}=damaged:{f.region}:{f.severity:g}")
        return ",".join(parts) or "none"


def parse_failure(text: str) -> FailureSpec:
    """Parse ``camera=absent,lidar=damaged:front-half:1.0`` (or ``none``)."""
    spec = FailureSpec()
    text = text.strip()
    if text in ("", "none"):
        return spec
    for item in text.split(","):
        sensor, _, what = item.strip().partition("=")
        if sensor not in SENSORS:
            raise ValueError(f"unknown sensor {sensor!r} in failure spec {text!r}")
        if what == "absent":
            spec.per_sensor[sensor] = Failure("absent")
        elif what.startswith("damaged"):
            bits = what.split(":")
            region = bits[1] if len(bits) > 1 else "full"
            severity = float(bits[2]) if len(bits) > 2 else 1.0
            if region not in REGIONS:
                raise ValueError(f"unknown damage region {region!r}")
            if not 0.0 <= severity <= 1.0:
                raise ValueError("damage severity must be in [0, 1]")
            spec.per_sensor[sensor] = Failure("damaged", region, severity)
        elif what == "none":
            continue
        else:
            raise ValueError(f"bad failure {item!r}")
    return spec


def region_mask(region: str, cfg: SceneConfig) -> np.ndarray:
    h, w = cfg.grid_h, cfg.grid_w
    m = np.zeros((h, w), dtype=bool)
    if region == "full":
        m[:] = True
    elif region == "front-half":
        m[h // 2 :] = True
    elif region == "near-half":
        m[: h // 2] = True
    elif region == "left-half":
        m[:, w // 2 :] = True
    elif region == "right-half":
        m[:, : w // 2] = True
    else:
        raise ValueError(f"unknown damage region {region!r}")
    return m


# --------------------------------------------------------------------------
# scenes


@dataclass
class SceneObject:
    box: Box
    cls: int
    velocity: float = 0.0
    color: tuple = (0.5, 0.5, 0.5)


@dataclass
class Scene:
    seed: int
    weather: str
    objects: list
    config: SceneConfig
    shortfall: bool = False  # fewer objects placed than requested


def _frame_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _sample_object(rng: np.random.Generator, cfg: SceneConfig) -> SceneObject:
    cls = int(rng.random() < 0.3)
    if cls == 0:
        xl, yl, zl = rng.uniform(3.9, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)
    else:
        xl, yl, zl = rng.uniform(6.5, 9.0), rng.uniform(2.3, 2.7), rng.uniform(2.6, 3.4)
    if rng.random() < 0.75:
        yaw = float(np.clip(rng.normal(0.0, 0.12), -0.3, 0.3))
    else:
        yaw = math.pi / 2 + float(np.clip(rng.normal(0.0, 0.12), -0.3, 0.3))
    half = 0.5 * math.hypot(xl, yl)
    x = rng.uniform(cfg.x_min + half, cfg.x_max - half)
    y = rng.uniform(cfg.y_min + half, cfg.y_max - half)
    box = Box.from_yaw(x, y, zl / 2, xl, yl, zl, yaw)
    color = np.clip(np.asarray(CLASS_APPEARANCE[cls]) + rng.normal(0.0, 0.15, 3), 0.0, 1.0)
    return SceneObject(box, cls, float(rng.uniform(-1, 1)), tuple(float(c) for c in color))


def _inflate(b: Box, margin: float) -> Box:
    return Box(b.x, b.y, b.z, b.xl + 2 * margin, b.yl + 2 * margin, b.zl, b.cos, b.sin)


def generate_scene(
    seed: int,
    weather: str = "Normal",
    object_count_range: tuple[int, int] | None = None,
    cfg: SceneConfig | None = None,
    max_tries: int = 50,
) -> Scene:
    """Deterministic scene with non-overlapping objects inside the extent."""
    cfg = cfg or SceneConfig()
    if cfg.x_max <= cfg.x_min or cfg.y_max <= cfg.y_min:
        raise ValueError("scene extent must be positive")
    if weather not in WEATHERS:
        raise ValueError(f"unknown weather {weather!r}")
    lo, hi = object_count_range or (cfg.min_objects, cfg.max_objects)
    rng = _frame_rng(seed, 0x5CE4E)
    want = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    objects: list[SceneObject] = []
    for _ in range(want):
        for _ in range(max_tries):
            cand = _sample_object(rng, cfg)
            grown = _inflate(cand.box, 0.4)
            if all(rotated_iou_bev(grown, _inflate(o.box, 0.4)) == 0.0 for o in objects):
                objects.append(cand)
                break
    return Scene(seed, weather, objects, cfg, shortfall=len(objects) < want)


def cell_centers(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    xs = cfg.x_min + (np.arange(cfg.grid_h) + 0.5) * cfg.cell_x
    ys = cfg.y_min + (np.arange(cfg.grid_w) + 0.5) * cfg.cell_y
    return np.meshgrid(xs, ys, indexing="ij")


def footprints(scene: Scene, supersample: int = 4) -> np.ndarray:
    """Fraction of each cell covered by each object, [n_obj, H, W]."""
    cfg = scene.config
    h, w, s = cfg.grid_h, cfg.grid_w, supersample
    xs = cfg.x_min + (np.arange(h * s) + 0.5) * cfg.cell_x / s
    ys = cfg.y_min + (np.arange(w * s) + 0.5) * cfg.cell_y / s
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    out = np.zeros((len(scene.objects), h, w))
    for k, o in enumerate(scene.objects):
        inside = contains_points(o.box, pts).reshape(h, s, w, s)
        out[k] = inside.mean(axis=(1, 3))
    return out


def _blur(x: np.ndarray, sigma) -> np.ndarray:
    if np.all(np.asarray(sigma) == 0):
        return x
    return gaussian_filter(x, sigma, mode="constant")


def _signal(scene: Scene, model: SensorModel, occ: np.ndarray) -> np.ndarray:
    """Noise-free channel pattern for one sensor, [C, H, W]."""
    cfg = scene.config
    h, w = cfg.grid_h, cfg.grid_w
    gx, gy = cell_centers(cfg)
    rng_ = np.hypot(gx, gy)
    objs = scene.objects

    def splat(values):
        if not objs:
            return np.zeros((h, w))
        return np.tensordot(np.asarray(values, dtype=float), occ, axes=1)

    total = np.clip(splat([1.0] * len(objs)), 0.0, 1.0)
    height = splat([o.box.zl / 3.0 for o in objs])
    if model.sensor == "camera":
        b = model.blur
        chans = [
            _blur(total, b),
            _blur(height, b),
            _blur(total, b) * np.exp(-rng_ / 40.0),
        ] + [_blur(splat([o.color[c] for o in objs]), b) for c in range(3)]
    elif model.sensor == "lidar":
        decay = np.exp(-rng_ / 40.0)
        gxo, gyo = np.gradient(total)
        chans = [
            total * decay,
            height * decay,
            splat([o.box.xl / 8.0 for o in objs]),
            splat([o.box.yl / 3.0 for o in objs]),
            splat([math.cos(2 * o.box.yaw) for o in objs]),
            splat([math.sin(2 * o.box.yaw) for o in objs]),
            np.hypot(gxo, gyo),
            total,
        ]
    elif model.sensor == "radar":
        b = model.blur
        chans = [
            _blur(total, b),
            _blur(height, b),
            _blur(splat([o.velocity for o in objs]), b),
            _blur(total, (0.5, 2.5 * b)),  # azimuthal sidelobe smear
        ]
    else:
        raise ValueError(f"unknown sensor {model.sensor!r}")
    return model.base_snr * np.stack(chans[: model.channels])


@dataclass
class SensorFrame:
    fm: FeatureMap
    status: str  # available | absent | damaged
    damage: np.ndarray  # [H, W] bool, cells forced to zero


def damage_cells(failure: Failure, cfg: SceneConfig, scene_seed: int, sensor: str) -> np.ndarray:
    """Cells zeroed by a damage failure: a severity-sized random subset of the region."""
    h, w = cfg.grid_h, cfg.grid_w
    if failure.kind != "damaged":
        return np.zeros((h, w), dtype=bool)
    draw = _frame_rng(scene_seed, SENSORS.index(sensor) + 1, 0xDA4A).random((h, w))
    return region_mask(failure.region, cfg) & (draw < failure.severity)


def render_sensor_fm(
    scene: Scene,
    model: SensorModel,
    failure: Failure | None = None,
    noise: bool = True,
    occ: np.ndarray | None = None,
) -> SensorFrame:
    failure = failure or Failure()
    cfg = scene.config
    h, w = cfg.grid_h, cfg.grid_w
    damage = np.zeros((h, w), dtype=bool)
    if failure.kind == "absent":
        return SensorFrame(FeatureMap(model.sensor, np.zeros((model.channels, h, w), np.float32)), "absent", damage)
    rng = _frame_rng(scene.seed, SENSORS.index(model.sensor) + 1)
    if occ is None:
        occ = footprints(scene)
    weather = scene.weather
    x = _signal(scene, model, occ) * model.attenuation(weather)
    # draws happen in a fixed order regardless of flags so weather never shifts the stream
    keep_u = rng.random((h, w))
    noise_draw = rng.standard_normal(x.shape)
    spur_u = rng.random((h, w))
    spur_v = rng.random((h, w))
    veil_field = gaussian_filter(rng.standard_normal((h, w)), 2.0, mode="wrap")

    gx, gy = cell_centers(cfg)
    drop = model.dropout_rate + model.weather_dropout.get(weather, 0.0)
    drop = np.clip(drop + model.range_sparsity * np.hypot(gx, gy) / 30.0, 0.0, 0.95)
    x = x * (keep_u >= drop)
    if noise:
        x = x + model.noise_std * (1.0 + model.weather_clutter[weather]) * noise_draw
        rate = model.spurious_rate.get(weather, 0.0)
        if rate > 0:
            # false returns from precipitation: occupancy, low height, density
            hits = (spur_u < rate) * (0.3 + 0.7 * spur_v)
            for c, g in ((0, 1.0), (1, 0.2), (model.channels - 1, 1.0)):
                x[c] += g * hits
        amp = model.haze.get(weather, 0.0)
        if amp > 0:
            veil = amp * (1.0 + 2.0 * veil_field)
            x += np.asarray(HAZE_PROFILE[: model.channels])[:, None, None] * veil
    status = "available"
    if failure.kind == "damaged":
        damage = damage_cells(failure, cfg, scene.seed, model.sensor)
        x[:, damage] = 0.0
        status = "damaged"
    return SensorFrame(FeatureMap(model.sensor, x.astype(np.float32)), status, damage)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Frame:
    frame_id: int
    weather: str
    failures: str
    objects: list  # [(Box, cls)]
    maps: dict  # sensor -> [C, H, W] float32
    status: dict  # sensor -> available | absent | damaged
    damage: dict  # sensor -> [H, W] bool
    shortfall: bool = False
    scene_seed: int = 0

    def mask(self) -> AvailabilityMask:
        return AvailabilityMask({s: ("absent" if self.status[s] == "absent" else "available") for s in SENSORS})

    @property
    def boxes(self) -> list[Box]:
        return [b for b, _ in self.objects]

    @property
    def classes(self) -> list[int]:
        return [c for _, c in self.objects]


def _normalized_mix(mix: Mapping[str, float]) -> tuple[list[str], np.ndarray]:
    keys = list(mix)
    wts = np.array([float(mix[k]) for k in keys])
    if (wts < 0).any() or wts.sum() <= 0:
        raise ValueError("mix weights must be nonnegative with a positive sum")
    return keys, wts / wts.sum()


def sample_conditions(n_frames: int, weather_mix, failure_mix, seed: int) -> list[tuple[str, str]]:
    """(weather, failure string) for each frame, drawn from per-frame seeds."""
    wk, wp = _normalized_mix(weather_mix)
    fk, fp = _normalized_mix(failure_mix)
    for k in wk:
        if k not in WEATHERS:
            raise ValueError(f"unknown weather {k!r}")
    out = []
    for i in range(n_frames):
        rng = _frame_rng(seed, i, 0xC0D)
        out.append((wk[int(rng.choice(len(wk), p=wp))], fk[int(rng.choice(len(fk), p=fp))]))
    return out


def render_frame(
    frame_id: int,
    seed: int,
    weather: str,
    failures: str,
    cfg: SceneConfig,
    models: Mapping[str, SensorModel] | None = None,
) -> Frame:
    models = models or default_sensor_models()
    scene = generate_scene(scene_seed(seed, frame_id), weather, cfg=cfg)
    spec = parse_failure(failures)
    occ = footprints(scene)
    maps, status, damage = {}, {}, {}
    for s in SENSORS:
        sf = render_sensor_fm(scene, models[s], spec.get(s), noise=cfg.noise, occ=occ)
        maps[s], status[s], damage[s] = sf.fm.data, sf.status, sf.damage
    objects = [(o.box, o.cls) for o in scene.objects]
    return Frame(frame_id, weather, str(spec), objects, maps, status, damage, scene.shortfall, scene.seed)


def scene_seed(seed: int, frame_id: int) -> int:
    return int(np.random.SeedSequence([seed, frame_id]).generate_state(1)[0])


def apply_failure(frame: Frame, failures: str | FailureSpec, cfg: SceneConfig) -> Frame:
    """Copy of ``frame`` with extra failures injected into its rendered maps.

    Damage uses the same cell draw as rendering with that failure would.
    """
    spec = parse_failure(failures) if isinstance(failures, str) else failures
    maps, status, damage = dict(frame.maps), dict(frame.status), dict(frame.damage)
    merged = parse_failure(frame.failures)
    for s in SENSORS:
        f = spec.get(s)
        if f.kind == "absent":
            maps[s] = np.zeros_like(maps[s])
            status[s] = "absent"
            damage[s] = np.zeros_like(damage[s])
        elif f.kind == "damaged" and status[s] != "absent":
            cells = damage_cells(f, cfg, frame.scene_seed, s)
            arr = maps[s].copy()
            arr[:, cells] = 0.0
            maps[s] = arr
            status[s] = "damaged"
            damage[s] = damage[s] | cells
        else:
            continue
        merged.per_sensor[s] = f
    return Frame(frame.frame_id, frame.weather, str(merged), frame.objects, maps, status, damage,
                 frame.shortfall, frame.scene_seed)


def make_dataset(
    n_frames: int,
    weather_mix=None,
    failure_mix=None,
    seed: int = 0,
    cfg: SceneConfig | None = None,
    out_dir: str | Path | None = None,
) -> list[Frame]:
    cfg = cfg or SceneConfig()
    weather_mix = weather_mix or cfg.weather_mix
    failure_mix = failure_mix or cfg.failure_mix
    conds = sample_conditions(n_frames, weather_mix, failure_mix, seed)
    frames = [render_frame(i, seed, wth, fail, cfg) for i, (wth, fail) in enumerate(conds)]
    if out_dir is not None:
        write_dataset(frames, out_dir, cfg, seed)
    return frames


LABEL_COLUMNS = ("frame", "class", "x", "y", "z", "xl", "yl", "zl", "cos", "sin", "weather", "failures")
FRAME_COLUMNS = ("frame", "weather", "failures", "n_objects", "shortfall", "scene_seed")


def write_dataset(frames: Sequence[Frame], out_dir: str | Path, cfg: SceneConfig, seed: int) -> None:
    out = Path(out_dir)
    fdir = out / "frames"
    try:
        fdir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": DATASET_VERSION,
            "frame_count": len(frames),
            "seed": seed,
            "sensors": {s: SENSOR_CHANNELS[s] for s in SENSORS},
            "scenes": asdict(cfg),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        with open(out / "labels.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(LABEL_COLUMNS)
            for f in frames:
                for b, c in f.objects:
                    wr.writerow([f.frame_id, CLASS_NAMES[c]] + [repr(v) for v in b.as_array().tolist()]
                                + [f.weather, f.failures])
        with open(out / "frames.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(FRAME_COLUMNS)
            for f in frames:
                wr.writerow([f.frame_id, f.weather, f.failures, len(f.objects), int(f.shortfall), f.scene_seed])
        for f in frames:
            rec = dict(f.maps)
            rec["status"] = np.array([STATUS_CODES[f.status[s]] for s in SENSORS], dtype=np.float32)
            for s in SENSORS:
                rec[f"damage.{s}"] = f.damage[s].astype(np.float32)
            (fdir / f"{f.frame_id:06d}.bin").write_bytes(encode_records(rec, width=4))
    except OSError as e:
        raise OSError(f"writing dataset failed at {e.filename or out}: {e.strerror}") from e


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def load_dataset(path: str | Path) -> tuple[list[Frame], SceneConfig]:
    root = Path(path)
    try:
        manifest = read_manifest(root)
        if manifest["format_version"] != DATASET_VERSION:
            raise ValueError(f"{root}: unsupported dataset version {manifest['format_version']}")
        cfg = SceneConfig(**manifest["scenes"])
        labels: dict[int, list] = {}
        with open(root / "labels.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                b = Box(*(float(row[k]) for k in ("x", "y", "z", "xl", "yl", "zl", "cos", "sin")))
                labels.setdefault(int(row["frame"]), []).append((b, CLASS_NAMES.index(row["class"])))
        frames = []
        codes = {v: k for k, v in STATUS_CODES.items()}
        with open(root / "frames.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                fid = int(row["frame"])
                rec = decode_records((root / "frames" / f"{fid:06d}.bin").read_bytes())
                frames.append(
                    Frame(
                        fid,
                        row["weather"],
                        row["failures"],
                        labels.get(fid, []),
                        {s: rec[s] for s in SENSORS},
                        {s: codes[float(v)] for s, v in zip(SENSORS, rec["status"])},
                        {s: rec[f"damage.{s}"].astype(bool) for s in SENSORS},
                        bool(int(row["shortfall"])),
                        int(row["scene_seed"]),
                    )
                )
    except OSError as e:
        raise OSError(f"reading dataset failed at {e.filename or root}: {e.strerror}") from e
    return frames, cfg
