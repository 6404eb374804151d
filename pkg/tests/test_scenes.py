import dataclasses
import filecmp
import itertools
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from asfusion.config import SceneConfig
from asfusion.scenes import (
    REGIONS,
    SENSORS,
    SEVERITY_ORDER,
    WEATHERS,
    Failure,
    apply_failure,
    default_sensor_models,
    footprints,
    generate_scene,
    load_dataset,
    make_dataset,
    parse_failure,
    region_mask,
    render_frame,
    render_sensor_fm,
    sample_conditions,
)
from oracles import shapely_iou_bev


def desk():
    return SceneConfig()


# ---------------------------------------------------------------- sensor models


def test_attenuation_ordering():
    m = default_sensor_models()
    for s in SENSORS:
        assert m[s].attenuation("Normal") == 1.0
    cam = [m["camera"].attenuation(w) for w in SEVERITY_ORDER]
    assert all(a > b for a, b in zip(cam, cam[1:]))
    for w in ("Sleet", "HeavySnow"):
        assert m["radar"].attenuation(w) >= m["lidar"].attenuation(w) >= m["camera"].attenuation(w)
    assert m["radar"].attenuation("Fog") > 1.0
    assert [m[s].channels for s in SENSORS] == [6, 8, 4]


# ---------------------------------------------------------------- scenes


def test_scene_determinism():
    a, b = generate_scene(42, "Rain"), generate_scene(42, "Rain")
    assert [o.box for o in a.objects] == [o.box for o in b.objects]
    assert [o.cls for o in a.objects] == [o.cls for o in b.objects]


def test_empty_scene():
    s = generate_scene(1, object_count_range=(0, 0))
    assert s.objects == [] and not s.shortfall
    frame = render_sensor_fm(s, default_sensor_models()["lidar"], noise=False)
    assert np.all(frame.fm.data == 0)


def test_thousand_scenes_have_no_overlap_and_stay_inside():
    cfg = desk()
    for seed in range(1000):
        objs = generate_scene(seed, cfg=cfg).objects
        for o in objs:
            c = o.box.corners_bev()
            assert np.all(c[:, 0] >= cfg.x_min) and np.all(c[:, 0] <= cfg.x_max)
            assert np.all(c[:, 1] >= cfg.y_min) and np.all(c[:, 1] <= cfg.y_max)
        for a, b in itertools.combinations(objs, 2):
            assert shapely_iou_bev(a.box, b.box) == 0.0


def test_trucks_are_larger():
    sizes = {0: [], 1: []}
    for seed in range(200):
        for o in generate_scene(seed).objects:
            sizes[o.cls].append(o.box.xl * o.box.yl)
    assert min(sizes[1]) > max(sizes[0])


def test_crowded_scene_is_flagged():
    s = generate_scene(3, object_count_range=(60, 60))
    assert s.shortfall and len(s.objects) < 60


def test_bad_scene_inputs():
    with pytest.raises(ValueError):
        generate_scene(0, "Hail")
    with pytest.raises(ValueError):
        generate_scene(0, cfg=SceneConfig(x_min=1.0, x_max=1.0))


# ---------------------------------------------------------------- rendering


def test_absent_sensor_is_all_zero():
    s = generate_scene(5)
    for name, model in default_sensor_models().items():
        f = render_sensor_fm(s, model, Failure("absent"))
        assert f.status == "absent" and not np.any(f.fm.data)
    frame = render_frame(0, 5, "Normal", "camera=absent", desk())
    assert not frame.mask().is_available("camera") and not np.any(frame.maps["camera"])


def test_footprint_brighter_than_background():
    models = default_sensor_models()
    for seed in range(20):
        s = generate_scene(seed)
        occ = footprints(s).sum(axis=0)
        fg, bg = occ > 0, occ == 0
        for name, m in models.items():
            clean = dataclasses.replace(m, dropout_rate=0.0, range_sparsity=0.0)
            x = render_sensor_fm(s, clean, noise=False).fm.data
            if name == "lidar":
                assert x[-1][fg].min() > x[-1][bg].max()
            else:
                assert x[0][fg].mean() > x[0][bg].mean()


def _contrast(x, fg, bg):
    return float(x[fg].mean() - x[bg].mean())


def test_camera_energy_ratio_matches_attenuation():
    # foreground-minus-background contrast cancels the zero-mean noise and the
    # haze offset; tolerance is three Monte-Carlo standard errors of the ratio
    m = default_sensor_models()["camera"]
    cfg = desk()
    heavy, normal = [], []
    for seed in range(100):
        base = generate_scene(seed, cfg=cfg)
        occ = footprints(base)
        core = occ.sum(axis=0) >= 0.5
        bg = occ.sum(axis=0) == 0
        for weather, acc in (("HeavySnow", heavy), ("Normal", normal)):
            s = dataclasses.replace(base, weather=weather)
            acc.append(_contrast(render_sensor_fm(s, m, occ=occ).fm.data[0], core, bg))
    heavy, normal = np.array(heavy), np.array(normal)
    ratio = heavy.mean() / normal.mean()
    se = np.std(heavy - ratio * normal, ddof=1) / np.sqrt(len(heavy)) / normal.mean()
    assert abs(ratio - m.attenuation("HeavySnow")) < 3 * se


def test_monotone_degradation():
    models = default_sensor_models()
    energy = {s: np.zeros(len(SEVERITY_ORDER)) for s in SENSORS}
    for seed in range(30):
        base = generate_scene(seed)
        occ = footprints(base)
        fg = occ.sum(axis=0) > 0
        for k, w in enumerate(SEVERITY_ORDER):
            s = dataclasses.replace(base, weather=w)
            for name, m in models.items():
                energy[name][k] += np.abs(render_sensor_fm(s, m, noise=False, occ=occ).fm.data[:, fg]).mean()
    for name, e in energy.items():
        assert np.all(np.diff(e) <= 1e-9), (name, e)


@pytest.mark.parametrize("region", REGIONS)
def test_damaged_cells_exactly_zero(region):
    cfg = desk()
    for seed in range(5):
        frame = render_frame(seed, 11, "Sleet", f"lidar=damaged:{region}:0.8,camera=damaged:{region}:1.0", cfg)
        for s in ("lidar", "camera"):
            d = frame.damage[s]
            assert d.shape == (cfg.grid_h, cfg.grid_w)
            assert np.all(frame.maps[s][:, d] == 0.0)
            assert not np.any(d & ~region_mask(region, cfg))
        assert np.array_equal(frame.damage["camera"], region_mask(region, cfg))


def test_apply_failure_matches_rendering():
    cfg = desk()
    clean = render_frame(4, 9, "Rain", "none", cfg)
    direct = render_frame(4, 9, "Rain", "lidar=damaged:front-half:1", cfg)
    injected = apply_failure(clean, "lidar=damaged:front-half:1", cfg)
    for s in SENSORS:
        assert np.array_equal(injected.maps[s], direct.maps[s])
    assert injected.failures == direct.failures
    gone = apply_failure(clean, "camera=absent", cfg)
    assert gone.mask().combo == "LR" and not np.any(gone.maps["camera"])


def test_failure_parsing():
    spec = parse_failure("camera=absent,lidar=damaged:front-half:0.5")
    assert spec.get("camera").kind == "absent"
    assert spec.get("lidar") == Failure("damaged", "front-half", 0.5)
    assert str(spec) == "camera=absent,lidar=damaged:front-half:0.5"
    assert str(parse_failure("none")) == "none"
    for bad in ("sonar=absent", "camera=broken", "lidar=damaged:top:1", "lidar=damaged:full:2"):
        with pytest.raises(ValueError):
            parse_failure(bad)


# ---------------------------------------------------------------- datasets


def test_weather_histogram_matches_mix():
    mix = desk().weather_mix
    conds = sample_conditions(10000, mix, {"none": 1.0}, seed=7)
    counts = np.array([sum(1 for w, _ in conds if w == k) for k in mix])
    expected = np.array(list(mix.values())) / sum(mix.values()) * 10000
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_mix_validation():
    with pytest.raises(ValueError):
        sample_conditions(3, {"Normal": -1.0, "Rain": 2.0}, {"none": 1}, 0)
    with pytest.raises(ValueError):
        sample_conditions(3, {"Normal": 0.0}, {"none": 1}, 0)
    with pytest.raises(ValueError):
        sample_conditions(3, {"Hail": 1.0}, {"none": 1}, 0)


def _tree_equal(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all(filecmp.cmp(a / p, b / p, shallow=False) for p in fa)


def test_dataset_determinism_and_round_trip(tmp_path):
    cfg = desk()
    mix = {"none": 2.0, "camera=absent": 1.0, "lidar=damaged:front-half:1.0": 1.0}
    a = make_dataset(12, None, mix, seed=3, cfg=cfg, out_dir=tmp_path / "a")
    make_dataset(12, None, mix, seed=3, cfg=cfg, out_dir=tmp_path / "b")
    assert _tree_equal(tmp_path / "a", tmp_path / "b")
    frames, cfg2 = load_dataset(tmp_path / "a")
    assert cfg2 == cfg
    assert [f.frame_id for f in frames] == list(range(12))
    for x, y in zip(a, frames):
        assert (x.weather, x.failures, x.objects, x.status, x.shortfall, x.scene_seed) == (
            y.weather, y.failures, y.objects, y.status, y.shortfall, y.scene_seed)
        for s in SENSORS:
            assert x.maps[s].dtype == y.maps[s].dtype and np.array_equal(x.maps[s], y.maps[s])
            assert np.array_equal(x.damage[s], y.damage[s])


def test_empty_dataset(tmp_path):
    assert make_dataset(0, seed=1, out_dir=tmp_path) == []
    frames, _ = load_dataset(tmp_path)
    assert frames == []


def test_dataset_io_errors_name_the_path(tmp_path):
    with pytest.raises(OSError, match="nowhere"):
        load_dataset(tmp_path / "nowhere")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        make_dataset(1, seed=0, out_dir=blocker / "sub")


def test_frame_seeds_are_order_independent():
    cfg = desk()
    whole = make_dataset(6, seed=2, cfg=cfg)
    conds = sample_conditions(6, cfg.weather_mix, cfg.failure_mix, 2)
    single = render_frame(5, 2, conds[5][0], conds[5][1], cfg)
    for s in SENSORS:
        assert np.array_equal(single.maps[s], whole[5].maps[s])


def test_weathers_enumerated():
    assert len(WEATHERS) == 7 and set(SEVERITY_ORDER) <= set(WEATHERS)
