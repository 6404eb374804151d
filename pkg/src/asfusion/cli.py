"""Experiment driver: ``asf gen|train|eval|bench|ablate|inspect``.

Exit codes: 0 success, 1 usage or config error, 2 runtime error, 3 NaN abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import itertools
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, ExperimentConfig
from .numerics import ConfigurationError, load_checkpoint

log = logging.getLogger("asfusion")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NAN = 0, 1, 2, 3
RUN_MANIFEST = "run_manifest.json"
CONFIG_FILE = "config.txt"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    run_id: str
    command: str
    config_hash: str
    code_version: str = __version__
    start: str = ""
    end: str = ""
    files: list = field(default_factory=list)  # [{"path", "bytes", "sha256"}]

    def finish(self, out_dir: Path) -> None:
        self.end = _now()
        self.files = inventory(out_dir)
        (out_dir / RUN_MANIFEST).write_text(json.dumps(asdict(self), indent=2) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def inventory(out_dir: Path) -> list[dict]:
    """Every file under ``out_dir`` except the run manifest itself."""
    rows = []
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != RUN_MANIFEST:
            data = p.read_bytes()
            rows.append({"path": p.relative_to(out_dir).as_posix(), "bytes": len(data),
                         "sha256": hashlib.sha256(data).hexdigest()})
    return rows


def start_run(command: str, cfg: ExperimentConfig) -> RunManifest:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    return RunManifest(f"{command}-{stamp}-{cfg.hash()[:8]}", command, cfg.hash(), start=_now())


def header(cfg: ExperimentConfig) -> str:
    return f"config_hash={cfg.hash()}"


# --------------------------------------------------------------------------
# config resolution


def resolve_config(args) -> ExperimentConfig:
    base = PRESETS[args.preset]() if getattr(args, "preset", None) else ExperimentConfig()
    if getattr(args, "config", None):
        base = ExperimentConfig.load(args.config, base)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        base.set(k.strip(), v.strip())
    if getattr(args, "seed", None) is not None:
        base.seed = args.seed
    base.validate()
    return base


def prepare_out(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty (use --force to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_failure(spec: str) -> None:
    from .scenes import parse_failure

    try:
        parse_failure(spec)
    except ValueError as e:
        raise UsageError(f"--fail {spec!r}: {e}") from e


def _failure_mix(fails: Sequence[str] | None, cfg: ExperimentConfig) -> dict:
    if not fails:
        return cfg.scenes.failure_mix
    for f in fails:
        _check_failure(f)
    return {",".join(fails): 1.0}


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    from .scenes import make_dataset

    cfg = resolve_config(args)
    if args.fail:
        cfg.scenes.failure_mix = _failure_mix(args.fail, cfg)
    n = args.frames if args.frames is not None else (
        cfg.train.train_frames if args.split == "train" else cfg.train.eval_frames)
    if n < 0:
        raise UsageError("--frames must be nonnegative")
    seed = cfg.seed if args.split == "train" else cfg.seed + 1000
    out = prepare_out(args.out, args.force)
    run = start_run("gen", cfg)
    (out / CONFIG_FILE).write_text(cfg.to_text())
    make_dataset(n, cfg.scenes.weather_mix, cfg.scenes.failure_mix, seed, cfg.scenes, out)
    run.finish(out)
    print(f"wrote {n} frames to {out}")
    return EXIT_OK


def _load_data(path):
    from .scenes import load_dataset

    return load_dataset(path)


def _apply_dataset_scenes(cfg: ExperimentConfig, scenes_cfg) -> None:
    mine = (cfg.scenes.x_min, cfg.scenes.x_max, cfg.scenes.y_min, cfg.scenes.y_max,
            cfg.scenes.grid_h, cfg.scenes.grid_w)
    theirs = (scenes_cfg.x_min, scenes_cfg.x_max, scenes_cfg.y_min, scenes_cfg.y_max,
              scenes_cfg.grid_h, scenes_cfg.grid_w)
    if mine != theirs:
        log.info("using dataset grid %s instead of config grid %s", theirs, mine)
    cfg.scenes = copy.deepcopy(scenes_cfg)
    cfg.validate()


def cmd_train(args) -> int:
    from .training import build_model, train

    cfg = resolve_config(args)
    if args.no_scl:
        cfg.train.scl = False
    frames, scfg = _load_data(args.data)
    _apply_dataset_scenes(cfg, scfg)
    out = prepare_out(args.out, args.force)
    run = start_run("train", cfg)
    (out / CONFIG_FILE).write_text(cfg.to_text())
    model = build_model(cfg)
    res = train(model, frames, out, header(cfg))
    run.finish(out)
    first = float(np.mean(res.step_totals[:10])) if res.step_totals else float("nan")
    last = float(np.mean(res.step_totals[-10:])) if res.step_totals else float("nan")
    print(f"trained {res.steps} steps; loss {first:.4f} -> {last:.4f}; checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def check_compatible(store, state: dict) -> None:
    """Raise with a per-tensor shape diff when a checkpoint does not fit the model."""
    diffs = []
    for k in sorted(set(store.params) | set(state)):
        if k not in state:
            diffs.append(f"  {k}: missing in checkpoint (model {store[k].shape})")
        elif k not in store.params:
            diffs.append(f"  {k}: not in model (checkpoint {state[k].shape})")
        elif store[k].shape != state[k].shape:
            diffs.append(f"  {k}: checkpoint {state[k].shape} vs model {store[k].shape}")
    if diffs:
        raise ConfigurationError("checkpoint incompatible with configuration:\n" + "\n".join(diffs))


def load_model(checkpoint: str | Path, config_path: str | Path | None, scenes_cfg=None):
    from .training import build_model

    ckpt = Path(checkpoint)
    cfg_file = Path(config_path) if config_path else ckpt.parent / CONFIG_FILE
    if not cfg_file.exists():
        raise UsageError(f"no config found next to {ckpt}; pass --config")
    cfg = ExperimentConfig.load(cfg_file)
    if scenes_cfg is not None:
        _apply_dataset_scenes(cfg, scenes_cfg)
    model = build_model(cfg)
    state = load_checkpoint(ckpt)
    check_compatible(model.store, state)
    model.store.load_state(state)
    return model


def cmd_eval(args) -> int:
    from .fusion import ALL_COMBOS
    from .training import FAILURE_VARIANTS, ap_lookup, evaluate, write_eval_outputs

    frames, scfg = _load_data(args.data)
    model = load_model(args.checkpoint, args.config, scfg)
    cfg = model.cfg
    combos = tuple(args.combos.split(",")) if args.combos else ALL_COMBOS
    failures = dict(FAILURE_VARIANTS)
    for spec in args.fail or []:
        _check_failure(spec)
        failures[spec] = spec
    if args.no_failures:
        failures = {}
    out = prepare_out(args.out, args.force)
    run = start_run("eval", cfg)
    (out / CONFIG_FILE).write_text(cfg.to_text())
    evals = evaluate(model, frames, combos, failures)
    write_eval_outputs(model, evals, out, header(cfg))
    run.finish(out)
    for name, ev in evals.items():
        print(f"{name:>10}  AP_BEV@0.3={ap_lookup(ev.ap, None, 'BEV', 0.3):.4f}  AP_3D@0.3={ap_lookup(ev.ap, None, '3D', 0.3):.4f}")
    return EXIT_OK


def _bench_points(name: str):
    from .baselines import BenchPoint, default_grid

    if name == "default":
        return default_grid()
    if name == "reference":
        return [BenchPoint()]
    if name == "single":
        return [BenchPoint(N_p=16, N_obj=50, n_td=1, c=64, n_h=4)]
    raise UsageError(f"unknown grid {name!r}")


def cmd_bench(args) -> int:
    from .baselines import bench, write_bench_csv

    cfg = resolve_config(args)
    points = _bench_points(args.grid)
    if not points:
        raise UsageError("benchmark grid is empty")
    rows = bench(points, repeats=args.repeats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out, rows, header(cfg))
    bad = [r for r in rows if r["score_evals"] != r["closed_form_score_evals"]]
    for r in rows:
        print(f"{r['method']}  n_p={r['n_p']} N_p={r['N_p']} N_q={r['N_q']} N_obj={r['N_obj']} n_td={r['n_td']}"
              f"  evals={r['score_evals']}  {r['wall_time_ns'] / 1e6:.2f} ms")
    if bad:
        print(f"{len(bad)} rows disagree with the closed form", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


ABLATION_AXES = {
    "P": ("fusion.patch_h", (1, 2, 4)),
    "C_u": ("fusion.c_u", (32, 64, 128)),
    "n_p": ("fusion.n_p", (1, 2, 4)),
    "n_h": ("fusion.n_h", (2, 4, 8)),
    "SCL": ("train.scl", (True, False)),
}
ABLATION_COLUMNS = ("P", "C_u", "n_p", "n_h", "SCL", "status", "reason", "seeds",
                    "ap_bev_03_CLR", "ap_bev_03_LR", "ap_3d_03_CLR", "ap_3d_03_LR")


def parse_axes(axes: str, overrides: Sequence[str] | None) -> dict:
    chosen = {}
    for a in axes.split(","):
        a = a.strip()
        if a not in ABLATION_AXES:
            raise UsageError(f"unknown ablation axis {a!r}; choose from {sorted(ABLATION_AXES)}")
        chosen[a] = ABLATION_AXES[a][1]
    for item in overrides or []:
        name, _, vals = item.partition("=")
        if name not in chosen:
            raise UsageError(f"--values for {name!r} but that axis is not selected")
        chosen[name] = tuple(
            (v.strip().lower() in ("1", "true", "on")) if name == "SCL" else int(v) for v in vals.split(",")
        )
    return chosen


def ablation_cells(base: ExperimentConfig, axes: dict):
    """Yield (cell values, config or None, reason) over the product of the axes."""
    names = list(axes)
    for combo in itertools.product(*(axes[n] for n in names)):
        cfg = copy.deepcopy(base)
        cell = dict(zip(names, combo))
        for n, v in cell.items():
            cfg.set(ABLATION_AXES[n][0], v)
            if n == "P":
                cfg.set("fusion.patch_w", v)
        try:
            cfg.validate()
            if cfg.fusion.c_u % cfg.fusion.n_h:
                raise ConfigError(f"divisibility: C_u={cfg.fusion.c_u} not divisible by n_h={cfg.fusion.n_h}")
        except ConfigError as e:
            reason = str(e) if "divisibility" in str(e) else f"divisibility: {e}"
            yield cell, None, reason
            continue
        yield cell, cfg, ""


def cmd_ablate(args) -> int:
    from .scenes import make_dataset
    from .training import ap_lookup, build_model, evaluate, train

    base = resolve_config(args)
    axes = parse_axes(args.axes, args.values)
    if args.train_data:
        train_frames, scfg = _load_data(args.train_data)
        _apply_dataset_scenes(base, scfg)
    else:
        train_frames = None
    eval_frames = _load_data(args.eval_data)[0] if args.eval_data else None
    out = prepare_out(args.out, args.force)
    run = start_run("ablate", base)
    (out / CONFIG_FILE).write_text(base.to_text())
    rows = []
    for cell, cfg, reason in ablation_cells(base, axes):
        row = {
            "P": cell.get("P", base.fusion.patch_h), "C_u": cell.get("C_u", base.fusion.c_u),
            "n_p": cell.get("n_p", base.fusion.n_p), "n_h": cell.get("n_h", base.fusion.n_h),
            "SCL": cell.get("SCL", base.train.scl), "seeds": args.seeds,
        }
        if cfg is None:
            row.update(status="skipped", reason=reason)
            rows.append(row)
            print(f"skip {cell}: {reason}")
            continue
        tr = train_frames or make_dataset(cfg.train.train_frames, seed=cfg.seed, cfg=cfg.scenes)
        ev = eval_frames or make_dataset(cfg.train.eval_frames, seed=cfg.seed + 1000, cfg=cfg.scenes)
        vals: dict[str, list] = {k: [] for k in ABLATION_COLUMNS[-4:]}
        for s in range(args.seeds):
            c = copy.deepcopy(cfg)
            c.seed = cfg.seed + s
            model = build_model(c)
            train(model, tr)
            evals = evaluate(model, ev, ("CLR", "LR"), failures={})
            vals["ap_bev_03_CLR"].append(ap_lookup(evals["CLR"].ap, None, "BEV", 0.3))
            vals["ap_bev_03_LR"].append(ap_lookup(evals["LR"].ap, None, "BEV", 0.3))
            vals["ap_3d_03_CLR"].append(ap_lookup(evals["CLR"].ap, None, "3D", 0.3))
            vals["ap_3d_03_LR"].append(ap_lookup(evals["LR"].ap, None, "3D", 0.3))
        for k, v in vals.items():
            v = np.asarray(v)
            row[k] = f"{v.mean():.4f}" if args.seeds == 1 else f"{v.mean():.4f}±{v.std(ddof=1):.4f}"
        row.update(status="ok", reason="")
        rows.append(row)
        print(f"{cell}: AP_BEV@0.3 CLR={row['ap_bev_03_CLR']} LR={row['ap_bev_03_LR']}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        fh.write(f"# {header(base)}\n")
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    run.finish(out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    p = Path(args.path)
    if not p.exists():
        raise UsageError(f"{p} does not exist")
    shown = False
    for name in ("manifest.json", RUN_MANIFEST, CONFIG_FILE):
        f = p / name if p.is_dir() else (p if p.name == name else None)
        if f is not None and f.exists():
            print(f"== {f}")
            print(f.read_text().rstrip())
            shown = True
    if p.is_file() and p.suffix == ".bin":
        from .numerics import decode_records

        for k, v in decode_records(p.read_bytes()).items():
            print(f"{k}\t{v.dtype}\t{tuple(v.shape)}")
        shown = True
    if not shown:
        raise UsageError(f"nothing to inspect at {p}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", help="flat key = value config file applied over the preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _config_args(g)
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--frames", type=int)
    g.add_argument("--fail", action="append", help="failure spec applied to every frame, e.g. camera=absent")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train with the sensor-combination loss")
    _config_args(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--no-scl", action="store_true", help="train on the all-sensor loss only")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint over sensor combinations")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="config of the checkpoint (default: config.txt beside it)")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--combos", help="comma-separated subset of C,L,R,LR,CR,CL,CLR")
    e.add_argument("--fail", action="append", help="extra failure variant evaluated with all sensors")
    e.add_argument("--no-failures", action="store_true", help="skip the damaged-sensor variants")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="attention cost of ASF vs SCF")
    _config_args(b)
    b.add_argument("--grid", choices=("default", "reference", "single"), default="default")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train and evaluate over a grid of fusion settings")
    _config_args(a)
    a.add_argument("--axes", required=True, help="comma-separated subset of P,C_u,n_p,n_h,SCL")
    a.add_argument("--values", action="append", metavar="AXIS=V1,V2", help="override an axis' values")
    a.add_argument("--seeds", type=int, default=1)
    a.add_argument("--train-data")
    a.add_argument("--eval-data")
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="print a manifest, config or tensor-record file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    from .training import TrainingAborted

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
