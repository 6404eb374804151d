"""Reference fusion baselines and exact attention-cost accounting.

DCF concatenates sensor maps along channels and so cannot run with a sensor
missing. SCF refines object queries against every patch of every sensor
through a stack of cross-attention blocks.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .fusion import SENSORS, AvailabilityMask, UnifiedPatchSet, casap_fuse
from .numerics import ATTN_KEYS, ConfigurationError, EmptyKeyError, OpCounter, ParamStore, Tensor


class FusedWidthError(ConfigurationError):
    """Concatenation fusion received a different sensor set than it was built for."""


# --------------------------------------------------------------------------
# deeply coupled (concatenation) fusion


def dcf_concat_fuse(bundle: Mapping, params: Mapping | None = None, channels: Mapping[str, int] | None = None):
    """Concatenate camera, lidar, radar maps along channels, then optionally mix 1x1.

    ``channels`` (sensor -> C_s) fixes the expected layout; by default it is
    read from the mixing weight when given. Any missing sensor changes the
    fused width and raises :class:`FusedWidthError`.
    """
    missing = [s for s in SENSORS if s not in bundle or bundle[s] is None]
    if missing:
        raise FusedWidthError(f"fused-width mismatch: concatenation needs all sensors, missing {missing}")
    maps = [nx.as_tensor(getattr(bundle[s], "data", bundle[s])) for s in SENSORS]
    if channels is not None:
        for s, m in zip(SENSORS, maps):
            if m.shape[-3] != channels[s]:
                raise FusedWidthError(f"fused-width mismatch: {s} has {m.shape[-3]} channels, expected {channels[s]}")
    x = nx.concat(maps, axis=-3)
    if params is None:
        return x
    w = params["w"]
    if x.shape[-3] != w.shape[0]:
        raise FusedWidthError(f"fused-width mismatch: mixing layer expects {w.shape[0]} channels, got {x.shape[-3]}")
    nd = x.ndim
    x = nx.swapaxes(x, nd - 3, nd - 1)  # [..., W, H, C]
    x = nx.linear(x, w, params.get("b"))
    return nx.swapaxes(x, nd - 3, nd - 1)


# --------------------------------------------------------------------------
# sensor-wise cross-attention fusion


def init_scf_params(store: ParamStore, c: int, n_td: int, n_sensors: int, n_patches: int, rng, prefix: str = "scf") -> ParamStore:
    store.add(f"{prefix}.pos", rng.normal(0.0, 0.02, size=(n_sensors, n_patches, c)))
    for k in range(n_td):
        for name in ("q", "k", "v", "o"):
            store.add(f"{prefix}.block{k}.w{name}", rng.normal(0.0, np.sqrt(1.0 / c), size=(c, c)))
            store.add(f"{prefix}.block{k}.b{name}", np.zeros(c))
    return store


def scf_decode(
    unified: Mapping | Sequence,
    obj_queries,
    n_td: int,
    store: ParamStore,
    n_h: int = 1,
    mask: AvailabilityMask | None = None,
    prefix: str = "scf",
):
    """Stacked cross-attention of object queries over all sensors' patches.

    Each block attends the N_obj queries to the N_s * N_p keys (patch features
    plus a learned per-patch positional tag; values carry no tag) and feeds its
    output to the next block. Returns (queries [N_obj, C], per-block scores).
    """
    if n_td < 1:
        raise ConfigurationError("n_td must be at least 1")
    if not isinstance(unified, Mapping):
        unified = {u.sensor: u for u in unified}
    sensors = [s for s in SENSORS if s in unified and (mask is None or mask.is_available(s))]
    if not sensors:
        raise EmptyKeyError("no sensor is available for fusion")
    feats = [nx.as_tensor(getattr(unified[s], "features", unified[s])) for s in sensors]
    pos = store[f"{prefix}.pos"]
    tagged = [nx.add(f, nx.take(pos, [SENSORS.index(s)], axis=0)) for f, s in zip(feats, sensors)]
    c = feats[0].shape[-1]
    keys = nx.reshape(nx.concat(tagged, axis=0), (-1, c))
    values = nx.reshape(nx.concat(feats, axis=0), (-1, c))
    x = nx.as_tensor(obj_queries)
    all_scores = []
    for k in range(n_td):
        params = {name: store[f"{prefix}.block{k}.{name}"] for name in ATTN_KEYS}
        x, scores = nx.multi_head_cross_attention(x, keys, params, n_h, value=values)
        all_scores.append(scores)
    return x, all_scores


# --------------------------------------------------------------------------
# operation accounting


@dataclass
class OpCount:
    attention_score_evals: int = 0
    mlp_mult_adds: int = 0
    wall_time_ns: int = 0


def closed_form_score_evals(method: str, n_p: int = 1, N_p: int = 1, N_q: int = 1, N_s: int = 3, N_obj: int = 300, n_td: int = 6) -> int:
    if method == "ASF":
        return n_p * N_p * N_q * N_s
    if method == "SCF":
        return n_td * N_obj * N_s * N_p
    raise ValueError(f"unknown method {method!r}")


@dataclass
class BenchPoint:
    n_p: int = 1
    N_p: int = 144
    N_q: int = 1
    N_obj: int = 300
    n_td: int = 6
    N_s: int = 3
    c: int = 256
    n_h: int = 16


def _random_unified(pt: BenchPoint, rng) -> dict:
    return {s: UnifiedPatchSet(s, Tensor(rng.normal(size=(pt.N_p, pt.c)))) for s in SENSORS[: pt.N_s]}


def _asf_core(pt: BenchPoint, rng):
    store = ParamStore()
    store.add("q_ref", rng.normal(size=(pt.n_p, pt.N_q, pt.c)))
    for k in ("q", "k", "v", "o"):
        store.add(f"attn.w{k}", rng.normal(0.0, np.sqrt(1.0 / pt.c), size=(pt.c, pt.c)))
        store.add(f"attn.b{k}", np.zeros(pt.c))
    unified = _random_unified(pt, rng)
    attn = store.group("attn")
    return lambda: casap_fuse(unified, store["q_ref"], None, pt.n_h, attn)


def _scf_core(pt: BenchPoint, rng):
    store = ParamStore()
    init_scf_params(store, pt.c, pt.n_td, pt.N_s, pt.N_p, rng)
    unified = _random_unified(pt, rng)
    queries = Tensor(rng.normal(size=(pt.N_obj, pt.c)))
    return lambda: scf_decode(unified, queries, pt.n_td, store, pt.n_h)


def count_attention_ops(method: str, pt: BenchPoint, repeats: int = 1, seed: int = 0) -> OpCount:
    """Exact instrumented counts from one forward; wall time is the min over repeats."""
    rng = np.random.default_rng(seed)
    with nx.precision(32):
        run = _asf_core(pt, rng) if method == "ASF" else _scf_core(pt, rng) if method == "SCF" else None
        if run is None:
            raise ValueError(f"unknown method {method!r}")
        counter = OpCounter()
        with nx.counting(counter):
            run()
        best = None
        for _ in range(max(repeats, 1)):
            t0 = time.perf_counter_ns()
            run()
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
    return OpCount(counter.score_evals, counter.mlp_mult_adds, int(best))


BENCH_COLUMNS = (
    "method", "n_p", "N_p", "N_q", "N_obj", "n_td",
    "score_evals", "mlp_mult_adds", "wall_time_ns", "closed_form_score_evals", "score_evals_per_patch",
)


def bench(points: Sequence[BenchPoint], repeats: int = 3, methods=("ASF", "SCF")) -> list[dict]:
    rows = []
    for pt in points:
        for m in methods:
            oc = count_attention_ops(m, pt, repeats)
            rows.append({
                "method": m, "n_p": pt.n_p, "N_p": pt.N_p, "N_q": pt.N_q, "N_obj": pt.N_obj, "n_td": pt.n_td,
                "score_evals": oc.attention_score_evals, "mlp_mult_adds": oc.mlp_mult_adds,
                "wall_time_ns": oc.wall_time_ns,
                "closed_form_score_evals": closed_form_score_evals(m, pt.n_p, pt.N_p, pt.N_q, pt.N_s, pt.N_obj, pt.n_td),
                # the same total spread over the N_p patch positions
                "score_evals_per_patch": oc.attention_score_evals // pt.N_p,
            })
    return rows


def write_bench_csv(path, rows: Sequence[dict], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def default_grid() -> list[BenchPoint]:
    """Twelve points spanning patch count, bank count, queries and decoder depth."""
    pts = []
    for N_p in (16, 64, 144):
        for n_p, N_q, n_td, N_obj in ((1, 1, 6, 300), (2, 1, 3, 100), (1, 2, 1, 50), (8, 1, 6, 300)):
            pts.append(BenchPoint(n_p=n_p, N_p=N_p, N_q=N_q, N_obj=N_obj, n_td=n_td, c=64, n_h=4))
    return pts


def point_dict(pt: BenchPoint) -> dict:
    return asdict(pt)
