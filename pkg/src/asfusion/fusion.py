"""Availability-aware fusion: patchify, unified projection, cross-sensor attention
per patch, post-normalization and reassembly into one fused BEV map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .config import FusionConfig
from .numerics import ConfigurationError, EmptyKeyError, ParamStore, Tensor

SENSORS = ("camera", "lidar", "radar")
SENSOR_LETTERS = {"camera": "C", "lidar": "L", "radar": "R"}
LETTER_SENSORS = {v: k for k, v in SENSOR_LETTERS.items()}

# the seven non-empty sensor subsets
ALL_COMBOS = ("C", "L", "R", "LR", "CR", "CL", "CLR")


@dataclass
class FeatureMap:
    sensor: str
    data: np.ndarray  # [C, H, W]

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]


@dataclass
class PatchSet:
    sensor: str
    patch_h: int
    patch_w: int
    grid: tuple[int, int]  # (N_H, N_W)
    patches: np.ndarray  # [..., N_p, C * P_H * P_W]

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def index_map(self) -> np.ndarray:
        """(row, col) of each patch in the patch grid, row-major."""
        r, c = np.divmod(np.arange(self.count), self.grid[1])
        return np.stack([r, c], axis=1)


@dataclass
class UnifiedPatchSet:
    sensor: str
    features: Tensor  # [..., N_p, C_u]


@dataclass
class AvailabilityMask:
    """Per-sensor runtime status: "available", "absent", or a degradation severity in [0, 1]."""

    states: dict = field(default_factory=lambda: {s: "available" for s in SENSORS})

    @classmethod
    def from_combo(cls, combo: str) -> "AvailabilityMask":
        bad = set(combo) - set("CLR")
        if bad or not combo:
            raise ValueError(f"bad sensor combination {combo!r}")
        return cls({s: ("available" if SENSOR_LETTERS[s] in combo else "absent") for s in SENSORS})

    def is_available(self, sensor: str) -> bool:
        return self.states.get(sensor, "absent") != "absent"

    @property
    def available(self) -> list[str]:
        return [s for s in SENSORS if self.is_available(s)]

    @property
    def combo(self) -> str:
        return "".join(SENSOR_LETTERS[s] for s in self.available)

    def intersect(self, other: "AvailabilityMask") -> "AvailabilityMask":
        out = {}
        for s in SENSORS:
            if not (self.is_available(s) and other.is_available(s)):
                out[s] = "absent"
            else:
                a, b = self.states[s], other.states[s]
                out[s] = a if a != "available" else b
        return AvailabilityMask(out)


@dataclass
class SensorAttentionMap:
    """Attention mass each sensor receives, per bank and patch.

    ``masses`` is [n_p, N_p, 3] in (camera, lidar, radar) order; absent
    sensors hold exactly 0.
    """

    masses: np.ndarray
    grid: tuple[int, int]

    def per_patch(self) -> np.ndarray:
        return self.masses.mean(axis=0)

    def ratios(self) -> np.ndarray:
        """Mean mass per sensor over banks and patches, in percent."""
        r = self.per_patch().mean(axis=0)
        return 100.0 * r / r.sum()

    def rows(self, frame: int):
        n_p, n_patches, _ = self.masses.shape
        for bank in range(n_p):
            for i in range(n_patches):
                row, col = divmod(i, self.grid[1])
                for s, name in enumerate(SENSORS):
                    yield (frame, row, col, bank, name, float(self.masses[bank, i, s]))


SAM_COLUMNS = ("frame", "patch_row", "patch_col", "bank", "sensor", "mass")


def write_sam_csv(path, sams, header_comment: str | None = None) -> None:
    """Write (frame, SensorAttentionMap) pairs as CSV."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(SAM_COLUMNS)
        for frame, sam in sams:
            for r in sam.rows(frame):
                w.writerow(r[:5] + (repr(r[5]),))


@dataclass
class FusedFM:
    data: Tensor  # [..., n_p * C_q, H, W]

    @property
    def shape(self):
        return self.data.shape


# --------------------------------------------------------------------------
# patch layout


def patchify_array(arr: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """[..., C, H, W] -> [..., N_p, C * P_H * P_W], patches row-major, cells (c, r, col)."""
    *lead, c, h, w = arr.shape
    if h % patch_h or w % patch_w:
        raise ConfigurationError(f"divisibility: {h}x{w} map is not divisible into {patch_h}x{patch_w} patches")
    nh, nw = h // patch_h, w // patch_w
    x = arr.reshape(*lead, c, nh, patch_h, nw, patch_w)
    k = len(lead)
    x = x.transpose(*range(k), k + 1, k + 3, k, k + 2, k + 4)  # [..., nh, nw, c, ph, pw]
    return x.reshape(*lead, nh * nw, c * patch_h * patch_w)


def patchify(fm: FeatureMap, patch_h: int, patch_w: int) -> PatchSet:
    patches = patchify_array(fm.data, patch_h, patch_w)
    return PatchSet(fm.sensor, patch_h, patch_w, (fm.height // patch_h, fm.width // patch_w), patches)


def unpatchify(ps: PatchSet) -> FeatureMap:
    nh, nw = ps.grid
    *lead, n, length = ps.patches.shape
    c = length // (ps.patch_h * ps.patch_w)
    k = len(lead)
    x = ps.patches.reshape(*lead, nh, nw, c, ps.patch_h, ps.patch_w)
    x = x.transpose(*range(k), k + 2, k, k + 3, k + 1, k + 4)
    return FeatureMap(ps.sensor, x.reshape(*lead, c, nh * ps.patch_h, nw * ps.patch_w))


# --------------------------------------------------------------------------
# parameters


def _init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng, gain: float = 2.0):
    store.add(f"{name}.w", rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def _init_ln(store: ParamStore, name: str, width: int):
    store.add(f"{name}.gamma", np.ones(width))
    store.add(f"{name}.beta", np.zeros(width))


def _init_block(store: ParamStore, prefix: str, in_width: int, out_width: int, repeats: int, rng):
    """LN -> (linear -> GeLU) x repeats -> LN."""
    _init_ln(store, f"{prefix}.ln_in", in_width)
    width = in_width
    for k in range(repeats):
        _init_linear(store, f"{prefix}.proj{k}", width, out_width, rng)
        width = out_width
    _init_ln(store, f"{prefix}.ln_out", out_width)


def init_fusion_params(
    store: ParamStore, cfg: FusionConfig, sensor_channels: Mapping[str, int], rng: np.random.Generator
) -> ParamStore:
    area = cfg.patch_h * cfg.patch_w
    for s in SENSORS:
        _init_block(store, f"ucp.{s}", sensor_channels[s] * area, cfg.c_u, cfg.n_u, rng)
    store.add("casap.q_ref", rng.normal(0.0, 1.0, size=(cfg.n_p, cfg.n_q, cfg.c_u)))
    for k in ("q", "k", "v", "o"):
        store.add(f"casap.attn.w{k}", rng.normal(0.0, np.sqrt(1.0 / cfg.c_u), size=(cfg.c_u, cfg.c_u)))
        store.add(f"casap.attn.b{k}", np.zeros(cfg.c_u))
    _init_block(store, "pn", cfg.c_u, cfg.c_u, cfg.n_n, rng)
    return store


# --------------------------------------------------------------------------
# stages


def _block(x, store: ParamStore, prefix: str, repeats: int) -> Tensor:
    x = nx.layer_norm(x, store[f"{prefix}.ln_in.gamma"], store[f"{prefix}.ln_in.beta"])
    for k in range(repeats):
        w = store[f"{prefix}.proj{k}.w"]
        if x.shape[-1] != w.shape[0]:
            raise ConfigurationError(
                f"{prefix}: width {x.shape[-1]} does not match projection input {w.shape[0]}"
            )
        x = nx.gelu(nx.linear(x, w, store[f"{prefix}.proj{k}.b"]))
    return nx.layer_norm(x, store[f"{prefix}.ln_out.gamma"], store[f"{prefix}.ln_out.beta"])


def ucp_project(p: PatchSet, store: ParamStore, n_u: int = 2) -> UnifiedPatchSet:
    """Per-sensor projection of patch vectors into the shared C_u space."""
    gamma = store[f"ucp.{p.sensor}.ln_in.gamma"]
    if gamma.shape[0] != p.patches.shape[-1]:
        raise ConfigurationError(
            f"ucp.{p.sensor}: patch width {p.patches.shape[-1]} != expected {gamma.shape[0]}"
        )
    return UnifiedPatchSet(p.sensor, _block(Tensor(p.patches), store, f"ucp.{p.sensor}", n_u))


def casap_fuse(
    unified: Mapping[str, UnifiedPatchSet] | list,
    q_ref,
    mask: AvailabilityMask | None,
    n_h: int,
    attn_params: Mapping[str, Tensor],
):
    """Cross-attention across the available sensors, independently for every patch.

    ``q_ref`` is [N_q, C_u] (one bank) or [n_p, N_q, C_u]. Unified features are
    [..., N_p, C_u]. Returns per-patch outputs ([..., N_p, C_u] or
    [..., n_p, N_p, C_u]) and the attention masses as [..., n_p, N_p, 3].
    """
    if not isinstance(unified, Mapping):
        unified = {u.sensor: u for u in unified}
    sensors = [s for s in SENSORS if s in unified and (mask is None or mask.is_available(s))]
    if not sensors:
        raise EmptyKeyError("no sensor is available for fusion")
    feats = [unified[s].features for s in sensors]
    shape0 = feats[0].shape
    for f in feats[1:]:
        if f.shape != shape0:
            raise ConfigurationError(f"unified patch sets disagree in shape: {f.shape} vs {shape0}")
    q_ref = nx.as_tensor(q_ref)
    banked = q_ref.ndim == 3
    if not banked:
        q_ref = nx.reshape(q_ref, (1,) + q_ref.shape)
    n_p, n_q, c_u = q_ref.shape
    *lead, n_patches, _ = shape0

    kv = nx.stack(feats, axis=-2)  # [..., N_p, N_s, C]
    kv = nx.reshape(kv, tuple(lead) + (n_patches, 1, len(sensors), c_u))
    out, scores = nx.multi_head_cross_attention(q_ref, kv, attn_params, n_h)
    # out [..., N_p, n_p, N_q, C]; scores [..., N_p, n_p, h, N_q, N_s]
    if n_q == 1:
        out = nx.reshape(out, tuple(lead) + (n_patches, n_p, c_u))
    else:
        out = nx.mean(out, axis=-2)
    out = nx.swapaxes(out, -2, -3)  # [..., n_p, N_p, C]

    mass = scores.mean(axis=(-3, -2))  # [..., N_p, n_p, N_s]
    full = np.zeros(tuple(lead) + (n_patches, n_p, len(SENSORS)), dtype=mass.dtype)
    for j, s in enumerate(sensors):
        full[..., SENSORS.index(s)] = mass[..., j]
    full = np.swapaxes(full, -2, -3)  # [..., n_p, N_p, 3]

    if not banked:
        out = nx.reshape(out, tuple(lead) + (n_patches, c_u))
    return out, full


def post_normalize(x, store: ParamStore, n_n: int = 2) -> Tensor:
    return _block(nx.as_tensor(x), store, "pn", n_n)


def assemble_fused_fm(patches, grid: tuple[int, int], patch_h: int, patch_w: int, n_p: int | None = None) -> FusedFM:
    """Inverse patch layout; multiplier banks stack along channels.

    ``patches`` is [..., n_p, N_p, C_u], or [n_p * N_p, C_u] together with ``n_p``.
    """
    patches = nx.as_tensor(patches)
    nh, nw = grid
    c_u = patches.shape[-1]
    area = patch_h * patch_w
    if c_u % area:
        raise ConfigurationError(f"divisibility: C_u={c_u} not divisible by patch area {area}")
    if n_p is not None and patches.ndim == 2:
        if patches.shape[0] != n_p * nh * nw:
            raise ConfigurationError(
                f"divisibility: {patches.shape[0]} patches != n_p*N_H*N_W = {n_p * nh * nw}"
            )
        patches = nx.reshape(patches, (n_p, nh * nw, c_u))
    if patches.shape[-2] != nh * nw:
        raise ConfigurationError(f"expected {nh * nw} patches per bank, got {patches.shape[-2]}")
    *lead, banks, _, _ = patches.shape
    c_q = c_u // area
    k = len(lead)
    x = nx.reshape(patches, tuple(lead) + (banks, nh, nw, c_q, patch_h, patch_w))
    # -> [..., banks, c_q, nh, ph, nw, pw]
    x = nx.transpose(x, tuple(range(k)) + (k, k + 3, k + 1, k + 4, k + 2, k + 5))
    x = nx.reshape(x, tuple(lead) + (banks * c_q, nh * patch_h, nw * patch_w))
    return FusedFM(x)


def _as_array(v) -> np.ndarray:
    if isinstance(v, FeatureMap):
        return v.data
    return np.asarray(v)


def asf_forward(
    bundle: Mapping[str, FeatureMap | np.ndarray],
    mask: AvailabilityMask | None,
    cfg: FusionConfig,
    store: ParamStore,
    capture: dict | None = None,
):
    """Feature maps -> fused map plus sensor attention map.

    Maps may be [C, H, W] or batched [B, C, H, W]. Absent sensors are never
    projected, so their parameters receive no gradient.
    """
    mask = mask or AvailabilityMask()
    present = [s for s in SENSORS if s in bundle and mask.is_available(s)]
    if not present:
        raise EmptyKeyError("no sensor is available for fusion")
    arrays = {s: _as_array(bundle[s]) for s in present}
    h, w = arrays[present[0]].shape[-2:]
    for s in present:
        if arrays[s].shape[-2:] != (h, w):
            raise ConfigurationError(f"{s} map is {arrays[s].shape[-2:]}, expected {(h, w)}")
    cfg.check(h, w)
    grid = (h // cfg.patch_h, w // cfg.patch_w)
    dtype = nx.get_dtype()

    unified = {}
    for s in present:
        ps = PatchSet(s, cfg.patch_h, cfg.patch_w, grid,
                      patchify_array(arrays[s].astype(dtype, copy=False), cfg.patch_h, cfg.patch_w))
        unified[s] = ucp_project(ps, store, cfg.n_u)
    attn = store.group("casap.attn")
    fused, masses = casap_fuse(unified, store["casap.q_ref"], mask, cfg.n_h, attn)
    normed = post_normalize(fused, store, cfg.n_n)
    fm = assemble_fused_fm(normed, grid, cfg.patch_h, cfg.patch_w)
    if capture is not None:
        capture["unified"] = unified
        capture["casap"] = fused
        capture["pn"] = normed
        capture["grid"] = grid
    if masses.ndim == 3:
        sam = SensorAttentionMap(masses, grid)
    else:
        sam = [SensorAttentionMap(m, grid) for m in masses]
    return fm, sam


def fused_shape(height: int, width: int, cfg: FusionConfig) -> tuple[int, int, int]:
    return (cfg.fused_channels, height, width)
