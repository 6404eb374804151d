import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asfusion import numerics as nx
from asfusion.fusion import (
    ALL_COMBOS,
    SENSORS,
    AvailabilityMask,
    FeatureMap,
    PatchSet,
    SensorAttentionMap,
    UnifiedPatchSet,
    asf_forward,
    assemble_fused_fm,
    casap_fuse,
    init_fusion_params,
    patchify,
    post_normalize,
    ucp_project,
    unpatchify,
    write_sam_csv,
)
from asfusion.numerics import ConfigurationError, EmptyKeyError, ParamStore, Tape, Tensor, backward
from asfusion.scenes import SENSOR_CHANNELS
from conftest import random_maps, tiny_config
from gradcheck import directional_errors
from oracles import monolithic_asf, naive_attention


def fusion_store(cfg, seed=0, perturb=True):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_fusion_params(store, cfg.fusion, SENSOR_CHANNELS, rng)
    if perturb:
        # move LN affine params and biases off their trivial init so the oracle sees them
        for name in store:
            if name.endswith((".gamma", ".beta", ".b", ".bq", ".bk", ".bv", ".bo")):
                store[name].data = store[name].data + rng.normal(0, 0.3, store[name].shape)
    return store


# ---------------------------------------------------------------- patch layout


def test_patchify_small_example():
    fm = FeatureMap("camera", np.arange(16.0).reshape(1, 4, 4))
    ps = patchify(fm, 2, 2)
    assert ps.count == 4 and ps.patches.shape == (4, 4)
    assert list(ps.patches[0]) == [0.0, 1.0, 4.0, 5.0]


def test_patchify_index_oracle():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(3, 6, 4))
    ps = patchify(FeatureMap("lidar", data), 2, 2)
    assert ps.count == 6 and ps.patches.shape == (6, 12)
    for n in range(6):
        pr, pc = n // 2, n % 2
        k = 0
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    assert ps.patches[n, k] == data[c, pr * 2 + i, pc * 2 + j]
                    k += 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_patchify_round_trip(c, nh, nw, ph, pw):
    data = np.random.default_rng(c * 100 + nh).normal(size=(c, nh * ph, nw * pw))
    ps = patchify(FeatureMap("radar", data), ph, pw)
    assert np.array_equal(unpatchify(ps).data, data)
    idx = ps.index_map
    assert len({tuple(r) for r in idx}) == nh * nw


def test_patchify_divisibility():
    with pytest.raises(ConfigurationError, match="divisib"):
        patchify(FeatureMap("camera", np.zeros((1, 5, 4))), 2, 2)


def test_assemble_index_oracle():
    rng = np.random.default_rng(1)
    n_p, nh, nw, ph, pw, c_q = 2, 3, 3, 2, 2, 3
    patches = rng.normal(size=(n_p, nh * nw, c_q * ph * pw))
    out = assemble_fused_fm(patches, (nh, nw), ph, pw).data.data
    assert out.shape == (n_p * c_q, nh * ph, nw * pw)
    hits = np.zeros(patches.shape, dtype=int)
    for ch in range(out.shape[0]):
        for r in range(out.shape[1]):
            for col in range(out.shape[2]):
                bank, cq = divmod(ch, c_q)
                pr, i = divmod(r, ph)
                pc, j = divmod(col, pw)
                src = (bank, pr * nw + pc, cq * ph * pw + i * pw + j)
                assert out[ch, r, col] == patches[src]
                hits[src] += 1
    assert np.all(hits == 1)


def test_assemble_matches_unpatchify_for_one_bank():
    data = np.random.default_rng(2).normal(size=(4, 6, 6))
    ps = patchify(FeatureMap("camera", data), 2, 2)
    out = assemble_fused_fm(ps.patches[None], ps.grid, 2, 2).data.data
    assert np.array_equal(out, data)


def test_assemble_errors():
    with pytest.raises(ConfigurationError, match="divisib"):
        assemble_fused_fm(np.zeros((1, 4, 6)), (2, 2), 2, 2)
    with pytest.raises(ConfigurationError, match="divisib"):
        assemble_fused_fm(np.zeros((7, 8)), (2, 2), 2, 2, n_p=2)


def test_fused_channel_arithmetic():
    from asfusion.config import FusionConfig

    cfg = FusionConfig(c_u=256, patch_h=2, patch_w=2, n_p=8)
    assert cfg.c_q == 64 and cfg.fused_channels == 512


# ---------------------------------------------------------------- UCP / CASAP / PN


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    from math import erf, sqrt

    return x * 0.5 * (1 + np.vectorize(erf)(x / sqrt(2)))


def _block_oracle(x, P, prefix, repeats):
    x = _ln(x, P[f"{prefix}.ln_in.gamma"], P[f"{prefix}.ln_in.beta"])
    for k in range(repeats):
        x = _gelu(x @ P[f"{prefix}.proj{k}.w"] + P[f"{prefix}.proj{k}.b"])
    return _ln(x, P[f"{prefix}.ln_out.gamma"], P[f"{prefix}.ln_out.beta"])


def test_ucp_composition_oracle(f64):
    from asfusion.config import FusionConfig

    fc = FusionConfig(patch_h=1, patch_w=2, c_u=8, n_p=1, n_h=2)
    store = fusion_store(type("C", (), {"fusion": fc})(), seed=3)
    rng = np.random.default_rng(3)
    # C_s=3 sensor with 1x2 patches would be width 6; use the radar slot (4 channels)
    vecs = rng.normal(size=(2, SENSOR_CHANNELS["radar"] * 2))
    out = ucp_project(PatchSet("radar", 1, 2, (1, 2), vecs), store, 2).features.data
    P = {k: t.data for k, t in store.params.items()}
    np.testing.assert_allclose(out, _block_oracle(vecs, P, "ucp.radar", 2), atol=1e-10, rtol=0)


def test_ucp_three_channel_sensor_oracle(f64):
    # C_s=3 -> C_u=8 with a dedicated parameter set
    from asfusion.fusion import _init_block

    rng = np.random.default_rng(4)
    store = ParamStore()
    _init_block(store, "ucp.camera", 3 * 4, 8, 2, rng)
    for n in store:
        store[n].data = store[n].data + rng.normal(0, 0.2, store[n].shape)
    vecs = rng.normal(size=(2, 12))
    out = ucp_project(PatchSet("camera", 2, 2, (1, 2), vecs), store, 2).features.data
    P = {k: t.data for k, t in store.params.items()}
    assert out.shape == (2, 8)
    np.testing.assert_allclose(out, _block_oracle(vecs, P, "ucp.camera", 2), atol=1e-10, rtol=0)


def test_ucp_width_is_cu_for_every_sensor(f64):
    cfg = tiny_config()
    store = fusion_store(cfg)
    maps = random_maps(np.random.default_rng(0))
    for s in SENSORS:
        ps = patchify(FeatureMap(s, maps[s]), 2, 2)
        assert ucp_project(ps, store).features.shape == (4, cfg.fusion.c_u)


def test_ucp_width_mismatch(f64):
    store = fusion_store(tiny_config())
    with pytest.raises(ConfigurationError):
        ucp_project(PatchSet("camera", 2, 2, (1, 1), np.zeros((1, 7))), store)


def test_pn_composition_oracle(f64):
    cfg = tiny_config()
    store = fusion_store(cfg, seed=5)
    x = np.random.default_rng(5).normal(size=(3, cfg.fusion.c_u))
    out = post_normalize(x, store, 2).data
    P = {k: t.data for k, t in store.params.items()}
    assert out.shape == x.shape
    np.testing.assert_allclose(out, _block_oracle(x, P, "pn", 2), atol=1e-10, rtol=0)


def _unified(rng, n_patches=4, c=8, sensors=SENSORS, lead=()):
    return {s: UnifiedPatchSet(s, Tensor(rng.normal(size=lead + (n_patches, c)))) for s in sensors}


def _attn(rng, c=8):
    p = {}
    for k in "qkvo":
        p[f"w{k}"] = Tensor(rng.normal(size=(c, c)) / np.sqrt(c))
        p[f"b{k}"] = Tensor(rng.normal(size=c) * 0.1)
    return p


def test_casap_per_patch_decomposition(f64):
    rng = np.random.default_rng(6)
    uni = _unified(rng)
    attn = _attn(rng)
    q = rng.normal(size=(1, 8))
    out, masses = casap_fuse(uni, q, None, 2, attn)
    raw = {k: v.data for k, v in attn.items()}
    for i in range(4):
        kv = np.stack([uni[s].features.data[i] for s in SENSORS])
        o, sc = nx.multi_head_cross_attention(q, kv, raw, 2)
        np.testing.assert_allclose(out.data[i], o.data[0], atol=1e-12)
        np.testing.assert_allclose(masses[0, i], sc.mean(axis=(0, 1)), atol=1e-12)
        ref, _ = naive_attention(q, kv, raw, 2)
        np.testing.assert_allclose(out.data[i], ref[0], atol=1e-10)


def test_casap_single_sensor_mass_is_one(f64):
    rng = np.random.default_rng(7)
    uni = _unified(rng)
    _, masses = casap_fuse(uni, rng.normal(size=(2, 1, 8)), AvailabilityMask.from_combo("L"), 2, _attn(rng))
    assert np.all(masses[..., 1] == 1.0)
    assert np.all(masses[..., [0, 2]] == 0.0)


def test_casap_mask_equals_omission(f64):
    rng = np.random.default_rng(8)
    uni = _unified(rng, lead=(2,))
    attn = _attn(rng)
    q = rng.normal(size=(2, 1, 8))
    for combo in ALL_COMBOS:
        mask = AvailabilityMask.from_combo(combo)
        a, ma = casap_fuse(uni, q, mask, 2, attn)
        b, mb = casap_fuse({s: uni[s] for s in mask.available}, q, None, 2, attn)
        assert np.array_equal(a.data, b.data) and np.array_equal(ma, mb)


def test_casap_empty_key_error(f64):
    rng = np.random.default_rng(9)
    with pytest.raises(EmptyKeyError):
        casap_fuse({}, rng.normal(size=(1, 8)), None, 2, _attn(rng))
    uni = _unified(rng, sensors=("camera",))
    with pytest.raises(EmptyKeyError):
        casap_fuse(uni, rng.normal(size=(1, 8)), AvailabilityMask.from_combo("LR"), 2, _attn(rng))


def test_casap_multiple_queries_mean_pool(f64):
    rng = np.random.default_rng(10)
    uni = _unified(rng, n_patches=2)
    attn = _attn(rng)
    q = rng.normal(size=(3, 8))
    out, _ = casap_fuse(uni, q, None, 2, attn)
    raw = {k: v.data for k, v in attn.items()}
    for i in range(2):
        kv = np.stack([uni[s].features.data[i] for s in SENSORS])
        ref, _ = naive_attention(q, kv, raw, 2)
        np.testing.assert_allclose(out.data[i], ref.mean(axis=0), atol=1e-10)


def test_patch_permutation_invariance(f64):
    rng = np.random.default_rng(11)
    uni = _unified(rng, n_patches=6)
    attn = _attn(rng)
    q = rng.normal(size=(2, 1, 8))
    out, masses = casap_fuse(uni, q, None, 2, attn)
    perm = rng.permutation(6)
    puni = {s: UnifiedPatchSet(s, Tensor(u.features.data[perm])) for s, u in uni.items()}
    pout, pmasses = casap_fuse(puni, q, None, 2, attn)
    np.testing.assert_allclose(pout.data, out.data[:, perm], atol=1e-13)
    np.testing.assert_allclose(pmasses, masses[:, perm], atol=1e-13)


# ---------------------------------------------------------------- end to end


def test_asf_matches_monolithic_oracle(f64):
    cfg = tiny_config(grid=4, c_u=8, n_p=2, n_h=2)
    store = fusion_store(cfg, seed=12)
    maps = random_maps(np.random.default_rng(12))
    P = {k: t.data for k, t in store.params.items()}
    for combo in ("CLR", "LR", "C"):
        mask = AvailabilityMask.from_combo(combo)
        fm, sam = asf_forward(maps, mask, cfg.fusion, store)
        ref, masses = monolithic_asf(maps, mask.available, P, 2, 2, 2, 2, 2)
        np.testing.assert_allclose(fm.data.data, ref, atol=1e-8, rtol=0)
        np.testing.assert_allclose(sam.masses, masses, atol=1e-8, rtol=0)


def test_fused_shape_identical_over_all_combos(f64):
    cfg = tiny_config()
    store = fusion_store(cfg)
    maps = random_maps(np.random.default_rng(13), batch=2)
    shapes = {asf_forward(maps, AvailabilityMask.from_combo(c), cfg.fusion, store)[0].shape for c in ALL_COMBOS}
    assert shapes == {(2, cfg.fusion.fused_channels, 4, 4)}


def test_masked_sensor_equals_omitted_sensor(f64):
    cfg = tiny_config()
    store = fusion_store(cfg)
    maps = random_maps(np.random.default_rng(14))
    for combo in ALL_COMBOS:
        mask = AvailabilityMask.from_combo(combo)
        a, sa = asf_forward(maps, mask, cfg.fusion, store)
        b, sb = asf_forward({s: maps[s] for s in mask.available}, None, cfg.fusion, store)
        assert np.array_equal(a.data.data, b.data.data)
        assert np.array_equal(sa.masses, sb.masses)


def test_sam_sums_to_one_and_absent_is_zero(f64):
    cfg = tiny_config()
    store = fusion_store(cfg)
    maps = random_maps(np.random.default_rng(15))
    for combo in ALL_COMBOS:
        mask = AvailabilityMask.from_combo(combo)
        _, sam = asf_forward(maps, mask, cfg.fusion, store)
        np.testing.assert_allclose(sam.masses.sum(-1), 1.0, atol=1e-6)
        for j, s in enumerate(SENSORS):
            if not mask.is_available(s):
                assert np.all(sam.masses[..., j] == 0.0)


def test_gradients_reach_present_sensors_only(f64):
    cfg = tiny_config()
    store = fusion_store(cfg)
    maps = random_maps(np.random.default_rng(16))
    for combo in ("CLR", "LR", "C"):
        store.zero_grad()
        mask = AvailabilityMask.from_combo(combo)
        with Tape() as tape:
            fm, _ = asf_forward(maps, mask, cfg.fusion, store)
            loss = nx.sum(nx.mul(fm.data, fm.data))
        backward(tape, loss, store)
        for s in SENSORS:
            g = sum(np.abs(store.grads[n]).sum() for n in store if n.startswith(f"ucp.{s}."))
            if mask.is_available(s):
                assert g > 0
            else:
                assert g == 0


def test_asf_forward_gradient_check(f64):
    cfg = tiny_config()
    rng = np.random.default_rng(17)
    store = fusion_store(cfg, seed=17)
    maps = random_maps(rng)
    w = rng.normal(size=(cfg.fusion.fused_channels, 4, 4))

    def loss():
        fm, _ = asf_forward(maps, None, cfg.fusion, store)
        return nx.sum(nx.mul(fm.data, w))

    errs = directional_errors(loss, store.params, rng)
    assert max(errs.values()) < 1e-4, errs


def test_degraded_mask_keeps_shape(f64):
    cfg = tiny_config()
    store = fusion_store(cfg)
    maps = random_maps(np.random.default_rng(18))
    mask = AvailabilityMask({"camera": 0.7, "lidar": "available", "radar": "available"})
    fm, sam = asf_forward(maps, mask, cfg.fusion, store)
    assert fm.shape == (cfg.fusion.fused_channels, 4, 4)
    assert np.all(sam.masses[..., 0] > 0)


def test_asf_errors(f64):
    cfg = tiny_config()
    store = fusion_store(cfg)
    maps = random_maps(np.random.default_rng(19))
    with pytest.raises(EmptyKeyError):
        asf_forward({}, None, cfg.fusion, store)
    bad = dict(maps, radar=np.zeros((4, 6, 4)))
    with pytest.raises(ConfigurationError):
        asf_forward(bad, None, cfg.fusion, store)


def test_availability_mask_combo_codes():
    for combo in ALL_COMBOS:
        assert AvailabilityMask.from_combo(combo).combo == combo
    with pytest.raises(ValueError):
        AvailabilityMask.from_combo("")
    with pytest.raises(ValueError):
        AvailabilityMask.from_combo("CX")
    m = AvailabilityMask.from_combo("CL").intersect(AvailabilityMask.from_combo("LR"))
    assert m.combo == "L"


def test_sam_ratios_and_csv(tmp_path):
    masses = np.zeros((2, 4, 3))
    masses[..., 1] = 1.0
    sam = SensorAttentionMap(masses, (2, 2))
    np.testing.assert_allclose(sam.ratios(), [0.0, 100.0, 0.0])
    write_sam_csv(tmp_path / "sam.csv", [(3, sam)], "config_hash=x")
    lines = (tmp_path / "sam.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=x"
    assert lines[1] == "frame,patch_row,patch_col,bank,sensor,mass"
    assert len(lines) == 2 + 2 * 4 * 3
    assert lines[2].startswith("3,0,0,0,camera,")


def test_all_combos_are_the_seven_subsets():
    subsets = {"".join(c) for r in (1, 2, 3) for c in itertools.combinations("CLR", r)}
    assert set(ALL_COMBOS) == subsets and len(ALL_COMBOS) == 7
