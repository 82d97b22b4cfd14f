import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from conftest import central_fd, random_record, randomize, rel_err, small_config
from ret2 import tensor as T
from ret2.cell import (CellConfig, FusionCellParams, GateOverride, compute_gates, cross_attend,
                       embed, encode, encode_batch, load_checkpoint, pick_layers,
                       save_checkpoint, select_layers, step)
from ret2.errors import ConfigError, DataError, DimensionError, FormatError
from ret2.features import LayerFeatures, collate
from ret2.tensor import Tensor


def arrays(params):
    return {n: t.data for n, t in params}


# -- layer selection ---------------------------------------------------

@pytest.mark.parametrize("L,expected", [(12, [3, 7, 11]), (24, [3, 18, 23]), (32, [4, 25, 31])])
def test_known_backbone_depths(L, expected):
    assert select_layers(L) == expected


@pytest.mark.parametrize("L", range(4, 80))
def test_generic_rule_is_increasing_and_in_range(L):
    idx = select_layers(L)
    assert len(idx) == 3 and idx[0] < idx[1] < idx[2] < L
    assert idx[2] == L - 1


@pytest.mark.parametrize("L", [0, 3, -1, 2.5])
def test_select_layers_rejects_shallow(L):
    with pytest.raises(ConfigError):
        select_layers(L)


def test_pick_layers_slices_activations(rng):
    acts = rng.normal(size=(12, 2, 3))
    np.testing.assert_array_equal(pick_layers(acts), acts[[3, 7, 11]])


# -- cross attention ---------------------------------------------------

def test_identical_tokens_give_value_transform(params, rng):
    v = rng.normal(size=16)
    E = np.tile(v, (5, 1))
    P = arrays(params)
    expected = (v @ P["attn_text.wv"] + P["attn_text.bv"]) @ P["attn_text.wo"] + P["attn_text.bo"]
    for _ in range(3):
        out = cross_attend(Tensor(rng.normal(size=(1, 32))), E, params, "text").data
        np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-12)


def test_single_token_gets_full_weight(params, rng):
    E = rng.normal(size=(1, 16))
    P = arrays(params)
    expected = (E @ P["attn_visual.wv"] + P["attn_visual.bv"]) @ P["attn_visual.wo"] \
        + P["attn_visual.bo"]
    out = cross_attend(Tensor(rng.normal(size=(1, 32))), E, params, "visual").data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_cross_attend_hand_set_one_head():
    cfg = CellConfig(hidden_dim=2, n_heads=1, text_dim=2, visual_dim=None, pooler_dim=2).validate()
    p = FusionCellParams.init(cfg, seed=0)
    W = {"wq": [[1.0, 0.0], [0.0, 1.0]], "wk": [[0.5, 0.0], [0.0, 2.0]],
         "wv": [[1.0, 1.0], [0.0, 1.0]], "wo": [[2.0, 0.0], [0.0, 1.0]]}
    for name, val in W.items():
        p[f"attn_text.{name}"].data[...] = val
    p["attn_text.bo"].data[...] = [0.1, -0.1]
    h = np.array([[1.0, 2.0]])
    E = np.array([[2.0, 0.0], [0.0, 1.0]])
    # scalar walk-through: q=(1,2); keys (1,0),(0,2); logits 1/sqrt2, 4/sqrt2
    l1, l2 = 1 / math.sqrt(2), 4 / math.sqrt(2)
    a1 = math.exp(l1) / (math.exp(l1) + math.exp(l2))
    a2 = 1 - a1
    v1, v2 = (2.0, 2.0), (0.0, 1.0)
    mix = (a1 * v1[0] + a2 * v2[0], a1 * v1[1] + a2 * v2[1])
    expected = [2 * mix[0] + 0.1, mix[1] - 0.1]
    out = cross_attend(Tensor(h), E, p, "text").data
    np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-14)


def test_cross_attend_matches_oracle(params, rng):
    h, E = rng.normal(size=(1, 32)), rng.normal(size=(6, 16))
    got = cross_attend(Tensor(h), E, params, "text").data
    want = oracle.attention(h, E, arrays(params), "attn_text", 4)
    assert np.abs(got - want).max() < 1e-12


def test_cross_attend_unknown_modality(params):
    with pytest.raises(DataError):
        cross_attend(Tensor(np.zeros((1, 32))), np.zeros((2, 16)), params, "audio")


# -- gates -------------------------------------------------------------

def zero_gates(params):
    for n, t in params:
        if n.startswith("gate."):
            t.data[...] = 0.0
    return params


def test_zero_gate_weights_give_half(params, rng):
    zero_gates(params)
    zT, zV = Tensor(rng.normal(size=(1, 32))), Tensor(rng.normal(size=(1, 32)))
    for g in compute_gates(zT, zV, params):
        np.testing.assert_array_equal(g.data, 0.5)


def test_absent_visual_gates(params, rng):
    zero_gates(params)
    f, iT, iV = compute_gates(Tensor(rng.normal(size=(1, 32))), None, params)
    np.testing.assert_array_equal(f.data, 0.5)
    np.testing.assert_array_equal(iT.data, 0.5)
    assert iV is None


def test_gates_need_a_modality(params):
    with pytest.raises(DataError):
        compute_gates(None, None, params)


def test_gates_match_direct_formula(params, rng):
    zT, zV = rng.normal(size=(1, 32)), rng.normal(size=(1, 32))
    P = arrays(params)
    f, iT, iV = compute_gates(Tensor(zT), Tensor(zV), params)
    np.testing.assert_allclose(f.data, oracle.sigmoid(zT @ P["gate.wf_text"] + zV @ P["gate.wf_visual"]),
                               rtol=0, atol=1e-14)
    np.testing.assert_allclose(iT.data, oracle.sigmoid(zT @ P["gate.wi_text"]), rtol=0, atol=1e-14)
    np.testing.assert_allclose(iV.data, oracle.sigmoid(zV @ P["gate.wi_visual"]), rtol=0, atol=1e-14)


@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
@settings(max_examples=30, deadline=None)
def test_gates_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    p = FusionCellParams.init(small_config(d=8, n_heads=2), seed=seed)
    z = [Tensor(rng.normal(scale=scale, size=(1, 8))) for _ in range(2)]
    for g in compute_gates(z[0], z[1], p):
        assert (g.data > 0).all() and (g.data < 1).all()


# -- step --------------------------------------------------------------

def test_carry_identity(params, rng):
    h, c = Tensor(rng.normal(size=(1, 32))), Tensor(rng.normal(size=(1, 32)))
    _, c1 = step(h, c, rng.normal(size=(4, 16)), rng.normal(size=(3, 16)), params,
                 GateOverride(forget=1.0, input_text=0.0, input_visual=0.0))
    assert c1.data.tobytes() == c.data.tobytes()


def test_forget_zero_input_one_copies_text(params, rng):
    h, c = rng.normal(size=(1, 32)), rng.normal(size=(1, 32))
    E = rng.normal(size=(4, 16))
    _, c1 = step(Tensor(h), Tensor(c), E, None, params, GateOverride(forget=0.0, input_text=1.0))
    hn = oracle.layer_norm(h, params["ln_attn.gain"].data, params["ln_attn.bias"].data)
    zT = oracle.attention(hn, E, arrays(params), "attn_text", 4)
    np.testing.assert_allclose(c1.data, zT, rtol=0, atol=1e-12)


def test_step_needs_a_modality(params):
    with pytest.raises(DataError):
        step(Tensor(np.zeros((1, 32))), Tensor(np.zeros((1, 32))), None, None, params)


@pytest.mark.parametrize("present", ["both", "text", "visual"])
def test_step_matches_oracle(params, rng, present):
    cfg = params.config
    for _ in range(10):
        h, c = rng.normal(size=(1, 32)), rng.normal(size=(1, 32))
        E_t = rng.normal(size=(4, 16)) if present != "visual" else None
        E_v = rng.normal(size=(5, 16)) if present != "text" else None
        h1, c1 = step(Tensor(h), Tensor(c), E_t, E_v, params)
        oh, oc = oracle.step(h, c, E_t, E_v, arrays(params), cfg)
        assert np.abs(h1.data - oh).max() < 1e-10
        assert np.abs(c1.data - oc).max() < 1e-10


def test_step_baseline_mode_matches_oracle(rng):
    cfg = small_config(mode="ret", out_dim=8)
    p = randomize(FusionCellParams.init(cfg, seed=1), rng)
    h, c = rng.normal(size=(32, 32)), rng.normal(size=(32, 32))
    E_t, E_v = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    h1, c1 = step(Tensor(h), Tensor(c), E_t, E_v, p)
    oh, oc = oracle.step(h, c, E_t, E_v, arrays(p), cfg)
    assert np.abs(h1.data - oh).max() < 1e-10
    assert np.abs(c1.data - oc).max() < 1e-10


# -- encode ------------------------------------------------------------

@pytest.mark.parametrize("text,visual", [(True, True), (True, False), (False, True)])
def test_encode_matches_oracle(params, rng, text, visual):
    for _ in range(5):
        rec = random_record(rng, text=text, visual=visual, N=(2, 2))
        got = encode(rec.text, rec.visual, params).embedding.data
        assert got.shape == (1, 8)
        want = oracle.encode(rec, arrays(params), params.config)
        assert np.abs(got - want).max() < 1e-9


def test_encode_batch_matches_single(params, rng):
    recs = [random_record(rng, f"r{i}", text=i != 2, visual=i % 2 == 0, N=(i + 1, 3 - i % 2))
            for i in range(5)]
    batched = encode_batch(params, collate(recs)).embedding.data
    for i, rec in enumerate(recs):
        single = encode(rec.text, rec.visual, params).embedding.data
        np.testing.assert_allclose(batched[i], single, rtol=0, atol=1e-12)


def test_baseline_encode_emits_all_tokens(rng):
    cfg = small_config(mode="ret", out_dim=8)
    p = randomize(FusionCellParams.init(cfg, seed=1), rng)
    rec = random_record(rng, N=(2, 2))
    got = encode(rec.text, rec.visual, p).embedding.data
    assert got.shape == (32, 8)
    np.testing.assert_allclose(got, oracle.encode(rec, arrays(p), cfg), rtol=0, atol=1e-9)


def test_ret2_requires_matching_pooler_dim():
    with pytest.raises(ConfigError):
        small_config(out_dim=16)


def perturb(features, rng):
    return LayerFeatures(features.modality, features.layers + rng.normal(size=features.layers.shape),
                         features.pooler + rng.normal(size=features.pooler.shape))


def test_absent_visual_is_bitwise_invariant_in_batch(params, rng):
    q = random_record(rng, "q", visual=False)
    others = [random_record(rng, f"o{i}") for i in range(3)]
    base = encode_batch(params, collate([q] + others)).embedding.data[0]
    # fill the padded visual slot of the absent row with garbage
    batch = collate([q] + others)
    batch.visual.layers[:, 0] = rng.normal(scale=1e3, size=batch.visual.layers[:, 0].shape)
    batch.visual.pooler[0] = rng.normal(scale=1e3, size=batch.visual.pooler[0].shape)
    got = encode_batch(params, batch).embedding.data[0]
    assert got.tobytes() == base.tobytes()


def test_padding_tokens_do_not_leak(params, rng):
    short = random_record(rng, "s", N=(2, 2))
    long_ = random_record(rng, "l", N=(5, 6))
    batch = collate([short, long_])
    base = encode_batch(params, batch).embedding.data[0]
    batch.text.layers[:, 0, 2:] = 1e3
    batch.visual.layers[:, 0, 2:] = -1e3
    assert encode_batch(params, batch).embedding.data[0].tobytes() == base.tobytes()
    np.testing.assert_allclose(base, encode(short.text, short.visual, params).embedding.data,
                               rtol=0, atol=1e-12)


def test_pooler_is_added_only_for_present_modalities(params, rng):
    rec = random_record(rng, visual=False)
    shifted = LayerFeatures(rec.text.modality, rec.text.layers, rec.text.pooler + 1.0)
    a = encode(rec.text, rec.visual, params).embedding.data
    b = encode(shifted, rec.visual, params).embedding.data
    np.testing.assert_allclose(b - a, 1.0, rtol=0, atol=1e-12)


def test_query_and_document_share_weights(params, rng):
    rec = random_record(rng)
    a = embed(params, [rec])
    b = embed(params, [rec])
    assert a.tobytes() == b.tobytes()


def test_encode_rejects_wrong_dims(params, rng):
    rec = random_record(rng, dims=(12, 16))
    with pytest.raises(DimensionError):
        encode(rec.text, rec.visual, params)
    rec = random_record(rng, S=2)
    with pytest.raises(DimensionError):
        encode(rec.text, rec.visual, params)


def test_encode_rejects_all_absent(params):
    with pytest.raises(DataError):
        encode(LayerFeatures.absent(), LayerFeatures.absent(), params)


def test_gate_log_has_one_entry_per_step(params, rng):
    rec = random_record(rng)
    out = encode(rec.text, rec.visual, params, log_gates=True)
    assert len(out.gate_log) == 3
    for g in out.gate_log:
        assert ((g.forget > 0) & (g.forget < 1)).all()


def test_end_to_end_gradient_every_parameter(rng):
    cfg = small_config(d=8, n_heads=2, dims=(4, 4), d_g=4)
    p = randomize(FusionCellParams.init(cfg, seed=0), rng)
    rec = random_record(rng, N=(3, 2), dims=(4, 4), d_g=4)
    w = rng.normal(size=(1, 4))
    rec2 = random_record(rng, visual=False, N=(2, 2), dims=(4, 4), d_g=4)

    def loss():
        a = encode(rec.text, rec.visual, p).embedding
        b = encode(rec2.text, rec2.visual, p).embedding
        return T.sum_(T.gelu(a) * w) + T.sum_(a * b)

    p.zero_grad()
    loss().backward()
    names = p.names()
    analytic = [p[n].grad.copy() for n in names]

    def f():
        with T.no_grad():
            return float(loss().data)

    numeric = central_fd(f, [p[n].data for n in names])
    # the key bias shifts every logit of a row equally, so its gradient is exactly zero
    for n, a, num in zip(names, analytic, numeric):
        assert rel_err(a, num, floor=1e-5) < 1e-4, n
    assert np.abs(p["attn_text.bk"].grad).max() < 1e-12


# -- params & checkpoints ----------------------------------------------

def test_init_matches_documented_scheme():
    cfg = small_config(d=64, n_heads=8, dims=(32, 32), d_g=32)
    p = FusionCellParams.init(cfg, seed=0)
    np.testing.assert_array_equal(p["ln_attn.gain"].data, 1.0)
    np.testing.assert_array_equal(p["mlp.b1"].data, 0.0)
    assert abs(p["mlp.w1"].data.std() - 0.02) < 0.002
    assert p["h0"].shape == (1, 64)
    assert p["gate.wf_text"].shape == (64, 64) and p["mlp.w1"].shape == (64, 256)
    assert cfg.forget_bias == 0.0 and cfg.input_bias == 0.0


def test_baseline_has_32_tokens():
    assert FusionCellParams.init(small_config(mode="ret", out_dim=8))["h0"].shape == (32, 32)


def test_checkpoint_round_trip(tmp_path, rng):
    p = FusionCellParams.init(small_config(), seed=3)
    save_checkpoint(tmp_path / "c.ckpt", p, temperature=0.05, meta={"step": 7})
    back, temp, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert back.config == p.config and temp == np.float32(0.05) and meta == {"step": 7}
    for (n, a), (m, b) in zip(p, back):
        assert n == m and a.data.tobytes() == b.data.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, FusionCellParams.init(small_config(), seed=0))
    blob = bytearray(path.read_bytes())
    blob[:8] = b"RET2FEAT"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_same_seed_same_init():
    a = FusionCellParams.init(small_config(), seed=5)
    b = FusionCellParams.init(small_config(), seed=5)
    assert all(x.data.tobytes() == y.data.tobytes() for (_, x), (_, y) in zip(a, b))


def test_state_dict_round_trip(params):
    clone = FusionCellParams.init(params.config, seed=99)
    clone.load_state_dict(params.state_dict())
    assert all(x.data.tobytes() == y.data.tobytes() for (_, x), (_, y) in zip(params, clone))
    with pytest.raises(DataError):
        clone.load_state_dict({"h0": np.zeros((1, 32))})
