import numpy as np
import pytest

from clft import numerics as nx
from clft.encoder import (ADAPTATION, FRONTEND, MASK_EMBEDDING, TRANSFORMER, AdaptationSpec, Encoder, EncoderConfig,
                          encoder_from_state, inject_adapters, inject_lora, load_checkpoint, partition,
                          save_checkpoint, weighted_layer_sum)
from clft.numerics import ParamStore, Tensor

SMALL = EncoderConfig(d_in=4, conv_channels=6, blocks=2, d_model=8, heads=2, d_ff=16)


def test_stride_arithmetic_t8():
    enc = Encoder(EncoderConfig(), seed=0)
    layers = enc.encode(np.random.default_rng(0).normal(size=(8, 16)))
    assert len(layers) == 4
    assert all(l.shape == (2, 32) for l in layers)


@pytest.mark.parametrize("T", [4, 5, 7, 33, 100, 257, 512])
def test_output_shapes_follow_ceil_division(T):
    enc = Encoder(SMALL, seed=1)
    layers = enc.encode(np.zeros((T, 4)))
    assert layers[0].shape == (-(-T // 4), 8)


def test_bad_inputs():
    enc = Encoder(SMALL)
    with pytest.raises(ValueError):
        enc.encode(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        enc.encode(np.zeros((5, 3)))


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=30, heads=4).validate()
    with pytest.raises(ValueError):
        EncoderConfig(d_ff=16).validate()
    with pytest.raises(ValueError):
        EncoderConfig(conv_stride=0).validate()


def test_encode_is_deterministic():
    x = np.random.default_rng(2).normal(size=(21, 4))
    a = Encoder(SMALL, seed=3).encode(x)
    b = Encoder(SMALL, seed=3).encode(x)
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_padding_does_not_leak_into_valid_frames():
    rng = np.random.default_rng(4)
    enc = Encoder(SMALL, seed=0)
    short = rng.normal(size=(9, 4))
    long = rng.normal(size=(23, 4))
    feats = np.zeros((2, 23, 4))
    feats[0, :9] = short
    feats[1] = long
    layers, out_len = enc.forward(feats, np.array([9, 23]))
    alone = enc.encode(short)
    assert list(out_len) == [3, 6]
    for l, ref in zip(layers, alone):
        np.testing.assert_allclose(l.values[0, :3], ref, atol=1e-12)


def test_partitions_are_exhaustive_and_disjoint():
    enc = Encoder(SMALL)
    inject_lora(enc, AdaptationSpec("lora", rank=2))
    parts = enc.partitions()
    flat = [n for names in parts.values() for n in names]
    assert sorted(flat) == enc.params.names()
    assert len(flat) == len(set(flat))
    assert partition("frontend.conv0.weight") == FRONTEND
    assert partition("block1.attn.qkv.bias") == TRANSFORMER
    assert partition("block0.ffn1.lora_A") == ADAPTATION
    assert partition("mask_embedding") == MASK_EMBEDDING


def test_weighted_sum_saturation_and_uniform():
    rng = np.random.default_rng(5)
    latents = [rng.normal(size=(3, 4)) for _ in range(4)]
    w = np.zeros(4)
    w[2] = 20.0
    out = weighted_layer_sum(latents, w).values
    np.testing.assert_allclose(out, latents[2], atol=1e-6)
    np.testing.assert_allclose(weighted_layer_sum(latents, np.zeros(4)).values, np.mean(latents, 0), atol=1e-12)


def test_weighted_sum_matches_loop_and_shift():
    rng = np.random.default_rng(6)
    latents = [rng.normal(size=(5, 3)) for _ in range(3)]
    w = rng.normal(size=3)
    e = np.exp(w - w.max())
    soft = e / e.sum()
    ref = np.zeros((5, 3))
    for l, s in zip(latents, soft):
        ref += s * l
    np.testing.assert_allclose(weighted_layer_sum(latents, w).values, ref, atol=1e-12)
    np.testing.assert_allclose(weighted_layer_sum(latents, w + 7.5).values, ref, atol=1e-9)
    with pytest.raises(ValueError):
        weighted_layer_sum(latents, np.zeros(2))


def _max_diff(a, b):
    return max(float(np.abs(u - v).max()) for u, v in zip(a, b))


def test_lora_injection_identity_and_freezing():
    rng = np.random.default_rng(7)
    enc = Encoder(SMALL, seed=2)
    xs = [rng.normal(size=(int(rng.integers(4, 30)), 4)) for _ in range(5)]
    before = [enc.encode(x) for x in xs]
    inject_lora(enc, AdaptationSpec("lora", rank=3))
    for x, ref in zip(xs, before):
        assert _max_diff(enc.encode(x), ref) <= 1e-12
    assert not enc.params["block0.ffn1.weight"].requires_grad
    assert enc.params["block0.ffn1.lora_B"].shape == (8, 3)
    assert enc.params["block0.ffn1.lora_A"].shape == (3, 16)
    assert enc.params["block1.ffn2.lora_B"].shape == (16, 3)
    assert not enc.params["block0.ffn1.lora_B"].values.any()
    assert enc.params["block0.attn.qkv.weight"].requires_grad  # attention untouched
    with pytest.raises(ValueError):
        inject_lora(enc, AdaptationSpec("lora", rank=3))


def test_lora_rank_limits():
    inject_lora(Encoder(EncoderConfig()), AdaptationSpec("lora", rank=16))
    with pytest.raises(ValueError):
        inject_lora(Encoder(SMALL), AdaptationSpec("lora", rank=9))
    with pytest.raises(ValueError):
        AdaptationSpec("lora", rank=0)


def test_lora_delta_is_matrix_product():
    p = ParamStore()
    p.add("B", [[2.0], [0.0]])
    p.add("A", [[1.0, 3.0]])
    np.testing.assert_array_equal(nx.matmul(p["B"], p["A"]).values, [[2.0, 6.0], [0.0, 0.0]])
    enc = Encoder(SMALL)
    inject_lora(enc, AdaptationSpec("lora", rank=1))
    b = np.zeros((8, 1))
    b[0, 0] = 2.0
    enc.params["block0.ffn1.lora_B"].values = b
    enc.params["block0.ffn1.lora_A"].values = np.arange(16.0)[None, :]
    eff = enc._ffn_weight("block0", "ffn1").values - enc.params["block0.ffn1.weight"].values
    np.testing.assert_allclose(eff, b @ np.arange(16.0)[None, :])


def test_adapter_injection_identity_and_trainable_set():
    rng = np.random.default_rng(8)
    enc = Encoder(SMALL, seed=5)
    xs = [rng.normal(size=(int(rng.integers(4, 30)), 4)) for _ in range(5)]
    before = [enc.encode(x) for x in xs]
    inject_adapters(enc, AdaptationSpec("adapter", bottleneck=2))
    for x, ref in zip(xs, before):
        assert _max_diff(enc.encode(x), ref) <= 1e-12
    assert sorted(enc.params.trainable_names()) == sorted(n for n in enc.params.names() if ".adapter." in n)
    with pytest.raises(ValueError):
        inject_adapters(enc, AdaptationSpec("adapter", bottleneck=2))


def test_adapter_scalar_bottleneck_by_hand():
    cfg = EncoderConfig(d_in=2, conv_channels=2, blocks=1, d_model=2, heads=1, d_ff=2, final_norm=False)
    enc = Encoder(cfg, seed=0)
    inject_adapters(enc, AdaptationSpec("adapter", bottleneck=1))
    p = enc.params
    p["block0.adapter.down.weight"].values = np.array([[1.0], [-2.0]])
    p["block0.adapter.down.bias"].values = np.array([0.5])
    p["block0.adapter.up.weight"].values = np.array([[3.0, -1.0]])
    p["block0.adapter.up.bias"].values = np.array([0.0, 0.25])
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 2)))
    with_adapter = enc._block(0, x, None).values
    saved = p["block0.adapter.up.weight"].values.copy(), p["block0.adapter.up.bias"].values.copy()
    p["block0.adapter.up.weight"].values = np.zeros((1, 2))
    p["block0.adapter.up.bias"].values = np.zeros(2)
    plain = enc._block(0, x, None).values
    # recover y (FFN output) from the plain residual path: plain = x_attn + y
    h = enc.params
    p["block0.adapter.up.weight"].values, p["block0.adapter.up.bias"].values = saved
    xa = x.values + _attn_only(enc, x)
    y = plain - xa
    z = np.maximum(y @ h["block0.adapter.down.weight"].values + 0.5, 0)
    expected = xa + y + z @ saved[0] + saved[1]
    np.testing.assert_allclose(with_adapter, expected, atol=1e-12)


def _attn_only(enc, x):
    p = enc.params
    h = nx.layer_norm(x, p["block0.ln1.gamma"], p["block0.ln1.beta"]).values
    qkv = h @ p["block0.attn.qkv.weight"].values + p["block0.attn.qkv.bias"].values
    q, k, v = np.split(qkv, 3, axis=-1)
    s = q @ np.swapaxes(k, 1, 2) / np.sqrt(q.shape[-1])
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    return (a @ v) @ p["block0.attn.out.weight"].values + p["block0.attn.out.bias"].values


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    enc = Encoder(SMALL, seed=4)
    x = rng.normal(size=(2, 13, 4))
    lengths = np.array([13, 8])
    proj = rng.normal(size=(8,))

    def f():
        layers, _ = enc.forward(x, lengths)
        return nx.tsum(nx.square(nx.matmul(layers[-1], proj)))

    assert nx.finite_diff_check(f, enc.params, n_coords=60) <= 1e-4


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    enc = Encoder(SMALL, seed=11)
    inject_lora(enc, AdaptationSpec("lora", rank=2))
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, enc.params, {"note": "hi"})
    state, meta = load_checkpoint(path)
    assert meta == {"note": "hi"}
    assert sorted(state) == enc.params.names()
    for name, v in state.items():
        assert v.tobytes() == enc.params[name].values.tobytes()
    save_checkpoint(tmp_path / "y.ckpt", encoder_from_state(SMALL, state).params, {"note": "hi"})
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
