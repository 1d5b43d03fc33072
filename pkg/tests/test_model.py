import math
from dataclasses import replace

import numpy as np
import pytest

from widenet import moe
from widenet.model import (
    AttentionParams,
    BlockNorms,
    ConfigError,
    SharedBlockParams,
    WideNetConfig,
    block_forward,
    count_parameters,
    enumerate_parameters,
    head_forward,
    init_params,
    layer_norm,
    mha_forward,
    model_forward,
    named_parameters,
    patch_embed,
    token_embed_factorized,
)
from widenet.tensor import RngStream, Tensor, backward, no_grad, zero_grad
from widenet.train import cross_entropy, total_loss


def np_layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def np_attention(x, a, heads):
    """Per-head loop reference for a single sequence (L, d)."""
    L, d = x.shape
    dh = d // heads
    q = x @ a.wq.data + a.bq.data
    k = x @ a.wk.data + a.bk.data
    v = x @ a.wv.data + a.bv.data
    out = np.zeros((L, d))
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        w = np_softmax(q[:, s] @ k[:, s].T / math.sqrt(dh))
        out[:, s] = w @ v[:, s]
    return out @ a.wo.data + a.bo.data


def np_gelu(h):
    return 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h**3)))


def randomize(params, rng, scale=0.3):
    for t in named_parameters(params).values():
        t.data[...] = rng.normal(scale=scale, size=t.shape) + (1.0 if t.data.size and np.all(t.data == 1) else 0.0)


# --- config


@pytest.mark.parametrize(
    "kwargs",
    [dict(depth=4, groups=3), dict(top_k=5, num_experts=4), dict(d_model=10, heads=4), dict(balance_weight=-1),
     dict(head_type="cls"), dict(embed_kind="patch", image_size=9, patch_size=4)],
)  # fmt: skip
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigError):
        WideNetConfig(**kwargs)


def test_config_roundtrip_and_unknown_keys():
    cfg = WideNetConfig(depth=2, groups=1)
    assert WideNetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        WideNetConfig.from_dict({"bogus": 1})


# --- layer norm


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(layer_norm(Tensor([[1.0, 3.0]]), one, zero, 1e-12).data, [[-1.0, 1.0]], atol=1e-9)
    np.testing.assert_allclose(layer_norm(Tensor([[5.0, 5.0]]), one, zero).data, 0.0, atol=1e-12)


def test_layer_norm_normalizes(rng):
    d = 16
    out = layer_norm(Tensor(rng.normal(3, 5, size=(10, d))), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-6)


def test_layer_norm_length_mismatch():
    with pytest.raises(ValueError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# --- attention


def test_mha_matches_per_head_reference(tiny_cfg, rng):
    params = init_params(tiny_cfg, 1)
    randomize(params, rng)
    a = params.blocks[0].attn
    x = rng.normal(size=(3 * 5, 8))
    out = mha_forward(Tensor(x), a, 2, seq_len=5).data
    for s in range(3):
        seg = slice(5 * s, 5 * s + 5)
        np.testing.assert_allclose(out[seg], np_attention(x[seg], a, 2), atol=1e-12)


def test_mha_single_token_is_value_chain(tiny_cfg, rng):
    params = init_params(tiny_cfg, 1)
    randomize(params, rng)
    a = params.blocks[0].attn
    x = rng.normal(size=(1, 8))
    expect = (x @ a.wv.data + a.bv.data) @ a.wo.data + a.bo.data
    np.testing.assert_allclose(mha_forward(Tensor(x), a, 2).data, expect, atol=1e-12)


def test_mha_permutation_equivariance(tiny_cfg, rng):
    params = init_params(tiny_cfg, 1)
    randomize(params, rng)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    a = params.blocks[0].attn
    np.testing.assert_allclose(mha_forward(Tensor(x[perm]), a, 2).data, mha_forward(Tensor(x), a, 2).data[perm],
                               atol=1e-12)  # fmt: skip


def test_mha_shape_errors(tiny_cfg):
    a = init_params(tiny_cfg, 0).blocks[0].attn
    with pytest.raises(ValueError):
        mha_forward(Tensor(np.ones((6, 8))), a, 3)
    with pytest.raises(ValueError):
        mha_forward(Tensor(np.ones((7, 8))), a, 2, seq_len=4)


# --- block


def test_block_with_zero_weights_is_identity(tiny_cfg, rng):
    params = init_params(tiny_cfg, 2)
    for name, t in named_parameters(params).items():
        if name.startswith("blocks."):
            t.data[...] = 0.0
    x = rng.normal(size=(8, 8))
    out, _ = block_forward(Tensor(x), params.blocks[0], params.norms[0], tiny_cfg, seq_len=4)
    np.testing.assert_array_equal(out.data, x)


def test_block_without_moe_matches_vanilla_reference(rng):
    cfg = WideNetConfig(depth=1, d_model=8, d_ff=12, heads=2, groups=1, use_moe=False, seq_len=4)
    params = init_params(cfg, 3)
    randomize(params, rng)
    shared, nrm = params.blocks[0], params.norms[0]
    x = rng.normal(size=(8, 8))
    got, outcome = block_forward(Tensor(x), shared, nrm, cfg, seq_len=4)
    assert outcome is None
    ref = x.copy()
    for s in range(2):
        seg = slice(4 * s, 4 * s + 4)
        ref[seg] = ref[seg] + np_attention(np_layer_norm(x[seg], nrm.att_gamma.data, nrm.att_beta.data, 1e-6),
                                           shared.attn, 2)  # fmt: skip
    h = np_layer_norm(ref, nrm.moe_gamma.data, nrm.moe_beta.data, 1e-6)
    ex = shared.experts
    ref = ref + np_gelu(h @ ex.w1[0].data + ex.b1[0].data) @ ex.w2[0].data + ex.b2[0].data
    np.testing.assert_allclose(got.data, ref, atol=1e-12)


def test_block_event_order_and_sharing(tiny_cfg, rng):
    params = init_params(tiny_cfg, 4)
    trace = []
    with no_grad():
        model_forward(rng.integers(0, 8, size=(2, 4)), params, tiny_cfg, RngStream(1), True, trace)
    for j in range(tiny_cfg.depth):
        events = [ev["event"] for ev in trace if ev["block"] == j]
        assert events == ["ln_att", "mha", "residual_att", "ln_moe", "moe", "residual_moe"]
    assert len({ev["attn"] for ev in trace if ev["event"] == "mha"}) == 1
    assert len({ev["experts"] for ev in trace if ev["event"] == "moe"}) == 1
    assert len({ev["gamma"] for ev in trace if ev["event"] == "ln_moe"}) == tiny_cfg.depth
    assert params.blocks[0].attn is params.blocks[1].attn
    assert params.blocks[0].router is params.blocks[1].router
    assert params.norms[0] is not params.norms[1]


def test_shared_ln_is_one_object():
    params = init_params(WideNetConfig(depth=3, groups=1, share_ln=True, d_model=8, heads=2), 0)
    assert all(n is params.norms[0] for n in params.norms)


# --- group routing


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_group_routing_reuses_assignments(groups, rng):
    cfg = WideNetConfig(depth=4, d_model=8, d_ff=8, heads=2, groups=groups, vocab_size=8, e_embed=0, seq_len=5,
                        capacity_ratio=0.8)  # fmt: skip
    params = init_params(cfg, 5)
    randomize(params, rng, 1.0)
    trace = []
    with no_grad():
        _, outcomes = model_forward(rng.integers(0, 8, size=(3, 5)), params, cfg, RngStream(9), True, trace)
    moe_events = [ev for ev in trace if ev["event"] == "moe"]
    assert len(outcomes) == groups
    assert [ev["routed"] for ev in moe_events] == [j % (4 // groups) == 0 for j in range(4)]
    for ev in moe_events:
        g = ev["block"] // (4 // groups)
        np.testing.assert_array_equal(ev["indices"], outcomes[g].indices)
        np.testing.assert_array_equal(ev["kept"], outcomes[g].kept)


# --- embeddings and heads


def test_patch_embedding_token_count():
    cfg = WideNetConfig(embed_kind="patch", image_size=8, patch_size=4, head_type="token-cls", d_model=8, heads=2)
    params = init_params(cfg, 0)
    out = patch_embed(np.zeros((2, 1, 8, 8)), params.embed, params.cls_token, 4)
    assert out.shape == (2, 5, 8)


def test_zero_image_gives_positions_plus_bias(rng):
    cfg = WideNetConfig(embed_kind="patch", image_size=8, patch_size=4, d_model=8, heads=2, channels=3)
    params = init_params(cfg, 0)
    params.embed.b.data[...] = rng.normal(size=8)
    out = patch_embed(np.zeros((1, 3, 8, 8)), params.embed, None, 4).data
    np.testing.assert_allclose(out[0], params.embed.pos.data + params.embed.b.data, atol=1e-15)


def test_patch_embed_matches_manual_patches(rng):
    cfg = WideNetConfig(embed_kind="patch", image_size=4, patch_size=2, d_model=8, heads=2, channels=2)
    params = init_params(cfg, 0)
    img = rng.normal(size=(1, 2, 4, 4))
    out = patch_embed(img, params.embed, None, 2).data
    # patch (row 1, col 0) is index 2; vector order is channel, then row, then column
    vec = img[0, :, 2:4, 0:2].reshape(-1)
    np.testing.assert_allclose(out[0, 2], vec @ params.embed.w.data + params.embed.b.data + params.embed.pos.data[2])


def test_factorized_embedding_parameter_arithmetic():
    vocab, d = 30000, 768
    for e_embed in (64, 128, 700):
        fact = count_parameters(WideNetConfig(vocab_size=vocab, e_embed=e_embed, d_model=d, heads=4, d_ff=8))
        full = count_parameters(WideNetConfig(vocab_size=vocab, e_embed=0, d_model=d, heads=4, d_ff=8))
        assert (fact < full) == (e_embed < d * vocab / (vocab + d))
        assert full - fact == vocab * d - (vocab * e_embed + e_embed * d)


def test_token_embedding_lookup(rng):
    cfg = WideNetConfig(vocab_size=5, e_embed=3, d_model=8, heads=2, seq_len=2)
    params = init_params(cfg, 0)
    ids = np.array([[4, 1]])
    out = token_embed_factorized(ids, params.embed, None).data
    e = params.embed
    np.testing.assert_allclose(out[0], e.table.data[[4, 1]] @ e.proj.data + e.pos.data, atol=1e-15)
    with pytest.raises(ValueError):
        token_embed_factorized(np.array([[5, 0]]), params.embed, None)


def test_heads(rng):
    w, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))
    single = Tensor(rng.normal(size=(2, 1, 4)))
    np.testing.assert_allclose(head_forward(single, "gap", w, b, True).data,
                               head_forward(single, "token-cls", w, b, True).data)  # fmt: skip
    v = rng.normal(size=4)
    same = Tensor(np.tile(v, (1, 5, 1)))
    np.testing.assert_allclose(head_forward(same, "gap", w, b, False).data[0], v @ w.data + b.data, atol=1e-14)
    h = rng.normal(size=(2, 6, 4))
    perm = rng.permutation(6)
    np.testing.assert_allclose(head_forward(Tensor(h[:, perm]), "gap", w, b, False).data,
                               head_forward(Tensor(h), "gap", w, b, False).data, atol=1e-14)  # fmt: skip
    with pytest.raises(ValueError):
        head_forward(Tensor(h), "token-cls", w, b, False)


# --- parameter accounting


def vanilla_transformer_count(cfg):
    """Textbook pre-norm transformer count, written independently of the library."""
    d, f = cfg.d_model, cfg.d_ff
    per_block = 4 * d * d + 4 * d + (d * f + f) + (f * d + d) + 2 * (2 * d)
    embed = cfg.vocab_size * d + cfg.seq_len * d
    return embed + cfg.depth * per_block + 2 * d + d * cfg.num_classes + cfg.num_classes


def test_count_matches_vanilla_transformer():
    cfg = WideNetConfig(depth=3, d_model=8, d_ff=16, heads=2, groups=1, use_moe=False, share_attn=False,
                        share_moe=False, e_embed=0, vocab_size=11, seq_len=6)  # fmt: skip
    assert count_parameters(cfg) == vanilla_transformer_count(cfg) == enumerate_parameters(init_params(cfg, 0))


@pytest.mark.parametrize("head", ["gap", "token-cls"])
@pytest.mark.parametrize("kind", ["token", "patch"])
def test_depth_adds_only_norms(head, kind):
    base = dict(d_model=8, heads=2, d_ff=8, groups=1, head_type=head, embed_kind=kind, e_embed=4)
    for depth in (1, 2, 5):
        a = WideNetConfig(depth=depth, **base)
        b = WideNetConfig(depth=depth + 1, **base)
        assert count_parameters(b) - count_parameters(a) == 4 * 8
        assert enumerate_parameters(init_params(b, 0)) - enumerate_parameters(init_params(a, 0)) == 4 * 8


def test_sharing_gap():
    d, f, e, depth = 8, 12, 4, 3
    base = dict(depth=depth, d_model=d, d_ff=f, heads=2, num_experts=e, groups=1)
    on = count_parameters(WideNetConfig(**base))
    off = count_parameters(WideNetConfig(**base, share_attn=False, share_moe=False))
    attn = 4 * (d * d + d)
    router = d * e
    experts = e * (d * f + f + f * d + d)
    assert off - on == (depth - 1) * (attn + router + experts)


# --- end to end


def test_forward_shapes_and_outcomes(tiny_cfg, rng):
    logits, outcomes = model_forward(rng.integers(0, 8, size=(3, 4)), init_params(tiny_cfg, 0), tiny_cfg)
    assert logits.shape == (3, 3) and len(outcomes) == tiny_cfg.groups


def test_patch_model_gradients_match_finite_differences(rng):
    cfg = WideNetConfig(depth=2, d_model=4, d_ff=4, heads=2, num_experts=3, top_k=2, groups=1, embed_kind="patch",
                        image_size=4, patch_size=2, head_type="token-cls", num_classes=2, dropout=0.2)  # fmt: skip
    params = init_params(cfg, 7)
    randomize(params, rng, 0.5)
    images = rng.normal(size=(2, 1, 4, 4))
    labels = np.array([0, 1])

    def loss():
        logits, outs = model_forward(images, params, cfg, RngStream(21), True)
        return total_loss(cross_entropy(logits, labels, 0.1), [moe.balance_loss(o) for o in outs], 0.05)

    named = named_parameters(params)
    zero_grad(named.values())
    backward(loss())
    for name, p in named.items():
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + 1e-5
                up = float(loss().data)
                flat[i] = orig - 1e-5
                down = float(loss().data)
            flat[i] = orig
            num[i] = (up - down) / 2e-5
        err = np.linalg.norm(p.grad.reshape(-1) - num)
        assert err <= 1e-5 * max(np.linalg.norm(num), 1e-5), name
