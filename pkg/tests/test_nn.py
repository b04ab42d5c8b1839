import numpy as np
import pytest

from dualrate.nn import (
    Embedding,
    LayerNorm,
    Linear,
    LoraLinear,
    MapPool,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    collect_state,
    load_state,
)
from dualrate.tensor import ShapeError, Tensor, backward, sum_

from helpers import check_grads


def brute_force_attention(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Materializes the attention matrix explicitly, plain numpy."""
    lq, d = q.shape
    lk = k.shape[0]
    hd = d // heads
    qp, kp, vp = q @ wq + bq, k @ wk + bk, v @ wv + bv
    out = np.zeros((lq, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = (qp[:, sl] @ kp[:, sl].T) / np.sqrt(hd)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        out[:, sl] = w @ vp[:, sl]
    return out @ wo + bo


def attn_weights(attn):
    return (attn.wq.weight.data, attn.wq.bias.data,
            attn.wk.weight.data, attn.wk.bias.data,
            attn.wv.weight.data, attn.wv.bias.data,
            attn.wo.weight.data, attn.wo.bias.data)


def test_attention_matches_explicit_matrix_oracle():
    rng = np.random.default_rng(0)
    for heads, lq, lk, d in [(1, 2, 2, 2), (2, 3, 4, 4), (4, 5, 3, 8)]:
        attn = MultiHeadAttention(d, heads, np.random.default_rng(7))
        q = rng.normal(size=(lq, d))
        kv = rng.normal(size=(lk, d))
        out = attn(Tensor(q), Tensor(kv))
        expect = brute_force_attention(q, kv, kv, *attn_weights(attn), heads)
        assert np.allclose(out.data, expect, atol=1e-12)


def test_attention_single_key_ignores_query():
    rng = np.random.default_rng(1)
    attn = MultiHeadAttention(4, 2, rng)
    kv = rng.normal(size=(1, 4))
    out1 = attn(Tensor(rng.normal(size=(3, 4))), Tensor(kv))
    out2 = attn(Tensor(rng.normal(size=(3, 4))), Tensor(kv))
    expect = (kv @ attn.wv.weight.data + attn.wv.bias.data) @ attn.wo.weight.data \
        + attn.wo.bias.data
    assert np.allclose(out1.data, out2.data, atol=1e-12)
    for row in out1.data:
        assert np.allclose(row, expect[0], atol=1e-12)


def test_attention_single_key_general_path_agrees():
    # masked path forces the generic computation; a one-key mask of all-False
    # must agree with the single-key shortcut
    rng = np.random.default_rng(5)
    attn = MultiHeadAttention(4, 2, rng)
    q = rng.normal(size=(3, 4))
    kv = rng.normal(size=(1, 4))
    fast = attn(Tensor(q), Tensor(kv))
    general = attn(Tensor(q), Tensor(kv), key_mask=np.array([False]))
    assert np.allclose(fast.data, general.data, atol=1e-12)


def test_attention_head_divisibility():
    with pytest.raises(ShapeError, match="divisible"):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


def test_attention_gradient():
    rng = np.random.default_rng(2)
    attn = MultiHeadAttention(4, 2, rng)
    q = rng.normal(size=(3, 4))

    def build(qt):
        return sum_(attn(qt))

    check_grads(build, [q])


def test_attention_mask_blocks_padded_keys():
    rng = np.random.default_rng(3)
    attn = MultiHeadAttention(4, 2, rng)
    kv = rng.normal(size=(4, 4))
    mask = np.array([False, False, True, True])
    out = attn(Tensor(kv), Tensor(kv), key_mask=mask)
    kv2 = kv.copy()
    kv2[2:] = 99.0  # garbage in masked rows must not matter
    out2 = attn(Tensor(kv), Tensor(kv2), key_mask=mask)
    assert np.allclose(out.data, out2.data, atol=1e-9)


def test_transformer_block_residual_identity_with_zeroed_projections():
    rng = np.random.default_rng(4)
    block = TransformerBlock(8, 2, rng)
    block.attn.wo.weight.data[:] = 0.0
    block.attn.wo.bias.data[:] = 0.0
    block.mlp.fc2.weight.data[:] = 0.0
    block.mlp.fc2.bias.data[:] = 0.0
    x = rng.normal(size=(5, 8))
    out = block(Tensor(x))
    assert np.allclose(out.data, x, atol=1e-12)


def test_map_pool_permutation_and_duplication_invariance():
    rng = np.random.default_rng(5)
    pool = MapPool(6, 2, 4, 8, rng)
    tokens = rng.normal(size=(7, 6))
    base = pool(Tensor(tokens)).data
    perm = pool(Tensor(tokens[rng.permutation(7)])).data
    dup = pool(Tensor(np.concatenate([tokens, tokens], axis=0))).data
    assert np.allclose(base, perm, atol=1e-12)
    assert np.allclose(base, dup, atol=1e-12)


def test_map_pool_single_token():
    rng = np.random.default_rng(6)
    pool = MapPool(6, 2, 4, 8, rng)
    token = rng.normal(size=(1, 6))
    out1 = pool(Tensor(token)).data
    out2 = pool(Tensor(np.repeat(token, 5, axis=0))).data
    assert np.allclose(out1, out2, atol=1e-12)


def test_map_pool_rejects_empty():
    pool = MapPool(6, 2, 4, 8, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="at least one token"):
        pool(Tensor(np.zeros((1, 0, 6))))


def test_lora_zero_init_identity():
    rng = np.random.default_rng(7)
    layer = LoraLinear(5, 3, rng, rank=2)
    x = rng.normal(size=(4, 5))
    base = x @ layer.weight.data + layer.bias.data
    assert np.allclose(layer(Tensor(x)).data, base, atol=1e-15)


def test_lora_full_rank_identity_algebra():
    rng = np.random.default_rng(8)
    d = 4
    layer = LoraLinear(d, d, rng, rank=d, scaling=1.0)
    layer.lora_down.data = np.eye(d)
    layer.lora_up.data = np.eye(d)
    x = rng.normal(size=(2, d))
    base = x @ layer.weight.data + layer.bias.data
    assert np.allclose(layer(Tensor(x)).data, base + x, atol=1e-12)


def test_module_state_roundtrip_with_lora_namespace():
    rng = np.random.default_rng(9)

    class Net(Module):
        def __init__(self):
            super().__init__()
            self.proj = LoraLinear(4, 4, rng, rank=2)
            self.norm = LayerNorm(4)

    net = Net()
    state = collect_state(net, "net/", "net/lora/")
    assert "net/proj/weight" in state
    assert "net/lora/proj/down" in state
    assert "net/lora/proj/up" in state

    net2 = Net()
    load_state(net2, state, "net/", "net/lora/")
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), net2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)


def test_load_state_missing_key():
    net = Linear(3, 3, np.random.default_rng(0))
    with pytest.raises(KeyError, match="missing parameter"):
        load_state(net, {}, "x/")


def test_embedding_lookup_shape():
    emb = Embedding(10, 4, np.random.default_rng(0))
    out = emb(np.array([[1, 2], [3, 4]]))
    assert out.data.shape == (2, 2, 4)


def test_parameter_count_doubles_with_depth():
    rng = np.random.default_rng(0)
    one = TransformerBlock(8, 2, np.random.default_rng(1)).parameter_count()
    two = sum(TransformerBlock(8, 2, np.random.default_rng(i)).parameter_count()
              for i in range(2))
    assert two == 2 * one
