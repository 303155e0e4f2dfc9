import numpy as np
import pytest

from mmgc import nn
from mmgc import tensor as T
from mmgc.errors import ShapeMismatch


def _identity_linear(layer: nn.Linear):
    layer.weight.data = np.eye(layer.n_out, layer.n_in, dtype=layer.weight.dtype)
    if layer.bias is not None:
        layer.bias.data[:] = 0


def test_linear_identity(f64):
    layer = nn.Linear(3, 3, np.random.default_rng(0))
    _identity_linear(layer)
    x = T.Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    assert np.array_equal(nn.linear_forward(layer, x).data, x.data)


def test_linear_hand_example(f64):
    layer = nn.Linear(2, 1, np.random.default_rng(0))
    layer.weight.data = np.array([[1.0, 1.0]])
    layer.bias.data = np.array([1.0])
    assert layer(T.Tensor([[2.0, 3.0]])).data.tolist() == [[6.0]]


def test_linear_in_dim_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.Linear(3, 2, np.random.default_rng(0))(T.Tensor(np.ones((1, 4))))


def test_init_bounds():
    layer = nn.Linear(16, 8, np.random.default_rng(0))
    assert np.abs(layer.weight.data).max() <= 0.25 and not layer.bias.data.any()


def _single_head_identity(dim=4):
    block = nn.MultiHeadAttention(dim, 1, np.random.default_rng(0))
    for lin in (block.wq, block.wk, block.wv, block.wo):
        _identity_linear(lin)
    return block


def test_attention_uniform_scores_average_values(f64):
    block = _single_head_identity()
    block.wq.weight.data[:] = 0  # every score equal
    kv = np.random.default_rng(2).normal(size=(5, 4))
    out = nn.attention(block, T.Tensor(np.ones((2, 4))), T.Tensor(kv))
    assert np.allclose(out.data, kv.mean(axis=0))


def test_attention_single_key_returns_its_value(f64):
    block = _single_head_identity()
    kv = np.array([[0.3, -1.0, 2.0, 0.5]])
    out = block(T.Tensor(np.random.default_rng(0).normal(size=(3, 4))), T.Tensor(kv))
    assert np.allclose(out.data, np.repeat(kv, 3, axis=0))


def test_attention_matches_bruteforce_two_heads(f64):
    rng = np.random.default_rng(5)
    block = nn.MultiHeadAttention(6, 2, rng)
    x, mem = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    out = block(T.Tensor(x), T.Tensor(mem)).data

    def lin(layer, a):
        return a @ layer.weight.data.T + (0 if layer.bias is None else layer.bias.data)

    q, k, v = lin(block.wq, x), lin(block.wk, mem), lin(block.wv, mem)
    heads = []
    for h in range(2):
        sl = slice(3 * h, 3 * h + 3)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(3)
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        heads.append(w @ v[:, sl])
    assert np.allclose(out, lin(block.wo, np.concatenate(heads, axis=1)))


def test_attention_key_mask_excludes_keys(f64):
    rng = np.random.default_rng(0)
    block = nn.MultiHeadAttention(4, 2, rng)
    q, kv = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    masked = block(T.Tensor(q), T.Tensor(kv), np.array([True, True, False])).data
    kv2 = kv.copy()
    kv2[2] = 99.0
    again = block(T.Tensor(q), T.Tensor(kv2), np.array([True, True, False])).data
    assert np.allclose(masked, again)
    assert np.allclose(masked, block(T.Tensor(q), T.Tensor(kv[:2])).data)


def test_block_is_identity_with_zero_output_projections(f64):
    block = nn.TransformerBlock(8, 2, np.random.default_rng(0))
    for lin in (block.attn.wo, block.ffn.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    x = T.Tensor(np.random.default_rng(1).normal(size=(5, 8)))
    assert np.allclose(nn.transformer_block_forward(block, x).data, x.data)


@pytest.mark.parametrize("n", [1, 3, 17])
def test_block_preserves_shape(n):
    block = nn.TransformerBlock(8, 2, np.random.default_rng(0))
    assert block(T.Tensor(np.ones((2, n, 8)))).shape == (2, n, 8)


def test_block_gradient_check(f64):
    rng = np.random.default_rng(0)
    block = nn.TransformerBlock(8, 2, rng)
    x = nn.Parameter(rng.normal(size=(3, 8)))
    w = T.Tensor(rng.normal(size=(3, 8)))
    for p in [x] + block.parameters():
        assert T.finite_diff_check(lambda _: (block(x) * w).sum(), p, h=1e-3, order=4, max_entries=12) <= 1e-5


def test_embedding_module():
    emb = nn.Embedding(5, 3, np.random.default_rng(0))
    out = nn.embed_lookup(emb.table, [0, 0])
    assert np.array_equal(out.data[0], out.data[1])
    with pytest.raises(IndexError):
        emb([5])


def test_named_parameters_order_and_names():
    block = nn.TransformerBlock(4, 2, np.random.default_rng(0))
    names = [n for n, _ in block.named_parameters()]
    assert names[:4] == ["ln1.gamma", "ln1.beta", "attn.wq.weight", "attn.wq.bias"]
    assert "attn.wk.bias" not in names
    assert len(names) == len(set(names))


def test_mlp_depths():
    rng = np.random.default_rng(0)
    assert len(nn.MLP(4, 3, 1, rng).layers) == 1
    deep = nn.MLP(4, 3, 3, rng, hidden=5)
    assert [layer.n_out for layer in deep.layers] == [5, 5, 3]
    with pytest.raises(ValueError):
        nn.MLP(4, 3, 0, rng)
