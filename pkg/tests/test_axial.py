import math
import time

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from wain.axial import (AxialBlock, AxialStack, MultiHeadAttention, add_axial_embeddings,
                        axial_flop_estimate, full_attention)


def lin(layer, x):
    return x @ layer.weight.T + layer.bias


def layer_norm(ln, x):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + ln.eps) * ln.weight + ln.bias


def loop_attention(attn: MultiHeadAttention, x):
    """Per-pair, per-head loop oracle for self-attention on one (L, C) sequence."""
    L, c = x.shape
    heads, d = attn.heads, c // attn.heads
    q, k, v = lin(attn.q, x), lin(attn.k, x), lin(attn.v, x)
    out = torch.zeros_like(x)
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        for i in range(L):
            scores = torch.stack([(q[i, sl] * k[j, sl]).sum() / math.sqrt(d) for j in range(L)])
            w = torch.exp(scores - scores.max())
            w = w / w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(L))
    return lin(attn.out, out)


def standard_block(block: AxialBlock, tokens, full_first: bool):
    """Standard transformer block on a token sequence with the degenerate axis
    written out: attention over a length-1 sequence is ``out(v(LN x))``."""
    def single(attn, norm, t):
        return lin(attn.out, lin(attn.v, layer_norm(norm, t)))

    if full_first:  # 1 x n: rows carry all tokens, columns are length 1
        t = tokens + loop_attention(block.row_attn, layer_norm(block.norm_row, tokens))
        t = t + single(block.col_attn, block.norm_col, t)
    else:  # n x 1
        t = tokens + single(block.row_attn, block.norm_row, tokens)
        t = t + loop_attention(block.col_attn, layer_norm(block.norm_col, t))
    ff = block.ff
    hidden = torch.nn.functional.gelu(lin(ff[0], layer_norm(block.norm_ff, t)))
    return t + lin(ff[2], hidden)


def randomize(module, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
    return module


def test_mha_matches_loop_oracle():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2).double()
    x = torch.randn(1, 5, 8, dtype=torch.float64)
    assert_allclose(attn(x)[0].detach().numpy(), loop_attention(attn, x[0]).detach().numpy(), atol=1e-10)


def test_mha_length_one_and_identical_tokens():
    attn = MultiHeadAttention(8, 4).double()
    x = torch.randn(3, 1, 8, dtype=torch.float64)
    expected = attn.out(attn.v(x))
    assert_allclose(attn(x).detach().numpy(), expected.detach().numpy(), atol=1e-12)
    same = torch.randn(1, 1, 8, dtype=torch.float64).expand(1, 6, 8)
    y, w = attn(same, return_weights=True)
    assert_allclose(w.detach().numpy(), 1 / 6, atol=1e-12)
    assert_allclose((y - y[:, :1]).detach().numpy(), 0, atol=1e-12)


def test_mha_errors():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadAttention(10, 4)
    attn = MultiHeadAttention(8, 2)
    with pytest.raises(ValueError):
        attn(torch.randn(1, 3, 8), torch.randn(1, 4, 8), torch.randn(1, 5, 8))
    with pytest.raises(FloatingPointError):
        attn(torch.full((1, 3, 8), float("inf")))


def test_embeddings():
    x = torch.randn(2, 3, 4, 5)
    assert torch.equal(add_axial_embeddings(x, torch.zeros(3, 5), torch.zeros(4, 5)), x)
    row = torch.arange(3.0)[:, None].expand(3, 5)
    y = add_axial_embeddings(torch.zeros(1, 3, 4, 5), row, torch.zeros(4, 5))
    assert torch.equal(y[0, :, :, 0], torch.arange(3.0)[:, None].expand(3, 4))
    r, c = torch.randn(3, 5), torch.randn(4, 5)
    d = add_axial_embeddings(x, r, c) - x
    sep = d[:, :, :1] + d[:, :1, :] - d[:, :1, :1]
    assert_allclose(d.numpy(), sep.numpy(), atol=1e-6)
    with pytest.raises(ValueError, match="do not match"):
        add_axial_embeddings(x, torch.zeros(4, 5), torch.zeros(4, 5))


@pytest.mark.parametrize("n", [4, 16, 64])
def test_block_on_single_row_is_standard_block(n):
    block = randomize(AxialBlock(8, 2).double(), n)
    x = torch.randn(2, 1, n, 8, dtype=torch.float64)
    got = block(x)
    for b in range(2):
        ref = standard_block(block, x[b, 0], full_first=True)
        assert_allclose(got[b, 0].detach().numpy(), ref.detach().numpy(), atol=1e-5)


def test_block_on_single_column_is_standard_block():
    block = randomize(AxialBlock(8, 2).double(), 7)
    x = torch.randn(1, 9, 1, 8, dtype=torch.float64)
    ref = standard_block(block, x[0, :, 0], full_first=False)
    assert_allclose(block(x)[0, :, 0].detach().numpy(), ref.detach().numpy(), atol=1e-5)


def test_row_attention_column_equivariance():
    torch.manual_seed(1)
    block = AxialBlock(8, 2).double()
    x = torch.randn(2, 3, 6, 8, dtype=torch.float64)
    perm = torch.randperm(6)

    def rows_only(t):
        b, h, w, c = t.shape
        return block.row_attn(block.norm_row(t).reshape(b * h, w, c)).reshape(b, h, w, c)

    assert_allclose(rows_only(x[:, :, perm]).detach().numpy(), rows_only(x)[:, :, perm].detach().numpy(),
                    atol=1e-12)


def test_zero_output_projection_leaves_feed_forward():
    block = AxialBlock(8, 2).double()
    with torch.no_grad():
        for attn in (block.row_attn, block.col_attn):
            attn.out.weight.zero_()
            attn.out.bias.zero_()
    x = torch.randn(1, 3, 4, 8, dtype=torch.float64)
    assert_allclose(block(x).detach().numpy(), (x + block.ff(block.norm_ff(x))).detach().numpy(), atol=1e-12)


def test_attention_rows_sum_to_one():
    block = AxialBlock(8, 4)
    w_row, w_col = block.attention_weights(torch.randn(2, 3, 5, 8))
    assert w_row.shape == (6, 4, 5, 5) and w_col.shape == (10, 4, 3, 3)
    for w in (w_row, w_col):
        assert_allclose(w.sum(-1).detach().numpy(), 1, atol=1e-6)


def test_block_gradcheck():
    torch.manual_seed(2)
    block = AxialBlock(8, 2).double()
    x = torch.randn(1, 2, 3, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: block(t), (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_stack_adds_position_once():
    stack = AxialStack(3, 4, 8, depth=2, heads=2)
    seen = []
    for blk in stack.blocks:
        blk.register_forward_pre_hook(lambda m, args: seen.append(args[0].clone()))
    x = torch.randn(1, 8, 3, 4)
    stack(x)
    expected = add_axial_embeddings(x.permute(0, 2, 3, 1), stack.position.row_embed, stack.position.col_embed)
    assert torch.equal(seen[0], expected)
    assert stack.position.row_embed.std().item() < 0.1
    plain = AxialStack(3, 4, 8, depth=0, use_position=False)
    assert torch.equal(plain(x), x)


def test_flop_ratio():
    axial, full = axial_flop_estimate(32, 32, 64, 4)
    assert axial * 16 == full
    a1, f1 = axial_flop_estimate(1, 16, 8)
    assert a1 >= f1
    a2, f2 = axial_flop_estimate(16, 24, 8)
    a4, f4 = axial_flop_estimate(32, 48, 8)
    # h w^2 + w h^2 is cubic in a joint scale, (h w)^2 quartic
    assert a4 == 8 * a2 and f4 == 16 * f2
    assert axial_flop_estimate(8, 8, 4, heads=1) == axial_flop_estimate(8, 8, 4, heads=4)
    with pytest.raises(ValueError):
        axial_flop_estimate(0, 8, 4)


@pytest.mark.slow
def test_axial_is_faster_than_full_at_64():
    torch.manual_seed(3)
    block = AxialBlock(8, 1)
    x = torch.randn(1, 64, 64, 8)
    full = MultiHeadAttention(8, 1)

    def axial_pass():
        b, h, w, c = x.shape
        block.row_attn(x.reshape(b * h, w, c))
        block.col_attn(x.transpose(1, 2).reshape(b * w, h, c))

    def timed(fn):
        best = float("inf")
        for _ in range(2):
            t = time.perf_counter()
            with torch.no_grad():
                fn()
            best = min(best, time.perf_counter() - t)
        return best

    assert timed(lambda: full_attention(x, full)) >= 4 * timed(axial_pass)
