import math

import pytest
import torch

from difftrack.blocks import (FeedForward, MultiHeadAttention,
                              SelfAttentionBlock, masked_attention,
                              timestep_embedding)


def test_masked_keys_get_exactly_zero_weight():
    torch.manual_seed(0)
    q = torch.randn(2, 5, 8)
    k = torch.randn(2, 7, 8)
    v = torch.randn(2, 7, 8)
    mask = torch.ones(2, 7, dtype=torch.bool)
    mask[:, 4:] = False
    out = masked_attention(q, k, v, mask)
    # identical to attention computed over the unmasked prefix only
    ref = masked_attention(q, k[:, :4], v[:, :4], None)
    assert torch.allclose(out, ref, atol=1e-6)


def test_all_masked_rows_are_exact_zero_without_nan():
    q = torch.randn(1, 3, 8)
    k = torch.randn(1, 4, 8)
    v = torch.randn(1, 4, 8)
    mask = torch.zeros(1, 4, dtype=torch.bool)
    out = masked_attention(q, k, v, mask)
    assert torch.all(out == 0)
    assert torch.isfinite(out).all()


def test_all_masked_rows_have_finite_gradients():
    q = torch.randn(1, 2, 8, requires_grad=True)
    k = torch.randn(1, 4, 8, requires_grad=True)
    v = torch.randn(1, 4, 8, requires_grad=True)
    mask = torch.zeros(1, 4, dtype=torch.bool)
    masked_attention(q, k, v, mask).sum().backward()
    for t in (q, k, v):
        assert torch.isfinite(t.grad).all()


def test_mask_changes_output_when_it_hides_keys():
    torch.manual_seed(1)
    q = torch.randn(1, 2, 8)
    k = torch.randn(1, 6, 8)
    v = torch.randn(1, 6, 8)
    full = masked_attention(q, k, v, torch.ones(1, 6, dtype=torch.bool))
    half = torch.tensor([[True, True, True, False, False, False]])
    assert not torch.allclose(full, masked_attention(q, k, v, half))


def test_mha_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        MultiHeadAttention(q_dim=10, heads=3, attn_dim=10)
    with pytest.raises(ValueError):
        MultiHeadAttention(q_dim=8, heads=4, attn_dim=8, v_dim=6)


def test_mha_cross_attention_shapes():
    mha = MultiHeadAttention(q_dim=16, kv_dim=12, heads=2, attn_dim=8, v_dim=16,
                             project_out=False)
    x = torch.randn(3, 5, 16)
    ctx = torch.randn(3, 9, 12)
    out = mha(x, context=ctx, key_mask=torch.ones(3, 9, dtype=torch.bool))
    assert out.shape == (3, 5, 16)


def test_zero_output_path_makes_module_output_zero():
    torch.manual_seed(2)
    for project_out in (True, False):
        mha = MultiHeadAttention(q_dim=8, heads=2, project_out=project_out)
        mha.zero_output_path()
        assert torch.all(mha(torch.randn(1, 4, 8)) == 0)
    ff = FeedForward(8)
    ff.zero_output_path()
    assert torch.all(ff(torch.randn(1, 4, 8)) == 0)


def test_self_attention_block_is_identity_after_zeroing_paths():
    blk = SelfAttentionBlock(dim=8, heads=2)
    blk.attn.zero_output_path()
    blk.ff.zero_output_path()
    x = torch.randn(2, 5, 8)
    assert torch.equal(blk(x), x)


def test_timestep_embedding_shape_and_range():
    emb = timestep_embedding(torch.arange(10), 16)
    assert emb.shape == (10, 16)
    assert torch.all(emb.abs() <= 1.0 + 1e-6)


def test_timestep_embedding_t_zero_is_cos_sin_of_zero():
    emb = timestep_embedding(torch.zeros(1, dtype=torch.long), 8)
    assert torch.allclose(emb[0, :4], torch.ones(4))
    assert torch.allclose(emb[0, 4:], torch.zeros(4))


def test_timestep_embedding_distinguishes_timesteps():
    emb = timestep_embedding(torch.tensor([1, 2, 500]), 32)
    assert not torch.allclose(emb[0], emb[1])
    assert not torch.allclose(emb[0], emb[2])


def test_timestep_embedding_odd_dim_pads():
    emb = timestep_embedding(torch.tensor([3]), 7)
    assert emb.shape == (1, 7)
    assert emb[0, -1] == 0
