import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from wain.attention import (aggregate, cosine_relation, export_relation, fold_patches, import_relation,
                            masked_softmax, patch_validity, query_targets, unfold_patches)


def naive_relation(feats, valid, lam):
    """Loop oracle: cosine of every patch pair, softmax over the valid keys."""
    b, c, h, w = feats.shape
    rows = cols = int(math.isqrt(valid.shape[1]))
    ph, pw = h // rows, w // cols
    out = np.zeros((b, rows * cols, rows * cols))
    f = feats.numpy()
    for s in range(b):
        patches = [f[s, :, r * ph:(r + 1) * ph, q * pw:(q + 1) * pw].ravel()
                   for r in range(rows) for q in range(cols)]
        for j, pj in enumerate(patches):
            logits = []
            for i, pi in enumerate(patches):
                cos = pj @ pi / max(np.linalg.norm(pj), 1e-8) / max(np.linalg.norm(pi), 1e-8)
                logits.append(lam * cos)
            logits = np.array(logits)
            keep = valid[s].numpy()
            e = np.where(keep, np.exp(logits - logits[keep].max()), 0.0)
            out[s, j] = e / e.sum()
    return out


def test_unfold_fold_round_trip():
    x = torch.randn(2, 3, 8, 12, dtype=torch.float64)
    grid = unfold_patches(x, 4, 3)
    assert grid.patches.shape == (2, 12, 3 * 2 * 4)
    assert torch.equal(fold_patches(grid), x)


def test_unfold_index_is_row_major():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    p = unfold_patches(x, 2, 2).patches[0]
    assert p[0].tolist() == [0, 1, 4, 5]
    assert p[1].tolist() == [2, 3, 6, 7]
    assert p[2].tolist() == [8, 9, 12, 13]


def test_unfold_rejects_non_divisible():
    with pytest.raises(ValueError, match="cannot be tiled"):
        unfold_patches(torch.zeros(1, 1, 6, 6), 4, 4)


def test_validity_counts_any_masked_pixel():
    mask = torch.zeros(1, 1, 8, 8)
    mask[0, 0, 0, 3] = 1  # single pixel in tile (0, 1)
    valid = patch_validity(mask, 4, 4)
    assert valid.shape == (1, 16)
    assert valid[0].tolist() == [True, False] + [True] * 14
    assert query_targets(mask, 4, 4)[0].nonzero().flatten().tolist() == [1]


def test_validity_fully_masked_raises():
    with pytest.raises(ValueError, match="no unmasked keys"):
        patch_validity(torch.ones(1, 1, 8, 8), 2, 2)
    with pytest.raises(ValueError, match="no unmasked keys"):
        cosine_relation(torch.randn(1, 4, 4, 4), torch.zeros(1, 4, dtype=torch.bool))


def test_relation_matches_loop_oracle():
    torch.manual_seed(0)
    feats = torch.randn(2, 5, 8, 8, dtype=torch.float64)
    valid = torch.rand(2, 16) > 0.4
    valid[:, 0] = True
    rel = cosine_relation(feats, valid, 10.0)
    assert_allclose(rel.R.numpy(), naive_relation(feats, valid, 10.0), atol=1e-12)


def test_single_valid_key_is_one_hot():
    valid = torch.zeros(1, 9, dtype=torch.bool)
    valid[0, 4] = True
    rel = cosine_relation(torch.randn(1, 2, 6, 6), valid)
    expected = torch.zeros(9, 9)
    expected[:, 4] = 1
    assert torch.equal(rel.R[0], expected)


def test_zero_patch_is_finite():
    feats = torch.randn(1, 3, 4, 4)
    feats[..., :2, :2] = 0
    rel = cosine_relation(feats, torch.ones(1, 4, dtype=torch.bool))
    assert torch.isfinite(rel.R).all()
    assert_allclose(rel.R.sum(-1).numpy(), 1, atol=1e-6)


def test_identical_patches_give_uniform_rows():
    feats = torch.ones(1, 2, 4, 4)
    rel = cosine_relation(feats, torch.ones(1, 4, dtype=torch.bool))
    assert_allclose(rel.R.numpy(), 0.25, atol=1e-7)


def test_temperature_sharpens():
    torch.manual_seed(1)
    feats = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    valid = torch.ones(1, 16, dtype=torch.bool)
    soft = cosine_relation(feats, valid, 1.0).R
    sharp = cosine_relation(feats, valid, 50.0).R
    assert (sharp.diagonal(dim1=1, dim2=2) > soft.diagonal(dim1=1, dim2=2)).all()


def test_standard_kind_is_scaled_dot_product():
    torch.manual_seed(2)
    feats = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    valid = torch.ones(1, 4, dtype=torch.bool)
    p = unfold_patches(feats, 2, 2).patches[0]
    expected = torch.softmax(p @ p.T / math.sqrt(p.shape[1]), dim=-1)
    assert_allclose(cosine_relation(feats, valid, kind="standard").R[0].numpy(), expected.numpy(), atol=1e-12)
    with pytest.raises(ValueError, match="unknown attention kind"):
        cosine_relation(feats, valid, kind="dot")


def test_non_finite_features_rejected():
    feats = torch.randn(1, 2, 4, 4)
    feats[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        cosine_relation(feats, torch.ones(1, 4, dtype=torch.bool))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), lam=st.floats(0.1, 60.0))
def test_relation_rows_are_distributions(seed, lam):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(1, 3, 8, 8, generator=g) * 5
    valid = torch.rand(1, 16, generator=g) > 0.5
    valid[0, seed % 16] = True
    R = cosine_relation(feats, valid, lam).R[0]
    assert torch.all(R >= 0)
    assert_allclose(R.sum(-1).numpy(), 1, atol=1e-6)
    assert torch.count_nonzero(R[:, ~valid[0]]) == 0


def test_masked_softmax_large_logits():
    logits = torch.tensor([[[1e4, 0.0, -1e4]]])
    out = masked_softmax(logits, torch.tensor([[False, True, True]]))
    assert out[0, 0].tolist() == [0.0, 1.0, 0.0]


def test_relation_gradient_wrt_features():
    torch.manual_seed(3)
    feats = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    valid = torch.tensor([[True, True, False, True]])
    w = torch.randn(4, 4, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda f: (cosine_relation(f, valid).R[0] * w).sum(), (feats,),
                                    eps=1e-6, atol=1e-6)


def test_aggregate_identity_and_one_hot():
    torch.manual_seed(4)
    vals = unfold_patches(torch.randn(1, 3, 4, 4), 2, 2)
    eye = torch.eye(4)[None]
    assert torch.equal(aggregate(eye, vals).patches, vals.patches)
    copy_two = torch.zeros(1, 4, 4)
    copy_two[..., 2] = 1
    out = aggregate(copy_two, vals).patches
    assert torch.equal(out, vals.patches[:, 2:3].expand(1, 4, -1))


def test_aggregate_replace_only_masked():
    vals = unfold_patches(torch.randn(1, 1, 4, 4), 2, 2)
    R = torch.full((1, 4, 4), 0.25)
    q = torch.tensor([[False, True, False, False]])
    out = aggregate(R, vals, replace_only_masked=True, query_mask=q).patches
    assert torch.equal(out[0, [0, 2, 3]], vals.patches[0, [0, 2, 3]])
    assert_allclose(out[0, 1].numpy(), vals.patches[0].mean(0).numpy(), atol=1e-7)
    with pytest.raises(ValueError):
        aggregate(R, vals, replace_only_masked=True)


def test_aggregate_shape_mismatch():
    vals = unfold_patches(torch.randn(1, 1, 4, 4), 2, 2)
    with pytest.raises(ValueError, match="does not match"):
        aggregate(torch.eye(9)[None], vals)


def test_export_round_trip(tmp_path):
    R = torch.softmax(torch.randn(2, 6, 6), dim=-1)
    path = tmp_path / "r.bin"
    export_relation(R, path, index=1)
    raw = path.read_bytes()
    assert raw[:8] == (6).to_bytes(4, "little") * 2
    assert_allclose(import_relation(path), R[1].numpy(), rtol=0, atol=0)
