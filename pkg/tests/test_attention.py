import numpy as np
import pytest

import oracles as O
from panformer import tensor as T
from panformer.attention import (
    MASK_VALUE,
    Attention,
    AttentionMask,
    AttnConfig,
    CrossAttentionBlock,
    PatchEmbed,
    PatchMerge,
    SelfAttentionBlock,
    cab_forward,
    multi_head_attention,
    sab_forward,
)
from panformer.gradcheck import randomize
from panformer.tensor import DimensionError, Tensor


def rand(rng, *shape):
    return rng.standard_normal(shape)


def zero_outputs(blk):
    blk.attn.proj.weight.data[...] = 0
    blk.attn.proj.bias.data[...] = 0
    blk.mlp2.weight.data[...] = 0
    blk.mlp2.bias.data[...] = 0


# -- config and mask --------------------------------------------------------


@pytest.mark.parametrize("kwargs", [dict(dim=6, heads=4, window=4), dict(dim=8, heads=2, window=4, shift=4),
                                    dict(dim=8, heads=2, window=4, scale_mode="sqrt")])
def test_attn_config_rejects(kwargs):
    with pytest.raises(ValueError):
        AttnConfig(**kwargs)


def test_scale_modes():
    assert AttnConfig(64, 8, 4).scale == pytest.approx(1 / np.sqrt(8))
    assert AttnConfig(64, 8, 4, scale_mode="full_dim").scale == pytest.approx(1 / 8)


def test_unshifted_mask_is_zero():
    assert not AttentionMask.for_grid(8, 8, 4, 0).values.any()


def test_mask_matches_contiguity_oracle():
    mask = AttentionMask.for_grid(8, 12, 4, 2).values
    for wy in range(2):
        for wx in range(3):
            allowed = O.contiguity(O.shifted_window_members(8, 12, 4, 2, wy, wx), 4)
            assert np.array_equal(mask[wy * 3 + wx] == 0, allowed)


def test_masked_weights_vanish_and_rows_normalize():
    rng = np.random.default_rng(0)
    mask = AttentionMask.for_grid(8, 8, 4, 2).values
    scores = rand(rng, 4, 16, 16).astype(np.float32) * 3
    w = T.softmax(Tensor(scores + mask.astype(np.float32)), axis=-1).data
    assert np.all(w[mask == MASK_VALUE] < 1e-20)
    np.testing.assert_allclose(w.sum(-1), 1, atol=1e-6)


# -- multi-head attention ---------------------------------------------------


def test_single_token_returns_projected_value():
    rng = np.random.default_rng(1)
    cfg = AttnConfig(4, 1, 1)
    attn = randomize(Attention(4, rng), rng)
    x = rand(rng, 1, 4)
    with T.oracle_mode():
        attn.astype(np.float64)
        out = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), attn, cfg).data
    np.testing.assert_allclose(out, O.linear(O.linear(x, attn.v), attn.proj), atol=1e-12)


def test_equal_scores_average_values():
    rng = np.random.default_rng(2)
    cfg = AttnConfig(4, 1, 1)
    attn = randomize(Attention(4, rng), rng)
    attn.q.weight.data[...] = 0
    attn.q.bias.data[...] = 0  # Q = 0: orthogonal to every key
    attn.proj.weight.data[...] = np.eye(4)
    attn.proj.bias.data[...] = 0
    x = rand(rng, 2, 4)
    with T.oracle_mode():
        attn.astype(np.float64)
        out = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), attn, cfg).data
    v = O.linear(x, attn.v)
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(0), (2, 4)), atol=1e-12)


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_direct_formula(heads):
    rng = np.random.default_rng(3 + heads)
    cfg = AttnConfig(4, heads, 1)
    attn = randomize(Attention(4, rng), rng)
    k, v, q = rand(rng, 3, 4), rand(rng, 3, 4), rand(rng, 3, 4)
    with T.oracle_mode():
        attn.astype(np.float64)
        out = multi_head_attention(Tensor(k), Tensor(v), Tensor(q), attn, cfg).data
    # independent oracle with distinct K and V sources
    d = 4 // heads
    K, V, Q = O.linear(k, attn.k), O.linear(v, attn.v), O.linear(q, attn.q)
    pre = np.zeros((3, 4))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        s = Q[:, sl] @ K[:, sl].T / np.sqrt(d)
        e = np.exp(s - s.max(1, keepdims=True))
        pre[:, sl] = (e / e.sum(1, keepdims=True)) @ V[:, sl]
    np.testing.assert_allclose(out, O.linear(pre, attn.proj), atol=1e-10)


def test_attention_token_mismatch():
    cfg = AttnConfig(4, 1, 2)
    attn = Attention(4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        multi_head_attention(Tensor(np.ones((4, 4))), Tensor(np.ones((4, 4))), Tensor(np.ones((3, 4))), attn, cfg)


# -- SAB --------------------------------------------------------------------


@pytest.mark.parametrize("shift", [0, 2])
def test_sab_zero_branches_identity(shift):
    rng = np.random.default_rng(4)
    blk = randomize(SelfAttentionBlock(AttnConfig(8, 2, 4, shift), rng), rng)
    zero_outputs(blk)
    x = Tensor(rand(rng, 8, 8, 8))
    assert np.array_equal(sab_forward(x, blk).data, x.data)


def test_sab_single_window_is_dense_attention():
    rng = np.random.default_rng(5)
    blk = randomize(SelfAttentionBlock(AttnConfig(8, 2, 4), rng), rng)
    x = rand(rng, 4, 4, 8)
    with T.oracle_mode():
        blk.astype(np.float64)
        out = sab_forward(Tensor(x), blk).data
    expected = O.sab_tokens(x.reshape(16, 8), blk, 2).reshape(4, 4, 8)
    np.testing.assert_allclose(out, expected, atol=1e-10)


@pytest.mark.parametrize("window_index", [(0, 0), (0, 1), (1, 1)])
def test_shifted_sab_gather_and_attend(window_index):
    """32-bit shifted SAB on 8x8x8 against attention over explicitly gathered tokens."""
    rng = np.random.default_rng(6)
    blk = randomize(SelfAttentionBlock(AttnConfig(8, 2, 4, shift=2), rng), rng)
    x = rand(rng, 8, 8, 8).astype(np.float32)
    out = sab_forward(Tensor(x), blk).data
    assert out.dtype == np.float32
    members = O.shifted_window_members(8, 8, 4, 2, *window_index)
    tokens = np.array([x[r, c] for r, c in members], dtype=np.float64)
    expected = O.sab_tokens(tokens, blk, 2, O.contiguity(members, 4))
    got = np.array([out[r, c] for r, c in members])
    np.testing.assert_allclose(got, expected, atol=1e-5, rtol=0)


def test_sab_pads_non_multiple_extents():
    rng = np.random.default_rng(7)
    blk = SelfAttentionBlock(AttnConfig(8, 2, 4, 2), rng)
    out = sab_forward(Tensor(rand(rng, 6, 10, 8)), blk)
    assert out.shape == (6, 10, 8)


def test_sab_batch_is_per_sample():
    rng = np.random.default_rng(8)
    blk = randomize(SelfAttentionBlock(AttnConfig(8, 2, 4, 2), rng), rng)
    x = rand(rng, 2, 8, 8, 8)
    with T.oracle_mode():
        blk.astype(np.float64)
        both = blk(Tensor(x)).data
        single = sab_forward(Tensor(x[1]), blk).data
    np.testing.assert_allclose(both[1], single, atol=1e-12)


# -- CAB --------------------------------------------------------------------


def _cab_like(sab, rng):
    cab = CrossAttentionBlock(sab.cfg, rng)
    src = dict(sab.named_parameters())
    for name, p in cab.named_parameters():
        key = "norm1" + name[len("norm1_kv"):] if name.startswith("norm1_kv") else \
            "norm1" + name[len("norm1_q"):] if name.startswith("norm1_q") else name
        p.data[...] = src[key].data
    return cab


@pytest.mark.parametrize("shift", [0, 2])
def test_cab_degenerates_to_sab(shift):
    rng = np.random.default_rng(9)
    sab = randomize(SelfAttentionBlock(AttnConfig(8, 2, 4, shift), rng), rng)
    cab = _cab_like(sab, rng)
    x = Tensor(rand(rng, 8, 8, 8))
    assert np.array_equal(cab_forward(x, x, cab).data, sab_forward(x, sab).data)


def test_cab_zero_branches_return_q_stream():
    rng = np.random.default_rng(10)
    cab = randomize(CrossAttentionBlock(AttnConfig(8, 2, 4, 2), rng), rng)
    zero_outputs(cab)
    a, b = Tensor(rand(rng, 8, 8, 8)), Tensor(rand(rng, 8, 8, 8))
    assert np.array_equal(cab_forward(a, b, cab).data, b.data)


def test_cab_single_window_direct_formula():
    rng = np.random.default_rng(11)
    cab = randomize(CrossAttentionBlock(AttnConfig(8, 2, 4), rng), rng)
    a, b = rand(rng, 4, 4, 8), rand(rng, 4, 4, 8)
    with T.oracle_mode():
        cab.astype(np.float64)
        out = cab_forward(Tensor(a), Tensor(b), cab).data
    expected = O.cab_tokens(a.reshape(16, 8), b.reshape(16, 8), cab, 2).reshape(4, 4, 8)
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_cab_stream_mismatch():
    cab = CrossAttentionBlock(AttnConfig(8, 2, 4), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        cab_forward(Tensor(np.ones((4, 4, 8))), Tensor(np.ones((8, 4, 8))), cab)


def test_cab_has_separate_stream_norms():
    names = [n for n, _ in CrossAttentionBlock(AttnConfig(8, 2, 4), np.random.default_rng(0)).named_parameters()]
    assert "norm1_kv.weight" in names and "norm1_q.weight" in names
    assert len(names) == len(set(names))


# -- patch embedding / merging ----------------------------------------------


def test_patch_embed_identity_p1():
    emb = PatchEmbed(3, 3, 1, np.random.default_rng(0))
    emb.proj.weight.data[...] = np.eye(3)
    img = Tensor(rand(np.random.default_rng(1), 4, 4, 3))
    assert np.array_equal(emb(img).data, img.data)


def test_patch_embed_2x2_definitional():
    rng = np.random.default_rng(2)
    emb = randomize(PatchEmbed(1, 5, 2, rng), rng)
    img = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    with T.oracle_mode():
        emb.astype(np.float64)
        out = emb(Tensor(img)).data
    assert out.shape == (1, 1, 5)
    np.testing.assert_allclose(out[0, 0], O.linear(np.array([1.0, 2, 3, 4]), emb.proj), atol=1e-12)


def test_patch_embed_gather_oracle():
    rng = np.random.default_rng(3)
    emb = randomize(PatchEmbed(1, 6, 2, rng), rng)
    img = rand(rng, 4, 4, 1)
    with T.oracle_mode():
        emb.astype(np.float64)
        out = emb(Tensor(img)).data
    for i in range(2):
        for j in range(2):
            patch = img[2 * i:2 * i + 2, 2 * j:2 * j + 2, :].reshape(-1)
            np.testing.assert_allclose(out[i, j], O.linear(patch, emb.proj), atol=1e-12)


def test_patch_embed_non_divisible():
    emb = PatchEmbed(1, 4, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        emb(Tensor(np.ones((5, 4, 1))))


def test_patch_merge_average():
    merge = PatchMerge(1, np.random.default_rng(0))
    merge.proj.weight.data[...] = 0.25
    out = merge(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]))
    assert out.data.shape == (1, 1, 1) and out.data[0, 0, 0] == pytest.approx(2.5)


def test_patch_merge_shape_and_gather_oracle():
    rng = np.random.default_rng(4)
    merge = randomize(PatchMerge(3, rng), rng)
    x = rand(rng, 8, 8, 3)
    with T.oracle_mode():
        merge.astype(np.float64)
        out = merge(Tensor(x)).data
    assert out.shape == (4, 4, 3)
    for i in range(4):
        for j in range(4):
            cat = np.concatenate([x[2 * i, 2 * j], x[2 * i, 2 * j + 1], x[2 * i + 1, 2 * j], x[2 * i + 1, 2 * j + 1]])
            np.testing.assert_allclose(out[i, j], O.linear(cat, merge.proj), atol=1e-12)


def test_patch_merge_odd_extent():
    with pytest.raises(DimensionError):
        PatchMerge(2, np.random.default_rng(0))(Tensor(np.ones((5, 4, 2))))
