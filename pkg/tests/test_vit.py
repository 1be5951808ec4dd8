import numpy as np
import pytest

from peftlab import tensor as T
from peftlab.errors import ConfigError, DimensionError
from peftlab.rng import Rng
from peftlab.tensor import Tensor
from peftlab.vit import (
    PRESETS,
    ViTConfig,
    ViTModel,
    attention_forward,
    attention_projection_count,
    backbone_forward,
    param_count,
    patchify,
    preset,
)

TINY = PRESETS["tiny"]


def small_model(seed=0, **kw):
    cfg = ViTConfig(**{**dict(image_size=16, patch_size=8, channels=1, dim=16, depth=1, heads=2), **kw})
    return ViTModel.init(cfg, seed=seed), cfg


# -- config -------------------------------------------------------------------


def test_config_divisibility_errors():
    with pytest.raises(ConfigError):
        ViTConfig(image_size=30, patch_size=8, channels=1, dim=32, depth=2, heads=2)
    with pytest.raises(ConfigError):
        ViTConfig(image_size=32, patch_size=8, channels=1, dim=30, depth=2, heads=4)


def test_presets():
    assert TINY.dim == 32 and TINY.depth == 2 and TINY.heads == 2 and TINY.patch_size == 8
    b16, l14 = PRESETS["B16-shape"], PRESETS["L14-shape"]
    assert (b16.dim, b16.depth, b16.heads) == (768, 12, 12)
    assert (l14.dim, l14.depth, l14.heads) == (1024, 24, 16)
    assert preset("tiny") is TINY
    assert preset("l14-SHAPE") is l14
    with pytest.raises(ConfigError):
        preset("giant")


# -- patchify -----------------------------------------------------------------


def test_patchify_counts():
    a = patchify(np.zeros((1, 32, 32)), 16)
    assert a.shape == (4, 256)
    b = patchify(np.zeros((3, 32, 32)), 8)
    assert b.shape == (16, 192)


def test_patchify_constant_image_identical_rows():
    rows = patchify(np.full((2, 32, 32), 0.7), 8)
    assert np.all(rows == rows[0])


def test_patchify_channel_major_layout():
    # encode (channel, y, x) into the pixel value and check the first patch
    c, s, p = 2, 16, 8
    img = np.zeros((c, s, s))
    for ch in range(c):
        for y in range(s):
            for x in range(s):
                img[ch, y, x] = ch * 10000 + y * 100 + x
    rows = patchify(img, p)
    expected_first = img[:, :p, :p].reshape(-1)  # channel-major, row-major per channel
    np.testing.assert_array_equal(rows[0], expected_first)
    # second patch is the next patch to the right
    expected_second = img[:, :p, p:2 * p].reshape(-1)
    np.testing.assert_array_equal(rows[1], expected_second)


def test_patchify_batched_matches_single():
    imgs = Rng(0).uniform((3, 1, 32, 32))
    batch = patchify(imgs, 8)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], patchify(imgs[i], 8))


def test_patchify_errors():
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 30, 30)), 8)
    with pytest.raises(DimensionError):
        patchify(np.zeros((30, 30)), 8)


def test_patchify_tensor_gradient_roundtrip():
    x = Tensor(Rng(1).uniform((1, 16, 16)), requires_grad=True)
    T.tsum(patchify(x, 8)).backward()
    np.testing.assert_array_equal(x.grad, np.ones((1, 16, 16)))


# -- attention ----------------------------------------------------------------


def test_attention_single_token_oracle():
    model, cfg = small_model()
    blk = model.blocks[0]
    tok = Rng(2).normal((1, cfg.dim))
    out = attention_forward(blk, Tensor(tok), cfg.heads).data
    # independent: softmax over one token is [1], so ctx = v and out = Wo v + residual
    mu, var = tok.mean(), tok.var()
    normed = (tok - mu) / np.sqrt(var + 1e-5)
    v = normed @ blk.Wv.data.T
    expected = tok + (v @ blk.Wo.data.T)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_zero_qk_is_mean_pooling():
    model, cfg = small_model(seed=3)
    blk = model.blocks[0]
    blk.Wq.data[:] = 0.0
    blk.Wk.data[:] = 0.0
    toks = Rng(4).normal((5, cfg.dim))
    out = attention_forward(blk, Tensor(toks), cfg.heads).data
    mu = toks.mean(axis=1, keepdims=True)
    normed = (toks - mu) / np.sqrt(toks.var(axis=1, keepdims=True) + 1e-5)
    v = normed @ blk.Wv.data.T  # uniform attention averages value rows per head;
    pooled = np.repeat(v.mean(axis=0, keepdims=True), 5, axis=0)  # same mean for every head slice
    expected = toks + pooled @ blk.Wo.data.T
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_attention_hand_oracle_2dim():
    # H=1, d=2, 3 tokens: scalar-by-scalar reimplementation
    model, cfg = small_model(seed=5, image_size=16, patch_size=8, dim=2, heads=1)
    blk = model.blocks[0]
    toks = Rng(6).normal((3, 2))
    got = attention_forward(blk, Tensor(toks), 1).data

    normed = np.zeros((3, 2))
    for i in range(3):
        mu = (toks[i, 0] + toks[i, 1]) / 2.0
        var = ((toks[i, 0] - mu) ** 2 + (toks[i, 1] - mu) ** 2) / 2.0
        for j in range(2):
            normed[i, j] = (toks[i, j] - mu) / np.sqrt(var + 1e-5)
    q = normed @ blk.Wq.data.T
    k = normed @ blk.Wk.data.T
    v = normed @ blk.Wv.data.T
    out = np.zeros((3, 2))
    for i in range(3):
        scores = [(q[i] * k[j]).sum() / np.sqrt(2.0) for j in range(3)]
        e = np.exp(scores - max(scores))
        w = e / e.sum()
        ctx = sum(w[j] * v[j] for j in range(3))
        out[i] = toks[i] + blk.Wo.data @ ctx
    np.testing.assert_allclose(got, out, atol=1e-10)


def test_attention_width_mismatch():
    model, cfg = small_model()
    with pytest.raises(DimensionError):
        attention_forward(model.blocks[0], Tensor(np.ones((3, cfg.dim + 1))), cfg.heads)


# -- backbone forward -----------------------------------------------------------


def test_forward_deterministic_and_batch_consistent():
    model = ViTModel.init(TINY, seed=9)
    img = Rng(10).uniform((1, 32, 32))
    z1 = backbone_forward(model, img)
    z2 = backbone_forward(model, img)
    assert z1.shape == (TINY.dim,)
    np.testing.assert_array_equal(z1.data, z2.data)
    # identical images in one batch give identical rows
    zb = model.forward(np.stack([img, img]))
    np.testing.assert_array_equal(zb.data[0], zb.data[1])
    np.testing.assert_array_equal(zb.data[0], z1.data)


def test_forward_shape_contract_small_variants():
    for d, heads in ((16, 2), (24, 4), (32, 2)):
        model, cfg = small_model(seed=d, dim=d, heads=heads)
        z = model.forward(Rng(d).uniform((2, 1, 16, 16)))
        assert z.shape == (2, d)


def test_forward_rejects_wrong_shape():
    model = ViTModel.init(TINY, seed=0)
    with pytest.raises(DimensionError):
        model.forward(np.zeros((1, 3, 32, 32)))


def test_permutation_sanity():
    # with positional embeddings zeroed, permuting patch rows leaves z unchanged
    model = ViTModel.init(TINY, seed=11)
    model.pos_embed.data[:] = 0.0
    patches = patchify(Rng(12).uniform((1, 32, 32)), 8)
    z = model.forward_patches(Tensor(patches[None])).data
    perm = Rng(13).permutation(patches.shape[0])
    z_perm = model.forward_patches(Tensor(patches[perm][None])).data
    np.testing.assert_allclose(z, z_perm, atol=1e-10)


def test_frozen_flag_blocks_gradients():
    model, cfg = small_model(seed=14)
    model.set_trainable(False)
    z = model.forward(Rng(15).uniform((2, 1, 16, 16)))
    assert not z.requires_grad
    assert all(not p.requires_grad and p.grad is None for p in model.parameters().values())


# -- parameter accounting ---------------------------------------------------------


def test_param_count_single_projection():
    l14 = PRESETS["L14-shape"]
    per_projection = attention_projection_count(l14) // (l14.depth * 4)
    assert per_projection == 1024 * 1024 == 1_048_576


def test_param_count_l14_projections_closed_form():
    assert attention_projection_count(PRESETS["L14-shape"]) == 24 * 4 * 1024 * 1024 == 100_663_296


def test_param_count_two_oracle_agreement():
    # closed form vs independent shape walk over the instantiated model
    model = ViTModel.init(TINY, seed=0)
    walked = sum(p.data.size for p in model.parameters().values())
    assert param_count(TINY) == walked == param_count(model)
    model2, cfg2 = small_model(dim=24, heads=4, depth=3, mlp_ratio=2, channels=2)
    assert param_count(cfg2) == sum(p.data.size for p in model2.parameters().values())


def test_param_count_trainable_only():
    model = ViTModel.init(TINY, seed=0)
    assert param_count(model, trainable_only=True) == param_count(model)
    model.set_trainable(False)
    assert param_count(model, trainable_only=True) == 0


def test_projection_ratio_l14_vs_b16():
    ratio = attention_projection_count(PRESETS["L14-shape"]) / attention_projection_count(PRESETS["B16-shape"])
    assert ratio == pytest.approx(32.0 / 9.0)  # ~3.56x, the coarse "4x larger" claim
