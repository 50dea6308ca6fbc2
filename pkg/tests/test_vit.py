import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spt_lab.errors import ConfigError
from spt_lab.prompts import PromptSet
from spt_lab.tensor import Tensor, precision
from spt_lab.vit import (VitConfig, VitModel, block_forward, forward_features, forward_logits, patch_embed,
                         patchify, predict, readout)

SMALL = dict(image_size=8, patch_size=4, dim=8, depth=2, heads=2, num_classes=3)


def small_model(seed=0, **kw):
    return VitModel(VitConfig(**{**SMALL, **kw}), seed=seed)


def test_config_validation():
    with pytest.raises(ConfigError):
        VitConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        VitConfig(dim=10, heads=4)
    with pytest.raises(ConfigError):
        VitConfig(head_mode="mean")
    assert VitConfig().num_patches == 64
    assert VitConfig(image_size=8, patch_size=4).num_patches == 4


def test_parameter_count_formula():
    c = VitConfig()
    D, H, L = c.dim, c.mlp_hidden, c.depth
    per_block = 4 * D + (D * 3 * D + 3 * D) + (D * D + D) + (D * H + H) + (H * D + D)
    expected = c.patch_dim * D + (c.num_patches + 1) * D + D + L * per_block + D * 4 + 4
    assert VitModel(c).parameter_count() == expected
    assert VitModel(c, seed=5).parameter_count() == expected


def test_patch_embed_zero_image_returns_position_rows():
    with precision(np.float64):
        m = small_model()
        m.patch_proj.data[:] = 0
        out = patch_embed(np.zeros((3, 8, 8)), m)
    np.testing.assert_array_equal(out.data, m.pos_embed.data[1:])
    assert out.shape == (4, 8)


def test_patch_embed_matches_flatten_dot_oracle():
    rng = np.random.default_rng(0)
    img = rng.random((3, 8, 8))
    with precision(np.float64):
        m = small_model()
        out = patch_embed(img, m).data
    W, pos = m.patch_proj.data, m.pos_embed.data
    k = 0
    for r in range(2):
        for c in range(2):
            flat = img[:, 4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1)  # channel-major flatten
            np.testing.assert_allclose(out[k], flat @ W + pos[1 + k], atol=1e-6)
            k += 1


def test_patch_embed_rejects_wrong_size():
    with pytest.raises(ConfigError):
        patch_embed(np.zeros((3, 16, 16)), small_model())


def test_patchify_roundtrip_grid_order():
    img = np.arange(2 * 3 * 8 * 8, dtype=float).reshape(2, 3, 8, 8)
    p = patchify(img, 4)
    assert p.shape == (2, 4, 48)
    np.testing.assert_array_equal(p[1, 3].reshape(3, 4, 4), img[1, :, 4:, 4:])


def test_block_zero_weights_is_identity():
    m = small_model()
    for _, p in m.blocks[0].named():
        p.data[:] = 0
    x = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
    np.testing.assert_array_equal(block_forward(x, m, 0).data, x.data)


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def test_two_token_block_matches_hand_unrolled_attention():
    with precision(np.float64):
        m = small_model(seed=3)
        blk = m.blocks[0]
        for _, p in blk.named():
            p.data = p.data + 0.1 * np.random.default_rng(4).normal(size=p.shape)
        x = np.random.default_rng(5).normal(size=(2, 8))
        got = block_forward(Tensor(x), m, 0).data

    D, heads, dh = 8, 2, 4
    h = _ln(x, blk.ln1_g.data, blk.ln1_b.data)
    qkv = h @ blk.qkv_w.data + blk.qkv_b.data
    q, k, v = qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]
    mixed = np.zeros((2, D))
    for a in range(heads):
        sl = slice(a * dh, (a + 1) * dh)
        for t in range(2):
            s0 = q[t, sl] @ k[0, sl] / np.sqrt(dh)
            s1 = q[t, sl] @ k[1, sl] / np.sqrt(dh)
            w0 = np.exp(s0) / (np.exp(s0) + np.exp(s1))
            mixed[t, sl] = w0 * v[0, sl] + (1 - w0) * v[1, sl]
    y = x + mixed @ blk.proj_w.data + blk.proj_b.data
    y = y + _gelu(_ln(y, blk.ln2_g.data, blk.ln2_b.data) @ blk.fc1_w.data + blk.fc1_b.data) @ blk.fc2_w.data \
        + blk.fc2_b.data
    np.testing.assert_allclose(got, y, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(0, 1000))
def test_block_permutation_equivariance(T, seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed=seed % 7)
    x = rng.normal(size=(T, 8))
    perm = rng.permutation(T)
    out = block_forward(Tensor(x), m, 1).data
    out_perm = block_forward(Tensor(x[perm]), m, 1).data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-5)
    assert out.shape == x.shape


def test_zero_head_gives_zero_logits():
    m = small_model(num_classes=2)
    m.reset_head(2, std=0)
    logits = forward_logits(np.random.default_rng(0).random((3, 8, 8)), m)
    np.testing.assert_array_equal(logits.data, [0.0, 0.0])


def test_gap_readout_is_patch_mean():
    m = small_model(head_mode="gap")
    assert m.cls_token is None and m.pos_embed.shape == (4, 8)
    imgs = np.random.default_rng(0).random((2, 3, 8, 8))
    xL, EL = forward_features(imgs, m)
    assert xL is None
    np.testing.assert_allclose(readout(m, xL, EL).data, EL.data.mean(axis=1), atol=1e-6)


def test_deep_prompt_logits_match_manual_concatenation():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        m = small_model(seed=1)
        ps = PromptSet.from_arrays("deep", [rng.normal(size=(1, 8)) for _ in range(2)])
        img = rng.random((3, 8, 8))
        got = forward_logits(img, m, ps).data

        E = patch_embed(img, m).data
        x = m.cls_token.data + m.pos_embed.data[0]
        for i in range(2):
            seq = np.concatenate([x[None], ps.tokens[i].data, E])
            assert seq.shape[0] == 4 + 1 + 1
            out = block_forward(Tensor(seq), m, i).data
            x, E = out[0], out[2:]
        expected = x @ m.head_w.data + m.head_b.data
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_prompt_width_mismatch_is_config_error():
    m = small_model()
    ps = PromptSet.from_arrays("deep", [np.zeros((1, 4))] * 2)
    with pytest.raises(ConfigError):
        forward_logits(np.zeros((3, 8, 8)), m, ps)


def test_batch_and_single_image_agree():
    m = small_model()
    imgs = np.random.default_rng(2).random((3, 3, 8, 8)).astype(np.float32)
    batch = forward_logits(imgs, m).data
    for b in range(3):
        np.testing.assert_allclose(forward_logits(imgs[b], m).data, batch[b], atol=1e-5)
    np.testing.assert_array_equal(predict(imgs, m), batch.argmax(-1))


def test_frozen_backbone_gets_no_gradient():
    m = small_model()
    m.freeze_backbone(True)
    from spt_lab.tensor import cross_entropy
    loss = cross_entropy(forward_logits(np.zeros((2, 3, 8, 8)), m), [0, 1])
    loss.backward()
    assert all(p.grad is None for p in m.backbone_parameters())
    assert m.head_w.grad is not None


def test_state_dict_roundtrip_and_digest():
    a, b = small_model(seed=0), small_model(seed=1)
    assert a.backbone_digest() != b.backbone_digest()
    b.load_state_dict(a.state_dict())
    assert a.backbone_digest() == b.backbone_digest()
    c = a.astype(np.float64)
    assert c.patch_proj.dtype == np.float64
    with pytest.raises(ConfigError):
        small_model(dim=16, heads=2).load_state_dict(a.state_dict())
