import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import erf

from models.configs import TsfConfig
from models.errors import DimensionError, ValidationError
from services.tensor import Tensor
from services.timesformer import (patchify, spatial_attention, temporal_attention, tsf_forward, tsf_init,
                                  tsf_param_shapes)
from services.trainer import cross_entropy_loss
from tests.gradcheck import TOLERANCE, params_gradient_error


def tokens_for(config, seed=0, n=2):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(n, config.num_frames, config.num_patches, config.embed_dim)))


def reference_attention_block(x, params, prefix, heads):
    """numpy pre-norm residual self-attention over the middle axis of x [B, L, D]."""
    b, length, d = x.shape
    hd = d // heads
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    norm = prefix.replace("_attn", "_norm")
    h = (x - mu) / np.sqrt(var + 1e-5) * params[f"{norm}.gamma"].data + params[f"{norm}.beta"].data
    qkv = h @ params[f"{prefix}.qkv.weight"].data + params[f"{prefix}.qkv.bias"].data
    qkv = qkv.reshape(b, length, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    w = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    out = (w @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return x + out @ params[f"{prefix}.proj.weight"].data + params[f"{prefix}.proj.bias"].data


def randomized(params, seed):
    """Replace every tensor with N(0, 0.3) values so attention is far from uniform."""
    rng = np.random.default_rng(seed)
    for name, t in list(params.items()):
        params[name] = Tensor(rng.normal(0.0, 0.3, size=t.shape))
    return params


def test_patchify_full_geometry_gives_196_patches():
    config = TsfConfig.full_scale()
    batch = Tensor(np.zeros((1, 3, 2, 224, 224)))
    weight = Tensor(np.zeros((3 * 16 * 16, 8)))
    assert patchify(batch, config.patch, weight).shape == (1, 2, 196, 8)


def test_toy_tokens_shape():
    config = TsfConfig()
    params = tsf_init(config, 0)
    batch = Tensor(np.zeros((2, 3, 8, 32, 32)))
    tokens = patchify(batch, config.patch, params["patch_embed.weight"])
    assert tokens.shape == (2, 8, 16, config.embed_dim)


@pytest.mark.parametrize("channel,row,col", [(0, 0, 0), (1, 2, 5), (2, 7, 7)])
def test_one_hot_patch_selects_a_weight_row(channel, row, col, rng):
    patch, d = 8, 5
    weight = rng.normal(size=(3 * patch * patch, d))
    batch = np.zeros((1, 3, 2, 16, 16))
    # second patch of the first row, second frame
    batch[0, channel, 1, row, patch + col] = 1.0
    tokens = patchify(Tensor(batch), patch, Tensor(weight)).data
    expected_row = channel * patch * patch + row * patch + col
    assert_allclose(tokens[0, 1, 1], weight[expected_row].astype(np.float32))
    assert_allclose(np.delete(tokens[0, 1], 1, axis=0), 0.0)
    assert_allclose(tokens[0, 0], 0.0)


def test_patchify_rejects_indivisible_frames():
    with pytest.raises(DimensionError):
        patchify(Tensor(np.zeros((1, 3, 1, 12, 16))), 8, Tensor(np.zeros((192, 4))))
    with pytest.raises(ValidationError):
        TsfConfig(input_size=(36, 32))


def test_single_frame_temporal_weights_are_one():
    config = TsfConfig(num_frames=1)
    params = tsf_init(config, 0)
    probe = {}
    temporal_attention(tokens_for(config), params, 0, probe)
    weights = probe["blocks.0.temporal_attn"]
    assert weights.shape[-2:] == (1, 1)
    assert_allclose(weights, 1.0)


def test_single_patch_spatial_weights_are_one():
    config = TsfConfig(patch=8, input_size=(8, 8))
    params = tsf_init(config, 0)
    probe = {}
    spatial_attention(tokens_for(config), params, 0, probe)
    assert_allclose(probe["blocks.0.spatial_attn"], 1.0)


def test_attention_rows_sum_to_one():
    config = TsfConfig()
    params = randomized(tsf_init(config, 0), 1)
    probe = {}
    tsf_forward(Tensor(np.random.default_rng(2).normal(size=(2, 3, 8, 32, 32))), params, probe)
    for i in range(config.depth):
        for part in ("temporal", "spatial"):
            weights = probe[f"blocks.{i}.{part}_attn"]
            assert (weights >= 0).all()
            assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-5)


def test_temporal_attention_stays_at_its_spatial_index(float64):
    config = TsfConfig()
    params = randomized(tsf_init(config, 0), 3)
    tokens = tokens_for(config, seed=4)
    bumped = tokens.numpy()
    bumped[0, 2, 5] += np.random.default_rng(13).normal(size=config.embed_dim)
    delta = np.abs(temporal_attention(Tensor(bumped), params).data - temporal_attention(tokens, params).data)
    changed = delta.max(axis=-1) > 1e-12
    assert changed[0, :, 5].all()
    assert not np.delete(changed[0], 5, axis=1).any()
    assert not changed[1].any()


def test_spatial_attention_stays_in_its_frame(float64):
    config = TsfConfig()
    params = randomized(tsf_init(config, 0), 3)
    tokens = tokens_for(config, seed=5)
    bumped = tokens.numpy()
    bumped[1, 3, 7] += np.random.default_rng(14).normal(size=config.embed_dim)
    delta = np.abs(spatial_attention(Tensor(bumped), params).data - spatial_attention(tokens, params).data)
    changed = delta.max(axis=-1) > 1e-12
    assert changed[1, 3].all()
    assert not np.delete(changed[1], 3, axis=0).any()
    assert not changed[0].any()


def test_spatial_attention_is_permutation_equivariant(float64):
    config = TsfConfig()
    params = randomized(tsf_init(config, 0), 6)
    tokens = tokens_for(config, seed=7)
    perm = np.random.default_rng(8).permutation(config.num_patches)
    permuted = Tensor(tokens.data[:, :, perm])
    assert_allclose(spatial_attention(permuted, params).data,
                    spatial_attention(tokens, params).data[:, :, perm], atol=1e-10)


def test_temporal_block_matches_numpy_reference(float64):
    config = TsfConfig(num_frames=3)
    params = randomized(tsf_init(config, 0), 9)
    tokens = tokens_for(config, seed=10, n=1)
    n, t, s, d = tokens.shape
    x = tokens.data.transpose(0, 2, 1, 3).reshape(n * s, t, d)
    expected = reference_attention_block(x, params, "blocks.0.temporal_attn", config.heads)
    expected = expected.reshape(n, s, t, d).transpose(0, 2, 1, 3)
    assert_allclose(temporal_attention(tokens, params).data, expected, rtol=1e-9, atol=1e-12)


def test_spatial_block_matches_numpy_reference(float64):
    config = TsfConfig()
    params = randomized(tsf_init(config, 0), 11)
    tokens = tokens_for(config, seed=12, n=1)
    n, t, s, d = tokens.shape
    x = tokens.data.reshape(n * t, s, d)
    expected = reference_attention_block(x, params, "blocks.1.spatial_attn", config.heads).reshape(n, t, s, d)
    assert_allclose(spatial_attention(tokens, params, block=1).data, expected, rtol=1e-9, atol=1e-12)


def layer_norm_ref(x, params, prefix):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * params[f"{prefix}.gamma"].data + params[f"{prefix}.beta"].data


def dense_ref(x, params, prefix):
    return x @ params[f"{prefix}.weight"].data + params[f"{prefix}.bias"].data


def test_single_frame_block_is_spatial_block_after_value_passthrough(float64):
    config = TsfConfig(num_frames=1)
    params = randomized(tsf_init(config, 0), 17)
    tokens = tokens_for(config, seed=18)
    n, t, s, d = tokens.shape
    weights = {}
    after_temporal = temporal_attention(tokens, params, probe=weights)
    assert_allclose(weights["blocks.0.temporal_attn"], 1.0)

    x = tokens.data
    h = layer_norm_ref(x, params, "blocks.0.temporal_norm")
    value = (h @ params["blocks.0.temporal_attn.qkv.weight"].data[:, 2 * d:]
             + params["blocks.0.temporal_attn.qkv.bias"].data[2 * d:])
    passthrough = x + dense_ref(value, params, "blocks.0.temporal_attn.proj")
    assert_allclose(after_temporal.data, passthrough, rtol=1e-9, atol=1e-12)

    expected = reference_attention_block(passthrough.reshape(n * t, s, d), params, "blocks.0.spatial_attn",
                                         config.heads)
    assert_allclose(spatial_attention(after_temporal, params).data, expected.reshape(n, t, s, d),
                    rtol=1e-9, atol=1e-12)


def test_micro_model_matches_composed_oracle(float64):
    config = TsfConfig(patch=4, embed_dim=4, depth=1, heads=1, mlp_ratio=2, num_frames=2, input_size=(8, 8))
    params = randomized(tsf_init(config, 0), 15)
    batch = np.random.default_rng(16).normal(size=(2, 3, 2, 8, 8))

    tokens = np.zeros((2, 2, 4, 4))
    for n in range(2):
        for f in range(2):
            for i in range(2):
                for j in range(2):
                    patch = batch[n, :, f, 4 * i:4 * i + 4, 4 * j:4 * j + 4].reshape(-1)
                    tokens[n, f, 2 * i + j] = dense_ref(patch, params, "patch_embed")
    tokens += params["pos_spatial"].data[None, None] + params["pos_temporal"].data[None, :, None]

    x = reference_attention_block(tokens.transpose(0, 2, 1, 3).reshape(8, 2, 4), params,
                                  "blocks.0.temporal_attn", 1)
    x = x.reshape(2, 4, 2, 4).transpose(0, 2, 1, 3).reshape(4, 4, 4)
    x = reference_attention_block(x, params, "blocks.0.spatial_attn", 1)
    h = dense_ref(layer_norm_ref(x, params, "blocks.0.mlp_norm"), params, "blocks.0.mlp.fc1")
    x = x + dense_ref(0.5 * h * (1.0 + erf(h / np.sqrt(2.0))), params, "blocks.0.mlp.fc2")
    pooled = layer_norm_ref(x, params, "norm").reshape(2, 8, 4).mean(axis=1)
    expected = dense_ref(pooled, params, "head")
    assert_allclose(tsf_forward(Tensor(batch), params).data, expected, rtol=1e-9, atol=1e-12)


def test_forward_shape_and_zero_head():
    config = TsfConfig()
    params = tsf_init(config, 0)
    batch = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 32, 32)))
    assert tsf_forward(batch, params).shape == (2, 2)
    params["head.weight"] = Tensor(np.zeros((config.embed_dim, 2)))
    params["head.bias"] = Tensor(np.zeros(2))
    assert_allclose(tsf_forward(batch, params).data, 0.0)


def test_no_classification_token_in_registry():
    shapes = tsf_param_shapes(TsfConfig())
    assert shapes["pos_spatial"] == (16, 32)
    assert shapes["pos_temporal"] == (8, 32)
    assert not any("cls" in name for name in shapes)


def test_batch_geometry_mismatch():
    params = tsf_init(TsfConfig(), 0)
    with pytest.raises(DimensionError):
        tsf_forward(Tensor(np.zeros((1, 3, 4, 32, 32))), params)


@pytest.mark.parametrize("seed", range(20))
def test_parameter_gradients_match_finite_differences(seed, float64):
    config = TsfConfig(patch=4, embed_dim=8, depth=1, heads=2, mlp_ratio=2, num_frames=2, input_size=(8, 8))
    params = randomized(tsf_init(config, seed), seed)
    batch = Tensor(np.random.default_rng(50 + seed).normal(size=(2, 3, 2, 8, 8)))

    def loss(p):
        return cross_entropy_loss(tsf_forward(batch, p), [1, 0])

    assert params_gradient_error(loss, params, seed=seed) < TOLERANCE
