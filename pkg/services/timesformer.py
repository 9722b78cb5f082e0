"""
Video transformer over frame-level patches with divided space-time attention.

Each block runs temporal attention (every spatial location attends across
frames), then spatial attention (every frame attends across locations), then an
MLP; all three are pre-norm residual. The clip representation is the mean over
all tokens, so there is no classification token.
"""
from typing import Dict, Optional

from models.configs import TsfConfig
from models.errors import DimensionError
from services import layers
from services import tensor as T


def tsf_param_shapes(config: TsfConfig):
    d = config.embed_dim
    patch_dim = config.in_channels * config.patch * config.patch
    shapes = layers.linear_shapes("patch_embed", patch_dim, d)
    shapes["pos_spatial"] = (config.num_patches, d)
    shapes["pos_temporal"] = (config.num_frames, d)
    for i in range(config.depth):
        prefix = f"blocks.{i}"
        for part in ("temporal", "spatial"):
            shapes.update(layers.norm_shapes(f"{prefix}.{part}_norm", d))
            shapes.update(layers.attention_shapes(f"{prefix}.{part}_attn", d))
        shapes.update(layers.norm_shapes(f"{prefix}.mlp_norm", d))
        shapes.update(layers.mlp_shapes(f"{prefix}.mlp", d, config.mlp_ratio))
    shapes.update(layers.norm_shapes("norm", d))
    shapes.update(layers.linear_shapes("head", d, config.num_classes))
    return shapes


def tsf_init(config: TsfConfig, seed: int):
    return layers.initialize("timesformer", config.to_dict(), tsf_param_shapes(config), seed, "normal")


def patchify(batch, patch, weight, bias=None, pos_spatial=None, pos_temporal=None):
    """
    Cut every frame of [N, C, T, H, W] into non-overlapping p x p patches and embed them.

    Patch vectors are laid out (channel, row, column), so a one-hot patch picks
    one row of ``weight`` [C*p*p, D]. Returns tokens [N, T, S, D] with spatial
    then temporal position embeddings added.
    """
    n, c, t, h, w = batch.shape
    if h % patch or w % patch:
        raise DimensionError(f"patchify: frame {h}x{w} is not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    x = T.reshape(batch, (n, c, t, hp, patch, wp, patch))
    x = T.permute(x, (0, 2, 3, 5, 1, 4, 6))
    x = T.reshape(x, (n, t, hp * wp, c * patch * patch))
    tokens = T.linear(x, weight, bias)
    d = tokens.shape[-1]
    if pos_spatial is not None:
        if pos_spatial.shape != (hp * wp, d):
            raise DimensionError(f"patchify: spatial positions {list(pos_spatial.shape)} != [{hp * wp}, {d}]")
        tokens = T.add(tokens, T.broadcast_to(pos_spatial, tokens.shape))
    if pos_temporal is not None:
        if pos_temporal.shape != (t, d):
            raise DimensionError(f"patchify: temporal positions {list(pos_temporal.shape)} != [{t}, {d}]")
        tokens = T.add(tokens, T.broadcast_to(T.reshape(pos_temporal, (t, 1, d)), tokens.shape))
    return tokens


def temporal_attention(tokens, params, block=0, probe: Optional[Dict] = None):
    """Self-attention across frames, independently at each spatial index; residual, pre-norm."""
    n, t, s, d = tokens.shape
    prefix = f"blocks.{block}"
    x = T.reshape(T.permute(tokens, (0, 2, 1, 3)), (n * s, t, d))
    h = layers.norm(x, params, f"{prefix}.temporal_norm")
    h = layers.multi_head_attention(h, params, f"{prefix}.temporal_attn", params.config["heads"], probe=probe)
    x = T.add(x, h)
    return T.permute(T.reshape(x, (n, s, t, d)), (0, 2, 1, 3))


def spatial_attention(tokens, params, block=0, probe: Optional[Dict] = None):
    """Self-attention across spatial locations, independently within each frame; residual, pre-norm."""
    n, t, s, d = tokens.shape
    prefix = f"blocks.{block}"
    x = T.reshape(tokens, (n * t, s, d))
    h = layers.norm(x, params, f"{prefix}.spatial_norm")
    h = layers.multi_head_attention(h, params, f"{prefix}.spatial_attn", params.config["heads"], probe=probe)
    return T.reshape(T.add(x, h), (n, t, s, d))


def mlp_block(tokens, params, block=0):
    prefix = f"blocks.{block}"
    return T.add(tokens, layers.mlp(layers.norm(tokens, params, f"{prefix}.mlp_norm"), params, f"{prefix}.mlp"))


def tsf_forward(batch, params, probe: Optional[Dict] = None):
    config = TsfConfig.from_dict(params.config)
    expected = (config.in_channels, config.num_frames, *config.input_size)
    if batch.ndim != 5 or tuple(batch.shape[1:]) != expected:
        raise DimensionError(
            f"timesformer: batch {list(batch.shape)} does not match [N, {', '.join(map(str, expected))}]")

    x = patchify(batch, config.patch, params["patch_embed.weight"], params["patch_embed.bias"],
                 params["pos_spatial"], params["pos_temporal"])
    for i in range(config.depth):
        x = temporal_attention(x, params, i, probe)
        x = spatial_attention(x, params, i, probe)
        x = mlp_block(x, params, i)
    x = layers.norm(x, params, "norm")
    return layers.dense(layers.mean_tokens(x), params, "head")
