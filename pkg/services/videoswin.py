"""
Hierarchical video transformer with 3D windowed and shifted-window attention.

Blocks alternate between regular windows and windows shifted by half a window;
shifted blocks roll the token grid, so token pairs that came from different
regions before the roll are masked with -inf logits. Token grids that do not
divide into whole windows are zero-padded and the pad tokens are masked out as
keys and cropped before the residual, so pooling never sees them.
"""
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from models.configs import SwinConfig
from models.errors import DimensionError
from services import layers
from services import tensor as T
from services.tensor import Tensor


def _check_window(extents, window):
    if any(e % w for e, w in zip(extents, window)):
        raise DimensionError(f"window {list(window)} does not divide token grid {list(extents)}")


def window_partition_3d(x, window):
    """
    Split x [B, T, H, W, D] (or unbatched [T, H, W, D]) into windows [B*nW, wt*wh*ww, D].

    Windows are scanned row-major over (t, h, w), batch-major across samples.
    """
    if x.ndim == 4:
        x = T.reshape(x, (1, *x.shape))
    b, t, h, w, d = x.shape
    wt, wh, ww = window
    _check_window((t, h, w), window)
    x = T.reshape(x, (b, t // wt, wt, h // wh, wh, w // ww, ww, d))
    x = T.permute(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return T.reshape(x, (-1, wt * wh * ww, d))


def window_reverse_3d(windows, window, extents, batched=True):
    """Exact inverse of ``window_partition_3d``; ``extents`` is the (T, H, W) token grid."""
    t, h, w = extents
    wt, wh, ww = window
    _check_window(extents, window)
    d = windows.shape[-1]
    x = T.reshape(windows, (-1, t // wt, h // wh, w // ww, wt, wh, ww, d))
    x = T.permute(x, (0, 1, 4, 2, 5, 3, 6, 7))
    if not batched:
        return T.reshape(x, (t, h, w, d))
    return T.reshape(x, (-1, t, h, w, d))


def cyclic_shift_3d(x, offsets):
    """Torus roll of the (T, H, W) axes of [B, T, H, W, D] or [T, H, W, D] by ``offsets``."""
    axes = (1, 2, 3) if x.ndim == 5 else (0, 1, 2)
    if not any(offsets):
        return x
    return T.roll(x, offsets, axes)


def get_window_size(extents, window, shift):
    """Shrink the window to the grid where the grid is smaller, and drop the shift on that axis."""
    window = tuple(e if e <= w else w for e, w in zip(extents, window))
    shift = tuple(0 if e <= w else s for e, w, s in zip(extents, window, shift))
    return window, shift


def relative_position_index(window, table_window=None):
    """
    Map each (query, key) pair of a window to its row in the bias table.

    The table is sized by ``table_window``; a smaller ``window`` indexes into it
    with the same offset arithmetic. Returns an int array [L, L].
    """
    table_window = tuple(table_window or window)
    coords = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    radix = [2 * w - 1 for w in table_window]
    index = ((rel[0] + table_window[0] - 1) * radix[1] * radix[2]
             + (rel[1] + table_window[1] - 1) * radix[2]
             + (rel[2] + table_window[2] - 1))
    return index


def table_size(table_window):
    return int(np.prod([2 * w - 1 for w in table_window]))


def _partition_grid(grid, window):
    """Numpy twin of window_partition_3d for a [T, H, W] label grid -> [nW, L]."""
    t, h, w = grid.shape
    wt, wh, ww = window
    grid = grid.reshape(t // wt, wt, h // wh, wh, w // ww, ww).transpose(0, 2, 4, 1, 3, 5)
    return grid.reshape(-1, wt * wh * ww)


def attention_mask(extents, padded, window, shift):
    """
    Forbidden (query, key) pairs per window, [nW, L, L] bool, in the shifted frame.

    A pair is forbidden when its tokens came from different regions before the
    roll, or when the key is padding and the query is not.
    """
    regions = np.zeros(padded, dtype=np.int64)
    if any(shift):
        count = 0
        slices = [((0, -w), (-w, -s), (-s, None)) if s else ((0, None),) for w, s in zip(window, shift)]
        for ts in slices[0]:
            for hs in slices[1]:
                for ws in slices[2]:
                    regions[ts[0]:ts[1], hs[0]:hs[1], ws[0]:ws[1]] = count
                    count += 1
    is_pad = np.ones(padded, dtype=bool)
    is_pad[:extents[0], :extents[1], :extents[2]] = False
    is_pad = np.roll(is_pad, tuple(-s for s in shift), axis=(0, 1, 2))

    region_windows = _partition_grid(regions, window)
    pad_windows = _partition_grid(is_pad, window)
    forbidden = region_windows[:, :, None] != region_windows[:, None, :]
    forbidden |= pad_windows[:, None, :] & ~pad_windows[:, :, None]
    return forbidden


def window_attention(x, params, prefix, heads, window, shift, table_window, probe: Optional[Dict] = None):
    """(Shifted) window multi-head attention over x [B, T, H, W, D], returning the same shape."""
    b, t, h, w, d = x.shape
    extents = (t, h, w)
    pads = [(0, (win - e % win) % win) for e, win in zip(extents, window)]
    xp = T.pad(x, [(0, 0), *pads, (0, 0)])
    padded = xp.shape[1:4]
    xp = cyclic_shift_3d(xp, tuple(-s for s in shift))

    windows = window_partition_3d(xp, window)
    n_windows, length = windows.shape[0] // b, windows.shape[1]

    index = relative_position_index(window, table_window)
    table = params[f"{prefix}.rel_pos_bias"]
    rel = T.take_rows(table, index.reshape(-1))
    rel = T.reshape(T.permute(T.reshape(rel, (length, length, heads)), (2, 0, 1)), (1, heads, length, length))
    bias = T.broadcast_to(rel, (b * n_windows, heads, length, length))

    forbidden = attention_mask(extents, padded, window, shift)
    if forbidden.any():
        logits = np.where(forbidden, -np.inf, 0.0)
        logits = np.broadcast_to(np.tile(logits, (b, 1, 1))[:, None], bias.shape)
        bias = T.add(bias, Tensor(logits, dtype=x.dtype))
    if probe is not None:
        probe[f"{prefix}.forbidden"] = np.tile(forbidden, (b, 1, 1))

    out = layers.multi_head_attention(windows, params, prefix, heads, bias=bias, probe=probe)
    out = window_reverse_3d(out, window, padded)
    out = cyclic_shift_3d(out, shift)
    for axis, (extent, (_, after)) in enumerate(zip(extents, pads), start=1):
        if after:
            out = T.slice_axis(out, axis, 0, extent)
    return out


def shifted_window_msa(x, params, shifted, stage=0, block=0, probe: Optional[Dict] = None):
    """
    Window attention of one block. ``shifted`` rolls the grid by floor(window / 2) first.

    x is [B, T', H', W', D] or unbatched [T', H', W', D].
    """
    config = SwinConfig.from_dict(params.config)
    unbatched = x.ndim == 4
    if unbatched:
        x = T.reshape(x, (1, *x.shape))
    if x.ndim != 5:
        raise DimensionError(f"shifted_window_msa: expected [B, T, H, W, D], got {list(x.shape)}")
    width = config.embed_dim * 2 ** stage
    if x.shape[-1] != width:
        raise DimensionError(f"shifted_window_msa: stage {stage} expects width {width}, got {x.shape[-1]}")
    window, shift = get_window_size(x.shape[1:4], config.window, config.shift if shifted else (0, 0, 0))
    out = window_attention(x, params, f"stages.{stage}.blocks.{block}.attn", config.heads[stage],
                           window, shift, config.window, probe)
    if unbatched:
        out = T.reshape(out, out.shape[1:])
    return out


def patch_merging(x, params, stage=0):
    """Concatenate 2x2 spatial neighbours, layer-norm, project 4D -> 2D; time is untouched."""
    unbatched = x.ndim == 4
    if unbatched:
        x = T.reshape(x, (1, *x.shape))
    b, t, h, w, d = x.shape
    x = T.pad(x, [(0, 0), (0, 0), (0, h % 2), (0, w % 2), (0, 0)])
    h, w = x.shape[2], x.shape[3]
    x = T.reshape(x, (b, t, h // 2, 2, w // 2, 2, d))
    x = T.permute(x, (0, 1, 2, 4, 5, 3, 6))
    x = T.reshape(x, (b, t, h // 2, w // 2, 4 * d))
    prefix = f"stages.{stage}.merge"
    x = layers.dense(layers.norm(x, params, f"{prefix}.norm"), params, f"{prefix}.reduction")
    if unbatched:
        x = T.reshape(x, x.shape[1:])
    return x


def patch_embed(batch, params, patch):
    """Strided linear embedding of (pt, ph, pw) blocks, then layer-norm: [N, T', H', W', D]."""
    n, c, t, h, w = batch.shape
    pt, ph, pw = patch
    if t % pt or h % ph or w % pw:
        raise DimensionError(f"videoswin: input {[t, h, w]} is not divisible by patch {list(patch)}")
    x = T.reshape(batch, (n, c, t // pt, pt, h // ph, ph, w // pw, pw))
    x = T.permute(x, (0, 2, 4, 6, 1, 3, 5, 7))
    x = T.reshape(x, (n, t // pt, h // ph, w // pw, c * pt * ph * pw))
    x = layers.dense(x, params, "patch_embed")
    return layers.norm(x, params, "patch_embed.norm")


def swin_block(x, params, stage, block, probe: Optional[Dict] = None):
    prefix = f"stages.{stage}.blocks.{block}"
    h = shifted_window_msa(layers.norm(x, params, f"{prefix}.norm1"), params, block % 2 == 1, stage, block, probe)
    x = T.add(x, h)
    return T.add(x, layers.mlp(layers.norm(x, params, f"{prefix}.norm2"), params, f"{prefix}.mlp"))


def swin_param_shapes(config: SwinConfig):
    d = config.embed_dim
    shapes = layers.linear_shapes("patch_embed", config.in_channels * int(np.prod(config.patch_embed)), d)
    shapes.update(layers.norm_shapes("patch_embed.norm", d))
    rows = table_size(config.window)
    for s, (depth, heads) in enumerate(zip(config.depths, config.heads)):
        dim = d * 2 ** s
        for blk in range(depth):
            prefix = f"stages.{s}.blocks.{blk}"
            shapes.update(layers.norm_shapes(f"{prefix}.norm1", dim))
            shapes.update(layers.attention_shapes(f"{prefix}.attn", dim))
            shapes[f"{prefix}.attn.rel_pos_bias"] = (rows, heads)
            shapes.update(layers.norm_shapes(f"{prefix}.norm2", dim))
            shapes.update(layers.mlp_shapes(f"{prefix}.mlp", dim, config.mlp_ratio))
        if s < config.num_stages - 1:
            shapes.update(layers.norm_shapes(f"stages.{s}.merge.norm", 4 * dim))
            shapes.update(layers.linear_shapes(f"stages.{s}.merge.reduction", 4 * dim, 2 * dim, bias=False))
    final = d * 2 ** (config.num_stages - 1)
    shapes.update(layers.norm_shapes("norm", final))
    shapes.update(layers.linear_shapes("head", final, config.num_classes))
    return shapes


def swin_init(config: SwinConfig, seed: int):
    return layers.initialize("videoswin", config.to_dict(), swin_param_shapes(config), seed, "normal")


def swin_forward(batch, params, probe: Optional[Dict] = None):
    config = SwinConfig.from_dict(params.config)
    expected = (config.in_channels, config.num_frames, *config.input_size)
    if batch.ndim != 5 or tuple(batch.shape[1:]) != expected:
        raise DimensionError(
            f"videoswin: batch {list(batch.shape)} does not match [N, {', '.join(map(str, expected))}]")

    x = patch_embed(batch, params, config.patch_embed)
    for s, depth in enumerate(config.depths):
        for blk in range(depth):
            x = swin_block(x, params, s, blk, probe)
        if s < config.num_stages - 1:
            x = patch_merging(x, params, s)
    x = layers.norm(x, params, "norm")
    return layers.dense(layers.mean_tokens(x), params, "head")
