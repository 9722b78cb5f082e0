"""C3D-style 3D convolutional backbone with a binary head."""

from models.configs import C3DConfig
from models.errors import DimensionError
from services import layers
from services import tensor as T


def c3d_param_shapes(config: C3DConfig):
    shapes = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.conv_channels):
        shapes[f"conv{i}.weight"] = (c_out, c_in, *config.kernel)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    t, h, w = config.feature_extents()
    width = c_in * t * h * w
    for j, fc in enumerate(config.fc_widths):
        shapes.update(layers.linear_shapes(f"fc{j}", width, fc))
        width = fc
    shapes.update(layers.linear_shapes("head", width, config.num_classes))
    return shapes


def c3d_init(config: C3DConfig, seed: int):
    """He-uniform weights and zero biases."""
    return layers.initialize("c3d", config.to_dict(), c3d_param_shapes(config), seed, "he_uniform")


def c3d_forward(batch, params):
    """
    conv(3x3x3, pad 1) -> relu -> pool stages, flatten, fc stack, width-2 logits.

    batch: [N, 3, T, H, W] matching the config's input geometry.
    """
    config = C3DConfig.from_dict(params.config)
    expected = (config.in_channels, config.num_frames, *config.input_size)
    if batch.ndim != 5 or tuple(batch.shape[1:]) != expected:
        raise DimensionError(f"c3d: batch {list(batch.shape)} does not match [N, {', '.join(map(str, expected))}]")

    x = batch
    for i, window in enumerate(config.pool_schedule):
        x = T.relu(T.conv3d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=1, padding=1))
        if window is not None:
            if any(w > e for w, e in zip(window, x.shape[2:])):
                raise DimensionError(f"c3d: pooling {window} collapses extent {list(x.shape[2:])} to zero")
            x = T.max_pool3d(x, window)

    x = T.reshape(x, (x.shape[0], -1))
    for j in range(len(config.fc_widths)):
        x = T.relu(layers.dense(x, params, f"fc{j}"))
    return layers.dense(x, params, "head")
