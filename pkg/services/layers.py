"""Building blocks shared by the backbones: parameter registries, initializers, attention and MLP."""
from typing import Dict, Optional, Tuple

import numpy as np

from models.errors import DimensionError
from models.params import ModelParams
from services import tensor as T
from services.tensor import Tensor, get_default_dtype


def norm_shapes(prefix, dim) -> Dict[str, Tuple[int, ...]]:
    return {f"{prefix}.gamma": (dim,), f"{prefix}.beta": (dim,)}


def linear_shapes(prefix, n_in, n_out, bias=True) -> Dict[str, Tuple[int, ...]]:
    shapes = {f"{prefix}.weight": (n_in, n_out)}
    if bias:
        shapes[f"{prefix}.bias"] = (n_out,)
    return shapes


def attention_shapes(prefix, dim) -> Dict[str, Tuple[int, ...]]:
    shapes = linear_shapes(f"{prefix}.qkv", dim, 3 * dim)
    shapes.update(linear_shapes(f"{prefix}.proj", dim, dim))
    return shapes


def mlp_shapes(prefix, dim, ratio) -> Dict[str, Tuple[int, ...]]:
    shapes = linear_shapes(f"{prefix}.fc1", dim, dim * ratio)
    shapes.update(linear_shapes(f"{prefix}.fc2", dim * ratio, dim))
    return shapes


def fan_in(name, shape):
    if len(shape) == 5:  # conv weight [O, C, kt, kh, kw]
        return int(np.prod(shape[1:]))
    return int(shape[0])


def initialize(backbone, config: Dict, shapes: Dict[str, Tuple[int, ...]], seed: int, scheme: str) -> ModelParams:
    """
    Draw parameters in sorted-name order from one seeded generator.

    ``scheme`` is ``he_uniform`` (conv nets) or ``normal`` (transformers, std 0.02
    truncated at two std). Biases and betas start at zero, gammas at one,
    relative-position tables at zero.
    """
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    tensors = {}
    for name in sorted(shapes):
        shape = shapes[name]
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta") or name.endswith("rel_pos_bias"):
            values = np.zeros(shape)
        elif leaf == "gamma":
            values = np.ones(shape)
        elif scheme == "he_uniform":
            bound = np.sqrt(6.0 / fan_in(name, shape))
            values = rng.uniform(-bound, bound, size=shape)
        else:
            values = np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04)
        tensors[name] = Tensor(values, dtype=dtype)
    return ModelParams(backbone, config, tensors)


def norm(x, params, prefix, eps=1e-5):
    return T.layer_norm(x, x.shape[-1], params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps)


def dense(x, params, prefix):
    bias_name = f"{prefix}.bias"
    return T.linear(x, params[f"{prefix}.weight"], params[bias_name] if bias_name in params else None)


def mlp(x, params, prefix):
    return dense(T.gelu(dense(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def multi_head_attention(x, params, prefix, heads, bias: Optional[Tensor] = None, probe: Optional[Dict] = None):
    """
    Self-attention over the middle axis of x [B, L, D].

    ``bias`` ([B, heads, L, L]) is added to the logits before softmax. When a
    ``probe`` dict is given the attention weights are stored under ``prefix``.
    """
    batch, length, dim = x.shape
    if dim % heads:
        raise DimensionError(f"{prefix}: width {dim} not divisible by {heads} heads")
    head_dim = dim // heads
    qkv = T.reshape(dense(x, params, f"{prefix}.qkv"), (batch, length, 3, heads, head_dim))
    qkv = T.permute(qkv, (2, 0, 3, 1, 4))
    q, k, v = (T.reshape(T.slice_axis(qkv, 0, i, i + 1), (batch, heads, length, head_dim)) for i in range(3))
    scores = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), head_dim ** -0.5)
    if bias is not None:
        scores = T.add(scores, bias)
    weights = T.softmax(scores, axis=-1)
    if probe is not None:
        probe[prefix] = weights.numpy()
    out = T.reshape(T.permute(T.matmul(weights, v), (0, 2, 1, 3)), (batch, length, dim))
    return dense(out, params, f"{prefix}.proj")


def mean_tokens(x):
    """Average x [N, ..., D] over every axis between batch and width."""
    flat = T.reshape(x, (x.shape[0], -1, x.shape[-1]))
    return T.mean(flat, axis=1)
