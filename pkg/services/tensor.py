"""
Dense tensor engine with reverse-mode gradients.

Tensors are immutable numpy-backed values. Operations executed inside a
``GradTape`` context are recorded; ``backward(loss)`` replays their adjoints in
reverse order. Outside a tape every operation runs in inference mode.
"""
import contextlib
import logging
import math
import weakref
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from models.errors import DimensionError, GradientError, ValidationError

logger = logging.getLogger(__name__)

_dtype_stack = [np.dtype(np.float32)]

# every live requires_grad tensor; backward gives the unreached leaves zero gradients
_grad_tensors = weakref.WeakSet()


def get_default_dtype():
    return _dtype_stack[-1]


@contextlib.contextmanager
def default_dtype(dtype):
    """Create new tensors as ``dtype`` (float32 for training, float64 for oracle tests)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValidationError(f"Unsupported tensor dtype {dtype}")
    _dtype_stack.append(dtype)
    try:
        yield dtype
    finally:
        _dtype_stack.pop()


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype())
        self._init(arr, requires_grad)

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        obj = cls.__new__(cls)
        obj._init(np.ascontiguousarray(arr), requires_grad)
        return obj

    def _init(self, arr, requires_grad):
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"Tensor extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        if self.requires_grad:
            _grad_tensors.add(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return np.array(self.data)

    def item(self):
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype, requires_grad=None):
        if requires_grad is None:
            requires_grad = self.requires_grad
        return Tensor(self.data, requires_grad=requires_grad, dtype=dtype or self.dtype)

    def detach(self):
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class _Record:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of executed operations, replayed in reverse by ``backward``."""

    _active: List["GradTape"] = []

    def __init__(self):
        self._records: List[_Record] = []
        self._consumed = False

    def __enter__(self):
        GradTape._active.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        GradTape._active.remove(self)
        return False

    @classmethod
    def current(cls):
        return cls._active[-1] if cls._active else None

    def __len__(self):
        return len(self._records)

    def record(self, out, parents, backward_fn):
        out._tape = self
        self._records.append(_Record(out, parents, backward_fn))

    def reset(self):
        self._records = []
        self._consumed = False

    def backward(self, loss):
        if self._consumed:
            raise GradientError("backward already ran on this tape; call reset() before recording again")
        if loss.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if loss._tape is not self:
            raise GradientError("loss was not produced by operations recorded on this tape")
        self._consumed = True

        adjoints = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for rec in self._records:
            for parent in rec.parents:
                if parent.requires_grad and parent._tape is None:
                    leaves[id(parent)] = parent

        for rec in reversed(self._records):
            grad_out = adjoints.pop(id(rec.out), None)
            if grad_out is None:
                continue
            parent_grads = rec.backward_fn(grad_out)
            for parent, grad in zip(rec.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + grad
                else:
                    adjoints[key] = grad

        for key, leaf in leaves.items():
            grad = adjoints.get(key)
            leaf.grad = np.array(grad, dtype=leaf.dtype) if grad is not None else np.zeros_like(leaf.data)
        for tensor in list(_grad_tensors):
            if tensor._tape is None and tensor.requires_grad and tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)


def backward(loss):
    """Populate ``grad`` of every requires_grad leaf; leaves that ``loss`` does not depend on get zeros."""
    if loss._tape is None:
        raise GradientError("loss was not produced by recorded operations (run inside a GradTape)")
    loss._tape.backward(loss)


def _result(data, parents: Sequence[Tensor], backward_fn: Callable):
    tape = GradTape.current()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(out, tuple(parents), backward_fn)
    return out


def _check_axis(axis, ndim, op):
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ: {list(a.shape)} vs {list(b.shape)}")


def _swap_last(arr):
    return np.swapaxes(arr, -1, -2)


# ---------------------------------------------------------------------------
# Elementwise and affine primitives

def add(a, b):
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, factor):
    factor = x.dtype.type(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def add_bias(x, bias):
    """Add a bias vector along the last axis."""
    if bias.shape != (x.shape[-1],):
        raise DimensionError(f"add_bias: bias {list(bias.shape)} does not match last extent of {list(x.shape)}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def relu(x):
    mask = x.data > 0
    # maximum keeps NaN so a diverged value reaches the loss
    return _result(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x):
    """Exact erf form: 0.5 x (1 + erf(x / sqrt 2))."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    out = (x.data * cdf).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * (cdf + x.data * pdf),))


def log(x):
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def linear(x, weight, bias=None):
    """y = x @ W + b with W laid out [in, out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {list(x.shape)} does not match weight {list(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {list(bias.shape)} does not match weight {list(weight.shape)}")
    n_in, n_out = weight.shape
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        flat_g = g.reshape(-1, n_out)
        grad_x = g @ weight.data.T
        grad_w = x.data.reshape(-1, n_in).T @ flat_g
        grad_b = flat_g.sum(axis=0) if bias is not None else None
        return (grad_x, grad_w, grad_b)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward_fn)


def matmul(a, b):
    """c[..., i, j] = sum_p a[..., i, p] b[..., p, j]; leading extents must agree."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ _swap_last(b.data), _swap_last(a.data) @ g))


# ---------------------------------------------------------------------------
# Reductions and normalizations

def sum(x, axis=None, keepdims=False):
    if axis is None:
        return _result(np.sum(x.data).reshape(1), (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))
    axis = _check_axis(axis, x.ndim, "sum")
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else x.shape[_check_axis(axis, x.ndim, "mean")]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, axis=-1):
    axis = _check_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward_fn)


def log_softmax(x, axis=-1):
    axis = _check_axis(axis, x.ndim, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward_fn)


def layer_norm(x, normalized_extent, gamma=None, beta=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply gamma and beta."""
    if x.shape[-1] != normalized_extent:
        raise DimensionError(f"layer_norm: last extent of {list(x.shape)} is not {normalized_extent}")
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (normalized_extent,):
            raise DimensionError(f"layer_norm: {name} {list(p.shape)} does not match {normalized_extent}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward_fn(g):
        grad_gamma = (g * xhat).sum(axis=lead) if gamma is not None else None
        grad_beta = g.sum(axis=lead) if beta is not None else None
        gxhat = g * gamma.data if gamma is not None else g
        grad_x = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [grad_x]
        if gamma is not None:
            grads.append(grad_gamma)
        if beta is not None:
            grads.append(grad_beta)
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return _result(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# Structural operations

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {list(x.shape)} as {list(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x, shape):
    """Explicit broadcast; the gradient sums back over the broadcast axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {list(x.shape)} to {list(shape)}") from None
    extra = len(shape) - x.ndim

    def backward_fn(g):
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, extent in enumerate(x.shape) if extent == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(out, (x,), backward_fn)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    axis = _check_axis(axis, tensors[0].ndim, "concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_axis(x, axis, start, stop, step=1):
    axis = _check_axis(axis, x.ndim, "slice_axis")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop, step)
    index = tuple(index)
    out = x.data[index]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _result(out, (x,), backward_fn)


def pad(x, widths):
    """Zero-pad; ``widths`` holds one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise DimensionError(f"pad: {len(widths)} width pairs for a {x.ndim}-d tensor")
    if not any(before or after for before, after in widths):
        return x
    out = np.pad(x.data, widths)
    index = tuple(slice(before, before + extent) for (before, _), extent in zip(widths, x.shape))
    return _result(out, (x,), lambda g: (g[index],))


def roll(x, shifts, axes):
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _result(np.roll(x.data, shifts, axis=axes), (x,), lambda g: (np.roll(g, back, axis=axes),))


def take_rows(table, index):
    """Gather rows of ``table`` by an integer index array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError(f"take_rows: index outside table of {table.shape[0]} rows")

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (grad,)

    return _result(table.data[index], (table,), backward_fn)


# ---------------------------------------------------------------------------
# Convolution and pooling

def _triple(value):
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ValidationError(f"Expected three extents, got {value}")
    return value


def conv_output_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation of [N, C, T, H, W] with [O, C, kt, kh, kw] and zero padding."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv3d: input {list(x.shape)} does not match weight {list(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv3d: bias {list(bias.shape)} does not match weight {list(weight.shape)}")
    kernel = weight.shape[2:]
    for extent, k, p in zip(x.shape[2:], kernel, padding):
        if extent + 2 * p < k:
            raise DimensionError(f"conv3d: kernel {list(kernel)} larger than padded input {list(x.shape)} (padding {padding})")

    pt, ph, pw = padding
    st, sh, sw = stride
    padded = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    out_t, out_h, out_w = windows.shape[2:5]
    out = np.tensordot(windows, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4])).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]

    def backward_fn(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, T', H', W', C, kt, kh, kw
        grad_padded = np.zeros_like(padded)
        for i in range(kernel[0]):
            for j in range(kernel[1]):
                for k in range(kernel[2]):
                    grad_padded[:, :,
                                i:i + st * (out_t - 1) + 1:st,
                                j:j + sh * (out_h - 1) + 1:sh,
                                k:k + sw * (out_w - 1) + 1:sw] += cols[..., i, j, k].transpose(0, 4, 1, 2, 3)
        grad_x = grad_padded[:, :,
                             pt:pt + x.shape[2],
                             ph:ph + x.shape[3],
                             pw:pw + x.shape[4]]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward_fn)


def max_pool3d(x, window, stride=None):
    """Windowed maximum over [N, C, T, H, W]; ties route the gradient to the first element in scan order."""
    window = _triple(window)
    stride = _triple(stride) if stride is not None else window
    if x.ndim != 5:
        raise DimensionError(f"max_pool3d: expected [N, C, T, H, W], got {list(x.shape)}")
    if any(w > extent for w, extent in zip(window, x.shape[2:])):
        raise DimensionError(f"max_pool3d: window {list(window)} exceeds input {list(x.shape)}")

    st, sh, sw = stride
    windows = sliding_window_view(x.data, window, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    out_shape = windows.shape[:5]
    flat = windows.reshape(*out_shape, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        di, dj, dk = np.unravel_index(arg, window)
        n, c, t, h, w = np.indices(out_shape, sparse=True)
        grad = np.zeros_like(x.data)
        np.add.at(grad, (n, c, t * st + di, h * sh + dj, w * sw + dk), g)
        return (grad,)

    return _result(out, (x,), backward_fn)
