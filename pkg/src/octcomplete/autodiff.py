"""Reverse-mode autodiff over node-major feature matrices.

A FeatureMap wraps a (rows, channels) matrix with an optional gradient slot.
Operations executed while a Tape is active record backward closures; calling
``backward(loss)`` replays them in reverse order, accumulating gradients with
+= and clearing the tape afterwards. The graph is define-by-run: the decoder
structure differs per sample, so no static graph is kept.
"""

import numpy as np

from . import kernels
from .errors import DomainError

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of executed operations, replayed backwards."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise DomainError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


class FeatureMap:
    """Node-major feature matrix at one octree level."""

    __slots__ = ("values", "grad", "level", "_tracked", "_tape")

    def __init__(self, values, level=None, requires_grad=False):
        self.values = np.asarray(values)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)
        self.grad = None
        self.level = level
        self._tracked = requires_grad
        self._tape = None

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[1]

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"FeatureMap({self.values.shape}, level={self.level})"


def _accum(fm, g):
    if not fm._tracked:
        return
    if fm.grad is None:
        fm.grad = np.zeros_like(fm.values)
    fm.grad += g


def custom_op(values, inputs, backward_fn, level=None):
    """Create a taped output; backward_fn(g) returns per-input gradients."""
    out = FeatureMap(values, level=level)
    tape = _ACTIVE_TAPE
    if tape is not None and any(inp._tracked for inp in inputs):
        out._tracked = True
        out._tape = tape

        def _backward():
            if out.grad is None:
                return
            for inp, g in zip(inputs, backward_fn(out.grad)):
                if g is not None:
                    _accum(inp, g)

        tape.ops.append(_backward)
    return out


def backward(loss):
    """Populate gradients of everything `loss` depends on; clears the tape."""
    if loss._tape is None:
        raise DomainError("backward on a value detached from any tape")
    if loss.values.size != 1:
        raise DomainError("backward expects a scalar loss")
    tape = loss._tape
    loss.grad = np.ones_like(loss.values)
    for fn in reversed(tape.ops):
        fn()
    tape.ops.clear()


def _check_same_shape(a, b):
    if a.values.shape != b.values.shape:
        raise DomainError(f"shape mismatch {a.values.shape} vs {b.values.shape}")


def add(a, b):
    if b.values.shape[0] == 1 and a.values.shape[0] != 1:
        # broadcast bias row
        out = a.values + b.values

        def back(g):
            return g, g.sum(axis=0, keepdims=True)

        return custom_op(out, [a, b], back, level=a.level)
    _check_same_shape(a, b)
    return custom_op(a.values + b.values, [a, b], lambda g: (g, g), level=a.level)


def sub(a, b):
    _check_same_shape(a, b)
    return custom_op(a.values - b.values, [a, b], lambda g: (g, -g), level=a.level)


def mul(a, b):
    _check_same_shape(a, b)
    return custom_op(
        a.values * b.values,
        [a, b],
        lambda g: (g * b.values, g * a.values),
        level=a.level,
    )


def scale(a, s):
    s = float(s)
    return custom_op(a.values * s, [a], lambda g: (g * s,), level=a.level)


def matmul(a, b):
    if a.values.shape[1] != b.values.shape[0]:
        raise DomainError("matmul inner dimension mismatch")
    return custom_op(
        a.values @ b.values,
        [a, b],
        lambda g: (g @ b.values.T, a.values.T @ g),
        level=a.level,
    )


def linear(x, w, bias=None):
    """x @ w.T (+ bias); w is (out_channels, in_channels)."""
    if x.values.shape[1] != w.values.shape[1]:
        raise DomainError("linear channel mismatch")
    out = x.values @ w.values.T
    if bias is not None:
        out = out + bias.values

    def back(g):
        gs = [g @ w.values, g.T @ x.values]
        if bias is not None:
            gs.append(g.sum(axis=0, keepdims=True))
        return gs

    inputs = [x, w] if bias is None else [x, w, bias]
    return custom_op(out, inputs, back, level=x.level)


def relu(a):
    mask = a.values > 0
    return custom_op(
        np.where(mask, a.values, 0.0).astype(a.values.dtype),
        [a],
        lambda g: (g * mask,),
        level=a.level,
    )


def sigmoid(a):
    e = np.exp(-np.abs(a.values))
    s = np.where(a.values >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return custom_op(s, [a], lambda g: (g * s * (1.0 - s),), level=a.level)


def row_gather(a, idx):
    """Gather rows by index, -1 yields a zero row.

    1-D idx -> (len(idx), c); 2-D idx (m, k) -> (m, k*c) stencil layout.
    """
    idx = np.asarray(idx, dtype=np.int64)
    c = a.values.shape[1]
    if idx.ndim == 1:
        out = kernels.gather_rows(a.values, idx)

        def back(g):
            ga = np.zeros_like(a.values)
            kernels.scatter_add(ga, idx, np.ascontiguousarray(g))
            return (ga,)

    elif idx.ndim == 2:
        out = kernels.gather_concat(a.values, idx)

        def back(g):
            ga = np.zeros_like(a.values)
            kernels.scatter_add(
                ga, idx.ravel(), np.ascontiguousarray(g.reshape(-1, c))
            )
            return (ga,)

    else:
        raise DomainError("row_gather index must be 1-D or 2-D")
    return custom_op(out, [a], back, level=a.level)


def row_scatter_add(a, idx, num_rows):
    """out[idx[i]] += a[i]; idx == -1 rows are dropped."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != a.values.shape[0]:
        raise DomainError("row_scatter_add index length mismatch")
    out = np.zeros((num_rows, a.values.shape[1]), dtype=a.values.dtype)
    kernels.scatter_add(out, idx, np.ascontiguousarray(a.values))
    return custom_op(out, [a], lambda g: (kernels.gather_rows(g, idx),), level=a.level)


def row_mask(a, mask):
    """Multiply every channel by a constant per-row mask (no mask gradient)."""
    mask = np.asarray(mask, dtype=a.values.dtype).reshape(-1, 1)
    if mask.shape[0] != a.values.shape[0]:
        raise DomainError("row_mask length mismatch")
    return custom_op(a.values * mask, [a], lambda g: (g * mask,), level=a.level)


def sum_all(a):
    out = np.full((1, 1), a.values.sum(), dtype=a.values.dtype)
    return custom_op(out, [a], lambda g: (np.full_like(a.values, g[0, 0]),))


def mean_all(a):
    n = a.values.size
    out = np.full((1, 1), a.values.mean(), dtype=a.values.dtype)
    return custom_op(out, [a], lambda g: (np.full_like(a.values, g[0, 0] / n),))


def constant(values, level=None):
    return FeatureMap(values, level=level)


def parameter(values, level=None):
    return FeatureMap(values, level=level, requires_grad=True)
