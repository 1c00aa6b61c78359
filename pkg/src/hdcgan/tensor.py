"""Dense tensors with reverse-mode automatic differentiation.

Only the operators needed by the GAN stacks are provided. Data lives in a
read-only numpy array; ops never write into their inputs. Gradients are
accumulated additively into zero-initialised ``grad`` buffers and cleared
explicitly with :meth:`Tensor.zero_grad`.

Conventions
-----------
* Broadcasting follows numpy's trailing-dimension rule. Gradients flowing
  back into a broadcast operand are summed over the broadcast axes.
* ``conv2d`` is a cross-correlation (the kernel is not flipped) with zero
  padding. ``conv_transpose2d`` is its exact adjoint for the same kernel,
  stride and padding.
* Reductions inside convolutions go through ``np.tensordot`` followed by a
  fixed-order scatter over kernel offsets ``(i, j)`` in row-major order, so
  a given BLAS thread count always yields the same sums.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "TensorError",
    "add",
    "as_tensor",
    "checked_mode",
    "clip",
    "conv2d",
    "conv_output_size",
    "conv_transpose2d",
    "conv_transpose_output_size",
    "div",
    "exp",
    "is_checked",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "reshape",
    "scale",
    "set_checked",
    "sigmoid",
    "sub",
    "tanh",
    "tsum",
]


class TensorError(ValueError):
    """Raised for shape errors and checked-mode violations."""


_STATE = {"checked": True, "grad_enabled": True}


def set_checked(flag: bool) -> None:
    """Toggle shape/NaN assertions (checked mode is the default)."""
    _STATE["checked"] = bool(flag)


def is_checked() -> bool:
    return _STATE["checked"]


@contextlib.contextmanager
def checked_mode(flag: bool = True):
    prev = _STATE["checked"]
    _STATE["checked"] = bool(flag)
    try:
        yield
    finally:
        _STATE["checked"] = prev


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a backward graph."""
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """n-dimensional array with an optional gradient and backward graph."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data)
        if not data.flags.writeable:
            data = data.copy()
        out.data = _frozen(data)
        out.grad = None
        out._op = op
        out._consumed = False
        out._backward = None
        track = _STATE["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        if _STATE["checked"] and not np.all(np.isfinite(data)):
            raise TensorError(f"non-finite values produced by {op}")
        return out

    # --- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = "detach"
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # --- autodiff ---------------------------------------------------------

    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable ``grad`` buffer."""
        if self.data.size != 1:
            raise TensorError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise TensorError("loss does not depend on any tensor with requires_grad")
        if _STATE["checked"] and self._consumed:
            raise TensorError("backward() called twice on the same graph")
        order = self._topo()
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
        self._consumed = True
        if _STATE["checked"]:
            for node in order:
                if node.requires_grad and not np.all(np.isfinite(node.grad)):
                    raise TensorError(f"non-finite gradient at {node._op or 'leaf'} {node.shape}")

    # --- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor._result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            a._accum(_unbroadcast(out.grad, a.shape))
            b._accum(_unbroadcast(out.grad, b.shape))
        out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor._result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _backward():
            a._accum(_unbroadcast(out.grad, a.shape))
            b._accum(_unbroadcast(-out.grad, b.shape))
        out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor._result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = _backward
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if _STATE["checked"] and np.any(b.data == 0):
        raise TensorError("division by zero")
    out = Tensor._result(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad * out.data / b.data, b.shape))
        out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar ``c`` without promoting the dtype."""
    c_arr = np.asarray(c, dtype=a.dtype)
    out = Tensor._result(a.data * c_arr, (a,), "scale")
    if out.requires_grad:
        def _backward():
            a._accum(out.grad * c_arr)
        out._backward = _backward
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor._result(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        def _backward():
            a._accum(out.grad * out.data)
        out._backward = _backward
    return out


def log(a: Tensor) -> Tensor:
    if _STATE["checked"] and np.any(a.data <= 0):
        raise TensorError("log of non-positive value")
    out = Tensor._result(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _backward():
            a._accum(out.grad / a.data)
        out._backward = _backward
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor._result(np.tanh(a.data), (a,), "tanh")
    if out.requires_grad:
        def _backward():
            a._accum(out.grad * (1 - out.data * out.data))
        out._backward = _backward
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor._result(_stable_sigmoid(a.data), (a,), "sigmoid")
    if out.requires_grad:
        def _backward():
            a._accum(out.grad * out.data * (1 - out.data))
        out._backward = _backward
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    s = np.asarray(slope, dtype=a.dtype)
    mask = a.data > 0
    out = Tensor._result(np.where(mask, a.data, a.data * s), (a,), "leaky_relu")
    if out.requires_grad:
        def _backward():
            a._accum(np.where(mask, out.grad, out.grad * s))
        out._backward = _backward
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor._result(np.clip(a.data, lo, hi), (a,), "clip")
    if out.requires_grad:
        def _backward():
            a._accum(np.where(inside, out.grad, 0))
        out._backward = _backward
    return out


# --- reductions and shape ops ---------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor._result(np.asarray(a.data.sum(axis=axis)), (a,), "sum")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))
        out._backward = _backward
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise TensorError("mean of an empty tensor")
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor._result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _backward():
            a._accum(out.grad.reshape(a.shape))
        out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor._result(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        out._backward = _backward
    return out


# --- convolution -----------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> view (N, C, oh, ow, kh, kw)
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _correlate(xp: np.ndarray, k: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    v = _windows(xp, k.shape[2], k.shape[3], stride, oh, ow)
    out = np.tensordot(v, k, axes=([1, 4, 5], [1, 2, 3]))  # (N, oh, ow, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(g: np.ndarray, k: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Adjoint of ``_correlate``: spread (N, F, oh, ow) back onto (N, C, hp, wp)."""
    n, _, oh, ow = g.shape
    _, c, kh, kw = k.shape
    cols = np.tensordot(g, k, axes=([1], [0]))  # (N, oh, ow, C, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _kernel_grad(xp: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # dK[f, c, i, j] = sum_{n,h,w} g[n,f,h,w] * xp[n, c, h*s+i, w*s+j]
    v = _windows(xp, kh, kw, stride, g.shape[2], g.shape[3])
    return np.tensordot(g, v, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv_args(x: Tensor, k: Tensor, stride: int, padding: int, in_axis: int) -> None:
    if x.ndim != 4 or k.ndim != 4:
        raise TensorError(f"expected 4-D input and kernel, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[in_axis]:
        raise TensorError(f"channel mismatch: input {x.shape} vs kernel {k.shape}")
    if stride < 1 or padding < 0:
        raise TensorError(f"invalid stride={stride} / padding={padding}")


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (N, C, H, W) with ``k`` (F, C, kh, kw)."""
    _check_conv_args(x, k, stride, padding, in_axis=1)
    _, _, h, w = x.shape
    kh, kw = k.shape[2:]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise TensorError(f"kernel {k.shape[2:]} larger than padded input {(h + 2 * padding, w + 2 * padding)}")
    oh, ow = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads) if padding else x.data
    out = Tensor._result(_correlate(xp, k.data, stride, oh, ow), (x, k), "conv2d")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if k.requires_grad:
                k._accum(_kernel_grad(xp, g, kh, kw, stride))
            if x.requires_grad:
                gx = _scatter(g, k.data, stride, h + 2 * padding, w + 2 * padding)
                x._accum(gx[:, :, padding : padding + h, padding : padding + w])
        out._backward = _backward
    return out


def conv_transpose2d(
    x: Tensor,
    k: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_size: tuple[int, int] | None = None,
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``k`` has the conv2d layout (F, C, kh, kw).

    Maps (N, F, H, W) to (N, C, H', W') with ``H' = (H-1)*stride - 2*padding + kh``
    unless ``output_size`` selects one of the other ``stride`` sizes that
    conv2d maps onto ``H``.
    """
    _check_conv_args(x, k, stride, padding, in_axis=0)
    n, _, h, w = x.shape
    _, c, kh, kw = k.shape
    oh = conv_transpose_output_size(h, kh, stride, padding)
    ow = conv_transpose_output_size(w, kw, stride, padding)
    if output_size is not None:
        th, tw = output_size
        if not (oh <= th < oh + stride and ow <= tw < ow + stride):
            raise TensorError(f"output_size {output_size} incompatible with input {x.shape} and kernel {k.shape}")
        oh, ow = th, tw
    if oh < 1 or ow < 1:
        raise TensorError(f"conv_transpose2d of {x.shape} with kernel {k.shape} has empty output")
    hp, wp = oh + 2 * padding, ow + 2 * padding
    # with output_size > the base size, trailing rows/cols receive no contributions
    full = _scatter(x.data, k.data, stride, hp, wp)
    data = np.ascontiguousarray(full[:, :, padding : padding + oh, padding : padding + ow])
    out = Tensor._result(data, (x, k), "conv_transpose2d")
    if out.requires_grad:
        def _backward():
            pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
            gp = np.pad(out.grad, pads) if padding else out.grad
            if x.requires_grad:
                x._accum(_correlate(gp, k.data, stride, h, w))
            if k.requires_grad:
                k._accum(_kernel_grad(gp, x.data, kh, kw, stride))
        out._backward = _backward
    return out
