"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation executed while gradient recording is enabled
appends a node to the thread-local :class:`Tape`.  :func:`backward` replays
that tape in reverse and then clears it.  Arrays are channels-last
(``H, W, C`` or ``B, H, W, C``) throughout.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_local = threading.local()


class Tape:
    """Ordered record of operations executed since the last backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, node: "_Node") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        # outputs keep a reference to their spent node so a second backward can be detected
        for node in self.nodes:
            node.out = None
            node.inputs = ()
            node.backward_fn = None
        self.nodes = []


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def count_macs():
    """Count multiply-accumulates of matmul/conv ops executed in the block.

    Yields a one-element list whose entry is updated in place.
    """
    prev = getattr(_local, "macs", None)
    box = [0]
    _local.macs = box
    try:
        yield box
    finally:
        _local.macs = prev


def _add_macs(n: int) -> None:
    box = getattr(_local, "macs", None)
    if box is not None:
        box[0] += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ------------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        perm = list(range(self.ndim))
        perm[a], perm[b] = perm[b], perm[a]
        return transpose(self, tuple(perm))

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def backward(self):
        backward(self)


def _raise_item(t):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._node = None
    out.name = None
    if needs:
        node = _Node(op, inputs, out, backward_fn)
        out._node = node
        current_tape().record(node)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise binary -------------------------------------------------------

def _binary_pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


# -- elementwise unary --------------------------------------------------------

def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log of non-positive values")
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative values")
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.logaddexp(0.0, xd).astype(xd.dtype, copy=False), (x,),
                   lambda g: (g * special.expit(xd),), "softplus")


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erfc(x: Tensor) -> Tensor:
    xd = x.data
    return _result(special.erfc(xd), (x,),
                   lambda g: (-_TWO_OVER_SQRT_PI * g * np.exp(-xd * xd),), "erfc")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    scale = np.where(xd >= 0, 1.0, slope).astype(xd.dtype)
    return _result(xd * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def clamp_min(x: Tensor, bound: float) -> Tensor:
    """max(x, bound); zero gradient where the bound is active."""
    xd = x.data
    keep = xd >= bound
    out = np.where(keep, xd, np.asarray(bound, dtype=xd.dtype))
    return _result(out, (x,), lambda g: (g * keep,), "clamp_min")


_UNARY = {
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "negate": neg,
    "abs": absolute,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "erfc": erfc,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: ArrayLike, b: Optional[ArrayLike] = None, **params) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``leaky_relu`` takes ``slope`` and ``clamp_min`` takes ``bound``.
    """
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    a = as_tensor(a)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "leaky_relu":
        return leaky_relu(a, params.get("slope", 0.01))
    if op_kind == "clamp_min":
        return clamp_min(a, params["bound"])
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- linear algebra and reductions -----------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _add_macs(out.size * ad.shape[-1])

    def bw(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return _result(out, (a, b), bw, "matmul")


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(op_kind: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axis`` (all axes when None)."""
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    if op_kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif op_kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return _result(np.asarray(out), (x,), bw, op_kind)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input must be finite")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


# -- shape manipulation ------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ndim = tensors[0].ndim
    ax = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ValueError(f"concat shape mismatch off axis {ax}: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, bw, "concat")


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero padding with numpy-style ``pad_width`` (one ``(before, after)`` per axis)."""
    pad_width = tuple((int(a), int(b)) for a, b in pad_width)
    if len(pad_width) != x.ndim:
        raise ValueError("pad_width needs one pair per axis")
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pad_width, x.shape))
    return _result(np.pad(x.data, pad_width), (x,), lambda g: (g[crop],), "pad")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=not basic) if basic else out, (x,), bw, "getitem")


# -- convolution ------------------------------------------------------------------

def _pad_pair(padding) -> tuple:
    if isinstance(padding, (tuple, list)):
        lo, hi = padding
        return int(lo), int(hi)
    return int(padding), int(padding)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding=0, mask: Optional[np.ndarray] = None) -> Tensor:
    """Channels-last 2-D cross-correlation with zero padding.

    ``x`` is ``[H, W, Cin]`` or ``[B, H, W, Cin]``; ``kernels`` is
    ``[k, k, Cin, Cout]``.  ``padding`` is an int or a ``(low, high)`` pair
    applied to both spatial axes.  A ``{0, 1}`` ``mask`` of shape ``[k, k]``
    multiplies the kernel before use.
    """
    k = kernels.shape[0]
    if kernels.ndim != 4 or kernels.shape[1] != k or k % 2 == 0:
        raise ValueError(f"kernels must be [k, k, Cin, Cout] with odd k, got {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.shape[-1] != kernels.shape[2]:
        raise ValueError(f"input has {x.shape[-1]} channels, kernels expect {kernels.shape[2]}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (k, k):
            raise ValueError(f"mask shape {mask.shape} != {(k, k)}")
        kernels = mul(kernels, Tensor(mask[:, :, None, None].astype(kernels.dtype)))
    out = _conv2d(x, kernels, stride, _pad_pair(padding))
    if bias is not None:
        out = add(out, bias)
    return out


def _conv2d(x: Tensor, w: Tensor, s: int, pad: tuple) -> Tensor:
    lo, hi = pad
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    B, H, W, cin = xd.shape
    k, cout = w.shape[0], w.shape[3]
    hp, wp = H + lo + hi, W + lo + hi
    if hp < k or wp < k or (hp - k) % s or (wp - k) % s:
        raise ValueError(f"conv output size is not an integer for input {H}x{W}, k={k}, stride={s}, padding={pad}")
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    xp = np.pad(xd, ((0, 0), (lo, hi), (lo, hi), (0, 0))) if (lo or hi) else xd
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(B, ho, wo, cout)
    _add_macs(cols.shape[0] * cols.shape[1] * cout)
    wshape = w.shape

    def bw(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(wshape)
        dcols = (g2 @ wmat.T).reshape(B, ho, wo, k, k, cin)
        dxp = np.zeros((B, hp, wp, cin), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, lo:lo + H, lo:lo + W, :]
        return (dx if batched else dx[0]), dw

    return _result(out if batched else out[0], (x, w), bw, "conv2d")


def conv_transpose2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` (fractionally strided convolution).

    ``kernels`` is ``[k, k, Cin, Cout]`` with ``Cin`` the channels of ``x``.
    Output size is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    k = kernels.shape[0]
    if kernels.ndim != 4 or kernels.shape[1] != k:
        raise ValueError(f"kernels must be [k, k, Cin, Cout], got {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise ValueError(f"input has {x.shape[-1]} channels, kernels expect {kernels.shape[2]}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    B, H, W, cin = xd.shape
    cout, s, p = kernels.shape[3], stride, padding
    ho = (H - 1) * s - 2 * p + k + output_padding
    wo = (W - 1) * s - 2 * p + k + output_padding
    if ho <= 0 or wo <= 0:
        raise ValueError("transposed conv output would be empty")
    fh = max((H - 1) * s + k, p + ho)
    fw = max((W - 1) * s + k, p + wo)
    wmat = kernels.data.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    x2 = xd.reshape(-1, cin)
    cols = (x2 @ wmat).reshape(B, H, W, k, k, cout)
    _add_macs(x2.shape[0] * cin * k * k * cout)
    full = np.zeros((B, fh, fw, cout), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, i:i + s * H:s, j:j + s * W:s, :] += cols[:, :, :, i, j, :]
    out = full[:, p:p + ho, p:p + wo, :]

    def bw(g):
        gfull = np.zeros((B, fh, fw, cout), dtype=g.dtype)
        gfull[:, p:p + ho, p:p + wo, :] = g if batched else g[None]
        win = sliding_window_view(gfull, (k, k), axis=(1, 2))[:, ::s, ::s][:, :H, :W]
        gcols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * cout)
        dx = (gcols @ wmat.T).reshape(B, H, W, cin)
        dw = (x2.T @ gcols).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        return (dx if batched else dx[0]), dw

    res = _result(np.ascontiguousarray(out if batched else out[0]), (x, kernels), bw, "conv_transpose2d")
    if bias is not None:
        res = add(res, bias)
    return res


# -- differentiation ----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on, then clear the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is not None and node.backward_fn is None:
        raise RuntimeError("tape already consumed; re-run the forward pass before backward")
    if node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return
        raise RuntimeError("loss has no recorded history; was the tape already consumed?")
    tape = current_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes):
        out = n.out
        if out is None:
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = n.backward_fn(g)
        for inp, ig in zip(n.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = unbroadcast(np.asarray(ig), inp.shape)
            if inp._node is None:
                ig = ig.astype(inp.dtype, copy=False)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
    tape.clear()


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               coords: Optional[Sequence[Optional[Iterable[int]]]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at one coordinate is ``|a - n| / max(1, |a|, |n|)``.  ``coords``
    optionally restricts, per input, the flat indices that are perturbed.
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("function output is not finite")
    if out._node is not None:
        backward(out)
    else:
        current_tape().clear()
    worst = 0.0
    for n, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = range(flat.size) if coords is None or coords[n] is None else coords[n]
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("function output is not finite under perturbation")
            num = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


# -- random numbers -------------------------------------------------------------------

class RngState:
    """Seeded PCG64 generator whose full state can be saved and restored."""

    algorithm = "PCG64"

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, size, dtype=np.float64) -> np.ndarray:
        return self.generator.uniform(low, high, size).astype(dtype, copy=False)

    def normal(self, size, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.generator.standard_normal(size) * scale).astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def get_state(self) -> dict:
        return {"seed": self.seed, "algorithm": self.algorithm,
                "state": self.generator.bit_generator.state}

    def set_state(self, state: dict) -> None:
        if state.get("algorithm") != self.algorithm:
            raise ValueError(f"unsupported RNG algorithm {state.get('algorithm')!r}")
        self.seed = int(state["seed"])
        self.generator.bit_generator.state = state["state"]

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        rng = cls(state["seed"])
        rng.set_state(state)
        return rng
