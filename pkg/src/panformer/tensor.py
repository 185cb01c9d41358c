"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`Node` on the output tensor.
Calling :func:`backward` on a scalar rebuilds the reachable part of the tape in
creation order and walks it once in reverse, accumulating gradients into leaf
tensors (usually :class:`Parameter` objects).

Layout is row-major with channels on the last axis.  Arithmetic runs in 32-bit
by default; :func:`oracle_mode` switches newly created tensors to 64-bit for
verification work such as finite-difference checks.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "ContractError",
    "Tensor",
    "Parameter",
    "Node",
    "Tape",
    "backward",
    "no_grad",
    "oracle_mode",
    "get_dtype",
    "set_precision",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "linear",
    "conv2d_3x3",
    "pixel_shuffle",
    "window_partition",
    "window_reverse",
    "cyclic_shift",
    "pad_spatial",
    "concat",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "tabs",
]

MAX_RANK = 4


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


_state = {"dtype": np.dtype(np.float32), "grad": True}
_ids = itertools.count()


def get_dtype() -> np.dtype:
    return _state["dtype"]


def set_precision(name: str) -> None:
    """Select ``"float32"`` (default) or ``"float64"`` for new tensors."""
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision {name!r}")
    _state["dtype"] = np.dtype(name)


@contextlib.contextmanager
def oracle_mode() -> Iterator[None]:
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(np.float64)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@dataclass(eq=False)
class Node:
    """One recorded operation: kind, inputs, and a closure over saved activations."""

    id: int
    kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else get_dtype())
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def abs(self):
        return tabs(self)


class Parameter(Tensor):
    """A named trainable leaf whose gradient buffer always exists."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise DimensionError(f"cannot assign {values.shape} to parameter {self.name} of shape {self.shape}")
        self.data = values.copy()
        if self.grad is None or self.grad.shape != self.data.shape or self.grad.dtype != self.data.dtype:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # constants follow the precision of the tensor they are combined with
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def _result(data: np.ndarray, inputs: tuple, kind: str, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if data.ndim > MAX_RANK:
        raise DimensionError(f"{kind} produced rank {data.ndim} > {MAX_RANK}")
    if _state["grad"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(next(_ids), kind, inputs, bwd)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Recorded operations reachable from a root, in creation (topological) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(node.inputs)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def validate(self) -> None:
        position = {n.id: i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for inp in node.inputs:
                if inp._node is not None and position.get(inp._node.id, -1) >= i:
                    raise ContractError(f"node {node.id} ({node.kind}) precedes its input")

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add onto whatever the leaves already hold, so two calls without
    an intervening ``zero_grad`` sum.  Returns the tape that was traversed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if tape is None:
        tape = Tape.from_root(loss)
    if loss._node is None:
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return tape
    grads: dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate_leaf(inp, gi)
            elif inp._node.id in grads:
                grads[inp._node.id] = grads[inp._node.id] + gi
            else:
                grads[inp._node.id] = gi
    return tape


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul",
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b), "div",
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.abs(xd), (x,), "abs", lambda g: (g * np.sign(xd),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), "mean", bwd)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _result(out, (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def _getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.array(x.data[idx]), (x,), "getitem", bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


# --------------------------------------------------------------------------
# layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(np.matmul(ad, bd), (a, b), "matmul", bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), "softmax", bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bwd(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), "layer_norm", bwd)


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result((xd * cdf).astype(xd.dtype, copy=False), (x,), "gelu", bwd)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.maximum(xd, 0), (x,), "relu", lambda g: (g * (xd > 0),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the trailing axis."""
    n_in, n_out = weight.shape
    if x.shape[-1] != n_in:
        raise DimensionError(f"linear expects trailing extent {n_in}, got input {x.shape}")
    if bias is not None and bias.shape != (n_out,):
        raise DimensionError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, n_out)
        grads = [(g2 @ wd.T).reshape(lead + (n_in,)), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out.reshape(lead + (n_out,)), inputs, "linear", bwd)


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 3x3 cross-correlation with zero "same" padding, NHWC layout."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d_3x3 expects [N,H,W,C] input, got {x.shape}")
    if weight.ndim != 4 or weight.shape[:2] != (3, 3) or weight.shape[2] != x.shape[3]:
        raise DimensionError(f"conv2d_3x3 weight {weight.shape} does not match input {x.shape}")
    n, h, w, cin = x.shape
    cout = weight.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    wd = weight.data
    out = np.zeros((n, h, w, cout), dtype=np.result_type(xp, wd))
    for ky in range(3):
        for kx in range(3):
            out += xp[:, ky:ky + h, kx:kx + w, :] @ wd[ky, kx]
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, cout)
        for ky in range(3):
            for kx in range(3):
                gxp[:, ky:ky + h, kx:kx + w, :] += g @ wd[ky, kx].T
                gw[ky, kx] = xp[:, ky:ky + h, kx:kx + w, :].reshape(-1, cin).T @ g2
        grads = [gxp[:, 1:-1, 1:-1, :], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, inputs, "conv2d_3x3", bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """out[n, r*h+dy, r*w+dx, c] = in[n, h, w, c*r*r + dy*r + dx]."""
    if x.ndim != 4 or x.shape[3] % (r * r):
        raise DimensionError(f"pixel_shuffle: channels of {x.shape} not divisible by r^2={r * r}")
    n, h, w, crr = x.shape
    c = crr // (r * r)
    out = x.data.reshape(n, h, w, c, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * r, w * r, c)

    def bwd(g):
        return (g.reshape(n, h, r, w, r, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h, w, crr),)

    return _result(out, (x,), "pixel_shuffle", bwd)


def _partition_np(a: np.ndarray, ws: int) -> np.ndarray:
    n, h, w, c = a.shape
    a = a.reshape(n, h // ws, ws, w // ws, ws, c).transpose(0, 1, 3, 2, 4, 5)
    return a.reshape(-1, ws * ws, c)


def _reverse_np(a: np.ndarray, ws: int, h: int, w: int) -> np.ndarray:
    c = a.shape[-1]
    a = a.reshape(-1, h // ws, w // ws, ws, ws, c).transpose(0, 1, 3, 2, 4, 5)
    return a.reshape(-1, h, w, c)


def window_partition(x: Tensor, ws: int) -> Tensor:
    """Split [N,]H,W,C into [N*nWin, ws*ws, C] windows.

    Windows are enumerated row-major over the window grid (per sample), and
    tokens row-major inside each window.
    """
    if x.ndim not in (3, 4):
        raise DimensionError(f"window_partition expects [H,W,C] or [N,H,W,C], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if ws < 1 or h % ws or w % ws:
        raise DimensionError(f"window size {ws} does not divide spatial extents {h}x{w}")
    batched = x.ndim == 4
    a = x.data if batched else x.data[None]
    src = x.shape

    def bwd(g):
        return (_reverse_np(g, ws, h, w).reshape(src),)

    return _result(_partition_np(a, ws), (x,), "window_partition", bwd)


def window_reverse(windows: Tensor, ws: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`; always returns [N,H,W,C]."""
    if windows.ndim != 3 or windows.shape[1] != ws * ws:
        raise DimensionError(f"window_reverse expects [nWin, {ws * ws}, C], got {windows.shape}")
    if h % ws or w % ws:
        raise DimensionError(f"window size {ws} does not divide spatial extents {h}x{w}")
    per_sample = (h // ws) * (w // ws)
    if windows.shape[0] % per_sample:
        raise DimensionError(f"{windows.shape[0]} windows do not tile a {h}x{w} grid")
    return _result(_reverse_np(windows.data, ws, h, w), (windows,), "window_reverse",
                   lambda g: (_partition_np(g, ws),))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the two spatial axes (the two axes before channels)."""
    if x.ndim < 3:
        raise DimensionError(f"cyclic_shift expects spatial axes, got {x.shape}")
    axes = (x.ndim - 3, x.ndim - 2)
    return _result(np.roll(x.data, (dy, dx), axis=axes), (x,), "cyclic_shift",
                   lambda g: (np.roll(g, (-dy, -dx), axis=axes),))


def pad_spatial(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the bottom and right of the spatial axes of [N,H,W,C]."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[1], x.shape[2]
    out = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    return _result(out, (x,), "pad", lambda g: (g[:, :h, :w, :],))
