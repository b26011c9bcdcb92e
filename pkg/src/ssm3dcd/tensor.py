"""Dense numpy tensors with reverse-mode gradients.

Activations are laid out channel-last: a feature map is ``(B, H, W, C)`` and a
token sequence is ``(B, L, D)``.  Every differentiable op builds a node whose
``_backward`` closure maps the output gradient to one gradient per parent.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

PRECISIONS = {
    "single": np.float32,
    "double": np.float64,
    "widest": np.longdouble,
}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None
    return np.dtype(precision)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A learnable leaf whose ``grad`` buffer always matches ``data``."""

    __slots__ = ()

    def __init__(self, data, name=None):
        data = np.array(data, copy=True)
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, values) -> None:
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise ValueError(f"cannot assign shape {values.shape} to parameter {self.name!r} of shape {self.data.shape}")
        self.data[...] = values


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# ------------------------------------------------------------- elementwise


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _node(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid(x),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward)


def tabs(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ------------------------------------------------------------------ shape


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(np.ascontiguousarray(a.data).reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _node(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def flip(a: Tensor, axis: int) -> Tensor:
    return _node(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), backward)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list:
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not add up to axis length {a.shape[axis]}")
    out, start = [], 0
    axis = axis % a.ndim
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


def stack_batch(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def pad_spatial(x: Tensor, ph: tuple, pw: tuple, mode: str = "constant") -> Tensor:
    """Pad axes 1 and 2 of a ``(B, H, W, C)`` map; ``mode`` is constant (zeros) or reflect."""
    if ph == (0, 0) and pw == (0, 0):
        return x
    widths = ((0, 0), ph, pw, (0, 0))
    H, W = x.shape[1:3]
    if mode == "constant":
        out = np.pad(x.data, widths)

        def backward(g):
            return (g[:, ph[0] : ph[0] + H, pw[0] : pw[0] + W],)

        return _node(out, (x,), backward)
    if mode != "reflect":
        raise ValueError(f"unsupported pad mode {mode!r}")
    rows = _reflect_index(H, ph)
    cols = _reflect_index(W, pw)
    out = x.data[:, rows][:, :, cols]

    def backward(g):
        gr = np.zeros(g.shape[:1] + (H,) + g.shape[2:], dtype=g.dtype)
        np.add.at(gr, (slice(None), rows), g)
        gc = np.zeros(gr.shape[:2] + (W,) + gr.shape[3:], dtype=g.dtype)
        np.add.at(gc, (slice(None), slice(None), cols), gr)
        return (gc,)

    return _node(out, (x,), backward)


def _reflect_index(n: int, pad: tuple) -> np.ndarray:
    idx = np.arange(-pad[0], n + pad[1])
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    out = x2 @ w
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (w.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation on ``(B, H, W, Cin)`` with a ``(kh, kw, Cin, Cout)`` kernel."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernel, bias, stride, padding)
        return reshape(out, out.shape[1:])
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input shape {x.shape} has {x.shape[-1]} channels but kernel shape {kernel.shape} expects {cin}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    B, H, W, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: kernel shape {kernel.shape} larger than padded input {xp.shape}")
    xp = np.ascontiguousarray(xp)
    sB, sH, sW, sC = xp.strides
    cols = as_strided(xp, (B, Ho, Wo, kh, kw, cin), (sB, sH * stride, sW * stride, sH, sW, sC))
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = cols2 @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, cout)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols2.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros((B, Hp, Wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, i, j]
            gx = gxp[:, padding : padding + H, padding : padding + W] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _node(out, parents, backward)


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded depthwise conv along the token axis of ``(B, L, D)``; kernel ``(k, D)``, k odd."""
    k, D = kernel.shape
    if x.shape[-1] != D:
        raise ValueError(f"depthwise_conv1d: input shape {x.shape} vs kernel shape {kernel.shape}")
    half = k // 2
    L = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    w = kernel.data
    out = np.zeros_like(x.data)
    for i in range(k):
        out += xp[:, i : i + L] * w[i]
    if bias is not None:
        out += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gk = np.stack([(xp[:, i : i + L] * g).sum(axis=(0, 1)) for i in range(k)])
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, i : i + L] += g * w[i]
        gx = gxp[:, half : half + L]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 1))

    return _node(out, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis at every location."""
    C = x.shape[-1]
    if C == 0:
        raise ValueError("layer_norm: channel count is 0")
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the per-location max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), backward)


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Bilinear interpolation weights ``(n_out, n_in)`` with half-pixel centers (align_corners off)."""
    R = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        R[:, 0] = 1.0
        return R
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - frac)
    np.add.at(R, (rows, i1), frac)
    return R


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a ``(B, H, W, C)`` map bilinearly; same-shape resize is the identity."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output size must be >= 1, got {out_h}x{out_w}")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, H, W, C = x.shape
    if (H, W) == (out_h, out_w):
        out = x
    else:
        Rh = resize_matrix(H, out_h, x.dtype)
        Rw = resize_matrix(W, out_w, x.dtype)
        out_data = np.einsum("ih,bhwc->biwc", Rh, x.data)
        out_data = np.einsum("jw,biwc->bijc", Rw, out_data)

        def backward(g):
            gi = np.einsum("jw,bijc->biwc", Rw, g)
            return (np.einsum("ih,biwc->bhwc", Rh, gi),)

        out = _node(out_data, (x,), backward)
    return reshape(out, out.shape[1:]) if squeeze else out


# ------------------------------------------------------------------ modules


class Module:
    """Parameter container; attribute order fixes checkpoint naming."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype):
        dtype = resolve_dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        value.name = name
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, dtype=np.float32):
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0, dtype=np.float32):
        self.kernel = Parameter(uniform_init(rng, (k, k, c_in, c_out), k * k * c_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
