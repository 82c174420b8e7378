"""Minimal reverse-mode autodiff over numpy, plus the layers it supports.

A Tensor wraps a float64 array and remembers how it was produced; calling
``backward`` on a scalar loss walks the graph once in reverse topological
order.  Only the operations the model needs exist here: elementwise
arithmetic, matmul, reductions, leaky ReLU, exp/sqrt, dense and strided
convolution layers.  Gradients accumulate out-of-place so shared upstream
arrays are never mutated.
"""

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar")
    # iterative post-order topological sort
    order = []
    seen = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    # each sweep owns the graph: stale grads from an earlier backward over a
    # shared subgraph must not leak into this one
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# public hooks for modules that define custom ops on the tape
accumulate_grad = _accumulate
custom_op = _make


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, t.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(g, t.data.shape).copy())

    return _make(out, (t,), bw)


def tmean(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    n = t.data.size

    def bw(g):
        _accumulate(t, np.full(t.data.shape, float(g) / n))

    return _make(t.data.mean(), (t,), bw)


def texp(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = np.exp(t.data)

    def bw(g):
        _accumulate(t, g * out)

    return _make(out, (t,), bw)


def tsqrt(t: Tensor, floor: float = 1e-24) -> Tensor:
    """Square root with the derivative clamped away from the pole at zero."""
    t = _as_tensor(t)
    out = np.sqrt(np.maximum(t.data, 0.0))

    def bw(g):
        _accumulate(t, g * 0.5 / np.sqrt(np.maximum(t.data, floor)))

    return _make(out, (t,), bw)


def square(t: Tensor) -> Tensor:
    t = _as_tensor(t)

    def bw(g):
        _accumulate(t, g * 2.0 * t.data)

    return _make(t.data ** 2, (t,), bw)


def reshape(t: Tensor, shape) -> Tensor:
    t = _as_tensor(t)

    def bw(g):
        _accumulate(t, g.reshape(t.data.shape))

    return _make(t.data.reshape(shape), (t,), bw)


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    t = _as_tensor(t)
    mask = np.where(t.data > 0.0, 1.0, slope)

    def bw(g):
        _accumulate(t, g * mask)

    return _make(t.data * mask, (t,), bw)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: x (B, in) with w (out, in), b (out,) -> (B, out)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)

    def bw(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        _accumulate(b, g.sum(axis=0))

    return _make(x.data @ w.data.T + b.data, (x, w, b), bw)


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int):
    B, C, H, W = x.shape
    oh = (H + 2 * padding - kernel) // stride + 1
    ow = (W + 2 * padding - kernel) // stride + 1
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    cols = np.empty((B, C, kernel, kernel, oh, ow))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(B, C * kernel * kernel, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, x_shape, kernel: int, stride: int, padding: int):
    B, C, H, W = x_shape
    oh = (H + 2 * padding - kernel) // stride + 1
    ow = (W + 2 * padding - kernel) // stride + 1
    g = gcols.reshape(B, C, kernel, kernel, oh, ow)
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, i, j]
    return xp[:, :, padding:padding + H, padding:padding + W]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """Strided 2-D convolution.  x (B, C, H, W), w (F, C, k, k), b (F,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    F, C, k, _ = w.data.shape
    cols, oh, ow = _im2col(x.data, k, stride, padding)
    wmat = w.data.reshape(F, C * k * k)
    out = np.matmul(wmat, cols).reshape(x.data.shape[0], F, oh, ow)
    out += b.data[None, :, None, None]

    def bw(g):
        B = x.data.shape[0]
        gm = g.reshape(B, F, oh * ow)
        _accumulate(b, g.sum(axis=(0, 2, 3)))
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        _accumulate(w, gw)
        gcols = np.matmul(wmat.T, gm)
        _accumulate(x, _col2im(gcols, x.data.shape, k, stride, padding))

    return _make(out, (x, w, b), bw)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-style normal init: std = sqrt(2 / fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Adam:
    """Adam over a fixed-order list of parameter Tensors."""

    def __init__(self, params, lr: float, beta1: float = 0.0, beta2: float = 0.9,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        """Flat list of state arrays plus the step counter, for checkpointing."""
        return self.m + self.v, self.t

    def load_state(self, arrays, t: int):
        n = len(self.params)
        if len(arrays) != 2 * n:
            raise ValueError("optimizer state length mismatch")
        for i in range(n):
            self.m[i][...] = arrays[i]
            self.v[i][...] = arrays[n + i]
        self.t = int(t)
