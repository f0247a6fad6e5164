"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Everything is sized for small volumetric-slice networks: batched 2D
convolution with a ceil-mode "same" padding rule, elementwise gates,
fully-connected layers, softmax cross-entropy, Adam, and a central
finite-difference gradient checker.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class EngineError(ValueError):
    """Shape or argument mismatch in an engine primitive."""


class NonFiniteGradient(ArithmeticError):
    """An optimizer step saw NaN/inf gradient cells; the step was aborted."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an accumulated gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(()))

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from this (scalar) tensor through the graph."""
        if self.data.size != 1:
            raise EngineError("backward() requires a scalar output")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def hadamard(a, b):
    """Elementwise product (broadcasting allowed, e.g. peephole weights)."""
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        a.accumulate(c * g)

    return _make(a.data * c, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        a.accumulate(g * out * (1.0 - out))

    return _make(out, (a,), backward)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - out * out))

    return _make(out, (a,), backward)


def leaky_rectifier(a, slope=0.2):
    a = _as_tensor(a)
    mask = a.data >= 0

    def backward(g):
        a.accumulate(g * np.where(mask, 1.0, slope))

    return _make(np.where(mask, a.data, slope * a.data), (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)

    def backward(g):
        a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def select(a, index, axis=1):
    """Take a single slice along `axis` (used to step through a sequence)."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = index
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape)
        full[idx] = g
        a.accumulate(full)

    return _make(a.data[idx], (a,), backward)


def mean_axis(a, axis):
    a = _as_tensor(a)
    n = a.shape[axis]

    def backward(g):
        a.accumulate(np.expand_dims(g, axis) * np.ones(a.shape) / n)

    return _make(a.data.mean(axis=axis), (a,), backward)


# ---------------------------------------------------------------------------
# layers


def same_ceil_padding(size, kernel, stride):
    """(low, high) zero padding so the output length is ceil(size/stride)."""
    out = -(-size // stride)
    total = max(0, (out - 1) * stride + kernel - size)
    low = total // 2
    return low, total - low


def conv2d(x, kernels, bias=None, stride=2):
    """Batched 2D cross-correlation with ceil-mode "same" padding.

    x: (B, C_in, H, W) or (C_in, H, W); kernels: (C_out, C_in, kh, kw);
    bias: (C_out,) or None. Output spatial size is ceil(H/stride).
    """
    x = _as_tensor(x)
    kernels = _as_tensor(kernels)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise EngineError("conv2d expects 4D input and kernels")
    B, ci, H, W = xd.shape
    co, ci_k, kh, kw = kernels.shape
    if ci != ci_k:
        raise EngineError(f"conv2d channel mismatch: input {ci}, kernels {ci_k}")
    pl_h, ph_h = same_ceil_padding(H, kh, stride)
    pl_w, ph_w = same_ceil_padding(W, kw, stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (pl_h, ph_h), (pl_w, ph_w)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    ho = -(-H // stride)
    wo = -(-W // stride)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, ci, ho, wo, kh, kw)
    K = ci * kh * kw
    # one large GEMM with the batch folded into the column axis
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(K, B * ho * wo)
    wf = kernels.data.reshape(co, K)
    out = wf @ cols  # (co, B*ho*wo)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, B, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        if squeeze:
            g = g[None]
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, B * ho * wo)
        if kernels.requires_grad or kernels._parents:
            kernels.accumulate((gf @ cols.T).reshape(kernels.shape))
        if bias is not None and (bias.requires_grad or bias._parents):
            bias.accumulate(gf.sum(axis=1))
        dcols = (wf.T @ gf).reshape(ci, kh, kw, B, ho, wo).transpose(3, 0, 1, 2, 4, 5)
        dxp = np.zeros((B, ci, Hp, Wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, i, j
                ]
        dx = dxp[:, :, pl_h : Hp - ph_h or None, pl_w : Wp - ph_w or None]
        x.accumulate(dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, parents, backward)


def fully_connected(x, weight, bias):
    """weight @ x + bias; x may be a single vector or a (B, F_in) batch."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    if xd.shape[1] != weight.shape[1]:
        raise EngineError(
            f"fully_connected: input width {xd.shape[1]} != weight fan-in {weight.shape[1]}"
        )
    out = xd @ weight.data.T + bias.data

    def backward(g):
        if squeeze:
            g = g[None]
        if weight.requires_grad or weight._parents:
            weight.accumulate(g.T @ xd)
        if bias.requires_grad or bias._parents:
            bias.accumulate(g.sum(axis=0))
        x.accumulate((g @ weight.data)[0] if squeeze else g @ weight.data)

    return _make(out[0] if squeeze else out, (x, weight, bias), backward)


def softmax(logits):
    """Plain numpy softmax over the last axis (no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under softmax(logits).

    logits: (C,) with scalar target, or (B, C) with (B,) targets.
    """
    logits = _as_tensor(logits)
    squeeze = logits.ndim == 1
    z = logits.data[None] if squeeze else logits.data
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    B, C = z.shape
    if C < 2:
        raise EngineError("softmax_cross_entropy requires at least 2 classes")
    if t.shape != (B,) or (t < 0).any() or (t >= C).any():
        raise EngineError("target index out of range")
    p = softmax(z)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), t].mean()

    def backward(g):
        d = p.copy()
        d[np.arange(B), t] -= 1.0
        d *= float(g) / B
        logits.accumulate(d[0] if squeeze else d)

    return _make(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moments and step count for one parameter list."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on `params`' data arrays.

    Raises NonFiniteGradient (before touching any parameter) if any
    gradient cell is NaN or inf.
    """
    if lr <= 0:
        raise EngineError("adam_step requires lr > 0")
    for g in grads:
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient cells; step aborted")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over a fixed parameter list; learning rate supplied per step."""

    def __init__(self, params, base_lr, decay=1.0):
        self.params = list(params)
        self.base_lr = float(base_lr)
        self.decay = float(decay)
        self.state = AdamState.for_params(self.params)

    def lr_at_epoch(self, epoch):
        return self.base_lr * self.decay**epoch

    def step(self, epoch=0, lr=None):
        if lr is None:
            lr = self.lr_at_epoch(epoch)
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def grad_check(fn, inputs, tolerance=1e-4, h=1e-6):
    """Compare reverse-mode gradients of `fn` with central differences.

    fn takes a list of Tensors and returns a scalar Tensor. inputs is a
    list of numpy arrays; every coordinate of every input is probed.
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(tensors)
    out.backward()
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]
    max_rel = 0.0
    for i, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                fp = fn(tensors).item()
            flat[j] = orig - h
            with no_grad():
                fm = fn(tensors).item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[i].reshape(-1)[j]
            diff = abs(ana - num)
            den = max(abs(ana), abs(num))
            rel = diff / den if den > 1e-6 else diff
            max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel_error=max_rel, tolerance=tolerance)
