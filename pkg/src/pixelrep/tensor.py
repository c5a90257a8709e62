"""Dense n-d arrays with tape-based reverse-mode differentiation.

Every primitive whose inputs require gradients appends an entry to the
thread-local :class:`Tape`. :func:`backward` walks the tape in reverse,
accumulates gradients into leaf tensors and clears the tape.

Arrays are float32 by default; wrap verification code in
``with precision(np.float64):`` to build float64 parameters and inputs.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

_state = threading.local()


def _get(name, default):
    if not hasattr(_state, name):
        setattr(_state, name, default() if callable(default) else default)
    return getattr(_state, name)


def default_dtype():
    return _get("dtype", np.float32)


@contextmanager
def precision(dtype):
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled():
    return _get("grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tape:
    """Ordered record of primitive applications since the last backward."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []

    def record(self, out, inputs, backward_fn):
        self.entries.append((out, inputs, backward_fn))

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


def get_tape():
    return _get("tape", Tape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    # -- introspection
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators
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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else default_dtype()))


def _make(data, inputs, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        get_tape().record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise -------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)


# -- shape ops -------------------------------------------------------------------------


def reshape(x, shape):
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), backward)


def getitem(x, idx):
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(np.asarray(x.data[idx], order="C"), (x,), backward)


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


slice_ = getitem


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def sum_(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return div(sum_(x, axis, keepdims), float(n))


# -- linear algebra -------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


# -- normalization and activations --------------------------------------------------------


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} do not match features {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), backward)


def dropout(x, p, rng, training=True):
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward)


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding ids out of range for table with {weight.shape[0]} rows")

    def backward(g):
        gw = np.zeros_like(weight.data)
        kernels.scatter_add_rows(gw, ids.reshape(-1), np.ascontiguousarray(g.reshape(-1, weight.shape[1])))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward)


embedding_lookup = embedding


def conv2d(x, weight, bias, stride=(1, 1)):
    """Valid-padding 2-d convolution over NCHW input."""
    if isinstance(stride, int):
        stride = (stride, stride)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape[1]} != weight in-channels {weight.shape[1]} ({x.shape} vs {weight.shape})")
    if x.shape[2] < weight.shape[2] or x.shape[3] < weight.shape[3]:
        raise ValueError(f"conv2d: kernel {weight.shape[2:]} larger than input {x.shape[2:]}")
    sh, sw = stride
    out = kernels.conv2d_forward(x.data, weight.data, bias.data, sh, sw)

    def backward(g):
        gx, gw, gb = kernels.conv2d_backward(x.data, weight.data, np.ascontiguousarray(g), sh, sw, x.requires_grad)
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5, sample_mask=None):
    """Per-channel normalization of NCHW input.

    In training mode statistics come from the samples selected by
    ``sample_mask`` (all samples when None) and the running buffers, plain
    numpy arrays, are updated in place; in eval mode the running buffers are
    used.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm2d: gamma/beta shape {gamma.shape} != ({C},)")
    sel = np.ones(x.shape[0], dtype=bool) if sample_mask is None else np.asarray(sample_mask, dtype=bool)
    if training:
        m = int(sel.sum()) * x.shape[2] * x.shape[3]
        if m == 0:
            raise ValueError("batchnorm2d: no samples to compute statistics from")
        mu, var = kernels.bn_stats(x.data, sel)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mu).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += (momentum * unbiased).astype(running_var.dtype)
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    rstd = 1.0 / np.sqrt(var + eps)
    g64 = gamma.data.astype(np.float64)
    out = kernels.bn_normalize(x.data, mu, rstd, g64, beta.data.astype(np.float64))

    def backward(g):
        gx, gg, gb = kernels.bn_backward(x.data, np.ascontiguousarray(g), mu, rstd, g64, sel, training)
        return (gx if x.requires_grad else None), gg, gb

    return _make(out, (x, gamma, beta), backward)


# -- losses ----------------------------------------------------------------------------------


def cross_entropy_label_smoothed(logits, targets, eps=0.0, ignore_index=None):
    """Mean over non-ignored rows of ``-sum_k q_k log softmax(logits)_k`` with
    ``q = (1 - eps) * onehot(target) + eps / V``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [B, V], got {logits.shape}")
    B, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != B:
        raise ValueError(f"{targets.shape[0]} targets for {B} logit rows")
    keep = np.ones(B, dtype=bool) if ignore_index is None else targets != ignore_index
    if np.any(targets[keep] >= V) or np.any(targets[keep] < 0):
        raise ValueError(f"target id out of range for {V} classes")
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no targets left after ignore_index")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    q = np.full((B, V), eps / V, dtype=logits.dtype)
    rows = np.nonzero(keep)[0]
    q[rows, targets[rows]] += 1.0 - eps
    q[~keep] = 0.0
    loss = -(q * logp).sum() / n

    def backward(g):
        probs = np.exp(logp)
        grad = (probs * keep[:, None] - q) * (g / n)
        return (grad.astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def label_smoothed_targets(targets, V, eps):
    targets = np.asarray(targets)
    q = np.full((targets.size, V), eps / V)
    q[np.arange(targets.size), targets] += 1.0 - eps
    return q


# -- backward pass ---------------------------------------------------------------------------


def backward(loss, grad=None, leaves=None):
    """Populate ``.grad`` on every leaf reachable from ``loss`` and clear the tape.

    Leaves listed in ``leaves`` that the loss does not reach get zero grads.
    """
    tape = get_tape()
    if grad is None:
        if loss.size != 1:
            raise ValueError("backward on a non-scalar needs an explicit grad")
        grad = np.ones_like(loss.data)
    if loss.requires_grad and loss.is_leaf:
        loss.grad = grad if loss.grad is None else loss.grad + grad
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    try:
        for out, inputs, fn in reversed(tape.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.dtype)
                if t.is_leaf:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
    finally:
        tape.clear()
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# -- optimizer ---------------------------------------------------------------------------------


class WarmupSchedule:
    """Linear warm-up to ``peak_lr`` then inverse-sqrt decay (or constant)."""

    def __init__(self, warmup_steps=4000, peak_lr=5e-4, decay="inverse_sqrt"):
        if warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if decay not in ("inverse_sqrt", "constant"):
            raise ValueError(f"unknown decay {decay!r}")
        self.warmup_steps = warmup_steps
        self.peak_lr = peak_lr
        self.decay = decay

    def __call__(self, t):
        if t <= self.warmup_steps:
            return self.peak_lr * t / self.warmup_steps
        if self.decay == "constant":
            return self.peak_lr
        return self.peak_lr * math.sqrt(self.warmup_steps / t)

    def to_dict(self):
        return {"warmup_steps": self.warmup_steps, "peak_lr": self.peak_lr, "decay": self.decay}


class AdamState:
    def __init__(self, params, schedule=None, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.schedule = schedule or WarmupSchedule()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def add_param(self, p, m=None, v=None):
        self.params.append(p)
        self.m.append(np.zeros_like(p.data) if m is None else m)
        self.v.append(np.zeros_like(p.data) if v is None else v)

    @property
    def lr(self):
        return self.schedule(max(self.t, 1))

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(state):
    """One bias-corrected Adam update using the scheduled learning rate."""
    state.t += 1
    t = state.t
    lr = state.schedule(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        if p.grad is None:
            g = np.zeros_like(p.data)
        else:
            g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return lr


# -- verification ---------------------------------------------------------------------------------


def grad_check(f, inputs, h=1e-5, floor=1e-6, max_coords=None, rng=None):
    """Compare tape gradients with central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``inputs``. Returns the largest ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)`` over the checked coordinates. ``max_coords`` limits
    the coordinates checked per input (sampled with ``rng``). ``h`` may be a
    sequence of step sizes; each coordinate then keeps its best agreement,
    which tolerates a ReLU kink lying inside one of the stencils.
    """
    inputs = list(inputs)
    steps = tuple(h) if isinstance(h, (tuple, list)) else (h,)
    for t in inputs:
        t.grad = None
    get_tape().clear()
    loss = f()
    backward(loss, leaves=inputs)
    analytic = [t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                a = float(ga.reshape(-1)[i])
                err = math.inf
                for step in steps:
                    flat[i] = orig + step
                    fp = float(f().data)
                    flat[i] = orig - step
                    fm = float(f().data)
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * step)
                    err = min(err, abs(a - num) / max(abs(a), abs(num), floor))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
