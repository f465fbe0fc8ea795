"""Minimal tensor type with reverse-mode differentiation.

Every differentiable function below builds its output through :func:`make_op`,
which attaches the parents and a backward closure to the result. Gradients are
computed by :func:`backward`, which sorts the recorded graph into a
:class:`ComputeTape` and sweeps it once in reverse.

Training runs in float32. Wrapping code in ``with precision(np.float64):``
makes freshly created tensors 64-bit, which is what the finite-difference
gradient checks use.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "ComputeTape",
    "Rng",
    "backward",
    "make_op",
    "no_grad",
    "precision",
    "default_dtype",
    "add",
    "sub",
    "hadamard",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "elementwise",
    "tensor_sum",
    "flatten",
    "channel_slice",
    "channel_fill",
    "conv2d",
    "batchnorm",
    "RunningStats",
    "avg_pool",
    "fully_connected",
    "softmax",
    "softmax_cross_entropy",
]

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class _Op:
    __slots__ = ("parents", "backward", "name")

    def __init__(self, parents, backward_fn, name):
        self.parents = parents
        self.backward = backward_fn
        self.name = name


class Tensor:
    """n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or default_dtype()
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._op = None
        return t

    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=None):
        return cls(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad, dtype)

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

    @property
    def is_leaf(self):
        return self._op is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self):
        return self.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data, False)

    def astype(self, dtype):
        t = Tensor._wrap(self.data.astype(dtype), self.requires_grad)
        return t

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}{flag})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents: Sequence[Tensor], backward_fn: Callable, name="op") -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per parent.
    Nothing is recorded when gradients are disabled or no parent needs them.
    """
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        out._op = _Op(tuple(parents), backward_fn, name)
    return out


class ComputeTape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    @classmethod
    def record(cls, root: Tensor) -> "ComputeTape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node._op is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._op.parents:
                if p._op is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(root: Tensor, tape: ComputeTape | None = None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients are added to whatever is already in ``.grad``; calling this twice
    without zeroing doubles them.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {list(root.shape)}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor that requires grad")
    if root._op is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
        return
    if tape is None:
        tape = ComputeTape.record(root)
    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.ops):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node._op.backward(g)
        for parent, pg in zip(node._op.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._op is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype).reshape(parent.shape)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class Rng:
    """Counter-based generator: every draw comes from Philox keyed by (seed, counter).

    Identical seeds give identical streams on any platform; ``counter`` is the
    only mutable state, which makes the generator trivial to checkpoint.
    """

    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ContractError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.counter = int(counter)

    def generator(self) -> np.random.Generator:
        key = self.seed | (self.counter << 64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, low, high, shape):
        return self.generator().uniform(low, high, size=shape)

    def normal(self, shape, scale=1.0):
        return self.generator().normal(0.0, scale, size=shape)

    def permutation(self, n):
        return self.generator().permutation(n)

    def integers(self, low, high, shape=None):
        return self.generator().integers(low, high, size=shape)

    def child(self, stream: int) -> "Rng":
        """Independent generator for a named sub-stream (seeded by hashing in ``stream``)."""
        mixed = np.random.SeedSequence([self.seed, int(stream)]).generate_state(2, np.uint32)
        return Rng(int(mixed[0]) | (int(mixed[1]) << 32))

    def state(self):
        return self.seed, self.counter


# ---------------------------------------------------------------- elementwise


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: operand shapes differ, {list(a.shape)} vs {list(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_op(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "hadamard": hadamard}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu (one operand); add, hadamard (two)."""
    if op in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{op} takes one operand, got {len(operands)}")
        return _UNARY[op](operands[0])
    if op in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{op} takes two operands, got {len(operands)}")
        return _BINARY[op](*operands)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- reshaping


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.data.shape
    return make_op(a.data.sum(keepdims=False).reshape(()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def flatten(a: Tensor) -> Tensor:
    shape = a.shape
    return make_op(a.data.reshape(shape[0], -1), (a,), lambda g: (g.reshape(shape),), "flatten")


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an [N, C, ...] tensor."""
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"channel slice {start}:{stop} out of range for shape {list(a.shape)}")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return make_op(np.ascontiguousarray(a.data[:, start:stop]), (a,), bw, "channel_slice")


def channel_fill(values: Tensor, shape) -> Tensor:
    """Spread a per-channel vector over an [N, C, H, W] tensor (bias-add onto zeros)."""
    if values.ndim != 1 or len(shape) != 4 or shape[1] != values.shape[0]:
        raise ShapeError(f"channel_fill: cannot spread {list(values.shape)} over {list(shape)}")
    out = np.broadcast_to(values.data[None, :, None, None], shape).copy()
    return make_op(out, (values,), lambda g: (g.sum(axis=(0, 2, 3)),), "channel_fill")


# ---------------------------------------------------------------- convolution


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _windows(xp, k, stride, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter_windows(dwin, k, stride, padded_shape, dtype):
    """Adjoint of :func:`_windows`: dwin is [N, C, Ho, Wo, k, k]."""
    ho, wo = dwin.shape[2], dwin.shape[3]
    dxp = np.zeros(padded_shape, dtype=dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dwin[..., i, j]
    return dxp


def _group_matmul(a, b):
    # one 2-d BLAS call per group; numpy's stacked matmul is markedly slower here
    if a.shape[0] == 1:
        return (a[0] @ b[0])[None]
    return np.stack([a[g] @ b[g] for g in range(a.shape[0])])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation of [N, Cin, H, W] with [Cout, Cin/groups, k, k] plus bias.

    With ``groups > 1`` the input and output channels are split into that many
    independent blocks, which lets several same-shape convolutions run as one call.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {list(x.shape)} and {list(weight.shape)}")
    n, cin, h, w = x.shape
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d expects square kernels, got weight {list(weight.shape)}")
    if cin != cin_g * groups or cout % groups:
        raise ShapeError(
            f"conv2d channel mismatch: input {list(x.shape)} vs weight {list(weight.shape)} (groups={groups})")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {list(bias.shape)} does not match weight {list(weight.shape)}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {list(x.shape)} with padding {padding}")

    dtype = x.data.dtype
    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    # columns laid out [C, k, k, N, Ho, Wo] so the matmul sees [C*k*k, N*Ho*Wo]
    cols = np.empty((cin, k, k, n, ho, wo), dtype=dtype)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + hs : stride, j : j + ws : stride]
    m = n * ho * wo
    og = cout // groups
    cols = cols.reshape(groups, cin_g * k * k, m)
    wmat = weight.data.reshape(groups, og, cin_g * k * k)
    out = _group_matmul(wmat, cols).reshape(cout, n, ho, wo)
    out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, og, m)
        if weight.requires_grad:
            gw = _group_matmul(gm, cols.transpose(0, 2, 1)).reshape(weight.shape)
        if x.requires_grad:
            dcols = _group_matmul(wmat.transpose(0, 2, 1), gm).reshape(cin, k, k, n, ho, wo)
            dxt = np.zeros((cin, n) + xp.shape[2:], dtype=dtype)
            for i in range(k):
                for j in range(k):
                    dxt[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[:, i, j]
            dxt = dxt[:, :, padding : padding + h, padding : padding + w] if padding else dxt
            gx = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))
        return gx, gw, gb

    return make_op(out, (x, weight, bias), bw, "conv2d")


def avg_pool(x: Tensor, k: int, stride: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool expects a 4-d input, got {list(x.shape)}")
    n, c, h, w = x.shape
    if k > h or k > w or k < 1:
        raise ShapeError(f"avg_pool window {k} does not fit input {list(x.shape)}")
    ho, wo = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    win = _windows(x.data, k, stride, ho, wo)
    out = win.mean(axis=(4, 5)).astype(x.dtype, copy=False)
    inv = x.dtype.type(1.0 / (k * k))

    def bw(g):
        dwin = np.broadcast_to((g * inv)[..., None, None], (n, c, ho, wo, k, k))
        return (_scatter_windows(dwin, k, stride, x.shape, x.dtype),)

    return make_op(np.ascontiguousarray(out), (x,), bw, "avg_pool")


# ---------------------------------------------------------------- batch norm


class RunningStats:
    """Per-channel running mean/variance for one normalization site."""

    __slots__ = ("mean", "var", "updates")

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.updates = 0

    def update(self, mean, var_unbiased, momentum):
        self.mean = ((1 - momentum) * self.mean + momentum * mean).astype(self.mean.dtype)
        self.var = ((1 - momentum) * self.var + momentum * var_unbiased).astype(self.var.dtype)
        self.updates += 1


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str, running: RunningStats,
              momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of [N, C, H, W].

    ``train`` normalizes with batch statistics and folds them into ``running``;
    ``eval`` normalizes with ``running``.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"batchnorm shapes: input {list(x.shape)}, gamma {list(gamma.shape)}, beta {list(beta.shape)}")
    n, c, h, w = x.shape
    cnt = n * h * w
    dtype = x.dtype
    gd = gamma.data[None, :, None, None]
    if mode == "train":
        if cnt < 2:
            raise ContractError(f"train-mode batchnorm needs >= 2 values per channel, got {cnt}")
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
        xhat = xc * inv_std[None, :, None, None]
        out = xhat * gd + beta.data[None, :, None, None]
        running.update(mean, var * (cnt / (cnt - 1)), momentum)

        def bw(g):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * gd
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (inv_std[None, :, None, None] / cnt) * (cnt * dxhat - s1 - xhat * s2)
            return gx, gg, gb

        return make_op(out.astype(dtype, copy=False), (x, gamma, beta), bw, "batchnorm")

    if mode != "eval":
        raise ContractError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if running.updates == 0:
        raise ContractError("batchnorm in eval mode has no running statistics; train first or load a checkpoint")
    inv_std = (1.0 / np.sqrt(running.var.astype(dtype) + eps)).astype(dtype)
    xhat = (x.data - running.mean.astype(dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bw_eval(g):
        gx = g * (gd * inv_std[None, :, None, None]) if x.requires_grad else None
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, gg, gb

    return make_op(out.astype(dtype, copy=False), (x, gamma, beta), bw_eval, "batchnorm_eval")


# ---------------------------------------------------------------- dense + loss


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"fully_connected shapes: input {list(x.shape)}, weight {list(weight.shape)}, bias {list(bias.shape)}")
    out = x.data @ weight.data + bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_op(out, (x, weight, bias), bw, "fully_connected")


def softmax(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_targets(targets, n, k):
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"expected {n} targets, got {t.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= k):
        bad = t[(t < 0) | (t >= k)][0]
        raise IndexError(f"target index {bad} out of range [0, {k})")
    return t


def softmax_cross_entropy(logits: Tensor, targets: Iterable[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {list(logits.shape)}")
    n, k = logits.shape
    t = _check_targets(targets, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), t]
    loss = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), t] -= 1
        return (p * (g / n),)

    return make_op(loss, (logits,), bw, "softmax_cross_entropy")
