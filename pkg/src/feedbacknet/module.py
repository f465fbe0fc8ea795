"""Parameter containers and the SGD optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import RunningStats, Tensor, batchnorm, conv2d, fully_connected


class Module:
    """Base class that discovers parameters and buffers from instance attributes.

    Parameters are leaf tensors with ``requires_grad``; attributes that are
    modules, or lists of modules, are searched recursively in attribute order.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{key}.")

    def children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))
            elif isinstance(value, dict):
                yield from (v for v in value.values() if isinstance(v, Module))

    def parameters(self):
        return dict(self.named_parameters())

    def named_buffers(self, prefix=""):
        """Non-trainable state as (name, ndarray) pairs; overridden by normalization layers."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{key}.")

    def load_buffers(self, buffers: dict, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                value.load_buffers(buffers, f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item.load_buffers(buffers, f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        item.load_buffers(buffers, f"{prefix}{name}.{key}.")

    def decay_parameter_names(self):
        """Names of parameters subject to weight decay (convolution and dense weights)."""
        return {n for n, _ in self.named_parameters() if n.endswith("weight")}

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def to(self, dtype):
        """Cast parameters and buffers in place."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        for m in self._walk():
            if isinstance(m, BatchNorm):
                for s in m.stats:
                    if s is not None:
                        s.mean = s.mean.astype(dtype)
                        s.var = s.var.astype(dtype)
        return self

    def _walk(self):
        yield self
        for child in self.children():
            yield from child._walk()

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Conv(Module):
    def __init__(self, rng, in_channels, out_channels, kernel, stride=1, groups=1):
        fan_in = (in_channels // groups) * kernel * kernel
        self.weight = uniform_init(rng, (out_channels, in_channels // groups, kernel, kernel), fan_in)
        self.bias = uniform_init(rng, (out_channels,), fan_in)
        self.stride = stride
        self.padding = kernel // 2
        self.groups = groups

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Dense(Module):
    def __init__(self, rng, in_features, out_features):
        self.weight = uniform_init(rng, (in_features, out_features), in_features)
        self.bias = uniform_init(rng, (out_features,), in_features)

    def __call__(self, x):
        return fully_connected(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalization with shared affine parameters and per-step running statistics.

    ``step`` selects which running-stat slot is read and written. Eval mode at a
    step that was never trained falls back to the last populated slot.
    """

    def __init__(self, channels, steps=1, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.stats = [None] * steps

    def _slot(self, step, mode):
        if step >= len(self.stats):
            self.stats.extend([None] * (step + 1 - len(self.stats)))
        if mode == "train":
            if self.stats[step] is None:
                self.stats[step] = RunningStats(self.channels, self.gamma.dtype)
            return self.stats[step]
        for s in range(step, -1, -1):
            if self.stats[s] is not None and self.stats[s].updates:
                return self.stats[s]
        populated = [s for s in self.stats if s is not None and s.updates]
        return populated[-1] if populated else RunningStats(self.channels, self.gamma.dtype)

    def __call__(self, x, mode, step=0):
        return batchnorm(x, self.gamma, self.beta, mode, self._slot(step, mode), self.momentum, self.eps)

    def named_buffers(self, prefix=""):
        for t, s in enumerate(self.stats):
            if s is not None and s.updates:
                yield f"{prefix}running_mean.{t}", s.mean
                yield f"{prefix}running_var.{t}", s.var
                yield f"{prefix}running_updates.{t}", np.array([s.updates], dtype=np.float32)

    def load_buffers(self, buffers, prefix=""):
        head = f"{prefix}running_mean."
        steps = sorted(int(k[len(head):]) for k in buffers if k.startswith(head) and k[len(head):].isdigit())
        size = max([len(self.stats)] + [t + 1 for t in steps])
        self.stats = [None] * size
        for t in steps:
            s = RunningStats(self.channels, self.gamma.dtype)
            s.mean = np.array(buffers[f"{prefix}running_mean.{t}"], dtype=self.gamma.dtype)
            s.var = np.array(buffers[f"{prefix}running_var.{t}"], dtype=self.gamma.dtype)
            s.updates = int(np.asarray(buffers[f"{prefix}running_updates.{t}"]).reshape(-1)[0])
            self.stats[t] = s


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + (g + decay * p)``; ``p <- p - lr * v``. Gradients are
    left untouched; the caller zeroes them.
    """

    def __init__(self, params: dict, lr=0.1, momentum=0.9, weight_decay=0.0, decay_names=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_names = set(params) if decay_names is None else set(decay_names)
        self.velocity = {}

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity, self.decay_names)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def sgd_step(params: dict, lr, momentum, weight_decay, velocity: dict, decay_names=None):
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay and (decay_names is None or name in decay_names):
            g = g + weight_decay * p.data
        if momentum:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v.astype(p.data.dtype, copy=False)
            g = velocity[name]
        p.data = (p.data - lr * g).astype(p.data.dtype, copy=False)

