"""ConvLSTM feedback module with multi-layer gate functions.

Each of the eight gate functions (``xi, xf, xc, xo`` on the module input and
``hi, hf, hc, ho`` on the recurrent state) is a stack of ``depth`` Conv+BN
layers. The four input-side stacks are stored together in one
:class:`GateStack` bank (channel block ``g`` belongs to gate ``GATES[g]``), and
likewise the four state-side stacks. A bank runs its first layer as one wide
convolution and later layers as a grouped convolution, which is the same
computation as four separate stacks with separate weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ShapeError
from .module import BatchNorm, Conv, Module
from .tensor import (
    Tensor,
    add,
    channel_fill,
    channel_slice,
    hadamard,
    relu,
    sigmoid,
    tanh,
)

GATES = ("i", "f", "c", "o")


@dataclass(frozen=True)
class GateStackSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    depth: int = 1
    residual: bool = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride, self.depth) < 1:
            raise ShapeError(f"gate stack sizes must be positive: {self}")
        if self.kernel % 2 == 0:
            raise ShapeError(f"gate stack kernel must be odd, got {self.kernel}")

    def output_size(self, size):
        pad = self.kernel // 2
        return (size + 2 * pad - self.kernel) // self.stride + 1


class GateStack(Module):
    """``gates`` parallel Conv->BN stacks that read the same input.

    ReLU sits between layers but not after the last one. With ``residual`` the
    input of each layer from the second on is added back to its normalized output.
    """

    def __init__(self, spec: GateStackSpec, rng, gates=1, steps=1):
        self.spec = spec
        self.gates = gates
        fo = spec.out_channels
        self.convs = [Conv(rng, spec.in_channels, gates * fo, spec.kernel, spec.stride)]
        self.convs += [Conv(rng, gates * fo, gates * fo, spec.kernel, 1, groups=gates)
                       for _ in range(spec.depth - 1)]
        self.norms = [BatchNorm(gates * fo, steps) for _ in range(spec.depth)]

    def __call__(self, x: Tensor, mode="train", step=0) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"gate stack expects {self.spec.in_channels} input channels, got shape {list(x.shape)}")
        h = x
        last = self.spec.depth - 1
        for layer, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            z = norm(conv(h), mode, step)
            if self.spec.residual and layer > 0:
                z = add(z, h)
            h = relu(z) if layer < last else z
        return h

    def zero_input(self, shape, mode="train", step=0) -> Tensor:
        """Stack output for an all-zero input; ``shape`` is one gate's [N, C, H, W] output.

        Convolving zeros yields the bias at every position, and train-mode
        normalization of a constant channel yields ``beta``, so the first layer
        is a per-channel constant built from its ``beta``. The same value is
        used in eval mode, where running statistics of a constant channel would
        otherwise amplify rounding noise by 1/sqrt(eps). Later layers see a
        constant map whose zero-padded borders differ, and run normally.
        """
        shape = (shape[0], self.gates * self.spec.out_channels, shape[2], shape[3])
        h = None
        last = self.spec.depth - 1
        for layer, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            if layer == 0:
                z = channel_fill(norm.beta, shape)
            else:
                z = norm(conv(h), mode, step)
                if self.spec.residual:
                    z = add(z, h)
            h = relu(z) if layer < last else z
        return h

    def gate(self, out: Tensor, g: int) -> Tensor:
        fo = self.spec.out_channels
        if self.gates == 1:
            return out
        return channel_slice(out, g * fo, (g + 1) * fo)


def gate_stack_apply(stack: GateStack, x: Tensor, mode="train", step=0) -> Tensor:
    return stack(x, mode, step)


@dataclass
class CellState:
    H: Tensor
    C: Tensor

    def __post_init__(self):
        if self.H.shape != self.C.shape:
            raise ShapeError(f"cell state H {list(self.H.shape)} and C {list(self.C.shape)} differ")

    @classmethod
    def zeros(cls, shape, dtype=None):
        return cls(Tensor.zeros(shape, dtype=dtype), Tensor.zeros(shape, dtype=dtype))


class ConvLstmCell(Module):
    """One ConvLSTM module: parameters for all eight gate stacks, shared across iterations.

    ``input_stacks`` holds W_x{i,f,c,o}; its first layer carries the stride.
    ``state_stacks`` holds W_h{i,f,c,o} at stride 1. Normalization running
    statistics are kept per iteration (``steps`` slots).
    """

    def __init__(self, spec: GateStackSpec, rng, steps=1, index=0):
        self.spec = spec
        self.index = index
        self.input_stacks = GateStack(spec, rng, gates=4, steps=steps)
        state_spec = GateStackSpec(spec.out_channels, spec.out_channels, spec.kernel, 1, spec.depth, spec.residual)
        self.state_stacks = GateStack(state_spec, rng, gates=4, steps=steps)
        # forget gate starts biased open
        fo = spec.out_channels
        beta = self.input_stacks.norms[-1].beta
        beta.data[fo : 2 * fo] = 1.0

    def state_shape(self, x_shape):
        n, _, h, w = x_shape
        return (n, self.spec.out_channels, self.spec.output_size(h), self.spec.output_size(w))


GateHook = Callable[[str, Tensor], Tensor]


def convlstm_step(cell: ConvLstmCell, x: Tensor, state: Optional[CellState], mode="train", step=0,
                  recurrent_input: Optional[Tensor] = None, hook: Optional[GateHook] = None):
    """Advance one ConvLSTM module by one iteration.

    ``state=None`` is the all-zero initial state. ``recurrent_input`` replaces
    ``state.H`` as the tensor fed to the state-side gate stacks when given.
    ``hook(name, activation)`` may rewrite the activated gates ``i, f, c, o``
    (``c`` is the candidate cell value); tests use it to clamp gates.

    Returns ``(x_out, new_state)`` where ``x_out`` is the new hidden state.
    """
    if x.ndim != 4 or x.shape[1] != cell.spec.in_channels:
        raise ShapeError(
            f"module {cell.index}: expected {cell.spec.in_channels} input channels, got shape {list(x.shape)}")
    shape = cell.state_shape(x.shape)
    if state is not None and state.H.shape != shape:
        raise ShapeError(
            f"module {cell.index}: state shape {list(state.H.shape)} does not match expected {list(shape)}")

    xs = cell.input_stacks(x, mode, step)
    h_in = recurrent_input if recurrent_input is not None else (state.H if state is not None else None)
    if h_in is None:
        hs = cell.state_stacks.zero_input(shape, mode, step)
    else:
        if h_in.shape != shape:
            raise ShapeError(
                f"module {cell.index}: recurrent input {list(h_in.shape)} does not match {list(shape)}")
        hs = cell.state_stacks(h_in, mode, step)
    pre = add(xs, hs)

    gates = {}
    for g, name in enumerate(GATES):
        z = cell.input_stacks.gate(pre, g)
        a = tanh(z) if name == "c" else sigmoid(z)
        gates[name] = hook(name, a) if hook is not None else a

    fresh = hadamard(gates["i"], gates["c"])
    c_new = fresh if state is None else add(hadamard(gates["f"], state.C), fresh)
    h_new = hadamard(gates["o"], tanh(c_new))
    return h_new, CellState(h_new, c_new)


def stack_weights(bank: GateStack, gate: int):
    """Per-gate copies of a bank's weights: list of dicts with conv/bn arrays per layer."""
    fo = bank.spec.out_channels
    sl = slice(gate * fo, (gate + 1) * fo)
    layers = []
    for conv, norm in zip(bank.convs, bank.norms):
        layers.append({
            "weight": np.array(conv.weight.data[sl]),
            "bias": np.array(conv.bias.data[sl]),
            "gamma": np.array(norm.gamma.data[sl]),
            "beta": np.array(norm.beta.data[sl]),
        })
    return layers
