"""Feedback network unrolled over iterations, plus feedforward baselines."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cell import ConvLstmCell, GateStackSpec, convlstm_step
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .grammar import Layer, format_layers, parse_layers
from .module import SGD, BatchNorm, Conv, Dense, Module
from .tensor import (
    Rng,
    Tensor,
    add,
    avg_pool,
    flatten,
    no_grad,
    relu,
    scale,
    softmax_cross_entropy,
)

SKIP_PLACEMENTS = ("output", "recurrent")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class IterateSpec:
    """One ``Iterate(fi,fo,k,s,n,t)`` block: a ConvLSTM module with Stack-``stack`` gates."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    stack: int
    iterations: int

    def gate_spec(self, residual=True):
        return GateStackSpec(self.in_channels, self.out_channels, self.kernel, self.stride, self.stack, residual)


@dataclass(frozen=True)
class FeedbackNetSpec:
    stem: ConvSpec
    modules: tuple
    pool: tuple
    fc_in: int
    num_classes: int
    skip: bool = True
    skip_n: int = 2
    skip_placement: str = "output"
    gamma: float = 1.0
    last_loss_only: bool = False
    residual: bool = True

    def __post_init__(self):
        if not self.modules:
            raise ConfigError("a feedback network needs at least one Iterate block")
        counts = {m.iterations for m in self.modules}
        if len(counts) != 1:
            raise ConfigError(f"all Iterate blocks must share one iteration count, got {sorted(counts)}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        chan = self.stem.out_channels
        for i, m in enumerate(self.modules):
            if m.in_channels != chan:
                raise ConfigError(f"Iterate block {i} expects {m.in_channels} channels but receives {chan}")
            if m.kernel % 2 == 0 or m.stack < 1:
                raise ConfigError(f"Iterate block {i} needs an odd kernel and stack >= 1")
            chan = m.out_channels
        if self.fc_in % chan:
            raise ConfigError(f"FC input {self.fc_in} is not a multiple of the last block's {chan} channels")
        if self.skip and self.skip_n < 1:
            raise ConfigError("skip length must be >= 1 when skips are enabled (n = 0 would add a state to itself)")
        if self.skip_placement not in SKIP_PLACEMENTS:
            raise ConfigError(f"skip placement must be one of {SKIP_PLACEMENTS}, got {self.skip_placement!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @property
    def iterations(self):
        return self.modules[0].iterations

    @property
    def stack_length(self):
        stacks = {m.stack for m in self.modules}
        return stacks.pop() if len(stacks) == 1 else None

    @property
    def physical_depth(self):
        return sum(m.stack for m in self.modules)

    @property
    def virtual_depth(self):
        return self.physical_depth * self.iterations

    @property
    def skip_active(self):
        return self.skip and self.skip_n < self.iterations

    def layers(self):
        out = [Layer("C", (self.stem.in_channels, self.stem.out_channels, self.stem.kernel, self.stem.stride)),
               Layer("BR", ())]
        out += [Layer("Iterate", (m.in_channels, m.out_channels, m.kernel, m.stride, m.stack, m.iterations))
                for m in self.modules]
        out += [Layer("Avg", tuple(self.pool)), Layer("FC", (self.fc_in, self.num_classes))]
        return out

    def to_text(self):
        """Canonical description; everything that changes parameters or the forward pass."""
        skip = f"skip={self.skip_n}:{self.skip_placement}" if self.skip else "skip=off"
        return f"{format_layers(self.layers())} | {skip} | residual={int(self.residual)}"

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    @classmethod
    def from_grammar(cls, text: str, **options) -> "FeedbackNetSpec":
        layers = parse_layers(text)
        if len(layers) < 4 or layers[0].kind != "C" or layers[1].kind != "BR":
            raise ConfigError(f"architecture must start with C(...)->BR, got {text!r}")
        stem = ConvSpec(*layers[0].args)
        modules, rest = [], layers[2:]
        while rest and rest[0].kind == "Iterate":
            modules.append(IterateSpec(*rest[0].args))
            rest = rest[1:]
        if [l.kind for l in rest] != ["Avg", "FC"]:
            raise ConfigError(f"architecture must end with Avg(...)->FC(...), got {format_layers(rest)!r}")
        return cls(stem=stem, modules=tuple(modules), pool=rest[0].args, fc_in=rest[1].args[0],
                   num_classes=rest[1].args[1], **options)

    @classmethod
    def from_text(cls, text: str, **options) -> "FeedbackNetSpec":
        """Inverse of :meth:`to_text`; training-only options (gamma, loss mode) come from ``options``."""
        parts = [p.strip() for p in text.split("|")]
        if len(parts) != 3 or not parts[1].startswith("skip=") or not parts[2].startswith("residual="):
            raise ConfigError(f"not a canonical architecture description: {text!r}")
        skip = parts[1][len("skip="):]
        if skip == "off":
            skip_opts = dict(skip=False)
        else:
            n, _, placement = skip.partition(":")
            skip_opts = dict(skip=True, skip_n=int(n), skip_placement=placement)
        return cls.from_grammar(parts[0], residual=parts[2] == "residual=1", **skip_opts, **options)

    @classmethod
    def default(cls, num_classes=12, stack=2, iterations=4, image_size=16, **options) -> "FeedbackNetSpec":
        """Desk-scale recipe: C(3,16,3,1)->BR, Iterate(16,32,3,2), Iterate(32,64,3,2), global Avg, FC."""
        pool = -(-image_size // 4)
        return cls(
            stem=ConvSpec(3, 16, 3, 1),
            modules=(IterateSpec(16, 32, 3, 2, stack, iterations), IterateSpec(32, 64, 3, 2, stack, iterations)),
            pool=(pool, 1),
            fc_in=64,
            num_classes=num_classes,
            **options,
        )


def recurrent_feedforward_mode(spec: FeedbackNetSpec) -> FeedbackNetSpec:
    """Same network, trained with the loss of the final iteration only."""
    return dataclasses.replace(spec, last_loss_only=True)


@dataclass
class IterationTrace:
    logits: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    pooled: list = field(default_factory=list)
    loss: Optional[Tensor] = None

    @property
    def iterations(self):
        return len(self.logits)


def total_loss(trace: IterationTrace, gamma: float) -> Tensor:
    """sum_{t=1..T} gamma^t * L_t, with t counted from 1."""
    if not trace.losses:
        raise ContractError("trace carries no per-iteration losses")
    out = None
    for t, loss in enumerate(trace.losses, start=1):
        term = scale(loss, gamma**t)
        out = term if out is None else add(out, term)
    return out


def training_loss(trace: IterationTrace, spec: FeedbackNetSpec) -> Tensor:
    if spec.last_loss_only:
        return trace.losses[-1]
    return total_loss(trace, spec.gamma)


class FeedbackNet(Module):
    def __init__(self, spec: FeedbackNetSpec, rng: Rng):
        self.spec = spec
        T = spec.iterations
        self.stem = Conv(rng, spec.stem.in_channels, spec.stem.out_channels, spec.stem.kernel, spec.stem.stride)
        self.stem_norm = BatchNorm(spec.stem.out_channels)
        self.cells = [ConvLstmCell(m.gate_spec(spec.residual), rng, steps=T, index=d)
                      for d, m in enumerate(spec.modules)]
        self.head = Dense(rng, spec.fc_in, spec.num_classes)

    def representation(self, x: Tensor, mode: str) -> Tensor:
        return relu(self.stem_norm(self.stem(x), mode))

    def __call__(self, batch, mode="train", targets=None, hook=None) -> IterationTrace:
        return unroll_forward(self, batch, mode, targets, hook)


def unroll_forward(net: FeedbackNet, batch, mode="train", targets=None, hook=None) -> IterationTrace:
    """Run all iterations on one batch.

    The stem output is the input of the first module at every iteration. With
    skips enabled, module ``d`` at iteration ``t`` also receives ``H[d][t-n]``:
    added to its output before the next module (``output`` placement) or to the
    recurrent state its gates read (``recurrent`` placement). States before the
    first iteration are zero. With ``targets`` the trace carries per-iteration
    cross-entropy and the training loss for ``net.spec``.
    """
    spec = net.spec
    x0 = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x0.ndim != 4 or x0.shape[1] != spec.stem.in_channels:
        raise ShapeError(f"expected a [N, {spec.stem.in_channels}, H, W] batch, got {list(x0.shape)}")
    T, n = spec.iterations, spec.skip_n
    stem = net.representation(x0, mode)
    states = [None] * len(net.cells)
    history = [[] for _ in net.cells]
    trace = IterationTrace()
    for t in range(1, T + 1):
        x = stem
        for d, cell in enumerate(net.cells):
            earlier = history[d][t - n - 1] if spec.skip and t - n >= 1 else None
            rec = None
            if earlier is not None and spec.skip_placement == "recurrent":
                rec = add(states[d].H, earlier)
            h, states[d] = convlstm_step(cell, x, states[d], mode, t - 1, rec, hook)
            history[d].append(h)
            x = add(h, earlier) if earlier is not None and spec.skip_placement == "output" else h
        pooled = flatten(avg_pool(x, *spec.pool))
        if pooled.shape[1] != spec.fc_in:
            raise ShapeError(
                f"post-process yields {pooled.shape[1]} features but FC expects {spec.fc_in}; check input size")
        logits = net.head(pooled)
        trace.pooled.append(pooled)
        trace.logits.append(logits)
        if targets is not None:
            loss = softmax_cross_entropy(logits, targets)
            if not math.isfinite(float(loss.data)):
                raise NumericError("non-finite loss", iteration=t)
            trace.losses.append(loss)
    if targets is not None:
        trace.loss = training_loss(trace, spec)
    return trace


# ---------------------------------------------------------------- feedforward


@dataclass(frozen=True)
class FeedforwardSpec:
    """Plain (VGG-style) or residual stack: C(16,32,3,2), {C(32,32,3,1)}^(D/2-1), C(32,64,3,2), {C(64,64,3,1)}^(D/2-1)."""

    depth: int
    residual: bool = True
    aux_head_depths: tuple = ()
    num_classes: int = 12
    stem_channels: int = 16
    widths: tuple = (32, 64)

    def __post_init__(self):
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"feedforward depth must be even and >= 2, got {self.depth}")
        bad = [d for d in self.aux_head_depths if not 1 <= d <= self.depth]
        if bad:
            raise ConfigError(f"aux head depths {bad} outside 1..{self.depth}")

    def layer_plan(self):
        plan, fi = [], self.stem_channels
        for width in self.widths:
            plan.append((fi, width, 2))
            plan += [(width, width, 1)] * (self.depth // 2 - 1)
            fi = width
        return plan

    def layers(self):
        out = [Layer("C", (3, self.stem_channels, 3, 1)), Layer("BR", ())]
        for fi, fo, s in self.layer_plan():
            out += [Layer("C", (fi, fo, 3, s)), Layer("BR", ())]
        return out

    def fingerprint(self) -> bytes:
        text = f"{format_layers(self.layers())} | residual={int(self.residual)} | K={self.num_classes}"
        return hashlib.sha256(text.encode("utf-8")).digest()


class FeedforwardNet(Module):
    def __init__(self, spec: FeedforwardSpec, rng: Rng):
        self.spec = spec
        self.stem = Conv(rng, 3, spec.stem_channels, 3, 1)
        self.stem_norm = BatchNorm(spec.stem_channels)
        plan = spec.layer_plan()
        self.convs = [Conv(rng, fi, fo, 3, s) for fi, fo, s in plan]
        self.norms = [BatchNorm(fo) for _, fo, _ in plan]
        self.channels = [fo for _, fo, _ in plan]
        self.head = Dense(rng, self.channels[-1], spec.num_classes)
        self.aux_heads = {}
        self.trained = False

    def features(self, batch, mode="train", depths: Sequence[int] = ()):
        """Pooled representation after each requested depth (1-based)."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        h = relu(self.stem_norm(self.stem(x), mode))
        wanted = set(depths) | {self.spec.depth}
        out = {}
        for d, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            z = norm(conv(h), mode)
            if self.spec.residual and z.shape == h.shape:
                z = add(z, h)
            h = relu(z)
            if d in wanted:
                out[d] = flatten(avg_pool(h, h.shape[2], 1))
        return out

    def __call__(self, batch, mode="train"):
        return feedforward_forward(self, batch, mode)


def feedforward_forward(net: FeedforwardNet, batch, mode="train") -> dict:
    """Logits per head: ``"endpoint"`` for the trained classifier, plus one entry per aux-head depth."""
    feats = net.features(batch, mode, tuple(net.aux_heads))
    out = {"endpoint": net.head(feats[net.spec.depth])}
    for d, head in sorted(net.aux_heads.items()):
        out[d] = head(feats[d])
    return out


def train_aux_heads(net: FeedforwardNet, depths: Sequence[int], images: np.ndarray, labels: np.ndarray,
                    rng: Rng, epochs=30, lr=0.1, momentum=0.9, batch_size=64) -> dict:
    """Train pooling->FC heads on a frozen backbone, shallowest depth first.

    The backbone runs in eval mode without recording gradients, so its
    parameters and statistics are not touched.
    """
    if not net.trained:
        raise ContractError("aux heads need a fully trained backbone; train the feedforward net first")
    depths = sorted(set(depths))
    bad = [d for d in depths if not 1 <= d <= net.spec.depth]
    if bad:
        raise ContractError(f"head depths {bad} outside 1..{net.spec.depth}")
    labels = np.asarray(labels)
    feats = {d: [] for d in depths}
    with no_grad():
        for start in range(0, len(images), 256):
            out = net.features(images[start : start + 256], "eval", depths)
            for d in depths:
                feats[d].append(out[d].data)
    heads = {}
    for d in depths:
        x = np.concatenate(feats[d])
        head = Dense(rng, x.shape[1], net.spec.num_classes)
        opt = SGD(head.parameters(), lr=lr, momentum=momentum)
        for _ in range(epochs):
            order = rng.permutation(len(x))
            for start in range(0, len(x), batch_size):
                idx = order[start : start + batch_size]
                opt.zero_grad()
                loss = softmax_cross_entropy(head(Tensor(x[idx])), labels[idx])
                loss.backward()
                opt.step()
        heads[d] = head
        net.aux_heads[d] = head
    return heads
