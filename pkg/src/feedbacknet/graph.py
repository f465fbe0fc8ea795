"""Critical-path depth of unrolled feedback versus feedforward computation graphs.

Under unlimited parallel hardware the latency of a network is the depth of its
computation graph. A feedforward net of depth D has depth D - 1. A feedback net
with ``m`` iterations over ``n`` physical layers, Stack-``s`` modules, can start
iteration ``i`` as soon as the first module of iteration ``i - 1`` has produced
its state, so each extra iteration costs only ``s`` more layer times.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class GraphSpec:
    m: int  # iterations
    n: int  # physical depth
    s: int = 1  # stack length
    layer_time: float = 1.0

    def __post_init__(self):
        if min(self.m, self.n, self.s) < 1:
            raise ConfigError(f"m, n and s must all be >= 1, got {self.m}, {self.n}, {self.s}")
        if self.n % self.s:
            raise ConfigError(f"stack length {self.s} must divide physical depth {self.n}")
        if self.layer_time <= 0:
            raise ConfigError("layer_time must be positive")


def depth_feedforward(D: int) -> int:
    if D < 1:
        raise ConfigError(f"depth must be >= 1, got {D}")
    return D - 1


def depth_feedback(spec: GraphSpec) -> int:
    """n + s(m - 1); equals m + n - 1 for Stack-1."""
    return spec.n + spec.s * (spec.m - 1)


def availability_times(spec: GraphSpec) -> list:
    """Time at which each iteration's prediction is ready: (n + s*i) * layer_time, i = 0..m-1."""
    return [(spec.n + spec.s * i) * spec.layer_time for i in range(spec.m)]


def ensemble_equivalent_depths(spec: GraphSpec) -> list:
    """Depths of feedforward nets that finish at the same instants as each iteration."""
    return [round(t / spec.layer_time) for t in availability_times(spec)]


def report(spec: GraphSpec) -> str:
    """Plain-text table for the ``analyze-graph`` command."""
    virtual = spec.m * spec.n
    lines = [
        f"iterations m = {spec.m}, physical depth n = {spec.n}, stack length s = {spec.s}",
        f"virtual depth m*n                     = {virtual}",
        f"feedforward graph depth (m*n - 1)     = {depth_feedforward(virtual)}",
        f"feedback graph depth (n + s*(m - 1))  = {depth_feedback(spec)}"
        + ("" if spec.s == 1 else "   [Stack-s generalisation, derived]"),
        "",
        f"{'iteration':>9}  {'virtual depth':>13}  {'available at':>12}  {'ensemble depth':>14}",
    ]
    times = availability_times(spec)
    depths = ensemble_equivalent_depths(spec)
    for i, (t, d) in enumerate(zip(times, depths), start=1):
        lines.append(f"{i:>9}  {i * spec.n:>13}  {t:>11g}T  {d:>14}")
    return "\n".join(lines)
