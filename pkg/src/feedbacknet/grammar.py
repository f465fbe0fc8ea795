"""Parser for the compact layer grammar used to describe architectures.

Layers are joined by ``->``; ``{...}^n`` repeats a group ``n`` times::

    C(3,16,3,1)->BR->Iterate(16,32,3,2,2,4)->Iterate(32,64,3,2,2,4)->Avg(4,1)->FC(64,12)

Supported layers: ``C(fi,fo,k,s)``, ``BR``, ``BN``, ``ReLU``,
``Iterate(fi,fo,k,s,n,t)``, ``Avg(k,s)`` and ``FC(fi,fo)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ConfigError

_ARITY = {"C": 4, "Iterate": 6, "Avg": 2, "FC": 2, "BR": 0, "BN": 0, "ReLU": 0}
_LAYER = re.compile(r"^([A-Za-z]+)\s*(?:\(([^()]*)\))?$")


@dataclass(frozen=True)
class Layer:
    kind: str
    args: tuple

    def __str__(self):
        if not self.args:
            return self.kind
        return f"{self.kind}({','.join(str(a) for a in self.args)})"


def _split_top(text):
    parts, depth, buf = [], 0, []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch in "({":
            depth += 1
        elif ch in ")}":
            depth -= 1
            if depth < 0:
                raise ConfigError(f"unbalanced bracket at position {i} in {text!r}")
        if depth == 0 and text.startswith("->", i):
            parts.append("".join(buf))
            buf = []
            i += 2
            continue
        buf.append(ch)
        i += 1
    if depth:
        raise ConfigError(f"unbalanced bracket in {text!r}")
    parts.append("".join(buf))
    return [p.strip() for p in parts if p.strip()]


def parse_layers(text: str) -> list[Layer]:
    text = text.replace("→", "->").replace(" ", "")
    layers = []
    for part in _split_top(text):
        rep = re.fullmatch(r"\{(.*)\}\^(\d+)", part)
        if rep:
            inner = parse_layers(rep.group(1))
            layers.extend(inner * int(rep.group(2)))
            continue
        m = _LAYER.match(part)
        if not m or m.group(1) not in _ARITY:
            raise ConfigError(f"unrecognized layer {part!r}")
        kind, raw = m.group(1), m.group(2)
        args = tuple(int(a) for a in raw.split(",")) if raw else ()
        if len(args) != _ARITY[kind]:
            raise ConfigError(f"{kind} takes {_ARITY[kind]} arguments, got {part!r}")
        if any(a < 0 for a in args):
            raise ConfigError(f"negative argument in {part!r}")
        layers.append(Layer(kind, args))
    return layers


def format_layers(layers) -> str:
    return "->".join(str(layer) for layer in layers)
