"""Two-level label taxonomy: coarse probabilities from fine ones, and taxonomy compliance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError, TaxonomyError
from .tensor import Tensor, make_op


@dataclass(frozen=True)
class Taxonomy:
    parent: tuple  # parent[fine_id] = coarse_id

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        if not parent:
            raise TaxonomyError("taxonomy has no fine classes")
        if min(parent) < 0:
            raise TaxonomyError("coarse ids must be non-negative")
        missing = sorted(set(range(max(parent) + 1)) - set(parent))
        if missing:
            raise TaxonomyError(f"coarse classes without children: {missing}")

    @property
    def fine_count(self):
        return len(self.parent)

    @property
    def coarse_count(self):
        return max(self.parent) + 1

    @property
    def mapping(self) -> np.ndarray:
        """K x G binary matrix; row i has a single 1 in column parent(i)."""
        m = np.zeros((self.fine_count, self.coarse_count))
        m[np.arange(self.fine_count), self.parent] = 1.0
        return m

    def children(self, coarse_id):
        return [i for i, p in enumerate(self.parent) if p == coarse_id]

    def coarse_of(self, fine_ids):
        return np.asarray(self.parent)[np.asarray(fine_ids, dtype=np.int64)]

    @classmethod
    def balanced(cls, coarse_count, children_per_coarse):
        return cls(tuple(i // children_per_coarse for i in range(coarse_count * children_per_coarse)))

    @classmethod
    def from_pairs(cls, pairs) -> "Taxonomy":
        """Build from (fine, coarse) observations; conflicting parents are an error."""
        parent = {}
        for fine, coarse in pairs:
            fine, coarse = int(fine), int(coarse)
            if parent.setdefault(fine, coarse) != coarse:
                raise TaxonomyError(f"fine class {fine} seen under coarse classes {parent[fine]} and {coarse}")
        if not parent:
            raise TaxonomyError("no label pairs given")
        gaps = sorted(set(range(max(parent) + 1)) - set(parent))
        if gaps:
            raise TaxonomyError(f"fine ids are not contiguous; missing {gaps[:10]}")
        return cls(tuple(parent[i] for i in range(len(parent))))

    def to_text(self) -> str:
        return "".join(f"{i} {p}\n" for i, p in enumerate(self.parent))


def parse_taxonomy(text: str) -> Taxonomy:
    """Read ``<fine_id> <coarse_id>`` lines; blank lines and ``#`` comments are skipped."""
    parent = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise TaxonomyError(f"line {lineno}: expected '<fine_id> <coarse_id>', got {raw!r}")
        try:
            fine, coarse = int(fields[0]), int(fields[1])
        except ValueError:
            raise TaxonomyError(f"line {lineno}: ids must be integers, got {raw!r}") from None
        if fine < 0 or coarse < 0:
            raise TaxonomyError(f"line {lineno}: ids must be non-negative")
        if fine in parent:
            raise TaxonomyError(f"line {lineno}: fine class {fine} listed twice")
        parent[fine] = coarse
    if not parent:
        raise TaxonomyError("taxonomy file is empty")
    gaps = sorted(set(range(max(parent) + 1)) - set(parent))
    if gaps:
        raise TaxonomyError(f"fine ids must be contiguous from 0; missing {gaps[:10]}")
    return Taxonomy(tuple(parent[i] for i in range(len(parent))))


def load_taxonomy(path) -> Taxonomy:
    with open(path, encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


def coarse_distribution(fine_probs, tax: Taxonomy, tol=1e-5) -> np.ndarray:
    """Coarse probability = sum of the fine probabilities of its children."""
    p = np.asarray(fine_probs.data if isinstance(fine_probs, Tensor) else fine_probs)
    if p.ndim != 2 or p.shape[1] != tax.fine_count:
        raise ShapeError(f"expected [N, {tax.fine_count}] fine probabilities, got {list(p.shape)}")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        worst = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(f"row {worst} of fine probabilities sums to {sums[worst]:.8f}, not 1")
    return p @ tax.mapping.astype(p.dtype)


def coarse_loss(fine_logits: Tensor, coarse_targets, tax: Taxonomy) -> Tensor:
    """Mean of -log P(coarse target), with P(coarse) the child-summed fine softmax.

    Evaluated as logsumexp(children) - logsumexp(all) so small coarse masses
    stay accurate.
    """
    if fine_logits.ndim != 2 or fine_logits.shape[1] != tax.fine_count:
        raise ShapeError(f"expected [N, {tax.fine_count}] logits, got {list(fine_logits.shape)}")
    n = fine_logits.shape[0]
    t = np.asarray(coarse_targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"expected {n} coarse targets, got {t.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= tax.coarse_count):
        bad = t[(t < 0) | (t >= tax.coarse_count)][0]
        raise IndexError(f"coarse target {bad} out of range [0, {tax.coarse_count})")
    z = fine_logits.data - fine_logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    member = np.asarray(tax.parent)[None, :] == t[:, None]  # [N, K], children of each target
    total = e.sum(axis=1)
    inside = (e * member).sum(axis=1)
    loss = np.asarray((np.log(total) - np.log(inside)).mean(), dtype=fine_logits.dtype)

    def bw(g):
        p = e / total[:, None]
        within = (e * member) / inside[:, None]
        return ((p - within) * (g / n),)

    return make_op(loss, (fine_logits,), bw, "coarse_loss")


def compliance_metric(fine_preds: Sequence[int], fine_targets: Sequence[int], tax: Taxonomy) -> Optional[float]:
    """P(coarse correct | fine wrong); None when no fine prediction is wrong.

    The coarse prediction is the parent of the predicted fine class.
    """
    pred = np.asarray(fine_preds, dtype=np.int64).reshape(-1)
    true = np.asarray(fine_targets, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ContractError("compliance needs at least one prediction")
    if pred.shape != true.shape:
        raise ContractError(f"{pred.size} predictions vs {true.size} targets")
    wrong = pred != true
    if not wrong.any():
        return None
    parent = np.asarray(tax.parent)
    return float(np.mean(parent[pred[wrong]] == parent[true[wrong]]))
