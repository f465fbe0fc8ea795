"""Central finite-difference oracle for checking recorded backward rules.

The oracle only ever calls the forward function; it never looks at the tape.
Run it on float64 tensors (see :func:`feedbacknet.tensor.precision`).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn, tensor: Tensor, indices=None, h=1e-6):
    """d fn() / d tensor.data[idx] by central differences, for the chosen flat indices."""
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor=1e-8):
    """|a - n| / max(|a|, |n|), with entries where both sides are below ``floor`` scored 0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n) / np.maximum(denom, floor)
    err[denom < floor] = 0.0
    return err


def check_gradients(fn, tensors: dict, samples=None, rng=None, h=1e-6, floor=1e-8):
    """Compare analytic gradients of scalar ``fn()`` against finite differences.

    ``tensors`` maps names to leaf tensors. With ``samples`` set, at most that
    many entries per tensor are checked, chosen by ``rng``. Returns a dict of
    name -> array of relative errors.
    """
    for t in tensors.values():
        t.grad = None
    backward(fn())
    report = {}
    for name, t in tensors.items():
        size = t.data.size
        if samples is not None and size > samples:
            idx = np.sort(rng.choice(size, samples, replace=False))
        else:
            idx = np.arange(size)
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)[idx]
        num = numeric_grad(fn, t, idx, h)
        report[name] = relative_errors(analytic, np.array([num[i] for i in idx]), floor)
    return report


def max_error(report: dict) -> float:
    return max((float(e.max()) for e in report.values() if e.size), default=0.0)
