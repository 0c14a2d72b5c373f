"""Finite-difference gradient checking and bounded reparameterization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidBounds, NonFiniteEvaluation
from .core import Tape, Var, sigmoid, value


@dataclass
class BoundedParam:
    """A parameter kept strictly inside ``(lo, hi)`` via ``lo + (hi - lo) * sigmoid(raw)``."""

    raw: object
    lo: float
    hi: float

    @property
    def value(self):
        return self.lo + (self.hi - self.lo) * sigmoid(self.raw)


def bounded(raw, lo: float, hi: float) -> BoundedParam:
    if not lo < hi:
        raise InvalidBounds(f"need lo < hi, got ({lo}, {hi})")
    return BoundedParam(raw, float(lo), float(hi))


def raw_for(x: float, lo: float, hi: float) -> float:
    """Inverse of the bounded map: the raw value placing the parameter at ``x``."""
    if not lo < x < hi:
        raise InvalidBounds(f"{x} is not strictly inside ({lo}, {hi})")
    u = (x - lo) / (hi - lo)
    return math.log(u / (1.0 - u))


def _as_inputs(x):
    if isinstance(x, (list, tuple)):
        return [np.asarray(v, dtype=np.float64) if np.ndim(v) else float(v) for v in x], True
    if np.ndim(x):
        return [np.asarray(x, dtype=np.float64)], False
    return [float(x)], False


def _eval_plain(f, inputs):
    out = value(f(*inputs))
    out = float(out)
    if not math.isfinite(out):
        raise NonFiniteEvaluation(f"function returned {out!r}")
    return out


def gradient_errors(f, x, eps: float = 1e-6, max_coords: int | None = None, seed: int = 0):
    """Per-input max relative error between reverse-mode and central differences.

    ``f`` is called as ``f(*inputs)`` with one argument per entry of ``x``
    (a float, an array, or a list of those) and must return a scalar.
    Error per coordinate is ``|ad - fd| / max(1, |fd|)``. With ``max_coords``
    only a seeded random subset of each input's coordinates is probed.
    """
    inputs, _ = _as_inputs(x)
    tape = Tape()
    leaves = [tape.var(v) for v in inputs]
    loss = f(*leaves)
    if not isinstance(loss, Var):
        raise NonFiniteEvaluation("function output does not depend on its inputs")
    if not math.isfinite(float(loss.value)):
        raise NonFiniteEvaluation(f"function returned {loss.value!r}")
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = []
    for k, leaf in enumerate(leaves):
        ad = np.atleast_1d(np.asarray(grads[leaf], dtype=np.float64)).ravel()
        base = inputs[k]
        n = 1 if not isinstance(base, np.ndarray) else base.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            plus = list(inputs)
            minus = list(inputs)
            if isinstance(base, np.ndarray):
                p = base.copy().ravel()
                m = base.copy().ravel()
                p[c] += eps
                m[c] -= eps
                plus[k] = p.reshape(base.shape)
                minus[k] = m.reshape(base.shape)
            else:
                plus[k] = base + eps
                minus[k] = base - eps
            fd = (_eval_plain(f, plus) - _eval_plain(f, minus)) / (2.0 * eps)
            err = abs(ad[c] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        errors.append(worst)
    return errors


def gradient_check(f, x, eps: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error of the reverse-mode gradient of ``f`` at ``x``."""
    return max(gradient_errors(f, x, eps=eps, max_coords=max_coords, seed=seed))
