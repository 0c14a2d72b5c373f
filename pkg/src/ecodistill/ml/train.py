"""Optimizers, freeze masks and the epoch loop shared by every trainable model.

A trainable model is anything with

* ``params``: ordered ``dict[str, np.ndarray]`` updated in place,
* ``blocks``: ``dict[str, list[str]]`` grouping parameter names for freezing,
* ``copy()``,
* ``iter_batches(dataset, rng, batch_size)`` yielding ``(batch, weight)``,
* ``batch_loss(P, batch, loss)`` returning a scalar tape variable.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tape, ops
from ..errors import NonFiniteLoss, ValidationError


# ----------------------------------------------------------------- losses

def mse_loss(pred, target):
    d = pred - target
    return ops.mean(d * d)


def nse_loss(pred, target):
    """``1 - NSE`` of a prediction against a fixed target."""
    target = np.asarray(target, dtype=np.float64)
    dev = target - target.mean()
    denom = float(np.sum(dev * dev))
    if denom == 0:
        raise ValidationError("NSE loss needs a non-constant target")
    d = pred - target
    return ops.sum(d * d) * (1.0 / denom)


LOSSES = {"mse": mse_loss, "MSE": mse_loss, "nse": nse_loss, "NseLoss": nse_loss}


def resolve_loss(loss):
    if callable(loss):
        return loss
    try:
        return LOSSES[loss]
    except KeyError:
        raise ValidationError(f"unknown loss {loss!r}") from None


# ------------------------------------------------------------- optimizers

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)
    _t: int = field(default=0, repr=False)

    def step(self, params: dict, grads: dict) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self._m.get(k)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            else:
                v = self._v[k]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self._m[k], self._v[k] = m, v
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class GradientDescent:
    lr: float = 1e-2

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] = params[k] - self.lr * np.asarray(g, dtype=np.float64)


def make_optimizer(spec) -> Adam | GradientDescent:
    if spec is None:
        return Adam()
    if isinstance(spec, (Adam, GradientDescent)):
        return copy.deepcopy(spec)
    spec = dict(spec)
    kind = spec.pop("kind", "adam").lower()
    if kind == "adam":
        return Adam(**spec)
    if kind in ("gd", "sgd", "gradient_descent"):
        return GradientDescent(**spec)
    raise ValidationError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- freezing

@dataclass(frozen=True)
class FreezeMask:
    frozen: frozenset = frozenset()

    @classmethod
    def none(cls) -> "FreezeMask":
        return cls(frozenset())

    @classmethod
    def all_except(cls, model, keep) -> "FreezeMask":
        keep = set(keep)
        unknown = keep - set(model.blocks)
        if unknown:
            raise ValidationError(f"unknown parameter blocks {sorted(unknown)}")
        return cls(frozenset(b for b in model.blocks if b not in keep))

    @classmethod
    def heads_only(cls, model) -> "FreezeMask":
        """Freeze every block except the output heads."""
        return cls.all_except(model, [b for b in model.blocks if b.startswith("head")])

    def trainable(self, model) -> list[str]:
        unknown = self.frozen - set(model.blocks)
        if unknown:
            raise ValidationError(f"unknown parameter blocks {sorted(unknown)}")
        names = []
        for block, keys in model.blocks.items():
            if block not in self.frozen:
                names.extend(keys)
        return names


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: object
    loss_trace: list


def train_epochs(model, dataset, loss="mse", optimizer=None, epochs: int = 1,
                 freeze: FreezeMask | None = None, seed: int = 0, batch_size: int | None = 64,
                 optimizer_state=None) -> TrainResult:
    """Train a copy of ``model``; frozen blocks are never touched.

    The loss trace holds one batch-weighted mean loss per epoch. Shuffling
    comes only from ``numpy.random.default_rng(seed)``.
    """
    model = model.copy()
    freeze = freeze or FreezeMask.none()
    names = freeze.trainable(model)
    if epochs > 0 and not names:
        raise ValidationError("every parameter block is frozen")
    loss_fn = resolve_loss(loss)
    opt = optimizer_state if optimizer_state is not None else make_optimizer(optimizer)
    rng = np.random.default_rng(seed)
    trace = []
    for epoch in range(epochs):
        total, weight = 0.0, 0.0
        for batch, w in model.iter_batches(dataset, rng, batch_size):
            tape = Tape()
            P = dict(model.params)
            for k in names:
                P[k] = tape.var(model.params[k])
            L = model.batch_loss(P, batch, loss_fn)
            lv = float(ops.value(L))
            if not math.isfinite(lv):
                raise NonFiniteLoss(epoch, lv)
            grads = tape.backward(L)
            opt.step(model.params, {k: grads[P[k]] for k in names})
            total += lv * w
            weight += w
        trace.append(total / weight if weight else float("nan"))
    return TrainResult(model, trace)


class FunctionModel:
    """A bag of named parameters with a user loss ``fn(P, batch) -> scalar``.

    Used for process-parameter calibration and for quick convex checks; each
    epoch is one full-batch step.
    """

    def __init__(self, params: dict, fn, blocks: dict | None = None):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.fn = fn
        self.blocks = blocks or {k: [k] for k in self.params}

    def copy(self):
        return FunctionModel({k: v.copy() for k, v in self.params.items()}, self.fn,
                             {k: list(v) for k, v in self.blocks.items()})

    def iter_batches(self, dataset, rng, batch_size):
        yield dataset, 1.0

    def batch_loss(self, P, batch, loss_fn):
        return self.fn(P, batch)
