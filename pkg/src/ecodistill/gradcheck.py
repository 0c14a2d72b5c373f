"""Finite-difference audits of the differentiable pieces, grouped by parameter block."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import gradient_errors, ops, value
from .ml.train import mse_loss
from .process.hbv import HbvParams, HbvState, hbv_step
from .process.nitrification import SoilEnv
from .process.nitrogen import NitrogenParams, NitrogenState, nitrogen_step

GRAD_TOL = 1e-4


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)     # block -> max relative error
    kinks: list = field(default_factory=list)      # explanations of excluded points

    @property
    def ok(self) -> bool:
        return not self.kinks and all(e < GRAD_TOL for e in self.errors.values())

    def merge(self, other: "GradReport") -> "GradReport":
        self.errors.update(other.errors)
        self.kinks.extend(other.kinks)
        return self


def _continuous(params):
    return [f.name for f in fields(params) if f.name != "MAXBAS"]


def hbv_gradients(p: HbvParams, forcing: dict, steps: int = 30, prefix: str = "hbv") -> GradReport:
    """Errors of d(sum q_out + sum et)/d(param) over the first ``steps`` days."""
    rep = GradReport()
    pr, tm, pe = (np.asarray(forcing[k], dtype=np.float64)[:steps] for k in ("precip", "temp", "pet"))
    ties = np.flatnonzero(tm == float(p.TT))
    if ties.size:
        rep.kinks.append(f"temperature equals TT={p.TT} on step(s) {ties.tolist()}: the snow/rain "
                         "partition has no derivative there; point excluded")
        return rep
    names = _continuous(p)

    def loss(*vals):
        q = p.with_values(**dict(zip(names, vals)))
        s = HbvState.initial(q)
        total = 0.0
        for t in range(len(pr)):
            s, fx = hbv_step(s, q, {"precip": pr[t], "temp": tm[t], "pet": pe[t]})
            total = total + fx["q_out"] + fx["et"]
        return total

    errs = gradient_errors(loss, [float(getattr(p, n)) for n in names])
    rep.errors.update({f"{prefix}.{n}": e for n, e in zip(names, errs)})
    return rep


def nitrogen_gradients(p: NitrogenParams, temps, runoff, steps: int = 30, prefix: str = "nitrogen") -> GradReport:
    names = [f.name for f in fields(p)]
    temps, runoff = np.asarray(temps)[:steps], np.asarray(runoff)[:steps]

    def loss(*vals):
        q = NitrogenParams(**dict(zip(names, vals)))
        s = NitrogenState(1.0, 1.0, 10.0, 0.0)
        total = 0.0
        for t in range(len(temps)):
            s, fx = nitrogen_step(s, q, float(temps[t]), float(runoff[t]))
            total = total + fx["export_load"] + fx["nitrification"] + s.no3
        return total

    errs = gradient_errors(loss, [float(getattr(p, n)) for n in names], eps=1e-7)
    return GradReport({f"{prefix}.{n}": e for n, e in zip(names, errs)})


def nitrification_gradients(updater, env: dict, prefix: str = "nitrification") -> GradReport:
    params = updater.params
    p0 = next(iter(params.values())) if isinstance(params, dict) else params
    names = [f.name for f in fields(p0)]

    def loss(*vals):
        q = type(p0)(**dict(zip(names, vals)))
        saved = updater.params
        updater.params = q
        try:
            e = SoilEnv(env["wfps"], env["ph"], env["temp"], env.get("humus_dec", 0.0))
            return ops.sum(updater.flux(e, np.asarray(env["nh4"], dtype=np.float64), None))
        finally:
            updater.params = saved

    errs = gradient_errors(loss, [float(getattr(p0, n)) for n in names], eps=1e-7)
    return GradReport({f"{prefix}.{n}": e for n, e in zip(names, errs)})


def model_gradients(model, batch, loss=mse_loss, max_coords: int = 12, seed: int = 0,
                    prefix: str = "") -> GradReport:
    """Per-block errors of a trainable model's batch loss, on a seeded coordinate sample."""
    names = list(model.params)

    def f(*arrays):
        return model.batch_loss(dict(zip(names, arrays)), batch, loss)

    errs = gradient_errors(f, [model.params[n] for n in names], max_coords=max_coords, seed=seed)
    by_name = dict(zip(names, errs))
    return GradReport({f"{prefix}{b}": max(by_name[k] for k in keys) for b, keys in model.blocks.items()})
