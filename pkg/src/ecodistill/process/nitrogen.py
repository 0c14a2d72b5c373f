"""Lumped daily nitrogen pools (NH4, NO3, organic N) with a lagged export store."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from ..autodiff import value
from ..errors import InvariantViolation, ValidationError


@dataclass(frozen=True)
class NitrogenParams:
    k_min: float = 0.01     # 1/day mineralization
    k_nit: float = 0.05     # 1/day nitrification
    k_up: float = 0.02      # 1/day plant uptake (both mineral pools)
    k_den: float = 0.01     # 1/day denitrification
    q10: float = 2.0
    t_ref: float = 20.0     # degC
    k_exp: float = 0.02     # 1/mm export per unit runoff
    k_r: float = 0.2        # 1/day reservoir release
    input_nh4: float = 0.005   # g N/m2/day
    input_orgn: float = 0.01   # g N/m2/day

    def validate(self) -> "NitrogenParams":
        bad = [f.name for f in fields(self) if f.name not in ("t_ref",) and value(getattr(self, f.name)) < 0]
        if bad:
            raise ValidationError(f"nitrogen rates must be >= 0: {bad}")
        if not value(self.q10) > 0:
            raise ValidationError("q10 must be > 0")
        return self


@dataclass(frozen=True)
class NitrogenState:
    nh4: float = 0.0
    no3: float = 0.0
    orgn: float = 0.0
    reservoir: float = 0.0

    def total(self) -> float:
        return math.fsum(value(getattr(self, f.name)) for f in fields(self))


def _limit(pool, outs):
    """Scale all outfluxes of a pool so they cannot remove more than it holds."""
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    if value(total) > value(pool):
        scale = pool / total
        return [o * scale for o in outs]
    return outs


def nitrogen_step(state: NitrogenState, p: NitrogenParams, temp, q):
    """Advance one day given air/soil temperature (degC) and runoff ``q`` (mm/day)."""
    f_t = p.q10 ** ((temp - p.t_ref) / 10.0)
    (miner,) = _limit(state.orgn, [p.k_min * state.orgn * f_t])
    nit, up_nh4 = _limit(state.nh4, [p.k_nit * state.nh4 * f_t, p.k_up * state.nh4 * f_t])
    up_no3, denit, leach = _limit(state.no3, [p.k_up * state.no3 * f_t,
                                              p.k_den * state.no3 * f_t,
                                              p.k_exp * q * state.no3])
    (export,) = _limit(state.reservoir, [p.k_r * state.reservoir])

    new = NitrogenState(
        nh4=state.nh4 + p.input_nh4 + miner - nit - up_nh4,
        no3=state.no3 + nit - up_no3 - denit - leach,
        orgn=state.orgn + p.input_orgn - miner,
        reservoir=state.reservoir + leach - export,
    )
    for f in fields(new):
        x = value(getattr(new, f.name))
        if not math.isfinite(x):
            raise InvariantViolation(f"nitrogen pool {f.name} became {x!r}")
    fluxes = {"mineralization": miner, "nitrification": nit, "uptake_nh4": up_nh4,
              "uptake_no3": up_no3, "denit": denit, "leaching": leach, "export_load": export}
    return new, fluxes
