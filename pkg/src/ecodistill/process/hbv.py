"""HBV-light style snow, soil and response routines for one node and one day.

Every arithmetic step goes through :mod:`ecodistill.autodiff` primitives so
the same code runs on plain floats (simulation) or tape variables
(calibration). Threshold branches follow the autodiff subgradient convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

from ..autodiff import ops, value
from ..errors import InvariantViolation, ValidationError

HBV_PARAM_NAMES = ("TT", "CFMAX", "FC", "BETA", "LP", "K0", "K1", "K2", "UZL", "PERC", "MAXBAS")


@dataclass(frozen=True)
class HbvParams:
    TT: float = 0.0       # degC snow/rain threshold
    CFMAX: float = 3.0    # mm/degC/day
    FC: float = 200.0     # mm
    BETA: float = 2.0
    LP: float = 0.7
    K0: float = 0.2       # 1/day
    K1: float = 0.1
    K2: float = 0.05
    UZL: float = 20.0     # mm
    PERC: float = 2.0     # mm/day
    MAXBAS: int = 1       # days

    def validate(self) -> "HbvParams":
        v = {f.name: value(getattr(self, f.name)) for f in fields(self)}
        problems = []
        if not v["FC"] > 0:
            problems.append("FC must be > 0")
        if not 0 < v["LP"] <= 1:
            problems.append("LP must lie in (0, 1]")
        if not (v["K0"] >= v["K1"] >= v["K2"] > 0):
            problems.append("need K0 >= K1 >= K2 > 0")
        if v["K0"] + v["K1"] > 1 or v["K2"] > 1:
            problems.append("reservoir coefficients would drain more than the store (K0 + K1 <= 1, K2 <= 1)")
        if not v["BETA"] > 0:
            problems.append("BETA must be > 0")
        if v["CFMAX"] < 0 or v["PERC"] < 0 or v["UZL"] < 0:
            problems.append("CFMAX, PERC and UZL must be >= 0")
        if int(v["MAXBAS"]) != v["MAXBAS"] or v["MAXBAS"] < 1:
            problems.append("MAXBAS must be an integer >= 1")
        if problems:
            raise ValidationError("; ".join(problems))
        return self

    def with_values(self, **kw) -> "HbvParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class HbvState:
    snow: float = 0.0
    sm: float = 0.0
    suz: float = 0.0
    slz: float = 0.0
    routing_buffer: tuple = (0.0,)

    @classmethod
    def initial(cls, p: HbvParams, snow=0.0, sm=None, suz=0.0, slz=0.0) -> "HbvState":
        sm = 0.5 * p.FC if sm is None else sm
        return cls(snow, sm, suz, slz, (0.0,) * int(p.MAXBAS))

    def storage(self):
        return math.fsum([value(self.snow), value(self.sm), value(self.suz), value(self.slz)]
                         + [value(b) for b in self.routing_buffer])


def maxbas_weights(maxbas: int) -> list[float]:
    """Triangular unit-hydrograph ordinates over ``maxbas`` days (sum to 1)."""
    m = int(maxbas)

    def area(t):
        if t <= m / 2:
            return 2.0 * t * t / (m * m)
        return 1.0 - 2.0 * (m - t) ** 2 / (m * m)

    return [area(i) - area(i - 1) for i in range(1, m + 1)]


def _field(f, name):
    return f[name] if isinstance(f, dict) else getattr(f, name)


def hbv_step(state: HbvState, p: HbvParams, f):
    """Advance one day; returns ``(new_state, fluxes)``.

    Order: snow partition, degree-day melt, soil recharge, evapotranspiration,
    upper/lower zone response, triangular routing. Soil water above FC is
    passed on as recharge.
    """
    precip, temp, pet = _field(f, "precip"), _field(f, "temp"), _field(f, "pet")
    # (1) partition
    if value(temp) < value(p.TT):
        snow = state.snow + precip
        rain = 0.0
    else:
        snow = state.snow
        rain = precip
    # (2) melt
    potential = p.CFMAX * ops.maximum(temp - p.TT, 0.0)
    melt = ops.minimum(snow, potential)
    snow = snow - melt
    # (3) soil recharge
    w = rain + melt
    recharge = w * (state.sm / p.FC) ** p.BETA
    sm = state.sm + w - recharge
    if value(sm) > value(p.FC):
        excess = sm - p.FC
        recharge = recharge + excess
        sm = sm - excess
    # (4) evapotranspiration
    et = pet * ops.minimum(sm / (p.LP * p.FC), 1.0)
    et = ops.minimum(et, sm)
    sm = sm - et
    # (5) response
    suz = state.suz + recharge
    perc = ops.minimum(p.PERC, suz)
    suz = suz - perc
    slz = state.slz + perc
    q0 = p.K0 * ops.maximum(suz - p.UZL, 0.0)
    q1 = p.K1 * suz
    suz = suz - (q0 + q1)
    q2 = p.K2 * slz
    slz = slz - q2
    # (6) routing
    qgen = q0 + q1 + q2
    buf = list(state.routing_buffer)
    weights = maxbas_weights(len(buf))
    buf = [b + wgt * qgen for b, wgt in zip(buf, weights)]
    q_out = buf[0]
    buf = buf[1:] + [0.0]

    new = HbvState(snow, sm, suz, slz, tuple(buf))
    fluxes = {"q_out": q_out, "et": et, "melt": melt, "recharge": recharge,
              "perc": perc, "q0": q0, "q1": q1, "q2": q2}
    for name in ("snow", "sm", "suz", "slz"):
        x = value(getattr(new, name))
        if not math.isfinite(x):
            raise InvariantViolation(f"HBV {name} became {x!r}")
    if not math.isfinite(value(q_out)):
        raise InvariantViolation(f"HBV outflow became {value(q_out)!r}")
    return new, fluxes


def hbv_run(p: HbvParams, precip, temp, pet, state: HbvState | None = None):
    """Run over aligned daily arrays; returns ``(q_out list, final state, flux lists)``."""
    state = state or HbvState.initial(p)
    q, et = [], []
    for pr, tm, pe in zip(precip, temp, pet):
        state, fx = hbv_step(state, p, {"precip": float(pr), "temp": float(tm), "pet": float(pe)})
        q.append(fx["q_out"])
        et.append(fx["et"])
    return q, state, {"et": et}
