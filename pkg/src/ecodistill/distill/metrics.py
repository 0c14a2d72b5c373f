"""Skill scores: Nash-Sutcliffe efficiency, KGE in its 2009 form, and their mean."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConstantObservations, ConstantSeries, LengthMismatch

KGE_VARIANT = "2009"


def _pair(obs, sim):
    o = np.asarray(obs, dtype=np.float64).ravel()
    s = np.asarray(sim, dtype=np.float64).ravel()
    if o.shape != s.shape:
        raise LengthMismatch(f"obs has {o.size} values, sim has {s.size}")
    if o.size < 2:
        raise LengthMismatch("need at least two values")
    return o, s


def nse(obs, sim) -> float:
    o, s = _pair(obs, sim)
    dev = o - o.mean()
    denom = math.fsum(dev * dev)
    if denom == 0 or np.all(o == o[0]):
        raise ConstantObservations("NSE is undefined for constant observations")
    err = o - s
    return 1.0 - math.fsum(err * err) / denom


def kge_components(obs, sim) -> tuple[float, float, float]:
    """``(r, alpha, beta)``: correlation, std ratio and mean ratio of sim to obs."""
    o, s = _pair(obs, sim)
    # exact equality: the std of identical floats can round to ~1e-16 instead of 0
    if np.all(o == o[0]):
        raise ConstantObservations("KGE is undefined for constant observations")
    if np.all(s == s[0]):
        raise ConstantSeries("KGE is undefined for a constant simulation")
    mo, ms = o.mean(), s.mean()
    do, ds = o - mo, s - ms
    soo, sss = math.fsum(do * do), math.fsum(ds * ds)
    if sss == 0.0:
        raise ConstantSeries("simulation variance underflows; KGE is undefined")
    so, ss = math.sqrt(soo), math.sqrt(sss)
    # sqrt(S*S) == S exactly in IEEE arithmetic, so sim == obs gives r == 1;
    # fall back to the product of roots if S*S under- or overflows
    norm = math.sqrt(soo * sss)
    if norm == 0.0 or not math.isfinite(norm):
        norm = so * ss
    r = max(-1.0, min(1.0, math.fsum(do * ds) / norm))
    beta = float(ms / mo) if mo != 0 else math.inf
    return r, ss / so, beta


def kge(obs, sim) -> float:
    r, alpha, beta = kge_components(obs, sim)
    return 1.0 - math.sqrt((r - 1.0) ** 2 + (alpha - 1.0) ** 2 + (beta - 1.0) ** 2)


def composite(nse_value: float, kge_value: float) -> float:
    return (nse_value + kge_value) / 2.0


@dataclass(frozen=True)
class SkillMetrics:
    nse: float
    kge: float
    composite: float
    r: float
    alpha: float
    beta: float

    @classmethod
    def of(cls, obs, sim, strict: bool = False) -> "SkillMetrics":
        """All scores of ``sim`` against ``obs``.

        A constant simulation leaves r (and so KGE and the composite)
        undefined; they are reported as NaN unless ``strict`` is set, in which
        case :class:`ConstantSeries` propagates.
        """
        n = nse(obs, sim)
        try:
            r, a, b = kge_components(obs, sim)
        except ConstantSeries:
            if strict:
                raise
            o, s = _pair(obs, sim)
            return cls(n, math.nan, math.nan, math.nan, 0.0, float(s.mean() / o.mean()) if o.mean() else math.inf)
        k = 1.0 - math.sqrt((r - 1.0) ** 2 + (a - 1.0) ** 2 + (b - 1.0) ** 2)
        return cls(n, k, composite(n, k), r, a, b)

    def to_dict(self) -> dict:
        """Plain floats; undefined or infinite scores become ``None`` for JSON."""
        return {k: (v if math.isfinite(v) else None) for k, v in asdict(self).items()}
