"""Two nitrification formulations sharing one set of environmental modifiers.

Del Grosso-type works on area-based ammonium (g N/m2); Parton-type works on
soil-mass concentrations (g N per Mg soil) and converts back to an areal flux
through bulk density and layer depth. Inputs may be floats or arrays (one
entry per cell or ensemble member); all arithmetic is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import ops, value
from ..errors import ValidationError


@dataclass(frozen=True)
class SoilEnv:
    wfps: float        # water-filled pore space, 0..1
    ph: float
    temp: float        # degC
    humus_dec: float = 0.0   # g N/m2/day

    def validate(self) -> "SoilEnv":
        w, ph = np.asarray(value(self.wfps)), np.asarray(value(self.ph))
        if np.any((w < 0) | (w > 1)):
            raise ValidationError("wfps must lie in [0, 1]")
        if np.any((ph < 2) | (ph > 11)):
            raise ValidationError("pH must lie in [2, 11]")
        return self


@dataclass(frozen=True)
class NitrifParamsDelGrosso:
    k_soil: float = 0.1     # 1/day, per soil class
    f_h: float = 0.2
    w_opt: float = 0.6
    t_opt: float = 30.0
    ph_half: float = 5.0


@dataclass(frozen=True)
class NitrifParamsParton:
    k1: float = 0.1
    k2: float = 0.2
    z: float = 0.2               # m
    bulk_density: float = 1.25   # Mg/m3
    porosity: float = 0.5
    w_opt: float = 0.6
    t_opt: float = 30.0
    ph_half: float = 5.0

    def validate(self) -> "NitrifParamsParton":
        z, bd, phi = (np.asarray(value(x)) for x in (self.z, self.bulk_density, self.porosity))
        if np.any(z <= 0):
            raise ValidationError("layer depth must be > 0")
        if np.any((bd < 0.5) | (bd > 2.2)):
            raise ValidationError("bulk density must lie in [0.5, 2.2] Mg/m3")
        if np.any((phi <= 0) | (phi >= 1)):
            raise ValidationError("porosity must lie in (0, 1)")
        return self

    def soil_mass(self):
        """Mg of soil per m2 of the layer."""
        return self.bulk_density * self.z


def f_moisture(wfps, w_opt):
    d = (wfps - w_opt) / w_opt
    return ops.clamp01(1.0 - d * d)


def f_temperature(temp, t_opt):
    d = (temp - t_opt) / 12.0
    return ops.exp(-(d * d))


def f_ph(ph, ph_half):
    return ops.sigmoid(2.0 * (ph - ph_half))


def modifiers(env: SoilEnv, w_opt, t_opt, ph_half):
    return f_moisture(env.wfps, w_opt) * f_temperature(env.temp, t_opt) * f_ph(env.ph, ph_half)


def nitrif_delgrosso(env: SoilEnv, nh4, p: NitrifParamsDelGrosso):
    """Areal nitrification flux (g N/m2/day), capped at the available ammonium."""
    flux = (p.k_soil * nh4 + p.f_h * env.humus_dec) * modifiers(env, p.w_opt, p.t_opt, p.ph_half)
    return ops.minimum(flux, nh4)


def wfps_from_water_content(theta, porosity):
    """Volumetric water content to water-filled pore space."""
    return ops.clamp01(theta / porosity)


def nitrif_parton(env: SoilEnv, nh4_conc, p: NitrifParamsParton):
    """Areal nitrification flux (g N/m2/day) from a soil-mass ammonium concentration."""
    mass = p.soil_mass()
    humus_conc = env.humus_dec / mass
    rate = (p.k1 * nh4_conc + p.k2 * humus_conc) * modifiers(env, p.w_opt, p.t_opt, p.ph_half)
    return ops.minimum(rate * mass, nh4_conc * mass)
