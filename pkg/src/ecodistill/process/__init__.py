"""Differentiable process-equation updaters."""

from .hbv import HBV_PARAM_NAMES, HbvParams, HbvState, hbv_run, hbv_step, maxbas_weights
from .nitrification import (
    NitrifParamsDelGrosso,
    NitrifParamsParton,
    SoilEnv,
    f_moisture,
    f_ph,
    f_temperature,
    nitrif_delgrosso,
    nitrif_parton,
)
from .nitrogen import NitrogenParams, NitrogenState, nitrogen_step
from .paramfile import dump_params, load_params, parse_params

__all__ = [
    "HBV_PARAM_NAMES", "HbvParams", "HbvState", "hbv_step", "hbv_run", "maxbas_weights",
    "NitrogenParams", "NitrogenState", "nitrogen_step",
    "SoilEnv", "NitrifParamsDelGrosso", "NitrifParamsParton",
    "f_moisture", "f_temperature", "f_ph", "nitrif_delgrosso", "nitrif_parton",
    "parse_params", "load_params", "dump_params",
]
