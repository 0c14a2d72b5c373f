"""Node updaters: the per-node transition rules the simulator drives.

An updater maps ``(state, message, forcing, node attributes)`` to a new state
and a dict of fluxes. States and fluxes are flat ``name -> value`` dicts so the
simulator can snapshot, compare and route them without knowing the model.
Values may be floats or tape variables, which keeps every process updater
differentiable.

``forcing`` holds the day's drivers for the node plus the fluxes already
produced at the same node by updaters bound earlier in the binding list (for
example ``q_out`` from hydrology feeding the nitrogen module).
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .autodiff import ops, value
from .data import StateSchema, VarSpec
from .errors import SchemaMismatch, UnknownSoilClass, ValidationError
from .process.hbv import HbvParams, HbvState, hbv_step
from .process.nitrification import (
    NitrifParamsDelGrosso,
    NitrifParamsParton,
    SoilEnv,
    nitrif_delgrosso,
    nitrif_parton,
)
from .process.nitrogen import NitrogenParams, NitrogenState, nitrogen_step

PROCESS, ML, HYBRID = "Process", "Ml", "Hybrid"

MM_TO_M = 1e-3


def _by_class(params, attrs):
    """Resolve a parameter object, or a ``{soil_class: params}`` mapping, for one node."""
    if not isinstance(params, dict):
        return params
    cls = attrs.soil_class if attrs is not None else 0
    try:
        return params[cls]
    except KeyError:
        raise UnknownSoilClass(f"no parameters for soil class {cls}") from None


class Updater:
    kind = PROCESS
    name = "updater"
    schema = StateSchema()
    message_names: tuple = ()

    def initial_state(self, node: int, attrs) -> dict:
        return {}

    def update(self, state: dict, message: dict, forcing: dict, node: int, attrs):
        raise NotImplementedError


class HbvUpdater(Updater):
    """HBV hydrology; ``inflow`` (m3/day from upstream) joins the local runoff."""

    name = "hbv"
    message_names = ("inflow",)

    def __init__(self, params: HbvParams | dict | None = None, initial: dict | None = None,
                 check: bool = True):
        self.params = params if params is not None else HbvParams()
        if check:
            for p in (self.params.values() if isinstance(self.params, dict) else [self.params]):
                p.validate()
        self.initial = dict(initial or {})
        maxbas = max(int(value(p.MAXBAS)) for p in
                     (self.params.values() if isinstance(self.params, dict) else [self.params]))
        self.maxbas = maxbas
        mm = VarSpec("mm", 10.0)
        states = {k: mm for k in ("snow", "sm", "suz", "slz")}
        states.update({f"rb{i}": mm for i in range(maxbas)})
        flux = {k: VarSpec("mm/day", 1.0) for k in ("q_out", "et", "melt", "recharge")}
        flux["discharge_m3"] = VarSpec("m3/day", 1.0)
        self.schema = StateSchema(states, flux)

    def initial_state(self, node, attrs):
        p = _by_class(self.params, attrs)
        s = HbvState.initial(p)
        out = {"snow": s.snow, "sm": s.sm, "suz": s.suz, "slz": s.slz}
        for i in range(self.maxbas):
            out[f"rb{i}"] = 0.0
        out.update(self.initial)
        return out

    @staticmethod
    def to_hbv_state(state, maxbas):
        return HbvState(state["snow"], state["sm"], state["suz"], state["slz"],
                        tuple(state[f"rb{i}"] for i in range(maxbas)))

    def update(self, state, message, forcing, node, attrs):
        p = _by_class(self.params, attrs)
        m = int(value(p.MAXBAS))
        new, fx = hbv_step(self.to_hbv_state(state, m), p, forcing)
        out = {"snow": new.snow, "sm": new.sm, "suz": new.suz, "slz": new.slz}
        for i in range(self.maxbas):
            out[f"rb{i}"] = new.routing_buffer[i] if i < m else 0.0
        area = attrs.area if attrs is not None else 1.0
        fluxes = {"q_out": fx["q_out"], "et": fx["et"], "melt": fx["melt"], "recharge": fx["recharge"],
                  "discharge_m3": fx["q_out"] * (area * MM_TO_M) + message.get("inflow", 0.0)}
        return out, fluxes


class NitrogenUpdater(Updater):
    """Nitrogen pools driven by temperature and the node's runoff ``q_out``.

    ``load_in`` (g N/day from upstream) is added to the local export to give
    the routed ``load_out``.
    """

    name = "nitrogen"
    message_names = ("load_in",)

    def __init__(self, params: NitrogenParams | dict | None = None, initial: dict | None = None,
                 runoff_key: str = "q_out"):
        self.params = params if params is not None else NitrogenParams()
        for p in (self.params.values() if isinstance(self.params, dict) else [self.params]):
            p.validate()
        self.initial = dict(initial or {})
        self.runoff_key = runoff_key
        g = VarSpec("g N/m2", 1.0)
        self.schema = StateSchema({k: g for k in ("nh4", "no3", "orgn", "reservoir")},
                                  {k: VarSpec("g N/m2/day", 0.01) for k in
                                   ("mineralization", "nitrification", "uptake_nh4", "uptake_no3",
                                    "denit", "leaching", "export_load", "load_out")})

    def initial_state(self, node, attrs):
        out = {"nh4": 1.0, "no3": 1.0, "orgn": 10.0, "reservoir": 0.0}
        out.update(self.initial)
        return out

    def update(self, state, message, forcing, node, attrs):
        p = _by_class(self.params, attrs)
        if self.runoff_key in forcing:
            q = forcing[self.runoff_key]
        elif "q" in forcing:
            q = forcing["q"]
        else:
            raise SchemaMismatch(f"nitrogen updater needs runoff {self.runoff_key!r} at node {node}")
        st = NitrogenState(**{f.name: state[f.name] for f in fields(NitrogenState)})
        new, fx = nitrogen_step(st, p, forcing["temp"], q)
        area = attrs.area if attrs is not None else 1.0
        fx = dict(fx)
        fx["load_out"] = fx["export_load"] * area + message.get("load_in", 0.0)
        return {f.name: getattr(new, f.name) for f in fields(NitrogenState)}, fx


DELGROSSO, PARTON = "DelGrosso", "Parton"


def soil_env_from(forcing) -> SoilEnv:
    try:
        return SoilEnv(forcing["wfps"], forcing["ph"], forcing["temp"], forcing.get("humus_dec", 0.0))
    except KeyError as exc:
        raise SchemaMismatch(f"nitrification needs forcing variable {exc.args[0]!r}") from None


class NitrificationUpdater(Updater):
    """Nitrification flux from soil conditions.

    With ``nh4_source="forcing"`` the ammonium pool is read from the forcing
    (key ``nh4``) and the updater is stateless; with ``"state"`` it carries an
    ``nh4`` pool that gains ``nh4_input`` and loses the nitrified amount.
    Parton-type parameters receive the pool as a soil-mass concentration.
    """

    name = "nitrification"

    def __init__(self, formulation: str = DELGROSSO, params=None, nh4_source: str = "forcing",
                 initial_nh4: float = 1.0):
        if formulation not in (DELGROSSO, PARTON):
            raise ValidationError(f"unknown nitrification formulation {formulation!r}")
        if nh4_source not in ("forcing", "state"):
            raise ValidationError("nh4_source must be 'forcing' or 'state'")
        self.formulation = formulation
        if params is None:
            params = NitrifParamsDelGrosso() if formulation == DELGROSSO else NitrifParamsParton()
        self.params = params
        self.nh4_source = nh4_source
        self.initial_nh4 = initial_nh4
        states = {"nh4": VarSpec("g N/m2", 1.0)} if nh4_source == "state" else {}
        self.schema = StateSchema(states, {"nitrification": VarSpec("g N/m2/day", 0.01)})

    def initial_state(self, node, attrs):
        return {"nh4": self.initial_nh4} if self.nh4_source == "state" else {}

    def flux(self, env: SoilEnv, nh4, attrs):
        p = _by_class(self.params, attrs)
        if self.formulation == DELGROSSO:
            return nitrif_delgrosso(env, nh4, p)
        return nitrif_parton(env, nh4 / p.soil_mass(), p)

    def update(self, state, message, forcing, node, attrs):
        env = soil_env_from(forcing)
        nh4 = state["nh4"] if self.nh4_source == "state" else forcing["nh4"]
        flux = self.flux(env, nh4, attrs)
        if self.nh4_source == "state":
            return {"nh4": nh4 + forcing.get("nh4_input", 0.0) - flux}, {"nitrification": flux}
        return {}, {"nitrification": flux}


class LinearUpdater(Updater):
    """``x' = a * message + b + c * forcing[key]``; the outflow equals the new state."""

    name = "linear"
    message_names = ("inflow",)

    def __init__(self, a: float = 1.0, b: float = 0.0, c: float = 1.0, forcing_key: str = "precip",
                 initial: float = 0.0):
        self.a, self.b, self.c = a, b, c
        self.forcing_key = forcing_key
        self.initial = initial
        self.schema = StateSchema({"x": VarSpec("", 1.0)}, {"outflow": VarSpec("", 1.0)})

    def initial_state(self, node, attrs):
        return {"x": self.initial}

    def update(self, state, message, forcing, node, attrs):
        drive = forcing.get(self.forcing_key, 0.0) if self.c != 0 else 0.0
        x = self.a * message.get("inflow", 0.0) + self.b + self.c * drive
        return {"x": x}, {"outflow": x}


def _gather(keys, *sources):
    row = []
    for k in keys:
        for src in sources:
            if k in src:
                row.append(float(value(src[k])))
                break
        else:
            raise SchemaMismatch(f"feature {k!r} is not available")
    return row


class MlUpdater(Updater):
    """Fluxes predicted by an :class:`~ecodistill.ml.MlpRegressor`.

    ``inputs`` names the features, looked up first in the node state, then
    in the message, then in the forcing.
    """

    kind = ML
    name = "ml"

    def __init__(self, model, inputs, outputs):
        self.model = model
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        if len(self.inputs) != model.n_features or len(self.outputs) != model.n_outputs:
            raise SchemaMismatch("updater inputs/outputs do not match the model shape")
        self.schema = StateSchema({}, {k: VarSpec("", 1.0) for k in self.outputs})

    def update(self, state, message, forcing, node, attrs):
        x = np.array([_gather(self.inputs, state, message, forcing)])
        cls = attrs.soil_class if attrs is not None else self.model.soil_classes[0]
        y = self.model.predict([cls], x)[0]
        return dict(state), {k: float(v) for k, v in zip(self.outputs, y)}


class HybridUpdater(Updater):
    """A process updater whose ``target`` flux is corrected by an MLP residual.

    The residual sees the node's process state, the ``env`` drivers and the
    process flux itself, in that order.
    """

    kind = HYBRID

    def __init__(self, process: Updater, residual, target: str, env: tuple):
        self.process = process
        self.residual = residual
        self.target = target
        self.env = tuple(env)
        self.name = f"hybrid:{process.name}"
        self.message_names = process.message_names
        self.schema = process.schema
        if target not in process.schema.fluxes:
            raise SchemaMismatch(f"process updater has no flux {target!r}")
        self.state_keys = tuple(process.schema.states)
        if residual.n_features != len(self.state_keys) + len(self.env) + 1:
            raise SchemaMismatch("residual model input width does not match (state, env, process flux)")

    def features(self, state, forcing, process_flux):
        return _gather(self.state_keys, state) + _gather(self.env, forcing) + [float(value(process_flux))]

    def initial_state(self, node, attrs):
        return self.process.initial_state(node, attrs)

    def update(self, state, message, forcing, node, attrs):
        new, fx = self.process.update(state, message, forcing, node, attrs)
        x = np.array([self.features(state, forcing, fx[self.target])])
        cls = attrs.soil_class if attrs is not None else self.residual.soil_classes[0]
        fx = dict(fx)
        fx[self.target] = fx[self.target] + float(self.residual.predict([cls], x)[0, 0])
        return new, fx


UPDATERS = {
    "hbv": HbvUpdater,
    "nitrogen": NitrogenUpdater,
    "nitrification": NitrificationUpdater,
    "linear": LinearUpdater,
}
