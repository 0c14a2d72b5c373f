"""Trainer modes: fitting process parameters or ML students to a teacher.

* ``DataToProcess``: calibrate bounded process parameters against observations;
* ``DataToMl``: train a regressor directly on observations;
* ``ProcessToMl``: train a regressor on a process model's simulated outputs;
* ``ProcessToProcess``: fit one process formulation to another's outputs.

Process students expose ``free`` (name -> bounds), ``init`` (name -> start
value) and ``predict(values, inputs)``, which must work with tape variables.
Gradients flow through the same updater code the simulator uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tape, ops, raw_for, value
from ..errors import (
    ConstantObservations,
    DivergedOptimization,
    NonFiniteLoss,
    ValidationError,
)
from ..ml.sequence import SequenceRegressor
from ..ml.train import make_optimizer, mse_loss, nse_loss, train_epochs
from ..process.hbv import HbvParams
from ..process.nitrification import NitrifParamsDelGrosso, NitrifParamsParton, SoilEnv
from ..updaters import DELGROSSO, PARTON, HbvUpdater, NitrificationUpdater
from .metrics import KGE_VARIANT, SkillMetrics

DATA_TO_PROCESS, DATA_TO_ML, PROCESS_TO_ML, PROCESS_TO_PROCESS = (
    "DataToProcess", "DataToMl", "ProcessToMl", "ProcessToProcess")
MODES = (DATA_TO_PROCESS, DATA_TO_ML, PROCESS_TO_ML, PROCESS_TO_PROCESS)

DIVERGENCE_PATIENCE = 50


@dataclass(frozen=True)
class Split:
    """Half-open ``[start, stop)`` index windows for training and holdout."""

    train: tuple
    holdout: tuple | None = None

    def __post_init__(self):
        a0, a1 = self.train
        if not 0 <= a0 < a1:
            raise ValidationError(f"bad training window {self.train}")
        if self.holdout is not None:
            b0, b1 = self.holdout
            if not 0 <= b0 < b1:
                raise ValidationError(f"bad holdout window {self.holdout}")
            if a0 < b1 and b0 < a1:
                raise ValidationError(f"holdout {self.holdout} overlaps training window {self.train}")

    @classmethod
    def default(cls, n: int, warmup: int = 0) -> "Split":
        """About 5/7 of the record for training and the remaining 2/7 for holdout."""
        cut = int(round(n * 5 / 7))
        return cls((warmup, cut), (cut, n))

    def train_slice(self) -> slice:
        return slice(*self.train)

    def holdout_slice(self) -> slice | None:
        return slice(*self.holdout) if self.holdout else None


@dataclass
class DistillationJob:
    mode: str
    teacher: object
    student: object
    split: Split
    loss: str = "MSE"
    optimizer: dict | None = None
    seed: int = 0
    budget: int = 500
    inputs: object = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown distillation mode {self.mode!r}")
        if self.loss not in ("MSE", "NseLoss"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.budget < 0:
            raise ValidationError("budget must be >= 0")


@dataclass
class JobResult:
    mode: str
    student: object
    loss_trace: list
    train_metrics: SkillMetrics | None
    holdout_metrics: SkillMetrics | None
    status: str = "Ok"
    metadata: dict = field(default_factory=dict)


def _loss_fn(name):
    return mse_loss if name == "MSE" else nse_loss


def _require_variation(obs, what="observations"):
    o = np.asarray(obs, dtype=np.float64)
    if o.size < 2 or np.all(o == o.flat[0]):
        raise ConstantObservations(f"{what} are constant; skill scores are undefined")


def _metrics_or_none(obs, sim):
    try:
        return SkillMetrics.of(obs, sim)
    except ValidationError:
        return None


# ------------------------------------------------------- process students

class HbvStudent:
    """Lumped HBV run as a calibration student; the output is ``q_out``.

    ``predict`` simulates from the default initial state over the given
    forcing window and returns the discharge vector.
    """

    outputs = ("q_out",)

    def __init__(self, free: dict, init: dict | None = None, base: HbvParams | None = None,
                 area: float = 1.0):
        self.base = base or HbvParams()
        self.free = dict(free)
        unknown = set(self.free) - set(HbvParams.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown HBV parameters {sorted(unknown)}")
        if "MAXBAS" in self.free:
            raise ValidationError("MAXBAS is an integer and cannot be calibrated by gradients")
        self.init = {k: float(getattr(self.base, k)) for k in self.free}
        self.init.update(init or {})
        self.area = area

    def params(self, values: dict) -> HbvParams:
        return self.base.with_values(**values)

    def simulate(self, values: dict, forcing, warmup_state=None):
        p = self.params(values)
        up = HbvUpdater(p, check=False)
        state = up.initial_state(0, None)
        if warmup_state is not None:
            state.update(warmup_state)
        v = forcing.variables
        precip, temp, pet = v["precip"], v["temp"], v["pet"]
        q = []
        for t in range(len(precip)):
            state, fx = up.update(state, {}, {"precip": float(precip[t]), "temp": float(temp[t]),
                                              "pet": float(pet[t])}, 0, None)
            q.append(fx["q_out"])
        return q

    def predict(self, values: dict, forcing):
        return ops.stack(self.simulate(values, forcing))


class NitrificationStudent:
    """Area-based nitrification flux over an ensemble of soil conditions.

    Free parameters are named ``field`` (shared by all classes) or
    ``field[c]`` (soil class ``c``). ``inputs`` is a dict of equal-length
    arrays ``wfps, ph, temp, humus_dec, nh4`` and optionally ``soil_class``.
    """

    outputs = ("nitrification",)

    def __init__(self, formulation: str = PARTON, base=None, free: dict | None = None,
                 init: dict | None = None):
        if formulation not in (DELGROSSO, PARTON):
            raise ValidationError(f"unknown nitrification formulation {formulation!r}")
        self.formulation = formulation
        self.base = base or (NitrifParamsParton() if formulation == PARTON else NitrifParamsDelGrosso())
        self.free = dict(free or {})
        for name in self.free:
            if name.split("[")[0] not in type(self.base).__dataclass_fields__:
                raise ValidationError(f"unknown nitrification parameter {name!r}")
        self.init = {}
        for name in self.free:
            self.init[name] = float(getattr(self.base, name.split("[")[0]))
        self.init.update(init or {})

    def field_values(self, values: dict, classes):
        """Per-sample parameter arrays (or scalars) in a form the flux code accepts."""
        out = {}
        for fname in type(self.base).__dataclass_fields__:
            shared = values.get(fname, getattr(self.base, fname))
            per = {int(k[len(fname) + 1:-1]): v for k, v in values.items() if k.startswith(fname + "[")}
            if not per:
                out[fname] = shared
                continue
            acc = 0.0
            for c in np.unique(classes):
                mask = (classes == c).astype(np.float64)
                acc = ops.add(acc, ops.mul(per.get(int(c), shared), mask))
            out[fname] = acc
        return out

    def predict(self, values: dict, inputs: dict):
        n = len(inputs["nh4"])
        classes = np.asarray(inputs.get("soil_class", np.zeros(n, dtype=np.int64)))
        p = type(self.base)(**self.field_values(values, classes))
        env = SoilEnv(inputs["wfps"], inputs["ph"], inputs["temp"], inputs.get("humus_dec", 0.0))
        up = NitrificationUpdater(self.formulation, p)
        return up.flux(env, np.asarray(inputs["nh4"], dtype=np.float64), None)


def _subset(inputs, sl):
    if isinstance(inputs, dict):
        return {k: (np.asarray(v)[sl] if np.ndim(v) else v) for k, v in inputs.items()}
    return inputs.window(sl)


def _length(inputs):
    if isinstance(inputs, dict):
        return len(inputs["nh4"]) if "nh4" in inputs else len(next(iter(inputs.values())))
    return len(inputs)


def fit_bounded(student, inputs, target, loss: str = "MSE", optimizer=None, iterations: int = 500,
                warmup: int = 0):
    """Gradient descent on logit-raw parameters; returns ``(best values, trace)``.

    ``warmup`` leading samples of the prediction are excluded from the loss.
    The best iterate by training loss is returned. Aborts with
    :class:`DivergedOptimization` after 50 consecutive loss increases.
    """
    target = np.asarray(target, dtype=np.float64)[warmup:]
    lossf = _loss_fn(loss)
    raw = {k: np.float64(raw_for(student.init[k], *student.free[k])) for k in student.free}
    opt = make_optimizer(optimizer if optimizer is not None else {"kind": "adam", "lr": 0.01})
    best_loss, best_raw = math.inf, dict(raw)
    trace, increases, prev = [], 0, math.inf
    for it in range(iterations):
        tape = Tape()
        leaves = {k: tape.var(raw[k]) for k in raw}
        vals = {k: lo + (hi - lo) * ops.sigmoid(leaves[k]) for k, (lo, hi) in student.free.items()}
        pred = student.predict(vals, inputs)
        if warmup:
            pred = ops.index(pred, slice(warmup, None))
        L = lossf(pred, target)
        lv = float(value(L))
        if not math.isfinite(lv):
            raise NonFiniteLoss(it, lv)
        trace.append(lv)
        if lv < best_loss:
            best_loss, best_raw = lv, dict(raw)
        increases = increases + 1 if lv > prev else 0
        prev = lv
        if increases >= DIVERGENCE_PATIENCE:
            raise DivergedOptimization(f"loss increased for {increases} consecutive iterations at {it}")
        g = tape.backward(L)
        opt.step(raw, {k: g[leaves[k]] for k in raw})
    best = {k: float(lo + (hi - lo) * ops.sigmoid(best_raw[k])) for k, (lo, hi) in student.free.items()}
    return best, trace


def _evaluate(student, values, inputs, target, split, warmup):
    """Train/holdout skill; simulates from the start so holdout state is warmed up."""
    stop = split.holdout[1] if split.holdout else split.train[1]
    whole = _subset(inputs, slice(0, stop))
    sim = np.asarray(value(student.predict(values, whole)), dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    a0, a1 = split.train
    train = _metrics_or_none(target[a0 + warmup:a1], sim[a0 + warmup:a1])
    hold = None
    if split.holdout:
        b0, b1 = split.holdout
        hold = _metrics_or_none(target[b0:b1], sim[b0:b1])
    return train, hold, sim


def calibrate_process(job: DistillationJob) -> JobResult:
    """Data-to-process: fit bounded process parameters to observations."""
    if job.mode != DATA_TO_PROCESS:
        raise ValidationError("calibrate_process needs a DataToProcess job")
    student = job.student
    obs = np.asarray(job.teacher, dtype=np.float64)
    warmup = int(job.options.get("warmup", 0))
    a0, a1 = job.split.train
    if a1 > len(obs) or (job.split.holdout and job.split.holdout[1] > len(obs)):
        raise ValidationError("split windows extend beyond the observations")
    _require_variation(obs[a0 + warmup:a1])
    train_inputs = _subset(job.inputs, slice(a0, a1))
    best, trace = fit_bounded(student, train_inputs, obs[a0:a1], job.loss, job.optimizer,
                              job.budget, warmup)
    train_m, hold_m, _ = _evaluate(student, best, job.inputs, obs, job.split, warmup)
    return JobResult(job.mode, best, trace, train_m, hold_m,
                     metadata={"seed": job.seed, "kge_variant": KGE_VARIANT,
                               "best_iteration": int(np.argmin(trace)) if trace else None})


def transfer_process(job: DistillationJob, ensemble: dict | None = None) -> JobResult:
    """Process-to-process: fit the student formulation to the teacher's outputs.

    ``job.teacher`` is a callable ``teacher(inputs) -> outputs`` with an
    ``outputs`` attribute naming its variables; it is evaluated on the
    ensemble, whose samples are split by ``job.split``.
    """
    if job.mode != PROCESS_TO_PROCESS:
        raise ValidationError("transfer_process needs a ProcessToProcess job")
    teacher, student = job.teacher, job.student
    shared = set(getattr(teacher, "outputs", ())) & set(student.outputs)
    if not shared:
        raise ValidationError("teacher and student share no output variables")
    inputs = ensemble if ensemble is not None else job.inputs
    target = np.asarray(value(teacher(inputs)), dtype=np.float64)
    a0, a1 = job.split.train
    _require_variation(target[a0:a1], "teacher outputs")
    best, trace = fit_bounded(student, _subset(inputs, slice(a0, a1)), target[a0:a1], job.loss,
                              job.optimizer, job.budget)
    sim = np.asarray(value(student.predict(best, inputs)), dtype=np.float64)
    train_m = _metrics_or_none(target[a0:a1], sim[a0:a1])
    hold_m = None
    if job.split.holdout:
        b0, b1 = job.split.holdout
        hold_m = _metrics_or_none(target[b0:b1], sim[b0:b1])
    return JobResult(job.mode, best, trace, train_m, hold_m,
                     metadata={"seed": job.seed, "kge_variant": KGE_VARIANT,
                               "variables": sorted(shared)})


class DelGrossoTeacher:
    """Callable Del Grosso-type teacher for :func:`transfer_process`."""

    outputs = ("nitrification",)

    def __init__(self, params=None):
        self.student = NitrificationStudent(DELGROSSO, base=params or NitrifParamsDelGrosso())

    def __call__(self, inputs):
        return self.student.predict({}, inputs)


# ---------------------------------------------------------- ML students

def forcing_matrix(forcing, names=("precip", "temp", "pet")) -> np.ndarray:
    return np.column_stack([np.asarray(forcing.variables[k], dtype=np.float64) for k in names])


def train_on_data(job: DistillationJob) -> JobResult:
    """Train an ML student on a target series.

    Shared by ``DataToMl`` (observations) and ``ProcessToMl`` (a process
    teacher's simulation). ``job.inputs`` is the ``(T, F)`` driver matrix,
    ``job.teacher`` the ``(T,)`` or ``(T, K)`` target. Holdout predictions
    use the preceding rows as history.
    """
    if job.mode not in (DATA_TO_ML, PROCESS_TO_ML):
        raise ValidationError("train_on_data needs a DataToMl or ProcessToMl job")
    x = np.asarray(job.inputs, dtype=np.float64)
    y = np.asarray(job.teacher, dtype=np.float64)
    if len(x) != len(y):
        raise ValidationError(f"inputs have {len(x)} rows, targets {len(y)}")
    tr = job.split.train_slice()
    if job.split.train[1] > len(x) or (job.split.holdout and job.split.holdout[1] > len(x)):
        raise ValidationError("split windows extend beyond the data")
    _require_variation(y[tr], "targets")
    model: SequenceRegressor = job.student.copy()
    model.fit_normalization(x[tr], y[tr])
    ds = model.make_dataset([(x[tr], y[tr])], bptt=int(job.options.get("bptt", 30)))
    opt = job.optimizer or {"kind": "adam", "lr": 1e-3}
    res = train_epochs(model, ds, _loss_fn(job.loss), opt, job.budget, seed=job.seed,
                       batch_size=job.options.get("batch_size", 64))
    model = res.model
    head = model.heads[0]
    y2 = y if y.ndim == 1 else y[:, 0]
    fit = model.seq_predict(x[tr])[head]
    ok = ~np.isnan(fit)
    train_m = _metrics_or_none(y2[tr][ok], fit[ok])
    hold_m = None
    if job.split.holdout:
        hs = job.split.holdout_slice()
        pred = model.seq_predict(x[hs], history=x[:job.split.holdout[0]])[head]
        ok = ~np.isnan(pred)
        hold_m = _metrics_or_none(y2[hs][ok], pred[ok])
    return JobResult(job.mode, model, res.loss_trace, train_m, hold_m,
                     metadata={"seed": job.seed, "kge_variant": KGE_VARIANT})


def distill_surrogate(job: DistillationJob) -> JobResult:
    """Process-to-ML: the teacher is a process simulation already run over the record."""
    if job.mode != PROCESS_TO_ML:
        raise ValidationError("distill_surrogate needs a ProcessToMl job")
    return train_on_data(job)


def run_job(job: DistillationJob, **kw) -> JobResult:
    if job.mode == DATA_TO_PROCESS:
        return calibrate_process(job)
    if job.mode == PROCESS_TO_PROCESS:
        return transfer_process(job, **kw)
    return train_on_data(job)


__all__ = [
    "DATA_TO_ML", "DATA_TO_PROCESS", "PROCESS_TO_ML", "PROCESS_TO_PROCESS", "DelGrossoTeacher",
    "DistillationJob", "HbvStudent", "JobResult", "NitrificationStudent", "Split", "calibrate_process",
    "distill_surrogate", "fit_bounded", "forcing_matrix", "run_job", "train_on_data", "transfer_process",
]
