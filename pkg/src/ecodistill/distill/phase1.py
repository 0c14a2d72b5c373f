"""Behavioral distillation strategies for a simplified/original model pair.

The simplified model (coarser resolution or reduced process set) is cheap and
available everywhere; the original model's outputs exist only for a limited
set of windows. Four ways to combine them:

``DirectSurrogate``
    regress the original output on the drivers using the original windows only;
``Residual``
    keep the simplified output and learn ``original - simplified``;
``Transfer``
    pretrain a surrogate on abundant simplified output, then fine-tune only its
    output head on the original windows;
``Hybrid``
    residual learning first, then head-only fine-tuning of the corrected
    predictor on the original windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyFinetuneSet, PairingMismatch, ValidationError
from ..ml.mlp import MlpRegressor
from ..ml.train import FreezeMask, train_epochs
from .metrics import KGE_VARIANT, SkillMetrics

DIRECT, RESIDUAL, TRANSFER, HYBRID = "DirectSurrogate", "Residual", "Transfer", "Hybrid"
STRATEGIES = (DIRECT, RESIDUAL, TRANSFER, HYBRID)
RESOLUTION_COARSENING, PROCESS_REDUCTION = "ResolutionCoarsening", "ProcessReduction"
PIPELINE_ORDER = "residual_then_transfer"
OK, NO_IMPROVEMENT = "Ok", "NoImprovement"


@dataclass
class PairedData:
    """Drivers and outputs on one sample axis.

    ``inputs`` are the surrogate features ``(T, F)``. ``corrector_inputs``
    default to ``inputs`` with the simplified output appended. ``original``
    may hold NaN wherever the original model was not run; ``train`` and
    ``holdout`` are boolean masks over the axis.
    """

    inputs: np.ndarray
    simplified: np.ndarray
    original: np.ndarray
    train: np.ndarray
    holdout: np.ndarray
    corrector_inputs: np.ndarray | None = None
    soil_classes: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        self.simplified = np.asarray(self.simplified, dtype=np.float64).ravel()
        self.original = np.asarray(self.original, dtype=np.float64).ravel()
        self.train = np.asarray(self.train, dtype=bool)
        self.holdout = np.asarray(self.holdout, dtype=bool)
        n = len(self.inputs)
        for name in ("simplified", "original", "train", "holdout"):
            if len(getattr(self, name)) != n:
                raise PairingMismatch(f"{name} has {len(getattr(self, name))} samples, inputs have {n}")
        if np.any(self.train & self.holdout):
            raise ValidationError("training and holdout masks overlap")
        if np.any(np.isnan(self.original[self.train | self.holdout])):
            raise PairingMismatch("original outputs are missing inside the training or holdout mask")
        if self.corrector_inputs is None:
            self.corrector_inputs = np.column_stack([self.inputs, self.simplified])
        else:
            self.corrector_inputs = np.asarray(self.corrector_inputs, dtype=np.float64)
            if len(self.corrector_inputs) != n:
                raise PairingMismatch("corrector inputs are not on the common axis")
        if self.soil_classes is None:
            self.soil_classes = np.zeros(n, dtype=np.int64)


@dataclass
class LearnerSpec:
    hidden: tuple = (32, 32)
    embed_dim: int = 0
    input_norm: bool = False
    epochs: int = 200
    finetune_epochs: int = 100
    lr: float = 1e-3
    finetune_lr: float = 1e-2
    batch_size: int | None = 64


@dataclass
class Phase1Plan:
    strategy: str
    data: PairedData | None
    simplification: tuple = (PROCESS_REDUCTION, "unspecified")
    budget: int | None = None
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown Phase I strategy {self.strategy!r}")
        if self.simplification[0] not in (RESOLUTION_COARSENING, PROCESS_REDUCTION):
            raise ValidationError(f"unknown simplification {self.simplification[0]!r}")


@dataclass
class Phase1Result:
    strategy: str
    predict: object     # callable on a sample mask or index array -> predictions
    holdout: np.ndarray
    train_metrics: SkillMetrics | None
    holdout_metrics: SkillMetrics | None
    status: str = OK
    stages: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _skill(obs, sim):
    try:
        return SkillMetrics.of(obs, sim)
    except ValidationError:
        return None


def _train_mask(d: PairedData, budget):
    """Training samples limited to the first ``budget`` original samples."""
    idx = np.flatnonzero(d.train)
    if budget is not None:
        idx = idx[:budget]
    return idx


def _mlp(n_features, spec: LearnerSpec, d: PairedData, seed):
    classes = tuple(sorted(set(int(c) for c in d.soil_classes)))
    return MlpRegressor(n_features, 1, soil_classes=classes, embed_dim=spec.embed_dim,
                        hidden=spec.hidden, input_norm=spec.input_norm, seed=seed)


def _fit(model, classes, x, y, epochs, lr, seed, batch_size, freeze=None, refit_norm=True):
    if refit_norm:
        model.fit_normalization(x, y)
    ds = model.make_dataset(classes, x, y)
    return train_epochs(model, ds, "mse", {"kind": "adam", "lr": lr}, epochs, freeze=freeze,
                        seed=seed, batch_size=batch_size)


def _finish(plan, predict, tr_idx, stages, models, status=OK, extra=None):
    d = plan.data
    pred_tr = predict(tr_idx)
    hold_idx = np.flatnonzero(d.holdout)
    pred_h = predict(hold_idx)
    meta = {"seed": plan.seed, "kge_variant": KGE_VARIANT, "simplification": list(plan.simplification)}
    meta.update(extra or {})
    return Phase1Result(plan.strategy, predict, pred_h, _skill(d.original[tr_idx], pred_tr),
                        _skill(d.original[hold_idx], pred_h), status, stages, models, meta)


def _require(plan, strategy):
    if plan.data is None:
        raise PairingMismatch(f"{strategy} needs paired simplified/original data")
    if plan.strategy != strategy:
        raise ValidationError(f"plan strategy is {plan.strategy}, expected {strategy}")


def direct_surrogate(plan: Phase1Plan) -> Phase1Result:
    _require(plan, DIRECT)
    d, spec = plan.data, plan.learner
    tr = _train_mask(d, plan.budget)
    if len(tr) == 0:
        raise EmptyFinetuneSet("no original-model samples to train on")
    model = _mlp(d.inputs.shape[1], spec, d, plan.seed)
    res = _fit(model, d.soil_classes[tr], d.inputs[tr], d.original[tr], spec.epochs, spec.lr,
               plan.seed, spec.batch_size)
    m = res.model

    def predict(idx):
        return m.predict(d.soil_classes[idx], d.inputs[idx])[:, 0]

    return _finish(plan, predict, tr, {"direct": res.loss_trace}, {"surrogate": m})


def _residual_stage(plan, tr):
    d, spec = plan.data, plan.learner
    model = _mlp(d.corrector_inputs.shape[1], spec, d, plan.seed)
    resid = d.original[tr] - d.simplified[tr]
    res = _fit(model, d.soil_classes[tr], d.corrector_inputs[tr], resid, spec.epochs, spec.lr,
               plan.seed, spec.batch_size)
    return res


def residual_learn(plan: Phase1Plan) -> Phase1Result:
    """Corrected output = simplified + corrector(drivers, simplified)."""
    _require(plan, RESIDUAL)
    d = plan.data
    tr = _train_mask(d, plan.budget)
    if len(tr) == 0:
        raise PairingMismatch("no paired samples in the training mask")
    res = _residual_stage(plan, tr)
    corr = res.model

    def predict(idx):
        return d.simplified[idx] + corr.predict(d.soil_classes[idx], d.corrector_inputs[idx])[:, 0]

    base = _skill(d.original[tr], d.simplified[tr])
    fitted = _skill(d.original[tr], predict(tr))
    status = OK
    if base is not None and fitted is not None and fitted.composite < base.composite:
        status = NO_IMPROVEMENT
    return _finish(plan, predict, tr, {"residual": res.loss_trace}, {"corrector": corr}, status)


def transfer_learn(plan: Phase1Plan) -> Phase1Result:
    """Pretrain on simplified output, then fine-tune only the output head on originals."""
    _require(plan, TRANSFER)
    d, spec = plan.data, plan.learner
    tr = _train_mask(d, plan.budget)
    if len(tr) == 0 and spec.finetune_epochs > 0:
        raise EmptyFinetuneSet("transfer learning needs at least one original-model sample")
    pre_idx = np.flatnonzero(~d.holdout)
    model = _mlp(d.inputs.shape[1], spec, d, plan.seed)
    pre = _fit(model, d.soil_classes[pre_idx], d.inputs[pre_idx], d.simplified[pre_idx], spec.epochs,
               spec.lr, plan.seed, spec.batch_size)
    pretrained = pre.model
    freeze = FreezeMask.heads_only(pretrained)
    fine = _fit(pretrained, d.soil_classes[tr], d.inputs[tr], d.original[tr], spec.finetune_epochs,
                spec.finetune_lr, plan.seed, spec.batch_size, freeze=freeze, refit_norm=False)
    m = fine.model

    def predict(idx):
        return m.predict(d.soil_classes[idx], d.inputs[idx])[:, 0]

    return _finish(plan, predict, tr, {"pretrain": pre.loss_trace, "finetune": fine.loss_trace},
                   {"pretrained": pretrained, "adapted": m}, extra={"frozen_blocks": sorted(freeze.frozen)})


def hybrid_distill(plan: Phase1Plan) -> Phase1Result:
    """Residual correction first, then head-only fine-tuning of the corrected predictor."""
    _require(plan, HYBRID)
    d, spec = plan.data, plan.learner
    tr = _train_mask(d, plan.budget)
    if len(tr) == 0:
        raise PairingMismatch("no paired samples in the training mask")
    res = _residual_stage(plan, tr)
    corr = res.model
    freeze = FreezeMask.heads_only(corr)
    resid = d.original[tr] - d.simplified[tr]
    fine = _fit(corr, d.soil_classes[tr], d.corrector_inputs[tr], resid, spec.finetune_epochs,
                spec.finetune_lr * 0.1, plan.seed + 1, spec.batch_size, freeze=freeze, refit_norm=False)
    adapted = fine.model

    def stage_predict(m):
        return lambda idx: d.simplified[idx] + m.predict(d.soil_classes[idx], d.corrector_inputs[idx])[:, 0]

    hold_idx = np.flatnonzero(d.holdout)
    stages_skill = {"residual": _skill(d.original[hold_idx], stage_predict(corr)(hold_idx)),
                    "transfer": _skill(d.original[hold_idx], stage_predict(adapted)(hold_idx))}
    out = _finish(plan, stage_predict(adapted), tr, {"residual": res.loss_trace, "finetune": fine.loss_trace},
                  {"corrector": corr, "adapted": adapted},
                  extra={"pipeline_order": PIPELINE_ORDER, "frozen_blocks": sorted(freeze.frozen)})
    out.metadata["stage_holdout_metrics"] = {k: (v.to_dict() if v else None) for k, v in stages_skill.items()}
    return out


def simplified_baseline(d: PairedData) -> SkillMetrics | None:
    idx = np.flatnonzero(d.holdout)
    return _skill(d.original[idx], d.simplified[idx])


def run_plan(plan: Phase1Plan) -> Phase1Result:
    return {DIRECT: direct_surrogate, RESIDUAL: residual_learn, TRANSFER: transfer_learn,
            HYBRID: hybrid_distill}[plan.strategy](plan)
