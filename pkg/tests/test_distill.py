import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecodistill.distill.jobs import (
    DATA_TO_PROCESS,
    PROCESS_TO_ML,
    PROCESS_TO_PROCESS,
    DelGrossoTeacher,
    DistillationJob,
    HbvStudent,
    NitrificationStudent,
    Split,
    calibrate_process,
    forcing_matrix,
    run_job,
    transfer_process,
)
from ecodistill.distill.metrics import SkillMetrics, composite, kge, kge_components, nse
from ecodistill.distill.phase1 import (
    DIRECT,
    HYBRID,
    RESIDUAL,
    TRANSFER,
    LearnerSpec,
    PairedData,
    Phase1Plan,
    run_plan,
    simplified_baseline,
)
from ecodistill.errors import ConstantObservations, ConstantSeries, LengthMismatch, PairingMismatch, ValidationError
from ecodistill.ml import SequenceRegressor, load_checkpoint, save_checkpoint
from ecodistill.process.hbv import HbvParams
from ecodistill.report import MetricsReport
from ecodistill.synthetic import seasonal_forcing, soil_env_ensemble
from ecodistill.updaters import DELGROSSO

series = st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30).filter(lambda v: np.ptp(v) > 1e-3)


class TestMetrics:
    obs = np.array([1.0, 3.0, 2.0, 5.0, 4.0])

    def test_perfect(self):
        m = SkillMetrics.of(self.obs, self.obs)
        assert (m.nse, m.kge, m.composite) == (1.0, 1.0, 1.0)

    def test_small_example(self):
        assert nse([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]) == 0.5

    def test_mean_predictor(self):
        assert nse(self.obs, np.full(5, self.obs.mean())) == 0.0

    def test_doubled_sim(self):
        # r = 1, alpha = 2, beta = 2
        assert kge(self.obs, 2 * self.obs) == pytest.approx(1 - math.sqrt(2), abs=1e-12)

    @pytest.mark.parametrize("c", [-1.0, 0.5, 2.0])
    def test_shift_only_moves_beta(self, c):
        r, alpha, beta = kge_components(self.obs, self.obs + c)
        assert r == pytest.approx(1.0, abs=1e-12) and alpha == pytest.approx(1.0, abs=1e-12)
        assert kge(self.obs, self.obs + c) == pytest.approx(1 - abs(c) / self.obs.mean(), abs=1e-12)

    def test_undefined_cases(self):
        with pytest.raises(ConstantObservations):
            nse([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(ConstantSeries):
            kge(self.obs, np.full(5, 3.0))
        with pytest.raises(LengthMismatch):
            nse([1.0, 2.0], [1.0])

    def test_constant_sim_keeps_nse(self):
        m = SkillMetrics.of(self.obs, np.full(5, self.obs.mean()))
        assert m.nse == 0.0 and math.isnan(m.kge) and math.isnan(m.composite)
        assert m.to_dict()["kge"] is None
        with pytest.raises(ConstantSeries):
            SkillMetrics.of(self.obs, np.full(5, 3.0), strict=True)

    @given(series, st.data())
    def test_bounded_above_by_one(self, o, data):
        s = data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(o), max_size=len(o)))
        m = SkillMetrics.of(o, s)
        assert m.nse <= 1.0
        if not math.isnan(m.kge):
            assert m.kge <= 1.0 + 1e-12
            assert m.composite == composite(m.nse, m.kge)


class TestSplit:
    def test_overlap_rejected(self):
        with pytest.raises(ValidationError):
            Split((0, 100), (50, 150))

    def test_adjacent_allowed(self):
        s = Split((0, 100), (100, 150))
        assert s.train_slice() == slice(0, 100) and s.holdout_slice() == slice(100, 150)

    def test_default(self):
        s = Split.default(700, warmup=10)
        assert s.train == (10, 500) and s.holdout == (500, 700)


TRUTH = HbvParams(FC=250.0, BETA=2.5, LP=0.6, K1=0.08, PERC=1.5, MAXBAS=2)


def hbv_job(n=240, budget=80, init=None, obs=None, free=None):
    f = seasonal_forcing(n, seed=3)
    free = free or {"FC": (50.0, 500.0), "BETA": (1.0, 6.0)}
    truth = HbvStudent(free, base=TRUTH)
    q = np.asarray(truth.simulate({}, f)) if obs is None else obs
    student = HbvStudent(free, init=init or {"FC": 180.0, "BETA": 2.0}, base=TRUTH)
    return DistillationJob(DATA_TO_PROCESS, q, student, Split((0, n * 2 // 3), (n * 2 // 3, n)),
                           optimizer={"kind": "adam", "lr": 0.05}, budget=budget, inputs=f,
                           options={"warmup": 20})


class TestCalibration:
    def test_self_calibration(self):
        res = calibrate_process(hbv_job())
        assert res.train_metrics.nse >= 0.99
        assert res.holdout_metrics.nse >= 0.98
        assert res.loss_trace[-1] < res.loss_trace[0]

    def test_zero_budget_returns_init(self):
        res = calibrate_process(hbv_job(budget=0))
        assert res.loss_trace == []
        assert res.student["FC"] == pytest.approx(180.0) and res.student["BETA"] == pytest.approx(2.0)
        assert res.train_metrics is not None

    def test_constant_observations(self):
        with pytest.raises(ConstantObservations):
            calibrate_process(hbv_job(obs=np.full(240, 1.0)))

    def test_split_beyond_data(self):
        job = hbv_job()
        job.teacher = job.teacher[:100]
        with pytest.raises(ValidationError):
            calibrate_process(job)

    def test_integer_parameter_not_free(self):
        with pytest.raises(ValidationError):
            HbvStudent({"MAXBAS": (1, 5)})

    def test_bad_mode_and_loss(self):
        with pytest.raises(ValidationError):
            DistillationJob("Magic", None, None, Split((0, 1)))
        with pytest.raises(ValidationError):
            DistillationJob(DATA_TO_PROCESS, None, None, Split((0, 1)), loss="MAE")


class TestSurrogate:
    def test_identity_map(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.0, 10.0, (400, 1))
        student = SequenceRegressor(1, mode="LaggedMlp", window=1, hidden=(16,), seed=0)
        job = DistillationJob(PROCESS_TO_ML, x[:, 0].copy(), student, Split((0, 300), (300, 400)),
                              optimizer={"kind": "adam", "lr": 1e-2}, budget=150, inputs=x,
                              options={"batch_size": 32, "bptt": 50})
        res = run_job(job)
        assert res.holdout_metrics.nse >= 0.999

    def test_student_template_untouched(self):
        x = np.random.default_rng(1).normal(size=(60, 1))
        student = SequenceRegressor(1, mode="LaggedMlp", window=2, hidden=(4,), seed=0)
        before = {k: v.copy() for k, v in student.params.items()}
        run_job(DistillationJob(PROCESS_TO_ML, x[:, 0] ** 2, student, Split((0, 60)), budget=2, inputs=x))
        for k in before:
            np.testing.assert_array_equal(student.params[k], before[k])

    def test_forcing_matrix(self):
        f = seasonal_forcing(5)
        m = forcing_matrix(f)
        assert m.shape == (5, 3)
        np.testing.assert_array_equal(m[:, 1], f.variables["temp"])


class TestTransfer:
    def ensemble(self, n=300):
        ens = soil_env_ensemble(n, seed=2)
        ens["soil_class"] = np.random.default_rng(3).integers(0, 2, n)
        return ens

    def test_self_transfer(self):
        ens = self.ensemble()
        student = NitrificationStudent(DELGROSSO, free={"k_soil[0]": (0.01, 0.5), "k_soil[1]": (0.01, 0.5)},
                                       init={"k_soil[0]": 0.3, "k_soil[1]": 0.03})
        job = DistillationJob(PROCESS_TO_PROCESS, DelGrossoTeacher(), student, Split((0, 200), (200, 300)),
                              optimizer={"kind": "adam", "lr": 0.05}, budget=300)
        res = transfer_process(job, ens)
        assert res.holdout_metrics.nse >= 0.999
        assert res.student["k_soil[0]"] == pytest.approx(0.1, rel=1e-3)
        assert res.student["k_soil[1]"] == pytest.approx(0.1, rel=1e-3)

    def test_disjoint_outputs(self):
        class Discharge:
            outputs = ("q_out",)

            def __call__(self, inputs):
                return inputs["nh4"]

        job = DistillationJob(PROCESS_TO_PROCESS, Discharge(), NitrificationStudent(), Split((0, 10)))
        with pytest.raises(ValidationError):
            transfer_process(job, self.ensemble(10))

    def test_unknown_parameter(self):
        with pytest.raises(ValidationError):
            NitrificationStudent(free={"k9": (0, 1)})


def paired(n=600, offset=0.0, slope=0.0, holdout_from=450, missing=False, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (n, 2))
    simplified = np.sin(3 * x[:, 0]) + x[:, 1]
    original = simplified + offset + slope * x[:, 1] ** 2
    if missing:
        original[5] = np.nan
    idx = np.arange(n)
    return PairedData(x, simplified, original, idx < holdout_from, idx >= holdout_from)


FAST = LearnerSpec(hidden=(16, 16), epochs=150, finetune_epochs=100, lr=1e-2, finetune_lr=1e-2, batch_size=64)


def plan(strategy, data, **kw):
    return Phase1Plan(strategy, data, learner=kw.pop("learner", FAST), **kw)


class TestPhase1:
    def test_zero_residual(self):
        res = run_plan(plan(RESIDUAL, paired()))
        assert res.holdout_metrics.nse >= 0.999

    def test_constant_bias(self):
        d = paired(offset=1.0)
        res = run_plan(plan(RESIDUAL, d))
        err = res.holdout - d.original[d.holdout]
        assert abs(err.mean()) < 0.05

    def test_residual_beats_simplified(self):
        d = paired(slope=3.0)
        res = run_plan(plan(RESIDUAL, d))
        assert res.holdout_metrics.nse > simplified_baseline(d).nse

    def test_transfer_without_shift(self):
        d = paired()
        direct = run_plan(plan(DIRECT, d))
        trans = run_plan(plan(TRANSFER, d))
        assert trans.holdout_metrics.nse >= direct.holdout_metrics.nse - 0.02

    def test_transfer_freezes_trunk(self):
        res = run_plan(plan(TRANSFER, paired(offset=0.5)))
        pre, ada = res.models["pretrained"], res.models["adapted"]
        for block, keys in pre.blocks.items():
            for k in keys:
                assert (pre.params[k].tobytes() == ada.params[k].tobytes()) == (block != "head"), k

    def test_zero_finetune_epochs_is_pretrained_model(self):
        spec = LearnerSpec(hidden=(8,), epochs=30, finetune_epochs=0, lr=1e-2)
        res = run_plan(plan(TRANSFER, paired(), learner=spec))
        pre, ada = res.models["pretrained"], res.models["adapted"]
        for k in pre.params:
            assert pre.params[k].tobytes() == ada.params[k].tobytes()

    def test_transfer_absorbs_offset(self):
        d = paired(offset=2.0)
        res = run_plan(plan(TRANSFER, d))
        assert abs((res.holdout - d.original[d.holdout]).mean()) < 0.1

    def test_hybrid_zero_residual_tracks_simplified(self):
        d = paired()
        hyb = run_plan(plan(HYBRID, d))
        np.testing.assert_allclose(hyb.holdout, d.simplified[d.holdout], atol=0.05)
        assert hyb.metadata["pipeline_order"] == "residual_then_transfer"
        assert set(hyb.metadata["stage_holdout_metrics"]) == {"residual", "transfer"}

    def test_budget_limits_training_samples(self):
        res = run_plan(plan(DIRECT, paired(), budget=20, learner=LearnerSpec(hidden=(4,), epochs=1)))
        assert res.train_metrics is not None

    def test_missing_original_in_mask(self):
        with pytest.raises(PairingMismatch):
            paired(missing=True)

    def test_plan_without_data(self):
        with pytest.raises(PairingMismatch):
            run_plan(Phase1Plan(RESIDUAL, None))

    def test_overlapping_masks(self):
        with pytest.raises(ValidationError):
            PairedData(np.zeros((3, 1)), np.zeros(3), np.zeros(3), [True, True, False], [False, True, True])

    def test_unknown_strategy(self):
        with pytest.raises(ValidationError):
            Phase1Plan("Ensemble", None)


class TestArtifacts:
    def test_report_roundtrip(self, tmp_path):
        o = np.array([1.0, 2.0, 4.0, 3.0])
        rep = MetricsReport("DataToProcess", 7, "abc", {"q_out": SkillMetrics.of(o, o + 0.1),
                                                        "flat": SkillMetrics.of(o, np.full(4, 2.5))},
                            extra={"status": "Ok"})
        rep.write(tmp_path / "r.json")
        import json

        back = MetricsReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert back.metrics["q_out"] == rep.metrics["q_out"]
        assert math.isnan(back.metrics["flat"].kge) and back.metrics["flat"].nse == rep.metrics["flat"].nse
        assert back.extra == {"status": "Ok"} and back.kge_variant == "2009"

    def test_trained_surrogate_checkpoint(self, tmp_path):
        x = np.random.default_rng(4).normal(size=(80, 2))
        student = SequenceRegressor(2, mode="GatedRecurrent", hidden=4, seed=1)
        res = run_job(DistillationJob(PROCESS_TO_ML, x.sum(axis=1), student, Split((0, 60), (60, 80)),
                                      budget=2, inputs=x, options={"bptt": 20}))
        save_checkpoint(res.student, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        np.testing.assert_array_equal(back.seq_predict(x)["streamflow"], res.student.seq_predict(x)["streamflow"])
