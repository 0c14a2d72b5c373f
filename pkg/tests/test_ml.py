import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecodistill.autodiff import ops
from ecodistill.errors import InsufficientHistory, NonFiniteLoss, SchemaMismatch, UnknownSoilClass, ValidationError
from ecodistill.gradcheck import GRAD_TOL, model_gradients
from ecodistill.ml import (
    Adam,
    FreezeMask,
    FunctionModel,
    PRESETS,
    MlpRegressor,
    SequenceRegressor,
    lagged_windows,
    load_checkpoint,
    save_checkpoint,
    train_epochs,
)
from ecodistill.ml.train import mse_loss, nse_loss


def zero_mlp(bias):
    m = MlpRegressor(3, 2, hidden=(4, 4), embed_dim=0, input_norm=False)
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    m.params["head.b"] = np.array(bias, dtype=np.float64)
    return m


class TestMlp:
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_zero_network_outputs_bias(self, x):
        m = zero_mlp([1.5, -2.0])
        np.testing.assert_array_equal(m.predict([0], np.array([x])), [[1.5, -2.0]])

    def test_embedding_isolation(self):
        m = MlpRegressor(2, soil_classes=(0, 1), embed_dim=3, hidden=(8,), input_norm=False, seed=1)
        x = np.array([[0.3, -0.4]])
        a, b = m.predict([0], x), m.predict([1], x)
        assert not np.array_equal(a, b)
        m.params["embedding"][1] = m.params["embedding"][0]
        np.testing.assert_array_equal(m.predict([0], x), m.predict([1], x))

    def test_unknown_class(self):
        m = MlpRegressor(1, soil_classes=(0, 1), embed_dim=2, hidden=(2,))
        with pytest.raises(UnknownSoilClass):
            m.predict([5], np.zeros((1, 1)))

    def test_feature_width_checked(self):
        with pytest.raises(SchemaMismatch):
            MlpRegressor(2, hidden=(2,)).predict([0], np.zeros((1, 3)))

    def test_learns_linear_target(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (200, 1))
        y = 2 * x[:, 0] + 1
        m = MlpRegressor(1, hidden=(16, 16), embed_dim=0, input_norm=False, seed=0)
        m.fit_normalization(x, y)
        ds = m.make_dataset([0], x, y)
        res = train_epochs(m, ds, "mse", {"kind": "adam", "lr": 1e-2}, 2000, batch_size=None)
        xt = np.linspace(0.05, 0.95, 37)[:, None]
        err = np.mean((res.model.predict([0], xt)[:, 0] - (2 * xt[:, 0] + 1)) ** 2)
        assert err < 1e-3

    def test_mlp_gradients(self):
        rng = np.random.default_rng(2)
        m = MlpRegressor(3, soil_classes=(0, 1), embed_dim=2, hidden=(8, 8), seed=3)
        ds = m.make_dataset(rng.integers(0, 2, 20), rng.normal(size=(20, 3)), rng.normal(size=20))
        rep = model_gradients(m, ds, max_coords=None)
        assert set(rep.errors) == set(m.blocks)
        assert max(rep.errors.values()) < GRAD_TOL


class TestSequence:
    def test_desk_presets_build(self):
        g = SequenceRegressor.from_preset("desk_gated", 3)
        lag = SequenceRegressor.from_preset("desk_lagged", 3)
        assert g.hidden == (32,) and lag.window == 30 and lag.hidden == (64, 64)

    def test_reference_preset_is_not_buildable(self):
        assert PRESETS["stacked_lstm_branches"]["layers"] == 4
        with pytest.raises(ValidationError, match="reference record"):
            SequenceRegressor.from_preset("stacked_lstm_branches", 3)
        with pytest.raises(ValidationError, match="unknown preset"):
            SequenceRegressor.from_preset("huge", 3)

    def test_lagged_windows_layout(self):
        x = np.arange(10.0).reshape(5, 2)
        w = lagged_windows(x, 3)
        assert w.shape == (3, 6)
        np.testing.assert_array_equal(w[0], x[:3].ravel())
        with pytest.raises(InsufficientHistory):
            lagged_windows(x, 6)

    def test_lagged_constant_input(self):
        m = SequenceRegressor(2, mode="LaggedMlp", window=4, hidden=(8,), seed=0)
        out = m.seq_predict(np.ones((12, 2)))["streamflow"]
        assert np.isnan(out[:3]).all()
        assert np.all(out[3:] == out[3])

    def test_lagged_history_fills_warmup(self):
        m = SequenceRegressor(1, mode="LaggedMlp", window=3, hidden=(4,), seed=0)
        x = np.random.default_rng(0).normal(size=(10, 1))
        full = m.seq_predict(x)["streamflow"]
        tail = m.seq_predict(x[5:], history=x[:5])["streamflow"]
        np.testing.assert_array_equal(tail, full[5:])

    def test_gated_saturated_gate_ignores_history(self):
        m = SequenceRegressor(2, mode="GatedRecurrent", hidden=6, seed=0)
        m.params["cell.bz"] = np.full(6, -60.0)
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        b[-1] = a[-1]
        ya, yb = m.seq_predict(a)["streamflow"], m.seq_predict(b)["streamflow"]
        assert ya[-1] == pytest.approx(yb[-1], abs=1e-12)

    def test_gated_history_is_causal(self):
        m = SequenceRegressor(1, mode="GatedRecurrent", hidden=5, seed=2)
        x = np.random.default_rng(3).normal(size=(20, 1))
        y = m.seq_predict(x)["streamflow"]
        x2 = x.copy()
        x2[12:] += 5.0
        np.testing.assert_array_equal(m.seq_predict(x2)["streamflow"][:12], y[:12])
        np.testing.assert_allclose(m.seq_predict(x[10:], history=x[:10])["streamflow"], y[10:], rtol=1e-12)

    @pytest.mark.parametrize("mode", ["LaggedMlp", "GatedRecurrent"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(4)
        m = SequenceRegressor(2, heads=("q", "n"), mode=mode, window=4, hidden=6, seed=5)
        x, y = rng.normal(size=(40, 2)), rng.normal(size=(40, 2))
        ds = m.make_dataset([(x, y)], bptt=10)
        batch, _ = next(m.iter_batches(ds, np.random.default_rng(0), 3))
        rep = model_gradients(m, batch)
        assert max(rep.errors.values()) < GRAD_TOL

    def test_heads_are_separate_blocks(self):
        m = SequenceRegressor(1, heads=("a", "b"), mode="GatedRecurrent", hidden=3)
        assert {"cell", "head.a", "head.b"} == set(m.blocks)


class TestTraining:
    def dataset(self, m, n=64, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (n, 2))
        y = np.sin(x[:, 0]) + x[:, 1] ** 2
        m.fit_normalization(x, y)
        return m.make_dataset([0], x, y)

    def test_zero_epochs(self):
        m = MlpRegressor(2, hidden=(4,), embed_dim=0)
        res = train_epochs(m, self.dataset(m), epochs=0)
        assert res.loss_trace == []
        for k in m.params:
            np.testing.assert_array_equal(res.model.params[k], m.params[k])

    def test_freeze_law(self):
        m = MlpRegressor(2, soil_classes=(0,), embed_dim=2, hidden=(6, 6))
        freeze = FreezeMask.heads_only(m)
        res = train_epochs(m, self.dataset(m), "mse", {"kind": "adam", "lr": 1e-2}, 20, freeze=freeze)
        for block, keys in m.blocks.items():
            for k in keys:
                same = np.array_equal(res.model.params[k], m.params[k])
                assert same == (block != "head"), k

    def test_all_frozen_rejected(self):
        m = MlpRegressor(2, hidden=(4,), embed_dim=0)
        with pytest.raises(ValidationError):
            train_epochs(m, self.dataset(m), epochs=1, freeze=FreezeMask(frozenset(m.blocks)))

    def test_quadratic_bowl_decreases(self):
        center = np.array([3.0, -1.0, 0.5])
        model = FunctionModel({"w": np.zeros(3)}, lambda P, _: ops.sum(ops.square(ops.sub(P["w"], center))))
        res = train_epochs(model, None, optimizer={"kind": "gd", "lr": 1e-3}, epochs=1000)
        tr = np.array(res.loss_trace)
        assert np.all(np.diff(tr[1:]) < 0)

    def test_determinism(self):
        def once():
            m = MlpRegressor(2, hidden=(8, 8), embed_dim=0, seed=7)
            return train_epochs(m, self.dataset(m), "mse", {"kind": "adam", "lr": 1e-2}, 5, seed=11,
                                batch_size=16)

        a, b = once(), once()
        assert a.loss_trace == b.loss_trace
        for k in a.model.params:
            assert a.model.params[k].tobytes() == b.model.params[k].tobytes()

    def test_nonfinite_loss_reports_epoch(self):
        model = FunctionModel({"w": np.array(1.0)}, lambda P, _: ops.mul(P["w"], np.inf))
        with pytest.raises(NonFiniteLoss) as info:
            train_epochs(model, None, epochs=3)
        assert info.value.epoch == 0

    def test_nse_loss_matches_definition(self):
        obs = np.array([1.0, 2.0, 3.0])
        sim = np.array([1.0, 2.0, 4.0])
        assert float(nse_loss(sim, obs)) == pytest.approx(0.5)
        assert float(mse_loss(sim, obs)) == pytest.approx(1.0 / 3.0)

    def test_adam_matches_hand_update(self):
        opt = Adam(lr=0.1)
        p = {"w": np.array([1.0])}
        opt.step(p, {"w": np.array([4.0])})
        # first bias-corrected Adam step moves by lr * g/|g|
        assert p["w"][0] == pytest.approx(0.9, abs=1e-8)


class TestCheckpoint:
    @pytest.mark.parametrize("make", [
        lambda: MlpRegressor(3, 2, soil_classes=(0, 4), embed_dim=2, hidden=(5,), seed=1),
        lambda: SequenceRegressor(2, heads=("q",), mode="GatedRecurrent", hidden=4, seed=2),
        lambda: SequenceRegressor(2, heads=("q", "n"), mode="LaggedMlp", window=3, hidden=(4,), seed=3),
    ])
    def test_roundtrip(self, tmp_path, make):
        m = make()
        rng = np.random.default_rng(0)
        x = rng.normal(size=(30, m.n_features if hasattr(m, "n_features") else m.n_inputs))
        m.fit_normalization(x, rng.normal(size=(30, m.n_outputs if hasattr(m, "n_outputs") else len(m.heads))))
        save_checkpoint(m, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        assert back.config() == m.config()
        for k in m.params:
            assert back.params[k].tobytes() == m.params[k].tobytes()
        if isinstance(m, MlpRegressor):
            np.testing.assert_array_equal(back.predict([0] * 30, x), m.predict([0] * 30, x))
        else:
            ya, yb = m.seq_predict(x), back.seq_predict(x)
            for h in m.heads:
                np.testing.assert_array_equal(ya[h], yb[h])

    def test_bad_file(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "x.json")
