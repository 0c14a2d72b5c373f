import numpy as np
import pytest
from hypothesis import given, strategies as st

from ecodistill.data import ForcingSeries, daily_dates
from ecodistill.errors import AxisMismatch, NonFiniteState, SchemaMismatch, UnknownMethod, ValidationError
from ecodistill.graph import Edge, NodeAttributes, WatershedGraph, build_from_flow_direction_grid
from ecodistill.process.nitrification import NitrifParamsDelGrosso
from ecodistill.simulator import (
    AggregateOp,
    MessageSpec,
    Schedule,
    Simulation,
    Trajectory,
    UpdaterBinding,
    aggregate,
    compare_runs,
    register_aggregate,
    run,
)
from ecodistill.synthetic import seasonal_forcing
from ecodistill.updaters import HbvUpdater, LinearUpdater, NitrificationUpdater, NitrogenUpdater, Updater

ALL_SCHEDULES = ["Synchronous", "TopologicalAsync", "ConvergenceIterative"]


def chain(n):
    return WatershedGraph(tuple(NodeAttributes(area=1.0) for _ in range(n)),
                          tuple(Edge(i, i + 1) for i in range(n - 1)))


def passthrough():
    return UpdaterBinding(LinearUpdater(a=1.0, b=0.0, c=1.0, forcing_key="impulse"),
                          messages={"inflow": MessageSpec("outflow")})


def impulse(n_nodes, steps):
    frames = [[{"impulse": 0.0} for _ in range(n_nodes)] for _ in range(steps)]
    frames[0][0]["impulse"] = 1.0
    return frames


class TestAggregate:
    def test_sum(self):
        assert aggregate(AggregateOp("Sum"), [1.0, 2.0, 3.0]) == 6.0

    def test_weighted_sum(self):
        assert aggregate(AggregateOp("WeightedSum"), [10.0, 5.0], [0.4, 1.0]) == 9.0

    @pytest.mark.parametrize("kind", ["Sum", "WeightedSum", "Mean", "Max"])
    def test_empty_is_zero(self, kind):
        assert aggregate(AggregateOp(kind), []) == 0.0

    def test_mean_and_max(self):
        assert aggregate(AggregateOp("Mean"), [1.0, 2.0, 6.0]) == 3.0
        assert aggregate(AggregateOp("Max"), [1.0, 7.0, 6.0]) == 7.0

    def test_custom(self):
        register_aggregate("second_largest", lambda v, w: sorted(v)[-2] if len(v) > 1 else 0.0)
        op = AggregateOp.parse("Custom:second_largest")
        assert aggregate(op, [3.0, 9.0, 4.0]) == 4.0

    def test_unknown(self):
        with pytest.raises(UnknownMethod):
            AggregateOp.parse("Median")
        with pytest.raises(UnknownMethod):
            AggregateOp("Custom", "nope")

    @given(st.lists(st.floats(0, 1e6), max_size=8))
    def test_sum_is_weighted_sum_with_unit_weights(self, vals):
        assert aggregate(AggregateOp("Sum"), vals) == aggregate(AggregateOp("WeightedSum"), vals)


class TestSchedules:
    def test_three_node_chain(self):
        g = chain(3)
        sync = Simulation(g, [passthrough()], Schedule("Synchronous")).run(impulse(3, 4))
        topo = Simulation(g, [passthrough()], Schedule("TopologicalAsync")).run(impulse(3, 4))
        np.testing.assert_array_equal(sync.series("outflow", 2), [0.0, 0.0, 1.0, 0.0])
        np.testing.assert_array_equal(topo.series("outflow", 2), [1.0, 0.0, 0.0, 0.0])

    @pytest.mark.parametrize("n", [2, 5, 13])
    def test_chain_latency(self, n):
        sync = Simulation(chain(n), [passthrough()], Schedule("Synchronous")).run(impulse(n, n + 1))
        out = sync.series("outflow", n - 1)
        assert int(np.argmax(out)) == n - 1 and out.sum() == 1.0

    @pytest.mark.parametrize("kind", ALL_SCHEDULES)
    def test_edgeless_graph_is_schedule_independent(self, kind):
        g = WatershedGraph(tuple(NodeAttributes(area=a) for a in (1.0, 2.0, 3.0)))
        f = seasonal_forcing(40, seed=2)
        ref = Simulation(g, [UpdaterBinding(HbvUpdater())], Schedule("Synchronous")).run(f)
        got = Simulation(g, [UpdaterBinding(HbvUpdater())], Schedule(kind)).run(f)
        assert [r.snapshot for r in got.records] == [r.snapshot for r in ref.records]
        assert all(r.iterations == 1 for r in got.records)

    def fixed_point_sim(self, tol=1e-8, max_iter=100):
        g = WatershedGraph((NodeAttributes(1.0), NodeAttributes(1.0)), (Edge(0, 1), Edge(1, 0)))
        msg = {"inflow": MessageSpec("x", source="state")}
        bx = UpdaterBinding(LinearUpdater(a=0.5, b=1.0, c=0.0), [0], msg)
        by = UpdaterBinding(LinearUpdater(a=0.5, b=0.0, c=0.0), [1], msg)
        return Simulation(g, [bx, by], Schedule("ConvergenceIterative", tol, max_iter))

    def test_fixed_point(self):
        traj = self.fixed_point_sim().run([[{}, {}]])
        rec = traj.records[0]
        assert rec.converged
        x, y = rec.snapshot.states[0]["x"], rec.snapshot.states[1]["x"]
        assert abs(x - 4 / 3) < 1e-8 and abs(y - 2 / 3) < 1e-8

    def test_iteration_cap_flags_step(self):
        traj = self.fixed_point_sim(max_iter=3).run([[{}, {}]])
        assert traj.records[0].non_converged and traj.records[0].iterations == 3

    def test_cyclic_graph_rejected_by_topological(self):
        sim = self.fixed_point_sim()
        sim.schedule = Schedule("TopologicalAsync")
        with pytest.raises(ValidationError):
            sim.run([[{}, {}]])


class TestRun:
    def test_zero_length_forcing(self):
        sim = Simulation(chain(2), [passthrough()])
        traj = sim.run([])
        assert len(traj) == 0 and traj.initial.time == 0
        assert traj.snapshots == [traj.initial]

    def test_coverage_checked(self):
        with pytest.raises(ValidationError):
            Simulation(chain(3), [UpdaterBinding(HbvUpdater(), [0, 1])])
        with pytest.raises(ValidationError):
            Simulation(chain(2), [UpdaterBinding(HbvUpdater()), UpdaterBinding(HbvUpdater(), [1])])

    def test_soil_class_selector(self):
        g = WatershedGraph((NodeAttributes(1.0, soil_class=0), NodeAttributes(1.0, soil_class=1)))
        b0 = UpdaterBinding(LinearUpdater(b=1.0, c=0.0), {"soil_class": 0})
        b1 = UpdaterBinding(LinearUpdater(b=2.0, c=0.0), {"soil_class": 1})
        traj = Simulation(g, [b0, b1]).run([[{}, {}]])
        assert [s["x"] for s in traj.records[0].snapshot.states] == [1.0, 2.0]

    def test_initial_state_checked(self):
        sim = Simulation(chain(1), [UpdaterBinding(HbvUpdater())])
        with pytest.raises(SchemaMismatch):
            sim.run(seasonal_forcing(3), [{"snow": 0.0}])

    def test_nonfinite_state(self):
        class Blowup(Updater):
            name = "blowup"

            def update(self, state, message, forcing, node, attrs):
                return {}, {"q": float("inf")}

        with pytest.raises(NonFiniteState):
            Simulation(chain(1), [UpdaterBinding(Blowup())]).run([[{}]])

    def test_stacked_bindings_share_local_fluxes(self):
        g = chain(1)
        sim = Simulation(g, [UpdaterBinding(HbvUpdater()), UpdaterBinding(NitrogenUpdater())])
        traj = sim.run(seasonal_forcing(30, seed=1, mean_temp=12))
        assert traj.matrix("leaching").max() > 0

    def test_routing_accumulates_downstream(self):
        g = chain(3)
        b = UpdaterBinding(HbvUpdater(), messages={"inflow": MessageSpec("discharge_m3")})
        f = seasonal_forcing(60, seed=3, mean_temp=12)
        topo = run(g, None, [b], Schedule("TopologicalAsync"), f)
        q = topo.matrix("discharge_m3")
        local = topo.matrix("q_out") * 1e-3
        np.testing.assert_allclose(q[:, 2], local.sum(axis=1), rtol=1e-12)

    def test_uniform_grid_gives_uniform_flux(self):
        g = build_from_flow_direction_grid(np.full((4, 5), 1, dtype=np.int64), 10.0)
        rng = np.random.default_rng(0)
        T = 15
        drivers = {k: rng.uniform(lo, hi, T) for k, (lo, hi) in
                   {"wfps": (0.1, 1), "ph": (4, 8), "nh4": (0.1, 3)}.items()}
        f = seasonal_forcing(T, seed=0).with_variables(**drivers)
        traj = Simulation(g, [UpdaterBinding(NitrificationUpdater(params=NitrifParamsDelGrosso()))]).run(f)
        m = traj.matrix("nitrification")
        assert np.all(m == m[:, :1])

    def test_module_level_run_matches_simulation(self):
        f = seasonal_forcing(20, seed=9)
        a = run(chain(1), None, [UpdaterBinding(HbvUpdater())], Schedule(), f)
        b = Simulation(chain(1), [UpdaterBinding(HbvUpdater())]).run(f)
        np.testing.assert_array_equal(a.matrix("q_out"), b.matrix("q_out"))


class TestCompare:
    def traj(self, steps=200, seed=0):
        g = WatershedGraph(tuple(NodeAttributes(area=1.0) for _ in range(2)))
        return Simulation(g, [UpdaterBinding(HbvUpdater())]).run(seasonal_forcing(steps, seed=seed, mean_temp=12))

    def test_self_comparison(self):
        a = self.traj()
        for _, m in compare_runs(a, a, "q_out").rows:
            assert m.nse == 1.0 and m.kge == 1.0 and m.composite == 1.0

    def test_shifted_run_scores_lower(self):
        a = self.traj()
        recs = a.records[1:] + a.records[:1]
        b = Trajectory(a.initial, recs, a.dates)
        assert all(m.composite < 1.0 for _, m in compare_runs(a, b, "q_out").rows)

    def test_mean_predictor(self):
        a = self.traj()
        A = a.matrix("q_out")
        recs = []
        for k, r in enumerate(a.records):
            fl = [dict(f, q_out=float(A[:, v].mean())) for v, f in enumerate(r.snapshot.fluxes)]
            recs.append(type(r)(r.time, type(r.snapshot)(r.snapshot.time, r.snapshot.states, tuple(fl))))
        b = Trajectory(a.initial, recs, a.dates)
        rows = compare_runs(a, b, "q_out").rows
        assert all(abs(m.nse) < 1e-12 for _, m in rows)
        assert all(np.isnan(m.kge) and np.isnan(m.composite) for _, m in rows)

    def test_axis_mismatch(self):
        with pytest.raises(AxisMismatch):
            compare_runs(self.traj(100), self.traj(120), "q_out")

    def test_aggregate_row(self):
        a = self.traj()
        table = compare_runs(a, a, "q_out", per_node=False)
        assert [n for n, _ in table.rows] == ["all"]
