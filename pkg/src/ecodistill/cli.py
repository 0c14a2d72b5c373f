"""Command-line front end.

    ecodistill <subcommand> --config <path> [--out <dir>] [--seed <n>] [--plot]

Subcommands: simulate, coarsen, calibrate, distill, evaluate, gradcheck.
Exit codes: 0 success, 1 configuration or input validation failure, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import ForcingSeries, fmt, read_tidy_csv, resample_forcing, write_forcing_csv, write_matrix, write_outputs
from .distill import jobs as J
from .distill.metrics import SkillMetrics
from .errors import EcoDistillError, NonFiniteLoss, RuntimeFailure, ValidationError, AxisMismatch
from .graph import CoarseningMap, coarse_mean, coarsen
from .gradcheck import GRAD_TOL, GradReport, hbv_gradients, model_gradients, nitrification_gradients, nitrogen_gradients
from .ml.checkpoint import save_checkpoint
from .ml.sequence import SequenceRegressor
from .process.paramfile import dump_params
from .report import MetricsReport, plot_lines, write_json, write_loss_trace, write_manifest
from .simulator import Simulation
from .synthetic import soil_env_ensemble
from .updaters import HbvUpdater, NitrificationUpdater, NitrogenUpdater

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _say(msg: str) -> None:
    print(msg, flush=True)


def _out_dir(args, cfg=None) -> Path:
    out = Path(args.out) if args.out else Path(((cfg.outputs if cfg else {}) or {}).get("dir", "out"))
    if cfg is not None and not out.is_absolute() and not args.out:
        out = cfg.base / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _initial_states(cfg, sim):
    states = sim.initial_states()
    ov = cfg.initial_overrides
    if isinstance(ov, list):
        if len(ov) != len(states):
            raise ValidationError(f"states.initial lists {len(ov)} nodes, graph has {len(states)}")
        for s, o in zip(states, ov):
            s.update(o)
    else:
        for s in states:
            s.update(ov)
    return states


def _simulate(cfg, bindings=None):
    sim = Simulation(cfg.graph, bindings if bindings is not None else cfg.bindings, cfg.schedule)
    return sim.run(cfg.forcing, _initial_states(cfg, sim))


# --------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    traj = _simulate(cfg)
    out = _out_dir(args, cfg)
    o = cfg.outputs
    fmt_name = o.get("format", "TidyCsv")
    target = out / (o.get("path", "trajectory.csv") if fmt_name == "TidyCsv" else o.get("path", "grids"))
    files = write_outputs(traj, target, fmt_name, o.get("variables"), cfg.graph.grid_meta)
    names = o.get("variables") or sorted({k for d in traj.records[0].snapshot.fluxes for k in d}) \
        if traj.records else []
    for name in names:
        m = traj.matrix(name)
        _say(f"{name}: steps={m.shape[0]} nodes={m.shape[1]} mean={fmt(m.mean())} "
             f"min={fmt(m.min())} max={fmt(m.max())}")
    non_conv = sum(r.non_converged for r in traj.records)
    if non_conv:
        _say(f"warning: {non_conv} step(s) did not converge")
    if args.plot and names:
        files.append(plot_lines({n: traj.matrix(n).mean(axis=1) for n in names[:4]}, out / "trajectory.svg",
                                title="node-mean trajectories"))
    write_manifest(out, cfg.digest, "simulate", files)
    return EXIT_OK


# ---------------------------------------------------------------- coarsen

def _read_map(path) -> CoarseningMap:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        rows = [ln.split(",") for ln in text.splitlines() if ln.strip()]
        if rows and not rows[0][0].strip().lstrip("-").isdigit():
            rows = rows[1:]
        pairs = sorted((int(a), int(b)) for a, b in rows)
        if [a for a, _ in pairs] != list(range(len(pairs))):
            raise ValidationError("map file must list every fine node id once")
        return CoarseningMap(tuple(b for _, b in pairs))
    if isinstance(doc, list):
        return CoarseningMap(tuple(doc))
    return CoarseningMap(tuple(doc["fine_to_coarse"]), doc.get("method", "Clustering"))


def _graph_doc(g) -> dict:
    return {"kind": "explicit",
            "nodes": [{"area": n.area, "elevation": n.elevation, "soil_class": n.soil_class,
                       "landuse_class": n.landuse_class} for n in g.nodes],
            "edges": [[e.src, e.dst, e.weight] for e in g.edges]}


def _precip_volume(forcing: ForcingSeries, areas) -> float:
    p = forcing.variables["precip"]
    if forcing.per_node:
        return math.fsum((p * areas[None, :]).ravel())
    return math.fsum(p) * math.fsum(areas)


def cmd_coarsen(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    if not args.map:
        raise ValidationError("coarsen needs --map")
    cmap = _read_map(args.map)
    g, cg = cfg.graph, coarsen(cfg.graph, cmap)
    cf = resample_forcing(cfg.forcing, g, cmap)
    out = _out_dir(args, cfg)
    files = []
    files.append(write_json(_graph_doc(cg), out / "coarse_graph.json"))
    forcing_path = out / "forcing_coarse.csv"
    write_forcing_csv(cf, forcing_path)
    files.append(forcing_path)
    doc = json.loads(json.dumps(cfg.doc))
    doc["graph"] = _graph_doc(cg)
    doc["forcing"] = {"path": forcing_path.name, "binding": "PerNodeColumn" if cf.per_node else "Shared"}
    ov = cfg.initial_overrides
    if isinstance(ov, list):
        keys = sorted(set().union(*ov))
        coarse = {k: coarse_mean(np.array([o[k] for o in ov]), g, cmap) for k in keys}
        doc["states"] = {"initial": [{k: float(coarse[k][c]) for k in keys} for c in range(cmap.n_coarse)]}
    files.append(write_json(doc, out / "coarse_config.json"))
    fa, ca = g.areas(), cg.areas()
    area_f, area_c = math.fsum(fa), math.fsum(ca)
    vol_f, vol_c = _precip_volume(cfg.forcing, fa), _precip_volume(cf, ca)
    rel = abs(vol_c - vol_f) / abs(vol_f) if vol_f else abs(vol_c)
    _say(f"graph: {g.n_nodes} nodes -> {cg.n_nodes} nodes ({cg.kind.value})")
    _say(f"total_area fine={fmt(area_f)} coarse={fmt(area_c)} delta={fmt(area_c - area_f)}")
    _say(f"precip_volume fine={fmt(vol_f)} coarse={fmt(vol_c)} relative_delta={fmt(rel)}")
    write_manifest(out, cfg.digest, "coarsen", files)
    return EXIT_OK


# ---------------------------------------------------------------- distill

def _split(tr: dict, n: int) -> J.Split:
    s = tr.get("split")
    if not s:
        return J.Split.default(n)
    return J.Split(tuple(s["train"]), tuple(s["holdout"]) if s.get("holdout") else None)


def _hbv_binding(cfg):
    for b in cfg.bindings:
        if isinstance(b.updater, HbvUpdater):
            return b.updater
    raise ValidationError("this trainer mode needs an hbv binding")


def _observations(cfg, tr, n):
    obs = tr.get("observations")
    if obs is None:
        raise ValidationError("trainer needs 'observations'")
    if "simulate" in obs:
        up = _hbv_binding(cfg)
        p = up.params.with_values(**obs["simulate"].get("params", {}))
        st = J.HbvStudent({}, base=p)
        return np.asarray(st.simulate({}, cfg.forcing), dtype=np.float64)
    if "path" in obs:
        table = read_tidy_csv(cfg.path(obs["path"]))
        y = table.series(obs.get("variable", "q_out"), int(obs.get("node", 0)))
        if len(y) != n:
            raise AxisMismatch(f"observations have {len(y)} steps, forcing has {n}")
        return y
    if "values" in obs:
        return np.asarray(obs["values"], dtype=np.float64)
    raise ValidationError("observations need 'simulate', 'path' or 'values'")


def _student_model(spec: dict, n_inputs: int, seed: int):
    kind = spec.get("kind", "SequenceRegressor")
    if kind != "SequenceRegressor":
        raise ValidationError(f"unknown ML student {kind!r}")
    return SequenceRegressor(n_inputs, tuple(spec.get("heads", ["streamflow"])),
                             mode=spec.get("mode", "GatedRecurrent"), window=int(spec.get("window", 30)),
                             hidden=spec.get("hidden"), seed=seed)


def _run_trainer(cfg, tr, mode_override=None):
    mode = mode_override or tr.get("mode")
    n = len(cfg.forcing)
    split = _split(tr, n)
    opt = tr.get("optimizer")
    seed = cfg.seed
    if mode == J.DATA_TO_PROCESS:
        up = _hbv_binding(cfg)
        free = {k: tuple(v) for k, v in tr["free"].items()}
        student = J.HbvStudent(free, tr.get("init"), base=up.params)
        obs = _observations(cfg, tr, n)
        job = J.DistillationJob(mode, obs, student, split, tr.get("loss", "MSE"),
                                opt or {"kind": "adam", "lr": 0.01}, seed, int(tr.get("iterations", 500)),
                                cfg.forcing, {"warmup": int(tr.get("warmup", 0))})
        return job, J.calibrate_process(job)
    if mode in (J.PROCESS_TO_ML, J.DATA_TO_ML):
        names = tuple(tr.get("inputs", ["precip", "temp", "pet"]))
        x = J.forcing_matrix(cfg.forcing, names)
        if mode == J.PROCESS_TO_ML:
            teacher = _simulate(cfg).series(tr.get("target", "q_out"), int(tr.get("node", 0)))
        else:
            teacher = _observations(cfg, tr, n)
        student = _student_model(tr.get("student", {}), len(names), seed)
        job = J.DistillationJob(mode, teacher, student, split, tr.get("loss", "MSE"),
                                opt or {"kind": "adam", "lr": 1e-3}, seed, int(tr.get("epochs", 100)), x,
                                {"bptt": int(tr.get("bptt", 30)), "batch_size": tr.get("batch_size", 64)})
        return job, J.train_on_data(job)
    if mode == J.PROCESS_TO_PROCESS:
        tspec, sspec = tr.get("teacher", {}), tr.get("student", {})
        ens_spec = tr.get("ensemble", {})
        size = int(ens_spec.get("n", 2000))
        ens = soil_env_ensemble(size, seed=int(ens_spec.get("seed", seed)))
        n_classes = int(ens_spec.get("soil_classes", 1))
        ens["soil_class"] = np.random.default_rng(seed + 1).integers(0, n_classes, size)
        teacher = J.NitrificationStudent(tspec.get("formulation", "DelGrosso"))
        tvals = dict(tspec.get("params", {}))

        class _Teacher:
            outputs = tuple(tspec.get("outputs", ["nitrification"]))

            def __call__(self, inputs):
                return teacher.predict(tvals, inputs)

        student = J.NitrificationStudent(sspec.get("formulation", "Parton"),
                                         free={k: tuple(v) for k, v in sspec["free"].items()},
                                         init=sspec.get("init"))
        student.outputs = tuple(sspec.get("outputs", ["nitrification"]))
        cut = int(round(size * 5 / 7))
        split = J.Split((0, cut), (cut, size)) if not tr.get("split") else _split(tr, size)
        job = J.DistillationJob(mode, _Teacher(), student, split, tr.get("loss", "MSE"),
                                opt or {"kind": "adam", "lr": 0.01}, seed, int(tr.get("iterations", 500)), ens)
        return job, J.transfer_process(job)
    raise ValidationError(f"unknown trainer mode {mode!r}")


def cmd_distill(args, mode_override=None) -> int:
    cfg = load_config(args.config, need_trainer=True, seed_override=args.seed)
    tr = cfg.trainer
    try:
        job, res = _run_trainer(cfg, tr, mode_override)
    except NonFiniteLoss as exc:
        _say(f"error: non-finite loss at epoch {exc.epoch}")
        return EXIT_RUNTIME
    out = _out_dir(args, cfg)
    files = []
    if isinstance(res.student, dict):
        p = out / "params.txt"
        p.write_text(dump_params(res.student))
        files.append(p)
    else:
        p = out / "model.json"
        save_checkpoint(res.student, p)
        files.append(p)
    target = tr.get("target", "q_out") if job.mode != J.PROCESS_TO_PROCESS else "nitrification"
    metrics = {f"{target}/train": res.train_metrics, f"{target}/holdout": res.holdout_metrics}
    report = MetricsReport(job.mode, cfg.seed, cfg.digest, metrics,
                           extra={"status": res.status, "split": {"train": list(job.split.train),
                                  "holdout": list(job.split.holdout) if job.split.holdout else None}})
    files.append(report.write(out / "report.json"))
    files.append(write_loss_trace(res.loss_trace, out / "loss_trace.csv"))
    if args.plot and res.loss_trace:
        files.append(plot_lines({"loss": res.loss_trace}, out / "loss_trace.svg", title="training loss",
                                xlabel="iteration", ylabel="loss"))
    for k, m in metrics.items():
        if m is not None:
            _say(f"{k}: nse={fmt(m.nse)} kge={fmt(m.kge)} composite={fmt(m.composite)}")
    write_manifest(out, cfg.digest, "distill", files)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    return cmd_distill(args, mode_override=J.DATA_TO_PROCESS)


# --------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    if not (args.a and args.b and args.variable):
        raise ValidationError("evaluate needs --a, --b and --variable")
    ta, tb = read_tidy_csv(args.a), read_tidy_csv(args.b)
    if ta.times != tb.times:
        raise AxisMismatch("runs cover different time axes")
    if ta.nodes != tb.nodes:
        raise AxisMismatch("runs cover different node sets")
    for t in (ta, tb):
        if args.variable not in t.values:
            raise ValidationError(f"variable {args.variable!r} missing from an input")
    A, B = ta.values[args.variable], tb.values[args.variable]
    per_node = {n: SkillMetrics.of(A[:, i], B[:, i]) for i, n in enumerate(ta.nodes)}
    agg = SkillMetrics.of(A.mean(axis=1), B.mean(axis=1))
    cfg = load_config(args.config, seed_override=args.seed) if args.config else None
    digest_ = cfg.digest if cfg else ""
    seed = cfg.seed if cfg else (args.seed or 0)
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    report = MetricsReport("Evaluate", seed, digest_, {args.variable: agg},
                           {args.variable: per_node} if len(ta.nodes) > 1 else {})
    files = [report.write(out / "report.json")]
    meta = cfg.graph.grid_meta if cfg else None
    if meta is not None:
        if len(meta.cells) != len(ta.nodes):
            raise AxisMismatch("node count does not match the configured grid")
        grid = np.full((meta.nrows, meta.ncols), meta.nodata)
        for n, m in per_node.items():
            r, c = meta.cells[n]
            grid[r, c] = m.composite
        p = out / f"composite_{args.variable}.csv"
        p.write_text(write_matrix(grid))
        files.append(p)
    _say(f"{args.variable}: nse={fmt(agg.nse)} kge={fmt(agg.kge)} composite={fmt(agg.composite)} "
         f"nodes={len(ta.nodes)}")
    write_manifest(out, digest_, "evaluate", files)
    return EXIT_OK


# -------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    steps = int((cfg.doc.get("trainer") or {}).get("gradcheck_steps", 30))
    v = cfg.forcing.variables
    f0 = {k: (a[:, 0] if a.ndim == 2 else a) for k, a in v.items()}
    rep = GradReport()
    for i, b in enumerate(cfg.bindings):
        up = b.updater
        params = up.params if hasattr(up, "params") else None
        plist = params.items() if isinstance(params, dict) else [(None, params)]
        for cls, p in plist:
            tag = f"b{i}" + (f"[{cls}]" if cls is not None else "")
            if isinstance(up, HbvUpdater):
                rep.merge(hbv_gradients(p, f0, steps, prefix=f"{tag}.hbv"))
            elif isinstance(up, NitrogenUpdater):
                rep.merge(nitrogen_gradients(p, f0["temp"], f0.get("q_out", np.full(len(f0["temp"]), 2.0)),
                                             steps, prefix=f"{tag}.nitrogen"))
            elif isinstance(up, NitrificationUpdater):
                if "wfps" not in f0:
                    ens = soil_env_ensemble(64, seed=cfg.seed)
                else:
                    ens = {k: f0[k][:steps] for k in ("wfps", "ph", "temp", "nh4") if k in f0}
                    ens.setdefault("nh4", np.ones(len(ens["wfps"])))
                single = NitrificationUpdater(up.formulation, p)
                rep.merge(nitrification_gradients(single, ens, prefix=f"{tag}.nitrification"))
    tr = cfg.trainer or {}
    if tr.get("mode") in (J.PROCESS_TO_ML, J.DATA_TO_ML) or tr.get("student"):
        spec = tr.get("student", {})
        if spec.get("kind", "SequenceRegressor") == "SequenceRegressor" and "free" not in spec:
            names = tuple(tr.get("inputs", ["precip", "temp", "pet"]))
            x = J.forcing_matrix(cfg.forcing, names)[:max(60, steps)]
            m = _student_model(spec, len(names), cfg.seed)
            y = np.column_stack([x.sum(axis=1)] * len(m.heads))
            m.fit_normalization(x, y)
            ds = m.make_dataset([(x, y)], bptt=30)
            batch, _ = next(m.iter_batches(ds, np.random.default_rng(cfg.seed), 4))
            rep.merge(model_gradients(m, batch, seed=cfg.seed, prefix="student."))
    _say(f"{'block':<40} max_rel_err")
    for k in sorted(rep.errors):
        _say(f"{k:<40} {rep.errors[k]:.3e}")
    for k in rep.kinks:
        _say(f"excluded kink: {k}")
    if rep.kinks:
        return EXIT_VALIDATION
    bad = [k for k, e in rep.errors.items() if not e < GRAD_TOL]
    if bad:
        _say(f"{len(bad)} block(s) exceed {GRAD_TOL:g}")
        return EXIT_RUNTIME
    return EXIT_OK


# ------------------------------------------------------------------- main

COMMANDS = {
    "simulate": cmd_simulate,
    "coarsen": cmd_coarsen,
    "calibrate": cmd_calibrate,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


SUMMARIES = {
    "simulate": "run the configured graph and write trajectories",
    "coarsen": "cluster or resample the graph and check conservation",
    "calibrate": "fit process parameters to observations",
    "distill": "run the configured trainer section",
    "evaluate": "score one tidy CSV against another",
    "gradcheck": "compare tape gradients with finite differences",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecodistill", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=SUMMARIES[name])
        p.add_argument("--config", required=name != "evaluate", help="run configuration (JSON)")
        p.add_argument("--out", help="output directory (default: outputs.dir or ./out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--plot", action="store_true", help="also write SVG plots (needs matplotlib)")
        if name == "coarsen":
            p.add_argument("--map", help="JSON coarsening map: fine_to_coarse labels and method")
        if name == "evaluate":
            p.add_argument("--a", help="tidy CSV of the reference run or observations")
            p.add_argument("--b", help="tidy CSV of the run to score")
            p.add_argument("--variable", help="variable to score, e.g. q_out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for line in exc.findings:
            _say(f"config error: {line}")
        return EXIT_VALIDATION
    except ValidationError as exc:
        _say(f"validation error: {exc}")
        return EXIT_VALIDATION
    except (RuntimeFailure, EcoDistillError) as exc:
        _say(f"runtime error: {exc}")
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError, TypeError) as exc:
        _say(f"runtime error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
