"""Command-line entry point: dataset generation, training, prediction and experiments.

Every subcommand writes into ``--out`` a ``manifest.json`` (argv, seeds, config
hash, input hashes, versions) next to its CSV results, so a directory can be
regenerated from its manifest alone.
"""
from __future__ import annotations

import os

# deterministic reductions; must be set before numpy loads BLAS
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import json
import sys
from pathlib import Path

import click
import numpy as np

from .dataset import (DatasetFormatError, FrameStack, generate_dataset, read_dataset,
                      stack_arrays)
from .experiments import (CONDITIONS, CorridorConfig, SlipConfig, corridor_statistics,
                          run_bench, run_corridor_experiment, run_slip_experiment,
                          slip_statistics)
from .metrics import cross_corr_coeff, nrmsd
from .model import ConfigError, EchoPTConfig, ModelParams
from .predictive import make_predictor, predict_ar
from .results import write_csv, write_manifest, write_pgm
from .sim import ReflectorMap, SensorConfig, builtin_world, load_world
from .train import OptimSettings, TrainingDiverged, train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class CliError(click.ClickException):
    exit_code = EXIT_RUNTIME


class ConfigProblem(CliError):
    exit_code = EXIT_CONFIG


class DataProblem(CliError):
    exit_code = EXIT_DATA


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigProblem(f"cannot read config {path}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise ConfigProblem(f"config {path} is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}")
    if not isinstance(cfg, dict):
        raise ConfigProblem(f"config {path} must hold a JSON object at the top level")
    return cfg


def _section(cfg, key, allowed):
    sec = cfg.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigProblem(f"config section {key!r} must be an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigProblem(f"unknown keys in config section {key!r}: {sorted(unknown)}; "
                            f"allowed: {sorted(allowed)}")
    return sec


def _world(spec) -> ReflectorMap:
    try:
        if Path(spec).is_file():
            return load_world(spec)
        return builtin_world(spec)
    except (KeyError, FileNotFoundError):
        raise ConfigProblem(f"world {spec!r} is neither a file nor a built-in world")
    except (ValueError, json.JSONDecodeError) as e:
        raise DataProblem(f"world file {spec} is malformed: {e}")


def _sensor(cfg) -> SensorConfig:
    try:
        return SensorConfig.from_dict(cfg.get("sensor", {}))
    except (TypeError, ValueError) as e:
        raise ConfigProblem(f"bad sensor config: {e}")


def _dataset(path):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise DataProblem(f"dataset {path} does not exist; create it with `echoscape gen-data`")
    except DatasetFormatError as e:
        raise DataProblem(f"dataset {path}: {e}")


def _model(path):
    if path is None:
        return None
    try:
        return ModelParams.load(path)
    except FileNotFoundError:
        raise DataProblem(f"model {path} not found; train one with `echoscape train`")
    except (ConfigError, ValueError, KeyError) as e:
        raise DataProblem(f"model {path} is unreadable: {e}")


def _out(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {p}: {e.strerror}")
    if not os.access(p, os.W_OK):
        raise CliError(f"output directory {p} is not writable")
    return p


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Sonar energyscape simulation and EchoPT prediction experiments."""


@main.command("gen-data")
@click.option("--world", default="arena", show_default=True, help="World JSON file or built-in name.")
@click.option("--duration", type=float, required=True, help="Seconds of driving to simulate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--snr-db", type=float, default=5.0, show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON with an optional 'sensor' section.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--name", default="frames.bin", show_default=True)
def gen_data(world, duration, seed, snr_db, config_path, out_dir, name):
    """Random-walk a robot through a world and record measured frames."""
    if duration <= 0:
        raise ConfigProblem("--duration must be positive")
    cfg = _load_config(config_path)
    _section(cfg, "sensor", SensorConfig.__dataclass_fields__)
    sensor = _sensor(cfg)
    w = _world(world)
    out = _out(out_dir)
    path = out / name
    try:
        generate_dataset(w, sensor, duration, seed, path, snr_db=snr_db)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e.strerror}")
    conf = {"world": w.digest(), "sensor": sensor.to_dict(), "duration": duration, "snr_db": snr_db}
    write_manifest(out, "gen-data", sys.argv, {"seed": seed}, conf, outputs=[name])
    click.echo(f"wrote {path}")


@main.command()
@click.option("--train-data", type=click.Path(dir_okay=False), required=True)
@click.option("--val-data", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON with 'model' (architecture) and 'optimizer' (Adam options) sections; "
                   "unset options take the desk-scale defaults.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-seconds", type=float, default=None, help="Wall-clock training budget.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def train_cmd(train_data, val_data, config_path, seed, max_seconds, out_dir):
    """Train EchoPT on one-shot stacks; writes model.json/model.bin and loss CSV."""
    cfg = _load_config(config_path)
    _section(cfg, "model", EchoPTConfig.__dataclass_fields__)
    try:
        mcfg = EchoPTConfig.from_dict(cfg.get("model", {}))
        # desk-scale defaults; the config section overrides them key by key
        optim = OptimSettings.from_dict({**OptimSettings.toy().to_dict(), **cfg.get("optimizer", {})})
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigProblem(str(e))
    if max_seconds is not None:
        optim.max_seconds = max_seconds
    tr = _dataset(train_data)
    if tr.header.sensor.num_ranges != mcfg.num_ranges or tr.header.sensor.num_azimuths != mcfg.num_azimuths:
        raise ConfigProblem("model grid does not match the dataset sensor grid; set model.num_ranges "
                            "and model.num_azimuths")
    fr, ve, tg, _ = stack_arrays(tr, mcfg.n_frames)
    val = None
    if val_data:
        va = _dataset(val_data)
        vf, vv, vt, _ = stack_arrays(va, mcfg.n_frames)
        val = (vf, vv, vt[:, 0])
    out = _out(out_dir)
    rng = np.random.default_rng(seed)
    try:
        res = train((fr, ve, tg[:, 0]), optim, rng, cfg=mcfg, val_set=val, log=click.echo)
    except TrainingDiverged as e:
        raise CliError(str(e))
    res.params.save(out / "model", meta={"best_epoch": res.best_epoch})
    write_csv(out / "losses.csv", res.history)
    conf = {"model": mcfg.to_dict(), "optimizer": optim.to_dict()}
    write_manifest(out, "train", sys.argv, {"seed": seed}, conf,
                   inputs=[p for p in (train_data, val_data) if p],
                   outputs=["model.json", "model.bin", "losses.csv"])
    click.echo(f"best epoch {res.best_epoch}; model saved to {out / 'model'}")


main.add_command(train_cmd, "train")


@main.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--method", type=click.Choice(["naive", "flow", "echopt"]), default="flow",
              show_default=True)
@click.option("--model", "model_path", default=None, help="Model path stem (needed for echopt).")
@click.option("--start", type=int, default=0, show_default=True, help="Index of the first history frame.")
@click.option("--ar", "k", type=int, default=1, show_default=True, help="Autoregressive steps.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def predict(data, method, model_path, start, k, out_dir):
    """Predict k frames ahead from measured history; writes PGMs and a metrics row per step."""
    if k < 1:
        raise ConfigProblem("--ar must be at least 1")
    if method == "echopt" and model_path is None:
        raise ConfigProblem("--method echopt needs --model")
    ds = _dataset(data)
    params = _model(model_path) if method == "echopt" else None
    p = make_predictor(method, params)
    n = p.n_history
    if start < 0 or start + n + k > len(ds):
        raise ConfigProblem(f"--start {start} with --ar {k} needs frames up to {start + n + k - 1}; "
                            f"dataset has {len(ds)}")
    stacks = [ds.scape(i) for i in range(start, start + n)]
    cmds = [ds.record(i).commanded for i in range(start, start + n + k)]
    history = FrameStack(stacks, cmds[:n + 1], ds.scape(start + n))
    future = cmds[n:]
    preds = predict_ar(p, history, future, k)
    out = _out(out_dir)
    rows = []
    for j, pred in enumerate(preds, 1):
        target = ds.scape(start + n + j - 1)
        write_pgm(out / f"pred_{j:02d}.pgm", pred.data)
        rows.append({"method": method, "start": start, "step": j,
                     "cc": cross_corr_coeff(pred, target), "nrmsd": nrmsd(pred, target)})
    write_csv(out / "metrics.csv", rows)
    write_manifest(out, "predict", sys.argv, {}, {"method": method, "start": start, "ar": k},
                   inputs=[data] + ([model_path + ".bin"] if model_path else []),
                   outputs=["metrics.csv"] + [f"pred_{j:02d}.pgm" for j in range(1, k + 1)])
    click.echo(f"wrote {k} predictions to {out}")


@main.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--model", "model_path", default=None, help="Model path stem; omit for baselines only.")
@click.option("--n-stacks", type=int, default=200, show_default=True)
@click.option("--horizons", default="1,3,5,10", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def bench(data, model_path, n_stacks, horizons, seed, out_dir):
    """Mean(std) CC and NRMSD per method and horizon, with Welch p-values."""
    try:
        hs = tuple(int(h) for h in horizons.split(","))
    except ValueError:
        raise ConfigProblem(f"--horizons must be comma-separated integers, got {horizons!r}")
    if min(hs) < 1:
        raise ConfigProblem("horizons must be >= 1")
    ds = _dataset(data)
    params = _model(model_path)
    try:
        res = run_bench(ds, params, n_stacks=n_stacks, horizons=hs, seed=seed)
    except ValueError as e:
        raise DataProblem(str(e))
    out = _out(out_dir)
    write_csv(out / "samples.csv", res.rows)
    write_csv(out / "summary.csv", res.summary)
    outs = ["samples.csv", "summary.csv"]
    if res.tests:
        write_csv(out / "welch.csv", res.tests)
        outs.append("welch.csv")
    write_manifest(out, "bench", sys.argv, {"seed": seed},
                   {"n_stacks": n_stacks, "horizons": list(hs), "model": model_path},
                   inputs=[data] + ([model_path + ".bin"] if model_path else []), outputs=outs)
    for s in res.summary:
        click.echo(f"{s['method']:>7} h={s['horizon']:<2} CC {s['cc_mean']:.3f} ({s['cc_std']:.3f})"
                   f"  NRMSD {s['nrmsd_mean']:.3f} ({s['nrmsd_std']:.3f})")


@main.command("slip-exp")
@click.option("--model", "model_path", default=None)
@click.option("--world", default="arena", show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON with 'sensor' and 'slip' sections.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def slip_exp(model_path, world, config_path, seed, out_dir):
    """Constant-command drive with wheel-slip windows; error signal per frame."""
    cfg = _load_config(config_path)
    slip = _section(cfg, "slip", SlipConfig.__dataclass_fields__)
    scfg = SlipConfig(**{**slip, "seed": seed})
    sensor = _sensor(cfg)
    w = _world(world)
    params = _model(model_path)
    run = run_slip_experiment(w, sensor, params, scfg)
    out = _out(out_dir)
    rows = []
    for i, t in enumerate(run.times):
        row = {"t": float(t), "window": run.windows[i], "x": run.poses[i].x, "y": run.poses[i].y,
               "heading": run.poses[i].heading, "cmd_v": run.commanded[i, 0],
               "cmd_omega": run.commanded[i, 1], "exe_v": run.executed[i, 0],
               "exe_omega": run.executed[i, 1]}
        for (m, h), e in sorted(run.eps.items()):
            row[f"eps_{m}_ar{h}"] = "" if not np.isfinite(e[i]) else float(e[i])
        rows.append(row)
    write_csv(out / "slip_series.csv", rows)
    methods = sorted({m for m, _ in run.eps})
    stats = [slip_statistics(run, m, h) for m in methods for h in scfg.horizons]
    write_csv(out / "slip_summary.csv", stats)
    conf = {"slip": {k: getattr(scfg, k) for k in SlipConfig.__dataclass_fields__},
            "sensor": sensor.to_dict(), "world": w.digest(), "model": model_path}
    write_manifest(out, "slip-exp", sys.argv, {"seed": seed}, conf,
                   inputs=[model_path + ".bin"] if model_path else [],
                   outputs=["slip_series.csv", "slip_summary.csv"])
    for s in stats:
        click.echo(f"{s['method']:>7} AR-{s['horizon']}: both/out median ratio "
                   f"{s['both_ratio']:.2f}, single above p95 {s['single_frac_above_p95']:.2f}")


@main.command("corridor-exp")
@click.option("--model", "model_path", default=None, help="Needed for noisy+prediction.")
@click.option("--world", default="arena", show_default=True)
@click.option("--runs", type=int, default=20, show_default=True)
@click.option("--conditions", default=",".join(CONDITIONS), show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON with 'sensor' and 'corridor' sections.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def corridor_exp(model_path, world, runs, conditions, config_path, seed, out_dir):
    """Closed-loop corridor traversal under clean, noisy and noisy+prediction sensing."""
    conds = tuple(c.strip() for c in conditions.split(","))
    bad = [c for c in conds if c not in CONDITIONS]
    if bad:
        raise ConfigProblem(f"unknown conditions {bad}; choose from {list(CONDITIONS)}")
    cfg = _load_config(config_path)
    sec = _section(cfg, "corridor", CorridorConfig.__dataclass_fields__)
    ccfg = CorridorConfig(**{**sec, "runs": runs, "seed": seed})
    sensor = _sensor(cfg)
    w = _world(world)
    if w.corridor is None or w.waypoint is None:
        raise ConfigProblem(f"world {world!r} defines no corridor/waypoint")
    params = _model(model_path)
    if "noisy+prediction" in conds and params is None:
        raise ConfigProblem("condition noisy+prediction needs --model")
    res = run_corridor_experiment(w, sensor, ccfg, params, conds)
    out = _out(out_dir)
    run_rows, traj_rows, stats = [], [], []
    for c in conds:
        for r in res[c]:
            run_rows.append({"condition": c, "run": r.run, "arrived": int(r.arrived),
                             "travel_time": r.travel_time, "stops": r.stops,
                             "gate_failures": r.gate_failures, "predicted_frames": r.predicted_frames,
                             "median_abs_deviation": float(np.median(r.midline_deviations))
                             if r.midline_deviations else ""})
            for t, x, y, h in r.trajectory:
                traj_rows.append({"condition": c, "run": r.run, "t": t, "x": x, "y": y, "heading": h})
        stats.append({"condition": c, **corridor_statistics(res[c])})
    write_csv(out / "corridor_runs.csv", run_rows)
    write_csv(out / "corridor_trajectories.csv", traj_rows)
    write_csv(out / "corridor_summary.csv", stats)
    conf = {"corridor": {k: getattr(ccfg, k) for k in CorridorConfig.__dataclass_fields__},
            "conditions": list(conds), "sensor": sensor.to_dict(), "world": w.digest(),
            "model": model_path}
    write_manifest(out, "corridor-exp", sys.argv, {"seed": seed}, conf,
                   inputs=[model_path + ".bin"] if model_path else [],
                   outputs=["corridor_runs.csv", "corridor_trajectories.csv", "corridor_summary.csv"])
    for s in stats:
        click.echo(f"{s['condition']:>16}: median time {s['median_travel_time']:.1f} s, "
                   f"median |dev| {s['median_abs_deviation']:.3f} m, stops/run {s['mean_stops']:.2f}")


@main.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--frames", "frame_spec", default="0", show_default=True,
              help="Frame indices: 'all', 'a:b' or comma-separated.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def export(data, frame_spec, out_dir):
    """Dump frames as 8-bit PGM (grid max maps to 255) plus a per-frame CSV."""
    ds = _dataset(data)
    n = len(ds)
    try:
        if frame_spec == "all":
            idx = list(range(n))
        elif ":" in frame_spec:
            a, b = frame_spec.split(":")
            idx = list(range(int(a or 0), int(b or n)))
        else:
            idx = [int(s) for s in frame_spec.split(",")]
    except ValueError:
        raise ConfigProblem(f"cannot parse --frames {frame_spec!r}")
    if any(i < 0 or i >= n for i in idx):
        raise ConfigProblem(f"frame indices must lie in [0, {n})")
    out = _out(out_dir)
    rows = []
    for i in idx:
        rec = ds.record(i)
        write_pgm(out / f"frame_{i:06d}.pgm", ds.frames[i])
        rows.append({"index": i, "t": rec.timestamp, "cmd_v": rec.commanded.v_lin,
                     "cmd_omega": rec.commanded.omega_r, "exe_v": rec.executed.v_lin,
                     "exe_omega": rec.executed.omega_r, "x": rec.pose.x, "y": rec.pose.y,
                     "heading": rec.pose.heading, "max": float(ds.frames[i].max())})
    write_csv(out / "frames.csv", rows)
    write_manifest(out, "export", sys.argv, {}, {"frames": frame_spec}, inputs=[data],
                   outputs=["frames.csv"] + [f"frame_{i:06d}.pgm" for i in idx])
    click.echo(f"exported {len(idx)} frames to {out}")


if __name__ == "__main__":
    main()
