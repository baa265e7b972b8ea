import math

import numpy as np
import pytest

from echoscape.dataset import generate_dataset, read_dataset
from echoscape.experiments import (CONDITIONS, BaseDynamics, CorridorConfig, CorridorRun,
                                   SlipConfig, corridor_statistics, run_bench, run_corridor,
                                   run_corridor_experiment, run_slip_experiment, slip_statistics)
from echoscape.model import EchoPTConfig, build_model
from echoscape.sim import SensorConfig, VelocityCommand

from test_model import TINY

SMALL = SensorConfig(num_ranges=16, num_azimuths=8)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory, arena):
    path = tmp_path_factory.mktemp("bench") / "d.bin"
    return read_dataset(generate_dataset(arena, SMALL, 20.0, 11, path))


@pytest.fixture(scope="module")
def tiny_params():
    return build_model(EchoPTConfig(**TINY), np.random.default_rng(0))


def test_bench_layout(small_ds, tiny_params):
    res = run_bench(small_ds, tiny_params, n_stacks=12, horizons=(1, 3), seed=2)
    assert len(res.rows) == 3 * 2 * 12
    assert {(s["method"], s["horizon"]) for s in res.summary} == {
        (m, h) for m in ("naive", "flow", "echopt") for h in (1, 3)}
    assert len(res.tests) == 2 * 2
    assert all(0.0 <= t["p_cc"] <= 1.0 for t in res.tests)
    assert res.mean_cc("flow", 1) == pytest.approx(
        np.mean([r["cc"] for r in res.rows if r["method"] == "flow" and r["horizon"] == 1]))


def test_bench_deterministic_and_seeded(small_ds):
    a = run_bench(small_ds, None, n_stacks=10, horizons=(1, 2), seed=4)
    b = run_bench(small_ds, None, n_stacks=10, horizons=(1, 2), seed=4)
    c = run_bench(small_ds, None, n_stacks=10, horizons=(1, 2), seed=5)
    assert a.rows == b.rows and a.tests == [] and a.summary == b.summary
    assert [r["start"] for r in a.rows] != [r["start"] for r in c.rows]


def test_bench_rejects_too_many_stacks(small_ds):
    with pytest.raises(ValueError, match="windows"):
        run_bench(small_ds, None, n_stacks=1000, horizons=(1, 10))


def test_slip_run_structure(arena):
    cfg = SlipConfig(duration=8.0, both_window=(2.0, 3.0), single_window=(5.0, 6.0), horizons=(1, 2))
    run = run_slip_experiment(arena, SMALL, None, cfg)
    n = len(run.times)
    assert n == 40
    assert run.series("flow", 1).shape == (n,)
    # analytic predictors need one history frame; AR-h targets start h frames later
    assert np.isnan(run.series("flow", 1)[0])
    assert np.all(np.isfinite(run.series("flow", 1)[1:]))
    assert np.all(np.isnan(run.series("naive", 2)[:2]))
    assert np.all(np.isfinite(run.series("naive", 2)[2:]))
    w = np.array(run.windows)
    assert (w == "both").sum() == 5 and (w == "single").sum() == 5
    moved = ~np.all(np.isclose(run.executed, run.commanded, rtol=0, atol=1e-12), axis=1)
    assert np.array_equal(moved, w != "none")
    stats = slip_statistics(run, "flow", 1)
    assert stats["p95_out"] >= stats["median_out"] > 0


def test_slip_reduces_executed_motion(arena):
    cfg = SlipConfig(duration=8.0, both_window=(2.0, 3.0), single_window=(5.0, 6.0), horizons=(1,))
    run = run_slip_experiment(arena, SMALL, None, cfg)
    w = np.array(run.windows)
    both = run.executed[w == "both"]
    assert np.allclose(both, 0.2 * run.commanded[w == "both"])
    single = run.executed[w == "single"]
    assert np.all(single[:, 0] < run.commanded[0, 0])


def test_default_slip_loop_keeps_clear_of_reflectors(arena):
    from echoscape.experiments import simulate_slip_drive
    cfg = SlipConfig()
    *_, poses = simulate_slip_drive(arena, SMALL, cfg)
    a = arena.array
    xy = np.array([(p.x, p.y) for p in poses])
    gap = np.hypot(a[None, :, 0] - xy[:, None, 0], a[None, :, 1] - xy[:, None, 1]) - a[None, :, 2]
    assert gap.min() > 0.5


def test_no_slip_error_stays_within_twice_median(arena):
    # calibration run: without slip the one-step error has no outliers
    run = run_slip_experiment(arena, SensorConfig(), None,
                              SlipConfig(both_slip=0.0, single_slip=0.0, horizons=(1,)))
    for method in ("naive", "flow"):
        e = run.series(method, 1)
        e = e[np.isfinite(e)]
        assert e.max() < 2.0 * np.median(e), method


def test_base_dynamics_limits_acceleration():
    base = BaseDynamics(0.25, 4.0)
    out = base.track(VelocityCommand(0.3, -2.0), 0.2)
    assert out.v_lin == pytest.approx(0.05) and out.omega_r == pytest.approx(-0.8)
    for _ in range(20):
        out = base.track(VelocityCommand(0.3, -2.0), 0.2)
    assert (out.v_lin, out.omega_r) == pytest.approx((0.3, -2.0))


def test_corridor_run_checks_arguments(arena, sensor):
    cfg = CorridorConfig(runs=1, timeout=1.0)
    with pytest.raises(ValueError):
        run_corridor(arena, sensor, "foggy", 0, cfg)
    with pytest.raises(ValueError):
        run_corridor(arena, sensor, "noisy+prediction", 0, cfg)


def test_corridor_short_runs(arena, sensor, tiny_params):
    cfg = CorridorConfig(runs=1, timeout=6.0)
    clean = run_corridor(arena, sensor, "clean", 0, cfg)
    noisy = run_corridor(arena, sensor, "noisy", 0, cfg)
    assert clean.trajectory[0] == noisy.trajectory[0]     # same spawn for the same run index
    assert clean.gate_failures == 0 and clean.stops == 0
    assert noisy.gate_failures > 0
    assert len(clean.trajectory) <= 31 and clean.travel_time <= cfg.timeout
    again = run_corridor(arena, sensor, "noisy", 0, cfg)
    assert again.trajectory == noisy.trajectory


def test_corridor_experiment_keys(arena, sensor):
    out = run_corridor_experiment(arena, sensor, CorridorConfig(runs=2, timeout=0.4),
                                  conditions=("clean",))
    assert list(out) == ["clean"] and len(out["clean"]) == 2
    assert set(CONDITIONS) == {"clean", "noisy", "noisy+prediction"}


def test_corridor_statistics_examples():
    runs = [CorridorRun("clean", i, [], t, True, devs, s, s, 0)
            for i, (t, devs, s) in enumerate([(10.0, [0.1, 0.3], 0), (20.0, [0.2], 2),
                                              (30.0, [], 1)])]
    st = corridor_statistics(runs)
    assert st["median_travel_time"] == 20.0
    assert st["median_abs_deviation"] == pytest.approx(0.2)
    assert st["mean_stops"] == 1.0 and st["arrivals"] == 3
    assert math.isnan(corridor_statistics(runs[2:])["median_abs_deviation"])
