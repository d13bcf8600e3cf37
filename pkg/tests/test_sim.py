import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import poisson

from darkpool import sim
from darkpool.model import CostParams, FillModel, GridSpec, MarketParams
from darkpool.sim import (GridExitError, SimConfig, path_rng, poisson_from_uniform, sample_arrivals, simulate,
                          step_regime, transition_matrix)
from darkpool.toy import ToyParams, uncontrolled_value

from conftest import load


def _quiet_market(**over):
    base = dict(sigma=0.0, mu=0.0, s0=10.0, regimes=(0.8,), generator=((0.0,),),
                lambda_a=((0.2, 0.0),), lambda_b=((0.2, 0.0),), fill_model=FillModel(0.9, 0.2))
    base.update(over)
    return MarketParams(**base)


def _costs(phi=0.5):
    return CostParams(eps_m=10.0, eps_l=3.0, delta_menu_a=(0.2,), delta_menu_b=(0.2,),
                      kappa_bar=2.0, kappa_grid=(0.0, 1.0, 2.0), phi=phi)


def _value_at_start(surface):
    # value = y + x*s + h(t, x)
    g = surface.grid
    return g.y0 + g.x0 * surface.market.s0 + float(surface.h[0, 0, g.x0 - g.x_min])


# ---------------------------------------------------------------- primitives

@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 600.0))
def test_poisson_inverse_cdf_matches_scipy(mean):
    u = np.random.default_rng(7).random(2000)
    got = poisson_from_uniform(u, mean)
    ref = poisson.ppf(sim._open_unit(u), mean) if mean > 0 else np.zeros_like(u)
    assert np.array_equal(got, ref.astype(np.int64))


def test_sample_arrivals_moments():
    rng = path_rng(3, 0)
    lam, dt, n = 4.0, 0.5, 40_000
    draws = np.array([sample_arrivals(lam, dt, rng) for _ in range(n)])
    m = lam * dt
    assert abs(draws.mean() - m) < 4 * math.sqrt(m / n)
    assert abs(draws.var() - m) < 4 * math.sqrt(2 * m * m / n + m / n)


def test_sample_arrivals_edge_cases():
    rng = path_rng(0, 0)
    assert all(sample_arrivals(0.0, 1.0, rng) == 0 for _ in range(100))
    with pytest.raises(ValueError):
        sample_arrivals(-1.0, 1.0, rng)


def test_path_streams_are_deterministic_and_distinct():
    assert np.array_equal(path_rng(5, 2).random(4), path_rng(5, 2).random(4))
    assert not np.array_equal(path_rng(5, 2).random(4), path_rng(5, 3).random(4))
    assert not np.array_equal(path_rng(5, 2).random(4), path_rng(6, 2).random(4))


def test_regime_steps_without_switching():
    rng = path_rng(1, 0)
    assert all(step_regime(0, 0.1, [[0.0]], rng) == 0 for _ in range(50))
    gen = [[0.0, 0.0], [0.0, 0.0]]
    assert all(step_regime(1, 0.1, gen, rng) == 1 for _ in range(50))


def test_two_state_transition_matrix_closed_form():
    a, b, dt = 1.0, 3.0, 0.05
    gen = [[-a, a], [b, -b]]
    p = transition_matrix(gen, dt)
    pi0 = b / (a + b)
    assert p[0, 0] == pytest.approx(pi0 + (1 - pi0) * math.exp(-(a + b) * dt), rel=1e-12)
    bern = transition_matrix(gen, dt, "bernoulli")
    assert np.allclose(bern, [[1 - a * dt, a * dt], [b * dt, 1 - b * dt]])
    with pytest.raises(ValueError):
        transition_matrix(gen, 1.0, "bernoulli")


@pytest.mark.parametrize("mode", ["exact", "bernoulli"])
def test_two_state_long_run_fractions(mode):
    a, b, dt = 1.0, 3.0, 0.05
    rng = path_rng(11, 0)
    k, visits = 0, 0
    steps = 60_000
    for _ in range(steps):
        k = step_regime(k, dt, [[-a, a], [b, -b]], rng, mode)
        visits += k == 0
    assert visits / steps == pytest.approx(b / (a + b), abs=0.03)


# ---------------------------------------------------------------- engine

def test_deterministic_market_gives_exact_objective():
    market = _quiet_market()
    grid = GridSpec(x_min=-10, x_max=10, t_steps=20, horizon=1.0, x0=4, y0=2.0)
    res = simulate(None, market, _costs(), grid, SimConfig(paths=50, seed=1))
    expected = 2.0 + 4 * 10.0 - 0.8 * 4 - 10.0 - 0.5 * 16 * 1.0
    assert np.allclose(res.objectives, expected, rtol=0, atol=1e-12)
    assert res.stderr == 0.0 and res.used == 50


def test_results_do_not_depend_on_batching(monkeypatch, solved):
    _, table = solved("fig5_regime", "regime")
    _, market, costs, grid = load("fig5_regime")
    cfg = SimConfig(paths=60, seed=9)
    a = simulate(table, market, costs, grid, cfg)
    monkeypatch.setattr(sim, "_BATCH_BUDGET", 1)
    b = simulate(table, market, costs, grid, cfg)
    assert np.array_equal(a.objectives, b.objectives)
    assert a.records == b.records


def test_accounting_identity_on_recorded_paths(solved):
    _, table = solved("fig5_regime", "regime")
    _, market, costs, grid = load("fig5_regime")
    res = simulate(table, market, costs, grid, SimConfig(paths=20, seed=4, record_paths=20))
    kinds = set()
    for rec in res.records:
        y, x = rec.y0, rec.x0
        for ev in rec.events:
            kinds.add(ev.kind)
            y += ev.dy
            x += ev.dx
            assert ev.kind != "limit-miss" or (ev.dx == 0 and ev.dy == 0.0)
        assert x == rec.terminal.x
        assert y == pytest.approx(rec.terminal.y, rel=1e-12, abs=1e-9)
    assert {"dark-fill-sell", "dark-fill-buy", "limit-fill"} <= kinds


def test_uncontrolled_toy_matches_closed_form():
    _, market, costs, grid = load("fig1_toy")
    grid = dataclasses.replace(grid, x0=3, y0=1.0)
    res = simulate(None, market, costs, grid, SimConfig(paths=20_000, seed=2))
    exact = uncontrolled_value(0.0, 3, 1.0, market.s0, ToyParams.from_config(market, costs, grid))
    assert abs(res.mean - exact) <= 3 * res.stderr


def test_solver_policy_reproduces_value(solved):
    surface, table = solved("fig3_fixed", "fixed")
    _, market, costs, grid = load("fig3_fixed")
    res = simulate(table, market, costs, grid, SimConfig(paths=4000, seed=5))
    h0 = _value_at_start(surface)
    scale = abs(float(surface.h[0, 0, grid.x0 - grid.x_min] - surface.h[0, -1, grid.x0 - grid.x_min]))
    assert abs(res.mean - h0) <= max(3 * res.stderr, 2 * grid.dt * scale)


def test_stderr_scales_with_path_count():
    _, market, costs, grid = load("fig3_fixed")
    small = simulate(None, market, costs, grid, SimConfig(paths=2000, seed=8))
    big = simulate(None, market, costs, grid, SimConfig(paths=8000, seed=8))
    assert big.stderr * 2 == pytest.approx(small.stderr, rel=0.15)


def test_optimal_policy_is_not_beaten_by_uncontrolled(solved):
    _, table = solved("fig4_menu", "menu")
    _, market, costs, grid = load("fig4_menu")
    ctrl = simulate(table, market, costs, grid, SimConfig(paths=3000, seed=6))
    free = simulate(None, market, costs, grid, SimConfig(paths=3000, seed=6))
    assert ctrl.mean >= free.mean - 3 * math.hypot(ctrl.stderr, free.stderr)


def test_grid_exit_is_reported_or_enforced():
    market = _quiet_market(lambda_a=((0.2, 50.0),), lambda_b=((0.2, 0.0),))
    grid = GridSpec(x_min=-3, x_max=3, t_steps=10, horizon=1.0)
    with pytest.raises(GridExitError) as err:
        simulate(None, market, _costs(), grid, SimConfig(paths=40, seed=0))
    assert err.value.excluded > 0.01 * 40
    res = simulate(None, market, _costs(), grid, SimConfig(paths=40, seed=0, enforce_exit=True, record_paths=1))
    assert res.excluded == 0 and res.used == 40
    assert res.records[0].exited and res.records[0].terminal.t < 1.0


def test_policy_mismatch_rejected(solved):
    _, table = solved("fig3_fixed", "fixed")
    _, market, costs, grid = load("fig3_fixed")
    with pytest.raises(ValueError, match="dt_sim"):
        simulate(table, market, costs, grid, SimConfig(paths=1, seed=0, dt_sim=0.01))
    _, m5, c5, g5 = load("fig5_regime")
    with pytest.raises(ValueError, match="regime"):
        simulate(table, m5, c5, g5, SimConfig(paths=1, seed=0))


@pytest.mark.parametrize("kwargs", [dict(paths=0, seed=0), dict(paths=1, seed=-1), dict(paths=1, seed=2 ** 64),
                                    dict(paths=1, seed=0, dt_sim=0.0), dict(paths=1, seed=0, regime_mode="x"),
                                    dict(paths=1, seed=0, record_paths=-1)])
def test_sim_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimConfig(**kwargs)


def test_finer_simulation_step_is_allowed(solved):
    _, table = solved("fig3_fixed", "fixed")
    _, market, costs, grid = load("fig3_fixed")
    res = simulate(table, market, costs, grid, SimConfig(paths=50, seed=0, dt_sim=grid.dt / 2))
    assert res.used == 50 and math.isfinite(res.mean)


def test_outputs(tmp_path, solved):
    _, table = solved("fig3_fixed", "fixed")
    _, market, costs, grid = load("fig3_fixed")
    res = simulate(table, market, costs, grid, SimConfig(paths=30, seed=1, record_paths=3))
    sim.write_summary(res, tmp_path / "s.json")
    sim.write_path_log(res.records, tmp_path / "p.jsonl")
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary == res.summary() and summary["paths"] == 30
    events = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert events and {e["path"] for e in events} <= {0, 1, 2}
    assert set(events[0]) == {"path", "t", "kind", "size", "dx", "dy", "k"}
    assert len(res.records) == 3
