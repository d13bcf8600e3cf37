import math

import numpy as np
import pytest

from darkpool import policy, qvi
from darkpool.model import CostParams, FillModel, GridSpec, MarketParams
from darkpool.policy import BandStructureError, Continue, Limit, Market
from darkpool.qvi import CONTINUE, LIMIT, MARKET, Variant


def _market(lam=5.0):
    return MarketParams(sigma=0.02, mu=0.0, s0=10.0, regimes=(0.8,), generator=((0.0,),),
                        lambda_a=((0.2, lam),), lambda_b=((0.2, lam),), fill_model=FillModel(0.9, 0.2))


def _costs(phi=0.5, eps_m=10.0, eps_l=3.0):
    return CostParams(eps_m=eps_m, eps_l=eps_l, delta_menu_a=(0.2,), delta_menu_b=(0.2,),
                      kappa_bar=2.0, kappa_grid=(0.0, 1.0, 2.0), phi=phi)


def _table(action, xs=None, n_t=1):
    action = np.asarray(action, dtype=np.int8).reshape(1, n_t, -1)
    xs = np.arange(action.shape[2]) - action.shape[2] // 2 if xs is None else xs
    shape = action.shape
    kappa = np.where(action == LIMIT, 2.0, np.nan)
    eta = np.where(action == LIMIT, -np.sign(xs), 0).astype(np.int8)
    xi = np.where(action == MARKET, -np.sign(xs), 0).astype(np.int8)
    return policy.PolicyTable(xs, np.arange(n_t) * 0.1, (0.8,), action, np.full(shape, 0.2),
                              np.full(shape, 0.2), eta, kappa, xi)


def test_regions_partition_every_node(solved):
    _, table = solved("fig5_regime", "regime")
    masks = table.regions()
    total = masks["CR"].astype(int) + masks["LI"] + masks["MI"]
    assert np.all(total == 1)


def test_lookup_returns_typed_actions(solved):
    s, table = solved("fig3_fixed", "fixed")
    j0 = int(np.argmax(s.action[0, 0] == LIMIT))
    x_lim = int(s.xs[j0])
    assert table.lookup(0, 0, 0) == Continue(0.2, 0.2)
    got = table.lookup(0, 0, x_lim)
    assert isinstance(got, Limit) and got.eta == -np.sign(x_lim) and got.kappa == 2.0
    m = _table([MARKET, CONTINUE, MARKET])
    assert m.lookup(0, 0, 1) == Market(-1)


def test_extract_regions_refuses_non_finite(solved):
    s, _ = solved("fig3_fixed", "fixed")
    h = s.h.copy()
    h[0, 3, 4] = np.nan
    bad = qvi.ValueSurface(s.variant, s.market, s.costs, s.grid, h, s.action, s.delta_a, s.delta_b,
                           s.eta, s.kappa, s.xi)
    with pytest.raises(ValueError, match="non-finite"):
        policy.extract_regions(bad)


def test_large_risk_aversion_without_flow_liquidates_near_horizon():
    # 2-step grid: holding |x| >= 1 for dt costs phi*x^2*dt, far above a one-shot market order
    grid = GridSpec(x_min=-5, x_max=5, t_steps=2, horizon=1.0)
    s = qvi.solve(Variant.FIXED, _market(lam=0.0), _costs(phi=1000.0, eps_l=9.9), grid)
    # limit orders cost at least as much as the penalty saved here; lit action at every |x| >= 1
    act = s.action[0, -1]
    assert act[5] == CONTINUE and np.all(act[np.abs(s.xs) >= 1] != CONTINUE)


def test_huge_limit_penalty_empties_limit_region():
    grid = GridSpec(x_min=-10, x_max=10, t_steps=50, horizon=1.0)
    s = qvi.solve(Variant.FIXED, _market(), _costs(phi=5.0, eps_m=100.0, eps_l=99.0), grid)
    table = policy.extract_regions(s)
    assert not table.regions()["LI"].any()
    curves = policy.extract_boundaries(table)
    assert all(v is None for v in curves.x_limit[(0, 1)])


def test_symmetric_region_map(solved):
    _, table = solved("fig4_menu", "menu")
    assert np.array_equal(table.action, table.action[:, :, ::-1])


def test_band_structure_and_boundaries_on_figure_configs(solved):
    for name, variant in [("fig3_fixed", "fixed"), ("fig4_menu", "menu"), ("fig5_regime", "regime")]:
        _, table = solved(name, variant)
        curves = policy.extract_boundaries(table)
        for (r, side), lim in curves.x_limit.items():
            mkt = curves.x_market[(r, side)]
            for xl, xm in zip(lim, mkt):
                if xl is not None and xm is not None:
                    assert xl <= xm
        assert curves.lit_boundary(0, 1)[0] < math.inf


def test_regime_ordering_on_fig5(solved):
    _, table = solved("fig5_regime", "regime")
    curves = policy.extract_boundaries(table)
    for side in (1, -1):
        b = [np.array(curves.lit_boundary(r, side)) for r in range(3)]
        assert np.all(b[2] <= b[1]) and np.all(b[1] <= b[0])


def test_interleaved_bands_are_reported():
    # x: -3..3 ; positive side continue, limit, continue, continue -> not banded
    table = _table([CONTINUE, CONTINUE, CONTINUE, CONTINUE, LIMIT, CONTINUE, CONTINUE])
    with pytest.raises(BandStructureError) as err:
        policy.extract_boundaries(table)
    assert err.value.offenders == [(0, 0, 1)]


def test_single_node_islands_can_be_tolerated():
    seq = [MARKET, LIMIT, LIMIT, CONTINUE, CONTINUE, CONTINUE, LIMIT, CONTINUE, LIMIT, MARKET, MARKET]
    table = _table(seq)
    with pytest.raises(BandStructureError):
        policy.extract_boundaries(table)
    curves = policy.extract_boundaries(table, tolerate_islands=True)
    # + side C L C L M M smooths to C C L L M M
    assert curves.x_limit[(0, 1)] == (2,) and curves.x_market[(0, 1)] == (4,)
    assert curves.x_limit[(0, -1)] == (3,) and curves.x_market[(0, -1)] == (5,)


def test_empty_limit_region_still_reports_market_boundary():
    table = _table([MARKET, MARKET, CONTINUE, CONTINUE, CONTINUE, MARKET, MARKET])
    curves = policy.extract_boundaries(table)
    assert curves.x_limit[(0, 1)] == (None,) and curves.x_market[(0, 1)] == (2,)
    assert curves.lit_boundary(0, -1) == (2.0,)


def test_commission_switch_on_fig4(solved):
    _, table = solved("fig4_menu", "menu")
    curves = policy.extract_boundaries(table)
    assert curves.commission_violations == ()
    assert curves.commission_switch[(0, 1)][0] == 1
    # inventory-increasing commission at x = 0 is the low one, the high one from |x| = 1
    zero = int(np.searchsorted(table.xs, 0))
    assert table.delta_b[0, 0, zero] == 0.2 and table.delta_b[0, 0, zero + 1] == 0.4
    assert table.delta_a[0, 0, zero] == 0.2 and table.delta_a[0, 0, zero - 1] == 0.4


def test_kappa_nonincreasing_in_inventory(solved):
    for name, variant in [("fig3_fixed", "fixed"), ("fig4_menu", "menu"), ("fig5_regime", "regime")]:
        _, table = solved(name, variant)
        for side in (1, -1):
            idx = np.where(table.xs * side > 0)[0][:: side]
            kap = table.kappa[:, :, idx]
            on = np.isfinite(kap)
            both = on[:, :, 1:] & on[:, :, :-1]
            assert not np.any((kap[:, :, 1:] - np.where(on, kap, 0.0)[:, :, :-1])[both] > 0)


def test_csv_exports(tmp_path, solved):
    _, table = solved("fig5_regime", "regime")
    curves = policy.extract_boundaries(table)
    policy.write_boundaries_csv(curves, tmp_path / "b.csv")
    policy.write_contours_csv(curves, tmp_path / "c.csv")
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[0] == "regime,t,side,x_limit,x_market,kappa_at_limit"
    assert len(rows) == 1 + 3 * 2 * table.times.size
    assert {r.split(",")[0] for r in rows[1:]} == {"0", "1", "2"}
    neg = [r for r in rows[1:] if r.split(",")[2] == "-" and r.split(",")[3]]
    assert all(int(r.split(",")[3]) < 0 for r in neg)
    contours = (tmp_path / "c.csv").read_text().splitlines()
    assert contours[0] == "regime,t,side,kappa,x_from,x_to"
    assert {r.split(",")[3] for r in contours[1:]} == {"2.0"}
