"""Projected explicit finite-difference solver for the reduced impulse-control problem.

Under the ansatz ``V(t, x, y, s) = y + x*s + h(t, x)`` the value function of the
dark-pool market maker reduces to ``h_k(t, x)`` on regimes x time x integer
inventory.  Each backward step is

1. an explicit Euler step of the continuation (integro-differential) part, and
2. a node-wise projection onto the market-order and limit-order obstacles,
   iterated to a fixed point so that chains of instantaneous orders are priced.

Conventions (see the repository decisions ledger for the rationale):

* The limit obstacle prices the unfilled outcome at the value itself, so at a
  node where it binds the order is re-posted until it fills:
  ``h(x) = h(x + eta) + k + kappa - eps_l / fill_probability(kappa)``.
  Filled limit orders and market orders move inventory and may be followed
  by further orders at the same instant.
* Values beyond the inventory grid are extrapolated linearly with the
  terminal slope: ``h(x) = h(x_max) - k*(x - x_max)`` above the grid and
  symmetrically below it.  Lit orders never point outward.
* Exact ties are resolved Continue > Limit > Market; among sides the
  inventory-reducing order wins; among commissions and offsets the first
  entry of the menu / kappa grid wins.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import (CostParams, GridSpec, MarketParams, ValidationError, fill_probability,
                    validate)

log = logging.getLogger(__name__)

CONTINUE, LIMIT, MARKET = 0, 1, 2
ACTION_NAMES = ("continue", "limit", "market")
_MAX_PROJECTION_SWEEPS = 10_000


class Variant(str, enum.Enum):
    FIXED = "fixed"
    MENU = "menu"
    REGIME = "regime"

    def check(self, market: MarketParams) -> None:
        """Raise ``ValueError`` if the market parameters do not fit this variant."""
        n = market.n_regimes
        if self is Variant.REGIME and n < 2:
            raise ValueError("the regime-switching variant needs at least 2 regimes")
        if self is not Variant.REGIME and n != 1:
            raise ValueError(f"the {self.value} variant needs exactly 1 regime, got {n}")


class StabilityError(ValueError):
    """The explicit scheme's step-size bound is violated."""

    def __init__(self, bound: float):
        self.bound = bound
        super().__init__(f"explicit scheme unstable: dt * max event rate = {bound!r} > 1")


class NonFiniteError(ArithmeticError):
    """A non-finite value appeared during the backward sweep."""

    def __init__(self, regime: int, t_index: int, x: int):
        self.node = (regime, t_index, x)
        super().__init__(f"non-finite value at regime={regime}, t_index={t_index}, x={x}")


@dataclass(frozen=True)
class ValueSurface:
    """Solved value surface and the per-node decision record.

    ``h`` has shape (regimes, t_steps + 1, inventory nodes); the decision
    arrays have shape (regimes, t_steps, inventory nodes) since no decision is
    taken at the terminal slice.  ``delta_a``/``delta_b`` hold the
    continuation commissions (used after any impulse as well); ``eta`` and
    ``kappa`` are meaningful on limit nodes, ``xi`` on market nodes (0 / NaN
    elsewhere).
    """

    variant: Variant
    market: MarketParams
    costs: CostParams
    grid: GridSpec
    h: np.ndarray
    action: np.ndarray
    delta_a: np.ndarray
    delta_b: np.ndarray
    eta: np.ndarray
    kappa: np.ndarray
    xi: np.ndarray

    @property
    def xs(self) -> np.ndarray:
        return self.grid.xs

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def value(self, k_idx: int, t_index: int, x: int) -> float:
        return float(self.h[k_idx, t_index, x - self.grid.x_min])


# ---------------------------------------------------------------- building blocks

def variant_menus(variant: Variant, costs: CostParams) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Commission menus actually optimised over: the fixed variant uses the first entries."""
    if variant is Variant.FIXED:
        return costs.delta_menu_a[:1], costs.delta_menu_b[:1]
    return costs.delta_menu_a, costs.delta_menu_b


def stability_bound(variant: Variant, market: MarketParams, costs: CostParams, grid: GridSpec) -> float:
    menu_a, menu_b = variant_menus(variant, costs)
    lam_a = max(market.intensity_a(d) for d in menu_a)
    lam_b = max(market.intensity_b(d) for d in menu_b)
    gen = market.generator_matrix()
    exit_rate = max(float(np.max(-np.diag(gen))), 0.0) if gen.size else 0.0
    return grid.dt * (lam_a + lam_b + exit_rate)


def _as2d(h) -> tuple[np.ndarray, bool]:
    arr = np.asarray(h, dtype=float)
    return (arr[None, :], True) if arr.ndim == 1 else (arr, False)


def _kcol(k, rows: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(k, dtype=float).reshape(-1, 1), (rows, 1))


def _shifted(h: np.ndarray, k: np.ndarray, shift: int) -> np.ndarray:
    """``h(x + shift)`` on the grid, extrapolating beyond it with slope ``-k`` outward.

    ``k`` is a column vector with one half-spread per regime.
    """
    if shift == 0:
        return h
    n = h.shape[1]
    idx = np.arange(n) + shift
    inside = np.clip(idx, 0, n - 1)
    out = h[:, inside]
    overshoot = np.abs(idx - inside)
    return out - k * overshoot


def continuation_rhs(h, xs, k, variant: Variant, market: MarketParams, costs: CostParams):
    """Time-derivative of the continuation part at one time slice.

    ``h`` is a slice of shape (regimes, nodes) (or (nodes,) for one regime) and
    ``k`` the half-spread(s) used for out-of-grid extrapolation.  Returns
    ``(rhs, ia, ib)`` where ``ia``/``ib`` index the maximising commissions in
    the variant's menus.
    """
    h2, squeeze = _as2d(h)
    xs = np.asarray(xs, dtype=float)
    edge = _kcol(k, h2.shape[0])
    menu_a, menu_b = variant_menus(variant, costs)

    def side(menu, intensity, law, sign):
        expectation = np.zeros_like(h2)
        for size, mass in law:
            expectation = expectation + mass * (_shifted(h2, edge, sign * int(size)) - h2)
        mean_size = math.fsum(size * mass for size, mass in law)
        gains = np.stack([intensity(d) * (mean_size * d + expectation) for d in menu])
        return gains.max(axis=0), gains.argmax(axis=0)

    ja, ia = side(menu_a, market.intensity_a, market.size_law_a, -1)
    jb, ib = side(menu_b, market.intensity_b, market.size_law_b, +1)
    rhs = -costs.phi * xs * xs + ja + jb
    if variant is Variant.REGIME:
        rhs = rhs + market.generator_matrix() @ h2
    if squeeze:
        return rhs[0], ia[0], ib[0]
    return rhs, ia, ib


def _directions(xs: np.ndarray, no_speculation: bool):
    """Admissibility masks for +1 / -1 lit orders and the preferred side on ties."""
    x_min, x_max = xs[0], xs[-1]
    up_ok = xs + 1 <= x_max
    down_ok = xs - 1 >= x_min
    if no_speculation:
        up_ok = up_ok & (xs < 0)
        down_ok = down_ok & (xs > 0)
    prefer_down = xs >= 0
    return up_ok, down_ok, prefer_down


def _choose(v_up, v_down, up_ok, down_ok, prefer_down):
    v_up = np.where(up_ok, v_up, -np.inf)
    v_down = np.where(down_ok, v_down, -np.inf)
    pick_down = np.where(prefer_down, v_down >= v_up, v_down > v_up)
    value = np.where(pick_down, v_down, v_up)
    direction = np.where(pick_down, -1, 1)
    direction = np.where(np.isneginf(value), 0, direction).astype(np.int8)
    return value, direction


def market_obstacle(h, xs, k, eps_m, no_speculation: bool = True):
    """Best immediate market order: ``sup_xi [-k - eps_m + h(x + xi)]`` over admissible ``xi = +-1``.

    Returns ``(value, xi)``; nodes without an admissible order get ``-inf`` and ``xi = 0``.
    """
    h2, squeeze = _as2d(h)
    xs = np.asarray(xs)
    kc = _kcol(k, h2.shape[0])
    up_ok, down_ok, prefer_down = _directions(xs, no_speculation)
    v_up = _shifted(h2, kc, 1) - kc - eps_m
    v_down = _shifted(h2, kc, -1) - kc - eps_m
    value, xi = _choose(v_up, v_down, up_ok, down_ok, prefer_down)
    return (value[0], xi[0]) if squeeze else (value, xi)


def limit_obstacle(h, xs, k, eps_l, kappa_grid, fill_model, no_speculation: bool = True,
                   kappa_bar: float = math.inf):
    """Best immediate limit order over ``eta = +-1`` and the kappa grid.

    The value of an order is the fill-weighted sum of the filled outcome
    ``(k + kappa) - eps_l + h(x + eta)`` and the unfilled outcome ``-eps_l + h(x)``.

    Returns ``(value, eta, kappa)`` with ``-inf``, 0, NaN where nothing is admissible.
    """
    h2, squeeze = _as2d(h)
    xs = np.asarray(xs)
    kc = _kcol(k, h2.shape[0])
    up_ok, down_ok, prefer_down = _directions(xs, no_speculation)
    kappas = np.asarray(kappa_grid, dtype=float)
    probs = [fill_probability(float(kap), fill_model, kappa_bar) for kap in kappas]

    def best_over_kappa(target):
        vals = np.stack([q * (kc + kap - eps_l + target) + (1.0 - q) * (-eps_l + h2)
                         for kap, q in zip(kappas, probs)])
        return vals.max(axis=0), vals.argmax(axis=0)

    v_up, k_up = best_over_kappa(_shifted(h2, kc, 1))
    v_down, k_down = best_over_kappa(_shifted(h2, kc, -1))
    value, eta = _choose(v_up, v_down, up_ok, down_ok, prefer_down)
    kap_idx = np.where(eta == -1, k_down, k_up)
    kappa = np.where(eta == 0, np.nan, kappas[kap_idx])
    return (value[0], eta[0], kappa[0]) if squeeze else (value, eta, kappa)


def _limit_repost(h, xs, k, eps_l, kappa_grid, fill_model, no_speculation, kappa_bar):
    """Value of posting until filled: the fixed point of ``v = limit_obstacle`` with ``h(x) = v``.

    Returns ``(value, eta, kappa)`` like :func:`limit_obstacle`.  Ties pick the
    same (eta, kappa) as the limit obstacle evaluated at the fixed point.
    """
    kc = _kcol(k, h.shape[0])
    up_ok, down_ok, prefer_down = _directions(xs, no_speculation)
    kappas = np.asarray(kappa_grid, dtype=float)
    # net premium per filled order; ``q * premium`` orders the offsets exactly as the
    # limit obstacle does at its fixed point
    premium = np.array([kap - eps_l / fill_probability(float(kap), fill_model, kappa_bar) for kap in kappas])
    best = int(np.argmax(premium))

    def side(shift):
        return _shifted(h, kc, shift) + kc + premium[best]

    value, eta = _choose(side(1), side(-1), up_ok, down_ok, prefer_down)
    kappa = np.where(eta == 0, np.nan, kappas[best])
    return value, eta, kappa


# ---------------------------------------------------------------- solver

def solve(variant: Variant | str, market: MarketParams, costs: CostParams, grid: GridSpec) -> ValueSurface:
    """Backward projected explicit sweep from the terminal slice ``h = -k|x| - eps_m``.

    Raises:
        ValidationError: the configuration violates a model invariant.
        ValueError: the market does not fit the variant.
        StabilityError: ``dt`` times the largest event rate exceeds 1.
        NonFiniteError: a non-finite value appeared (reports the node).
    """
    variant = Variant(variant)
    problems = [v for v in validate(market, costs, grid) if v.code != "stability"]
    if problems:
        raise ValidationError(problems)
    variant.check(market)
    bound = stability_bound(variant, market, costs, grid)
    if bound > 1.0:
        raise StabilityError(bound)

    xs = grid.xs
    xf = xs.astype(float)
    n_r, n_t, n_x = market.n_regimes, grid.t_steps, xs.size
    k = np.asarray(market.regimes, dtype=float)
    kc = k[:, None]
    dt = grid.dt
    menu_a = np.asarray(variant_menus(variant, costs)[0])
    menu_b = np.asarray(variant_menus(variant, costs)[1])

    h_all = np.empty((n_r, n_t + 1, n_x))
    action = np.empty((n_r, n_t, n_x), dtype=np.int8)
    delta_a = np.empty((n_r, n_t, n_x))
    delta_b = np.empty((n_r, n_t, n_x))
    eta_all = np.zeros((n_r, n_t, n_x), dtype=np.int8)
    kappa_all = np.full((n_r, n_t, n_x), np.nan)
    xi_all = np.zeros((n_r, n_t, n_x), dtype=np.int8)

    h = -kc * np.abs(xf) - costs.eps_m + np.zeros((n_r, 1))
    h_all[:, n_t] = h
    lim_args = dict(kappa_grid=costs.kappa_grid, fill_model=market.fill_model,
                    no_speculation=costs.no_speculation, kappa_bar=costs.kappa_bar)

    for i in range(n_t - 1, -1, -1):
        rhs, ia, ib = continuation_rhs(h, xs, k, variant, market, costs)
        hc = h + dt * rhs
        hn = hc
        for _ in range(_MAX_PROJECTION_SWEEPS):
            m_val, xi = market_obstacle(hn, xs, k, costs.eps_m, costs.no_speculation)
            l_val, eta, kap = _limit_repost(hn, xs, k, costs.eps_l, **lim_args)
            new = np.maximum(hc, np.maximum(l_val, m_val))
            if np.array_equal(new, hn):
                break
            hn = new
        else:  # pragma: no cover - the sweep is monotone and bounded
            raise RuntimeError(f"obstacle projection did not converge at t_index={i}")
        if not np.all(np.isfinite(hn)):
            r, j = np.argwhere(~np.isfinite(hn))[0]
            raise NonFiniteError(int(r), i, int(xs[j]))

        cont = (hc >= l_val) & (hc >= m_val)
        lim = ~cont & (l_val >= m_val)
        act = np.where(cont, CONTINUE, np.where(lim, LIMIT, MARKET)).astype(np.int8)
        action[:, i] = act
        delta_a[:, i] = menu_a[ia]
        delta_b[:, i] = menu_b[ib]
        eta_all[:, i] = np.where(act == LIMIT, eta, 0)
        kappa_all[:, i] = np.where(act == LIMIT, kap, np.nan)
        xi_all[:, i] = np.where(act == MARKET, xi, 0)
        h = hn
        h_all[:, i] = h

    log.info("solved %s variant: %d regimes x %d steps x %d nodes", variant.value, n_r, n_t, n_x)
    return ValueSurface(variant, market, costs, grid, h_all, action, delta_a, delta_b,
                        eta_all, kappa_all, xi_all)


# ---------------------------------------------------------------- diagnostics

def obstacle_gaps(surface: ValueSurface) -> tuple[np.ndarray, np.ndarray]:
    """``h - market obstacle`` and ``h - limit obstacle`` at every node, terminal slice included.

    Both arrays have the shape of ``h`` and are ``+inf`` where no order is admissible.
    """
    s = surface
    xs, k = s.xs, np.asarray(s.market.regimes, dtype=float)
    gm = np.empty_like(s.h)
    gl = np.empty_like(s.h)
    for i in range(s.grid.t_steps + 1):
        h = s.h[:, i]
        m_val, _ = market_obstacle(h, xs, k, s.costs.eps_m, s.costs.no_speculation)
        l_val, _, _ = limit_obstacle(h, xs, k, s.costs.eps_l, s.costs.kappa_grid, s.market.fill_model,
                                     s.costs.no_speculation, kappa_bar=s.costs.kappa_bar)
        gm[:, i] = h - m_val
        gl[:, i] = h - l_val
    return gm, gl


def complementarity_residual(surface: ValueSurface) -> np.ndarray:
    """``min{PDE residual, h - M h, h - L h}`` at interior inventory nodes.

    The PDE residual is ``-(h(t+dt) - h(t))/dt - rhs(h(t))`` with the jump
    terms evaluated on the slice itself.  Returns an array of shape
    (regimes, t_steps, nodes - 2).
    """
    s = surface
    xs, k, dt = s.xs, np.asarray(s.market.regimes, dtype=float), s.grid.dt
    out = np.empty((s.market.n_regimes, s.grid.t_steps, xs.size - 2))
    for i in range(s.grid.t_steps):
        h, h_next = s.h[:, i], s.h[:, i + 1]
        rhs, _, _ = continuation_rhs(h, xs, k, s.variant, s.market, s.costs)
        pde = -(h_next - h) / dt - rhs
        m_val, _ = market_obstacle(h, xs, k, s.costs.eps_m, s.costs.no_speculation)
        l_val, _, _ = limit_obstacle(h, xs, k, s.costs.eps_l, s.costs.kappa_grid, s.market.fill_model,
                                     s.costs.no_speculation, kappa_bar=s.costs.kappa_bar)
        out[:, i] = np.minimum(pde, np.minimum(h - m_val, h - l_val))[:, 1:-1]
    return out


# ---------------------------------------------------------------- CSV export

SURFACE_COLUMNS = ("regime", "t", "x", "h", "action", "delta_a", "delta_b", "eta", "kappa", "xi")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_surface_csv(surface: ValueSurface, path) -> None:
    """One row per (regime, time, inventory); the terminal slice has action ``terminal``."""
    s = surface
    times, xs = s.times, s.xs
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURFACE_COLUMNS)
        for r in range(s.market.n_regimes):
            for i, t in enumerate(times):
                for j, x in enumerate(xs):
                    row = [r, _fmt(t), int(x), _fmt(s.h[r, i, j])]
                    if i == s.grid.t_steps:
                        row += ["terminal", "", "", "", "", ""]
                    else:
                        a = int(s.action[r, i, j])
                        row += [ACTION_NAMES[a], _fmt(s.delta_a[r, i, j]), _fmt(s.delta_b[r, i, j]),
                                int(s.eta[r, i, j]) if a == LIMIT else "",
                                _fmt(s.kappa[r, i, j]) if a == LIMIT else "",
                                int(s.xi[r, i, j]) if a == MARKET else ""]
                    w.writerow(row)
