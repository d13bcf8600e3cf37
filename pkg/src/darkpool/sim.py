"""Monte Carlo engine for the controlled dark-pool market maker.

Each path owns a deterministic random substream derived from ``(seed, path
index)``, so results do not depend on batching or execution order.  Within a
batch the per-path uniforms are drawn up front and the dynamics are vectorised
across paths.

One simulation step of length ``dt`` at time ``t`` does, in order:

1. lit-pool orders prescribed by the policy at ``t`` (chains allowed; a limit
   order is re-posted until it fills, each attempt costing ``eps_l``);
2. the running penalty ``-phi * x**2 * dt`` on the post-order inventory;
3. dark-pool client flow: independent Poisson counts per order size and side,
   at the intensities of the commissions in force;
4. the mid-price move and the regime transition.

At the horizon the terminal utility is applied: ``y + x*s - k*|x| - eps_m`` in
continuous observation mode and ``y + x*s - k*x**2`` in discrete (toy) mode.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import expm
from scipy.special import ndtri
from scipy.stats import poisson

from .model import CostParams, GridSpec, MarketParams, State, fill_probability
from .policy import PolicyTable
from .qvi import LIMIT, MARKET

log = logging.getLogger(__name__)

_U53 = float(2 ** 53)
_BATCH_BUDGET = 4_000_000  # uniforms held in memory per batch


class GridExitError(RuntimeError):
    """More than 1% of paths left the policy grid."""

    def __init__(self, excluded: int, paths: int):
        self.excluded, self.paths = excluded, paths
        super().__init__(f"{excluded} of {paths} paths left the inventory grid (limit 1%)")


@dataclass(frozen=True)
class SimConfig:
    paths: int
    seed: int
    dt_sim: Optional[float] = None  # defaults to the grid step
    enforce_exit: bool = False
    record_paths: int = 10
    regime_mode: str = "exact"

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.dt_sim is not None and not self.dt_sim > 0:
            raise ValueError("dt_sim must be > 0")
        if self.regime_mode not in ("exact", "bernoulli"):
            raise ValueError(f"unknown regime mode {self.regime_mode!r}")
        if self.record_paths < 0:
            raise ValueError("record_paths must be >= 0")


class SimEvent(NamedTuple):
    t: float
    kind: str
    size: int
    dx: int
    dy: float
    k: float


@dataclass(frozen=True)
class PathRecord:
    index: int
    x0: int
    y0: float
    events: tuple[SimEvent, ...]
    terminal: State
    objective: float
    exited: bool


@dataclass(frozen=True)
class SimResult:
    mean: float
    stderr: float
    paths: int
    used: int
    excluded: int
    seed: int
    objectives: np.ndarray = field(repr=False)
    records: tuple[PathRecord, ...] = field(repr=False)

    def summary(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "paths": self.paths, "used": self.used,
                "excluded": self.excluded, "seed": self.seed}


# ---------------------------------------------------------------- primitives

def _open_unit(u):
    """Map uniforms on [0, 1) to the open interval (0, 1)."""
    return (np.floor(np.asarray(u) * _U53) + 0.5) / _U53


def poisson_from_uniform(u, mean):
    """Inverse-CDF Poisson draw; ``mean`` may be zero.

    Sequential search over the CDF, vectorised across draws; very large means
    (where ``exp(-mean)`` underflows) fall back to scipy.
    """
    u, mean = np.broadcast_arrays(_open_unit(u), np.asarray(mean, dtype=float))
    if np.any(mean > 500.0):
        return np.where(mean > 0, poisson.ppf(u, mean), 0.0).astype(np.int64)
    count = np.zeros(u.shape, dtype=np.int64)
    term = np.exp(-mean)
    cdf = term.copy()
    todo = (u > cdf) & (mean > 0)
    n = 0
    while todo.any():
        n += 1
        count[todo] = n
        term = term * mean / n
        cdf = cdf + term
        todo &= (u > cdf) & (term > 0)
    return count


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Deterministic, independent substream for one path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def sample_arrivals(lam: float, dt: float, rng: np.random.Generator) -> int:
    """Poisson number of client orders over a step with constant intensity ``lam``."""
    if lam < 0:
        raise ValueError("intensity must be >= 0")
    return int(poisson_from_uniform(rng.random(), lam * dt))


def transition_matrix(generator, dt: float, mode: str = "exact") -> np.ndarray:
    """One-step regime transition probabilities.

    ``exact`` is ``expm(G*dt)``; ``bernoulli`` is the first-order ``I + G*dt``
    and requires every exit probability to be at most 1.
    """
    gen = np.asarray(generator, dtype=float)
    if gen.size == 0:
        return np.ones((1, 1))
    if mode == "exact":
        p = expm(gen * dt)
    elif mode == "bernoulli":
        p = np.eye(gen.shape[0]) + gen * dt
        if np.any(np.diag(p) < 0):
            raise ValueError("dt too large for Bernoulli regime steps")
    else:
        raise ValueError(f"unknown regime mode {mode!r}")
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def _next_regime(k_idx, u, cdf):
    rows = cdf[k_idx]
    return np.minimum((u[:, None] >= rows).sum(axis=1), cdf.shape[1] - 1)


def step_regime(k_idx: int, dt: float, generator, rng: np.random.Generator, mode: str = "exact") -> int:
    cdf = np.cumsum(transition_matrix(generator, dt, mode), axis=1)
    return int(_next_regime(np.array([k_idx]), np.array([rng.random()]), cdf)[0])


# ---------------------------------------------------------------- engine

@dataclass
class _Layout:
    n_steps: int
    dt: float
    sizes_a: np.ndarray
    mass_a: np.ndarray
    sizes_b: np.ndarray
    mass_b: np.ndarray
    chain: int

    @property
    def width(self) -> int:
        return 2 + self.sizes_a.size + self.sizes_b.size + self.chain


def _intensities(pairs, deltas):
    lam = np.zeros(np.shape(deltas))
    for d, rate in pairs:
        lam[deltas == d] = rate
    return lam


def _terminal_utility(x, y, s, k, eps_m, mode):
    if mode == "discrete":
        return y + x * s - k * (x * x)
    return y + x * s - k * np.abs(x) - eps_m


def simulate(policy: Optional[PolicyTable], market: MarketParams, costs: CostParams, grid: GridSpec,
             config: SimConfig) -> SimResult:
    """Estimate the objective from ``(x0, y0, s0, regime 0)`` at time 0.

    ``policy=None`` runs the uncontrolled strategy: first commission of each
    menu, no lit-pool orders.

    Raises:
        ValueError: the policy does not match the market / grid.
        GridExitError: without ``enforce_exit``, more than 1% of paths left the grid.
    """
    dt = grid.dt if config.dt_sim is None else config.dt_sim
    n_steps = int(round(grid.horizon / dt))
    if not math.isclose(n_steps * dt, grid.horizon, rel_tol=1e-9) or n_steps < 1:
        raise ValueError("dt_sim must divide the horizon")
    if policy is not None:
        if policy.action.shape[0] != market.n_regimes:
            raise ValueError("policy regime count differs from the market")
        if not (policy.covers(grid.x_min) and policy.covers(grid.x_max)):
            raise ValueError("policy grid does not cover the inventory domain")
        if dt > policy.dt * (1 + 1e-9):
            raise ValueError("dt_sim must not exceed the policy time step")
        chain = max(abs(grid.x_min), grid.x_max) + 1
    else:
        chain = 0
    lay = _Layout(n_steps, dt,
                  np.array([s for s, _ in market.size_law_a], dtype=np.int64),
                  np.array([p for _, p in market.size_law_a]),
                  np.array([s for s, _ in market.size_law_b], dtype=np.int64),
                  np.array([p for _, p in market.size_law_b]), chain)
    cdf = np.cumsum(transition_matrix(market.generator_matrix(), dt, config.regime_mode), axis=1)

    batch = max(1, min(config.paths, _BATCH_BUDGET // (n_steps * lay.width)))
    objectives = np.empty(config.paths)
    exited = np.zeros(config.paths, dtype=bool)
    records: list[PathRecord] = []
    for start in range(0, config.paths, batch):
        idx = np.arange(start, min(start + batch, config.paths))
        obj, ex, recs = _run_batch(idx, policy, market, costs, grid, config, lay, cdf)
        objectives[idx] = obj
        exited[idx] = ex
        records.extend(recs)

    excluded = int(exited.sum()) if not config.enforce_exit else 0
    if excluded > 0.01 * config.paths:
        raise GridExitError(excluded, config.paths)
    used = objectives if config.enforce_exit else objectives[~exited]
    n = used.size
    mean = float(used.mean()) if n else math.nan
    stderr = float(used.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    log.info("simulated %d paths: mean=%r stderr=%r excluded=%d", config.paths, mean, stderr, excluded)
    return SimResult(mean, stderr, config.paths, n, excluded, config.seed, objectives, tuple(records))


def _run_batch(idx, policy, market, costs, grid, config, lay: _Layout, cdf):
    n = idx.size
    uniforms = np.stack([path_rng(config.seed, int(p)).random((lay.n_steps, lay.width)) for p in idx])
    k_vals = np.asarray(market.regimes, dtype=float)
    sqdt = math.sqrt(lay.dt)
    n_a = lay.sizes_a.size

    x = np.full(n, grid.x0, dtype=np.int64)
    y = np.full(n, grid.y0, dtype=float)
    s = np.full(n, market.s0, dtype=float)
    kid = np.zeros(n, dtype=np.int64)
    run = np.zeros(n)
    penalties = np.zeros(n)
    alive = np.ones(n, dtype=bool)  # still evolving
    exited = np.zeros(n, dtype=bool)
    stop_t = np.full(n, grid.horizon)

    recorded = [j for j in range(n) if idx[j] < config.record_paths]
    logs = {j: [] for j in recorded}

    def note(j, t, kind, size, dx, dy):
        logs[j].append(SimEvent(t, kind, int(size), int(dx), float(dy), float(k_vals[kid[j]])))

    default_da = np.full(n, costs.delta_menu_a[0])
    default_db = np.full(n, costs.delta_menu_b[0])
    x_lo = grid.x_min
    for i in range(lay.n_steps):
        t = i * lay.dt
        u = uniforms[:, i]
        if policy is not None:
            j_t = min(int(math.floor(t / policy.dt + 1e-9)), policy.action.shape[1] - 1)
            _impulses(policy, j_t, t, x, y, s, kid, k_vals, penalties, alive, u, lay, costs, market,
                      recorded, note)
            cols = x - int(policy.xs[0])
            da = np.where(alive, policy.delta_a[kid, j_t, np.clip(cols, 0, policy.xs.size - 1)], 0.0)
            db = np.where(alive, policy.delta_b[kid, j_t, np.clip(cols, 0, policy.xs.size - 1)], 0.0)
        else:
            da, db = default_da, default_db

        run = np.where(alive, run - costs.phi * (x * x) * lay.dt, run)

        lam_a = _intensities(market.lambda_a, da)
        lam_b = _intensities(market.lambda_b, db)
        for c in range(n_a):
            cnt = np.where(alive, poisson_from_uniform(u[:, 2 + c], lam_a * lay.mass_a[c] * lay.dt), 0)
            shares = cnt * lay.sizes_a[c]
            dy = shares * (s + da)
            x -= shares
            y = y + np.where(shares > 0, dy, 0.0)
            for j in recorded:
                if shares[j]:
                    note(j, t, "dark-fill-sell", shares[j], -shares[j], dy[j])
        for c in range(lay.sizes_b.size):
            cnt = np.where(alive, poisson_from_uniform(u[:, 2 + n_a + c], lam_b * lay.mass_b[c] * lay.dt), 0)
            shares = cnt * lay.sizes_b[c]
            dy = -shares * (s - db)
            x += shares
            y = y + np.where(shares > 0, dy, 0.0)
            for j in recorded:
                if shares[j]:
                    note(j, t, "dark-fill-buy", shares[j], shares[j], dy[j])

        z = ndtri(_open_unit(u[:, 1]))
        if market.price_model == "geometric":
            s_new = s * np.exp((market.mu - 0.5 * market.sigma ** 2) * lay.dt + market.sigma * sqdt * z)
        else:
            s_new = s + market.mu * lay.dt + market.sigma * sqdt * z
        s = np.where(alive, s_new, s)
        k_new = np.where(alive, _next_regime(kid, u[:, 0], cdf), kid)
        for j in recorded:
            if k_new[j] != kid[j]:
                kid[j] = k_new[j]
                note(j, t + lay.dt, "regime-switch", 0, 0, 0.0)
        kid = k_new

        out = alive & ((x < x_lo) | (x > grid.x_max) | (y < grid.y_min) | (y > grid.y_max))
        if np.any(out):
            exited |= out
            stop_t[out] = t + lay.dt
            alive &= ~out

    k_end = k_vals[kid]
    utility = _terminal_utility(x, y, s, k_end, costs.eps_m, grid.observation_mode)
    obj = utility + run - penalties

    recs = []
    for j in recorded:
        recs.append(PathRecord(int(idx[j]), grid.x0, grid.y0, tuple(logs[j]),
                               State(float(stop_t[j]), int(x[j]), float(y[j]), float(s[j]), int(kid[j])),
                               float(obj[j]), bool(exited[j])))
    return obj, exited, recs


def _impulses(policy, j_t, t, x, y, s, kid, k_vals, penalties, alive, u, lay, costs, market, recorded, note):
    """Execute the policy's lit-pool orders at one instant, in place."""
    n = x.size
    active = alive.copy()
    attempts = np.zeros(n, dtype=np.int64)
    limit_col = 2 + lay.sizes_a.size + lay.sizes_b.size
    x_lo = int(policy.xs[0])
    for _ in range(2 * lay.chain + 2):
        if not active.any():
            return
        cols = np.clip(x - x_lo, 0, policy.xs.size - 1)
        act = np.where(active, policy.action[kid, j_t, cols], 0)
        k_now = k_vals[kid]

        mkt = act == MARKET
        if mkt.any():
            xi = policy.xi[kid, j_t, cols].astype(np.int64)
            dy = -(xi * s + k_now)
            x[mkt] += xi[mkt]
            y[mkt] += dy[mkt]
            penalties[mkt] += costs.eps_m
            for j in recorded:
                if mkt[j]:
                    note(j, t, "market-exec", 1, xi[j], dy[j])

        lim = act == LIMIT
        if lim.any():
            if np.any(attempts[lim] >= lay.chain):
                raise RuntimeError("limit-order chain exceeded the inventory span")
            eta = policy.eta[kid, j_t, cols].astype(np.int64)
            kap = policy.kappa[kid, j_t, cols]
            q = np.ones(n)
            for kv in np.unique(kap[lim]):
                q[lim & (kap == kv)] = fill_probability(float(kv), market.fill_model, costs.kappa_bar)
            draw = _open_unit(u[np.arange(n), limit_col + np.minimum(attempts, lay.chain - 1)])
            with np.errstate(divide="ignore"):
                misses = np.where(q < 1.0, np.floor(np.log(draw) / np.log1p(-np.minimum(q, 1.0))), 0.0)
            misses = misses.astype(np.int64)
            dy = -eta * s + (k_now + np.nan_to_num(kap))
            x[lim] += eta[lim]
            y[lim] += dy[lim]
            penalties[lim] += (misses[lim] + 1) * costs.eps_l
            attempts[lim] += 1
            for j in recorded:
                if lim[j]:
                    for _m in range(int(misses[j])):
                        note(j, t, "limit-miss", 0, 0, 0.0)
                    note(j, t, "limit-fill", 1, eta[j], dy[j])

        active &= mkt | lim
    raise RuntimeError("lit-order chain did not terminate")


# ---------------------------------------------------------------- export

def write_path_log(records, path) -> None:
    """JSON lines, one event per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            for ev in rec.events:
                fh.write(json.dumps({"path": rec.index, "t": ev.t, "kind": ev.kind, "size": ev.size,
                                     "dx": ev.dx, "dy": ev.dy, "k": ev.k}) + "\n")


def write_summary(result: SimResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.summary(), fh, indent=2)
        fh.write("\n")
