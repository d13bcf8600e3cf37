"""Discrete-time toy model with constant spread, unit orders and closed-form stage values.

Stage ``n`` sits at time ``T - (n-1)*Delta`` and has ``n - 1`` decision slots
left before the horizon. Because the order of lit-pool actions does not change
the value, a strategy is summarised by a :class:`StrategyCount`, and the value
of a stage is an explicit quadratic in the net inventory shift.
"""

from __future__ import annotations

import csv
import enum
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .model import CostParams, DomainError, GridSpec, MarketParams, fill_probability

ORACLE_MAX_SLOTS = 6
DEFAULT_STATE_CAP = 2_000_000


class ToyAction(str, enum.Enum):
    MB = "MB"
    LB = "LB"
    DP = "DP"
    LS = "LS"
    MS = "MS"

    @property
    def mirror(self) -> "ToyAction":
        return _MIRROR[self]


_MIRROR = {ToyAction.MB: ToyAction.MS, ToyAction.LB: ToyAction.LS, ToyAction.DP: ToyAction.DP,
           ToyAction.LS: ToyAction.LB, ToyAction.MS: ToyAction.MB}

# Tie order: dark pool only, then limit before market.
TIE_ORDER = (ToyAction.DP, ToyAction.LB, ToyAction.LS, ToyAction.MB, ToyAction.MS)


class StrategyCount(NamedTuple):
    q_ma: int = 0
    q_mb: int = 0
    q_la: int = 0
    q_lb: int = 0

    @property
    def total(self) -> int:
        return self.q_ma + self.q_mb + self.q_la + self.q_lb

    def plus(self, action: ToyAction) -> "StrategyCount":
        if action is ToyAction.DP:
            return self
        field = {ToyAction.MS: 0, ToyAction.MB: 1, ToyAction.LS: 2, ToyAction.LB: 3}[action]
        vals = list(self)
        vals[field] += 1
        return StrategyCount(*vals)

    def count(self, action: ToyAction) -> int:
        return {ToyAction.MS: self.q_ma, ToyAction.MB: self.q_mb,
                ToyAction.LS: self.q_la, ToyAction.LB: self.q_lb}[action]


@dataclass(frozen=True)
class ToyParams:
    delta_a: float
    delta_b: float
    lambda_a: float
    lambda_b: float
    k: float
    p: float
    eps_m: float
    eps_l: float
    T: float
    N: int

    def __post_init__(self):
        vals = (self.delta_a, self.delta_b, self.lambda_a, self.lambda_b, self.k,
                self.eps_m, self.eps_l, self.T)
        if any(v < 0 for v in vals) or self.N < 1:
            raise DomainError("toy parameters must be non-negative with N >= 1")
        if not 0.0 < self.p <= 1.0:
            raise DomainError(f"fill probability p={self.p!r} outside (0, 1]")

    @property
    def Delta(self) -> float:
        return self.T / self.N

    @property
    def c1(self) -> float:
        return (self.lambda_a * self.delta_a + self.lambda_b * self.delta_b
                - self.k * (self.lambda_a + self.lambda_b))

    @property
    def c2(self) -> float:
        return self.lambda_b - self.lambda_a

    @classmethod
    def from_config(cls, market: MarketParams, costs: CostParams, grid: GridSpec) -> "ToyParams":
        """Single-regime, single-commission view of a full configuration."""
        if market.n_regimes != 1:
            raise DomainError("the toy model needs exactly one spread regime")
        if len(costs.delta_menu_a) != 1 or len(costs.delta_menu_b) != 1:
            raise DomainError("the toy model needs fixed commissions (one-entry menus)")
        da, db = costs.delta_menu_a[0], costs.delta_menu_b[0]
        return cls(delta_a=da, delta_b=db,
                   lambda_a=market.intensity_a(da), lambda_b=market.intensity_b(db),
                   k=market.regimes[0], p=fill_probability(0.0, market.fill_model),
                   eps_m=costs.eps_m, eps_l=costs.eps_l, T=grid.horizon, N=grid.t_steps)


def count_distinguishable(n: int) -> int:
    """Number of distinguishable strategies for a stage with ``n - 1`` free slots."""
    if int(n) != n or n < 1:
        raise DomainError(f"stage count must be an integer >= 1, got {n!r}")
    n = int(n)
    return n * (n + 1) * (n + 2) * (n + 3) // 24


def uncontrolled_value(t, x, y, s, params: ToyParams):
    """Expected terminal wealth when only the dark pool trades."""
    tau = params.T - t
    return y + x * s + params.c1 * tau - params.k * (x + params.c2 * tau) ** 2


def _check_admissible(n: int, q: StrategyCount) -> None:
    if n < 1 or min(q) < 0 or q.total > n - 1:
        raise DomainError(f"strategy {tuple(q)} is not admissible at stage {n}")


def stage_value(n: int, x, y, s, q: StrategyCount, params: ToyParams):
    """Value at stage ``n`` of committing to the lit-pool order counts ``q``.

    ``x`` may be a numpy array; the arithmetic is the same either way so
    scalar and vectorised evaluations agree bit for bit.
    """
    _check_admissible(n, q)
    k, p = params.k, params.p
    tau = (n - 1) * params.Delta
    shift = (q.q_lb - q.q_la) * p + q.q_mb - q.q_ma + params.c2 * tau
    d = x + shift
    return (y + x * s + params.c1 * tau
            - (k + params.eps_m) * (q.q_ma + q.q_mb)
            + (k * p - params.eps_l) * (q.q_la + q.q_lb)
            - k * (d * d))


def _sell_thresholds(params: ToyParams) -> tuple[float, float, float]:
    """Sell-side switch points in shifted inventory: MS|DP, LS|DP and LS|MS."""
    k, p, em, el = params.k, params.p, params.eps_m, params.eps_l
    if k == 0:
        return math.inf, math.inf, math.inf
    ms_dp = em / (2 * k) + 1
    ls_dp = el / (2 * k * p) - (1 - p) / 2
    ls_ms = math.inf if p == 1 else (2 * k + em - el) / (2 * k * (1 - p)) + p / 2
    return ms_dp, ls_dp, ls_ms


def optimal_action(n: int, x: float, q: StrategyCount, params: ToyParams) -> ToyAction:
    """Action for the next slot given the counts ``q`` already committed at stage ``n``.

    Uses the closed-form inventory thresholds; on exact equality the dark pool
    beats any lit order and a limit order beats a market order.
    """
    _check_admissible(n, q)
    xbar = (q.q_lb - q.q_la) * params.p + q.q_mb - q.q_ma + params.c2 * n * params.Delta
    xt = x + xbar
    ms_dp, ls_dp, ls_ms = _sell_thresholds(params)
    side_x = xt if xt > 0 else -xt
    if side_x <= ls_dp and side_x <= ms_dp:
        return ToyAction.DP
    if ls_dp < side_x <= ls_ms:
        action = ToyAction.LS
    else:
        action = ToyAction.MS
    return action if xt > 0 else action.mirror


def viability_threshold(params: ToyParams) -> float:
    """Largest limit-order penalty for which the limit bands are non-empty."""
    return params.p * (params.eps_m + 3 * params.k - params.p * params.k)


def limit_order_viable(params: ToyParams) -> bool:
    return params.eps_l < viability_threshold(params)


# ------------------------------------------------------------------ solvers

class ToyDecision(NamedTuple):
    value: float
    action: ToyAction


class ToyCapacityError(MemoryError):
    pass


@dataclass(frozen=True)
class ToyTable:
    params: ToyParams
    xs: np.ndarray
    stages: np.ndarray       # 1 .. N+1
    values: np.ndarray       # (n_stages, n_x)
    actions: np.ndarray      # (n_stages, n_x) of ToyAction

    def decision(self, n: int, x: int) -> ToyDecision:
        i = int(n) - 1
        j = int(np.searchsorted(self.xs, x))
        return ToyDecision(float(self.values[i, j]), self.actions[i, j])


def _pick(best: dict[ToyAction, float]) -> ToyDecision:
    value = max(best.values())
    for a in TIE_ORDER:
        if best.get(a, -math.inf) == value:
            return ToyDecision(value, a)
    raise AssertionError("unreachable")


def _lit_reward(q: StrategyCount, params: ToyParams) -> float:
    return (-(params.k + params.eps_m) * (q.q_ma + q.q_mb)
            + (params.k * params.p - params.eps_l) * (q.q_la + q.q_lb))


def _frontier(max_slots: int, params: ToyParams, cap: int) -> list[list[StrategyCount]]:
    """Undominated strategy counts, grouped by the number of slots they use.

    Two counts with the same net market/limit position and the same number
    of used slots shift inventory identically; only the one with the larger
    lit-pool reward can be optimal now or after any extension, so each
    (net market, net limit, used) class keeps a single representative.
    """
    layers: list[dict[tuple[int, int], StrategyCount]] = [{(0, 0): StrategyCount()}]
    size = 1
    for _ in range(max_slots):
        nxt: dict[tuple[int, int], StrategyCount] = {}
        for q in layers[-1].values():
            for a in (ToyAction.MS, ToyAction.MB, ToyAction.LS, ToyAction.LB):
                cand = q.plus(a)
                key = (cand.q_mb - cand.q_ma, cand.q_lb - cand.q_la)
                cur = nxt.get(key)
                if cur is None or _lit_reward(cand, params) > _lit_reward(cur, params):
                    nxt[key] = cand
        layers.append(nxt)
        size += len(nxt)
        if size > cap:
            raise ToyCapacityError(f"toy state space exceeds cap of {cap} strategy classes")
    return [list(layer.values()) for layer in layers]


def solve_toy(params: ToyParams, x_range: Iterable[int], y: float = 0.0, s: float = 0.0,
              state_cap: int = DEFAULT_STATE_CAP) -> ToyTable:
    """Exact optimal value and first action for every stage 1..N+1 and inventory.

    Built stage by stage backward from the horizon: stage ``n+1`` adds one
    decision slot to stage ``n``, and the candidate strategy set grows by
    appending one lit order to each undominated stage-``n`` candidate.
    """
    xs = np.asarray(list(x_range), dtype=np.int64)
    layers = _frontier(params.N, params, state_cap)
    n_stages = params.N + 1
    values = np.empty((n_stages, xs.size))
    actions = np.empty((n_stages, xs.size), dtype=object)
    xf = xs.astype(float)
    for n in range(1, n_stages + 1):
        best = {a: np.full(xs.size, -np.inf) for a in TIE_ORDER}
        for used in range(n):
            for q in layers[used]:
                v = stage_value(n, xf, y, s, q, params)
                if used <= n - 2:
                    np.maximum(best[ToyAction.DP], v, out=best[ToyAction.DP])
                for a in TIE_ORDER[1:]:
                    if q.count(a):
                        np.maximum(best[a], v, out=best[a])
        if n == 1:
            best[ToyAction.DP] = stage_value(1, xf, y, s, StrategyCount(), params)
        for j in range(xs.size):
            d = _pick({a: float(best[a][j]) for a in TIE_ORDER})
            values[n - 1, j] = d.value
            actions[n - 1, j] = d.action
    return ToyTable(params, xs, np.arange(1, n_stages + 1), values, actions)


def enumerate_oracle(params: ToyParams, x: float, N: int, y: float = 0.0, s: float = 0.0) -> ToyDecision:
    """Brute force over every strategy count with at most ``N`` orders (stage ``N + 1``)."""
    if N > ORACLE_MAX_SLOTS:
        raise DomainError(f"oracle refuses N={N} > {ORACLE_MAX_SLOTS}")
    n = N + 1
    best = {a: -math.inf for a in TIE_ORDER}
    for q in itertools.product(range(N + 1), repeat=4):
        if sum(q) > N:
            continue
        q = StrategyCount(*q)
        v = float(stage_value(n, float(x), y, s, q, params))
        if q.total <= N - 1 or n == 1:
            best[ToyAction.DP] = max(best[ToyAction.DP], v)
        for a in TIE_ORDER[1:]:
            if q.count(a):
                best[a] = max(best[a], v)
    return _pick(best)


def write_toy_csv(table: ToyTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "x", "value", "action"])
        for i, n in enumerate(table.stages):
            for j, x in enumerate(table.xs):
                w.writerow([int(n), int(x), repr(float(table.values[i, j])), table.actions[i, j].value])
