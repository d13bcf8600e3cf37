"""Parameter containers for the dark-pool market-making model and their validation.

All containers are frozen dataclasses holding tuples, so they can be shared
freely once built. ``validate`` never raises: it returns a list of
:class:`Violation` records and leaves the decision to the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

SIZE_LAW_TOL = 1e-12


class DomainError(ValueError):
    """An argument lies outside the domain of the function."""


@dataclass(frozen=True)
class FillModel:
    """Probability of full execution of a limit order posted ``kappa`` beyond the best quote.

    ``p0 * exp(-alpha * kappa)``; ``alpha = 0`` gives the constant-fill case.
    """

    p0: float = 1.0
    alpha: float = 0.0


@dataclass(frozen=True)
class MarketParams:
    sigma: float
    mu: float
    s0: float
    regimes: tuple[float, ...]
    generator: tuple[tuple[float, ...], ...]
    lambda_a: tuple[tuple[float, float], ...]
    lambda_b: tuple[tuple[float, float], ...]
    size_law_a: tuple[tuple[int, float], ...] = ((1, 1.0),)
    size_law_b: tuple[tuple[int, float], ...] = ((1, 1.0),)
    fill_model: FillModel = field(default_factory=FillModel)
    price_model: str = "arithmetic"

    @property
    def n_regimes(self) -> int:
        return len(self.regimes)

    def generator_matrix(self) -> np.ndarray:
        return np.array(self.generator, dtype=float).reshape(len(self.generator), -1)

    def intensity_a(self, delta: float) -> float:
        return _lookup(self.lambda_a, delta, "lambda_a")

    def intensity_b(self, delta: float) -> float:
        return _lookup(self.lambda_b, delta, "lambda_b")


@dataclass(frozen=True)
class CostParams:
    eps_m: float
    eps_l: float
    delta_menu_a: tuple[float, ...]
    delta_menu_b: tuple[float, ...]
    kappa_bar: float = 0.0
    kappa_grid: tuple[float, ...] = (0.0,)
    phi: float = 0.0
    # Lit orders may only reduce |x| and none are posted at x = 0.
    no_speculation: bool = True


@dataclass(frozen=True)
class GridSpec:
    x_min: int
    x_max: int
    t_steps: int
    horizon: float
    observation_mode: str = "continuous"
    y_min: float = -math.inf
    y_max: float = math.inf
    x0: int = 0
    y0: float = 0.0

    @property
    def dt(self) -> float:
        return self.horizon / self.t_steps

    @property
    def xs(self) -> np.ndarray:
        return np.arange(self.x_min, self.x_max + 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.t_steps + 1)


@dataclass(frozen=True)
class State:
    t: float
    x: int
    y: float
    s: float
    k_idx: int = 0


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def _lookup(pairs: Sequence[tuple[float, float]], delta: float, name: str) -> float:
    for d, lam in pairs:
        if d == delta:
            return lam
    raise DomainError(f"{name} has no intensity for commission {delta!r}")


def fill_probability(kappa: float, fill_model: FillModel, kappa_bar: float = math.inf) -> float:
    """Full-execution probability for a limit order posted ``kappa`` away from the best quote."""
    if not 0.0 <= kappa <= kappa_bar:
        raise DomainError(f"kappa={kappa!r} outside [0, {kappa_bar!r}]")
    return fill_model.p0 * math.exp(-fill_model.alpha * kappa)


def max_event_rate(market: MarketParams, costs: CostParams) -> float:
    """Largest total jump intensity out of any node: both client sides plus the regime exit rate."""
    lam_a = max((market.intensity_a(d) for d in costs.delta_menu_a), default=0.0)
    lam_b = max((market.intensity_b(d) for d in costs.delta_menu_b), default=0.0)
    gen = market.generator_matrix()
    exit_rate = float(np.max(-np.diag(gen))) if gen.size else 0.0
    return lam_a + lam_b + max(exit_rate, 0.0)


def _check_size_law(law, name, out):
    if not law:
        out.append(Violation("size_law_support", f"{name} is empty"))
        return
    if any(int(s) != s or s < 1 for s, _ in law):
        out.append(Violation("size_law_support", f"{name} sizes must be positive integers"))
    if any(p < 0 for _, p in law):
        out.append(Violation("size_law_negative", f"{name} has a negative mass"))
    total = math.fsum(p for _, p in law)
    if abs(total - 1.0) > SIZE_LAW_TOL:
        out.append(Violation("size_law_sum", f"{name} sums to {total!r}, not 1"))


def validate(market: MarketParams, costs: CostParams, grid: GridSpec) -> list[Violation]:
    out: list[Violation] = []

    values = [market.sigma, market.mu, market.s0, costs.eps_m, costs.eps_l, costs.phi,
              costs.kappa_bar, grid.horizon, *market.regimes, *costs.kappa_grid,
              *costs.delta_menu_a, *costs.delta_menu_b]
    if not all(math.isfinite(v) for v in values):
        out.append(Violation("non_finite", "all scalar parameters must be finite"))

    # Market
    if market.sigma < 0:
        out.append(Violation("sigma_negative", f"sigma={market.sigma!r} < 0"))
    if market.price_model not in ("arithmetic", "geometric"):
        out.append(Violation("price_model", f"unknown price model {market.price_model!r}"))
    if not market.regimes:
        out.append(Violation("regimes_empty", "at least one half-spread regime is required"))
    if any(k < 0 for k in market.regimes):
        out.append(Violation("spread_negative", "half-spreads must be >= 0"))
    gen = np.array(market.generator, dtype=float) if market.generator else np.zeros((0, 0))
    n = len(market.regimes)
    if gen.ndim != 2 or gen.shape != (n, n):
        out.append(Violation("generator_shape", f"generator must be {n}x{n}, got {gen.shape}"))
    else:
        off = gen[~np.eye(n, dtype=bool)]
        if np.any(off < 0):
            out.append(Violation("generator_offdiag_negative", "off-diagonal rates must be >= 0"))
        rows = gen.sum(axis=1)
        for i, r in enumerate(rows):
            if abs(r) > 1e-12 * max(1.0, float(np.abs(gen[i]).sum())):
                out.append(Violation("generator_row_sum", f"row {i} sums to {r!r}, not 0"))

    for name, pairs, menu in (("lambda_a", market.lambda_a, costs.delta_menu_a),
                              ("lambda_b", market.lambda_b, costs.delta_menu_b)):
        if any(lam < 0 for _, lam in pairs):
            out.append(Violation("intensity_negative", f"{name} has a negative intensity"))
        known = {d for d, _ in pairs}
        missing = [d for d in menu if d not in known]
        if missing:
            out.append(Violation("intensity_menu_mismatch",
                                 f"{name} has no intensity for commissions {missing}"))

    _check_size_law(market.size_law_a, "size_law_a", out)
    _check_size_law(market.size_law_b, "size_law_b", out)

    fm = market.fill_model
    if not 0.0 < fm.p0 <= 1.0:
        out.append(Violation("fill_p0", f"p0={fm.p0!r} outside (0, 1]"))
    if fm.alpha < 0:
        out.append(Violation("fill_alpha", f"alpha={fm.alpha!r} < 0"))

    # Costs
    if grid.observation_mode == "discrete":
        # The toy model compares the two penalties freely (limit orders may be
        # the costlier ones, which is how they become non-viable).
        if not (costs.eps_m > 1.0 and costs.eps_l > 1.0):
            out.append(Violation("eps_ordering",
                                 f"need eps_m > 1 and eps_l > 1, got eps_m={costs.eps_m!r}, eps_l={costs.eps_l!r}"))
    elif not costs.eps_m > costs.eps_l > 1.0:
        out.append(Violation("eps_ordering",
                             f"need eps_m > eps_l > 1, got eps_m={costs.eps_m!r}, eps_l={costs.eps_l!r}"))
    if not costs.delta_menu_a or not costs.delta_menu_b:
        out.append(Violation("commission_menu_empty", "commission menus must be non-empty"))
    k_min = min(market.regimes, default=0.0)
    for d in (*costs.delta_menu_a, *costs.delta_menu_b):
        if d < 0:
            out.append(Violation("commission_negative", f"commission {d!r} < 0"))
        elif d > k_min:
            out.append(Violation("commission_exceeds_spread",
                                 f"commission {d!r} exceeds half-spread {k_min!r}"))
    if costs.kappa_bar < 0:
        out.append(Violation("kappa_bar_negative", f"kappa_bar={costs.kappa_bar!r} < 0"))
    if not costs.kappa_grid or any(not 0.0 <= kap <= costs.kappa_bar for kap in costs.kappa_grid):
        out.append(Violation("kappa_grid_range", "kappa grid must be non-empty and lie in [0, kappa_bar]"))
    if costs.phi < 0:
        out.append(Violation("phi_negative", f"phi={costs.phi!r} < 0"))

    # Grid
    if not grid.x_min < 0 < grid.x_max:
        out.append(Violation("grid_bounds", f"need x_min < 0 < x_max, got [{grid.x_min}, {grid.x_max}]"))
    if grid.t_steps < 1 or not grid.horizon > 0:
        out.append(Violation("dt_nonpositive", "need t_steps >= 1 and horizon > 0"))
    if grid.observation_mode not in ("continuous", "discrete"):
        out.append(Violation("observation_mode", f"unknown observation mode {grid.observation_mode!r}"))
    if not grid.y_min < grid.y_max:
        out.append(Violation("cash_bounds", f"need y_min < y_max, got [{grid.y_min}, {grid.y_max}]"))
    if not grid.x_min <= grid.x0 <= grid.x_max or not grid.y_min <= grid.y0 <= grid.y_max:
        out.append(Violation("initial_state", "initial (x0, y0) must lie inside the domain"))
    if (grid.observation_mode == "continuous" and grid.t_steps >= 1 and grid.horizon > 0
            and not any(v.code in ("intensity_menu_mismatch", "generator_shape") for v in out)):
        bound = grid.dt * max_event_rate(market, costs)
        if bound > 1.0:
            out.append(Violation("stability", f"dt * max event rate = {bound!r} > 1"))
    return out


# ---------------------------------------------------------------- JSON config

class ConfigError(ValueError):
    """Malformed configuration document (schema, not model, problems)."""


_SECTIONS = {
    "market": {"sigma", "mu", "s0", "regimes", "generator", "lambda_a", "lambda_b",
               "size_law_a", "size_law_b", "fill_model", "price_model"},
    "costs": {"eps_m", "eps_l", "delta_menu_a", "delta_menu_b", "kappa_bar", "kappa_grid",
              "phi", "no_speculation"},
    "grid": {"x_min", "x_max", "t_steps", "horizon", "observation_mode", "y_min", "y_max",
             "x0", "y0"},
}
_REQUIRED = {
    "market": {"sigma", "s0", "regimes", "lambda_a", "lambda_b"},
    "costs": {"eps_m", "eps_l", "delta_menu_a", "delta_menu_b"},
    "grid": {"x_min", "x_max", "t_steps", "horizon"},
}


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    f = float(v)
    if not math.isfinite(f):
        raise ConfigError(f"{where}: number must be finite")
    return f


def _int(v, where: str) -> int:
    f = _num(v, where)
    if f != int(f):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    return int(f)


def _pairs(v, where: str, first=_num) -> tuple:
    if not isinstance(v, list) or not all(isinstance(p, list) and len(p) == 2 for p in v):
        raise ConfigError(f"{where}: expected a list of [key, value] pairs")
    return tuple((first(a, where), _num(b, where)) for a, b in v)


def _nums(v, where: str) -> tuple[float, ...]:
    if not isinstance(v, list):
        raise ConfigError(f"{where}: expected a list")
    return tuple(_num(a, where) for a in v)


def _bound(v, where: str, default: float) -> float:
    return default if v is None else _num(v, where)


def parse_config(doc: Mapping) -> tuple[MarketParams, CostParams, GridSpec]:
    """Build parameter objects from a decoded JSON document.

    Raises:
        ConfigError: on missing or unknown keys, wrong types or non-finite numbers.
    """
    if not isinstance(doc, Mapping):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for sec in _SECTIONS:
        if sec not in doc:
            raise ConfigError(f"missing required key {sec!r}")
        if not isinstance(doc[sec], Mapping):
            raise ConfigError(f"{sec!r} must be an object")
        extra = set(doc[sec]) - _SECTIONS[sec]
        if extra:
            raise ConfigError(f"unknown keys in {sec!r}: {sorted(extra)}")
        missing = _REQUIRED[sec] - set(doc[sec])
        if missing:
            raise ConfigError(f"missing keys in {sec!r}: {sorted(missing)}")

    m, c, g = doc["market"], doc["costs"], doc["grid"]
    regimes = _nums(m["regimes"], "market.regimes")
    if "generator" in m:
        gen_raw = m["generator"]
        if not isinstance(gen_raw, list) or not all(isinstance(r, list) for r in gen_raw):
            raise ConfigError("market.generator: expected a list of rows")
        generator = tuple(_nums(r, "market.generator") for r in gen_raw)
    else:
        generator = tuple((0.0,) * len(regimes) for _ in regimes)
    if len(generator) != len(regimes) or any(len(r) != len(regimes) for r in generator):
        raise ConfigError(f"market.generator must be {len(regimes)}x{len(regimes)} to match regimes")
    fm = m.get("fill_model", {})
    if not isinstance(fm, Mapping) or set(fm) - {"p0", "alpha"}:
        raise ConfigError("market.fill_model: expected an object with keys p0, alpha")
    price_model = m.get("price_model", "arithmetic")
    if not isinstance(price_model, str):
        raise ConfigError("market.price_model must be a string")
    market = MarketParams(
        sigma=_num(m["sigma"], "market.sigma"),
        mu=_num(m.get("mu", 0.0), "market.mu"),
        s0=_num(m["s0"], "market.s0"),
        regimes=regimes,
        generator=generator,
        lambda_a=_pairs(m["lambda_a"], "market.lambda_a"),
        lambda_b=_pairs(m["lambda_b"], "market.lambda_b"),
        size_law_a=_pairs(m.get("size_law_a", [[1, 1.0]]), "market.size_law_a", _int),
        size_law_b=_pairs(m.get("size_law_b", [[1, 1.0]]), "market.size_law_b", _int),
        fill_model=FillModel(p0=_num(fm.get("p0", 1.0), "market.fill_model.p0"),
                             alpha=_num(fm.get("alpha", 0.0), "market.fill_model.alpha")),
        price_model=price_model,
    )
    no_spec = c.get("no_speculation", True)
    if not isinstance(no_spec, bool):
        raise ConfigError("costs.no_speculation must be a boolean")
    costs = CostParams(
        eps_m=_num(c["eps_m"], "costs.eps_m"),
        eps_l=_num(c["eps_l"], "costs.eps_l"),
        delta_menu_a=_nums(c["delta_menu_a"], "costs.delta_menu_a"),
        delta_menu_b=_nums(c["delta_menu_b"], "costs.delta_menu_b"),
        kappa_bar=_num(c.get("kappa_bar", 0.0), "costs.kappa_bar"),
        kappa_grid=_nums(c.get("kappa_grid", [0.0]), "costs.kappa_grid"),
        phi=_num(c.get("phi", 0.0), "costs.phi"),
        no_speculation=no_spec,
    )
    mode = g.get("observation_mode", "continuous")
    if not isinstance(mode, str):
        raise ConfigError("grid.observation_mode must be a string")
    grid = GridSpec(
        x_min=_int(g["x_min"], "grid.x_min"),
        x_max=_int(g["x_max"], "grid.x_max"),
        t_steps=_int(g["t_steps"], "grid.t_steps"),
        horizon=_num(g["horizon"], "grid.horizon"),
        observation_mode=mode,
        y_min=_bound(g.get("y_min"), "grid.y_min", -math.inf),
        y_max=_bound(g.get("y_max"), "grid.y_max", math.inf),
        x0=_int(g.get("x0", 0), "grid.x0"),
        y0=_num(g.get("y0", 0.0), "grid.y0"),
    )
    return market, costs, grid


class ValidationError(ValueError):
    """Raised by callers that refuse to run on an invalid configuration."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(f"{v.code}: {v.message}" for v in self.violations))
