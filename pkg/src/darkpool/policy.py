"""Region and free-boundary extraction from a solved value surface.

A :class:`PolicyTable` records, for each (regime, decision time, inventory),
exactly one of ``Continue(delta_a, delta_b)``, ``Limit(eta, kappa)`` or
``Market(xi)``.  :func:`extract_boundaries` reduces it to integer boundary
curves: on each side of zero inventory the actions must form bands ordered
Continue, Limit, Market as ``|x|`` grows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .qvi import ACTION_NAMES, CONTINUE, LIMIT, MARKET, ValueSurface

SIDES = (1, -1)


class Continue(NamedTuple):
    delta_a: float
    delta_b: float


class Limit(NamedTuple):
    eta: int
    kappa: float


class Market(NamedTuple):
    xi: int


class BandStructureError(ValueError):
    """Actions on one side of zero inventory are not ordered Continue, Limit, Market."""

    def __init__(self, offenders: list[tuple[int, int, int]]):
        self.offenders = offenders
        shown = ", ".join(f"(regime={r}, t_index={i}, side={'+' if s > 0 else '-'})"
                          for r, i, s in offenders[:5])
        more = f" and {len(offenders) - 5} more" if len(offenders) > 5 else ""
        super().__init__(f"non-band action layout at {shown}{more}")


@dataclass(frozen=True)
class PolicyTable:
    """Per-node decision record; arrays have shape (regimes, decision times, nodes)."""

    xs: np.ndarray
    times: np.ndarray
    regimes: tuple[float, ...]
    action: np.ndarray
    delta_a: np.ndarray
    delta_b: np.ndarray
    eta: np.ndarray
    kappa: np.ndarray
    xi: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else math.nan

    def covers(self, x: int) -> bool:
        return int(self.xs[0]) <= x <= int(self.xs[-1])

    def lookup(self, k_idx: int, t_index: int, x: int):
        j = x - int(self.xs[0])
        a = int(self.action[k_idx, t_index, j])
        if a == LIMIT:
            return Limit(int(self.eta[k_idx, t_index, j]), float(self.kappa[k_idx, t_index, j]))
        if a == MARKET:
            return Market(int(self.xi[k_idx, t_index, j]))
        return Continue(float(self.delta_a[k_idx, t_index, j]), float(self.delta_b[k_idx, t_index, j]))

    def regions(self) -> dict[str, np.ndarray]:
        """Boolean masks of the continuation, limit and market regions (a partition)."""
        return {"CR": self.action == CONTINUE, "LI": self.action == LIMIT, "MI": self.action == MARKET}


def extract_regions(surface: ValueSurface) -> PolicyTable:
    """Classify every decision node by the solver's recorded argmax.

    Raises:
        ValueError: the surface holds non-finite values.
    """
    if not np.all(np.isfinite(surface.h)):
        raise ValueError("surface contains non-finite values; refusing to extract regions")
    return PolicyTable(
        xs=surface.xs.copy(), times=surface.times[:-1].copy(), regimes=tuple(surface.market.regimes),
        action=surface.action.copy(), delta_a=surface.delta_a.copy(), delta_b=surface.delta_b.copy(),
        eta=surface.eta.copy(), kappa=surface.kappa.copy(), xi=surface.xi.copy(),
    )


def read_policy_csv(path) -> tuple[PolicyTable, float]:
    """Load a surface CSV written by :func:`darkpool.qvi.write_surface_csv`.

    Returns the policy table and the horizon (time of the terminal rows).
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: empty surface file")
    regimes = sorted({int(r["regime"]) for r in rows})
    xs = np.array(sorted({int(r["x"]) for r in rows}))
    decision = [r for r in rows if r["action"] != "terminal"]
    times = np.array(sorted({float(r["t"]) for r in decision}))
    horizon = max(float(r["t"]) for r in rows)
    shape = (len(regimes), len(times), len(xs))
    if len(decision) != math.prod(shape) or regimes != list(range(len(regimes))):
        raise ValueError(f"{path}: surface rows do not form a full regime x time x inventory grid")
    t_pos = {t: i for i, t in enumerate(times)}
    action = np.zeros(shape, dtype=np.int8)
    delta_a, delta_b = np.zeros(shape), np.zeros(shape)
    eta, xi = np.zeros(shape, dtype=np.int8), np.zeros(shape, dtype=np.int8)
    kappa = np.full(shape, np.nan)
    for r in decision:
        idx = (int(r["regime"]), t_pos[float(r["t"])], int(r["x"]) - int(xs[0]))
        a = ACTION_NAMES.index(r["action"])
        action[idx] = a
        delta_a[idx], delta_b[idx] = float(r["delta_a"]), float(r["delta_b"])
        if a == LIMIT:
            eta[idx], kappa[idx] = int(r["eta"]), float(r["kappa"])
        elif a == MARKET:
            xi[idx] = int(r["xi"])
    table = PolicyTable(xs, times, tuple(float("nan") for _ in regimes), action, delta_a, delta_b,
                        eta, kappa, xi)
    return table, horizon


# ---------------------------------------------------------------- boundaries

Curve = tuple[Optional[int], ...]


@dataclass(frozen=True)
class BoundaryCurves:
    """Integer free boundaries per (regime, side), one entry per decision time.

    ``x_limit``/``x_market`` hold the smallest ``|x|`` in the limit / market
    region (``None`` when the region is empty on that side).
    ``kappa_contours[(regime, side, kappa)]`` holds the ``(|x| from, |x| to)``
    span on which that offset is posted.  ``commission_switch`` holds the
    smallest ``|x|`` in the continuation band at which the commission on the
    inventory-increasing side equals the largest menu entry, and
    ``commission_violations`` lists (regime, t_index, side) where that
    commission decreases as ``|x|`` grows.
    """

    times: np.ndarray
    regimes: tuple[float, ...]
    x_limit: dict[tuple[int, int], Curve]
    x_market: dict[tuple[int, int], Curve]
    kappa_at_limit: dict[tuple[int, int], tuple[Optional[float], ...]]
    kappa_contours: dict[tuple[int, int, float], tuple[Optional[tuple[int, int]], ...]]
    commission_switch: dict[tuple[int, int], Curve]
    commission_violations: tuple[tuple[int, int, int], ...]

    def lit_boundary(self, regime: int, side: int) -> tuple[float, ...]:
        """Smallest ``|x|`` with a lit action, ``inf`` where none exists."""
        out = []
        for xl, xm in zip(self.x_limit[(regime, side)], self.x_market[(regime, side)]):
            cands = [v for v in (xl, xm) if v is not None]
            out.append(float(min(cands)) if cands else math.inf)
        return tuple(out)


def _side_indices(xs: np.ndarray, side: int) -> np.ndarray:
    """Node indices from x = 0 outward on one side."""
    zero = int(np.searchsorted(xs, 0))
    return np.arange(zero, xs.size) if side > 0 else np.arange(zero, -1, -1)


def _smooth_islands(seq: np.ndarray) -> np.ndarray:
    out = seq.copy()
    for j in range(1, seq.size - 1):
        if seq[j - 1] == seq[j + 1] != seq[j]:
            out[j] = seq[j - 1]
    return out


def extract_boundaries(table: PolicyTable, tolerate_islands: bool = False) -> BoundaryCurves:
    """Reduce a banded policy table to boundary curves.

    Raises:
        BandStructureError: some (regime, time, side) is not banded; lists every offender.
    """
    xs = table.xs
    n_r, n_t = table.action.shape[:2]
    x_limit, x_market, kappa_at, contours, switch = {}, {}, {}, {}, {}
    offenders, comm_bad = [], []
    kappa_values = sorted({float(v) for v in table.kappa[np.isfinite(table.kappa)]})

    for r in range(n_r):
        top = float(max(table.delta_a[r].max(), table.delta_b[r].max()))
        for side in SIDES:
            idx = _side_indices(xs, side)
            mags = np.abs(xs[idx])
            incr = table.delta_b if side > 0 else table.delta_a
            lim_c, mkt_c, kap_c, sw_c = [], [], [], []
            cont_c = {kv: [] for kv in kappa_values}
            for i in range(n_t):
                seq = table.action[r, i, idx]
                if tolerate_islands:
                    seq = _smooth_islands(seq)
                if np.any(np.diff(seq.astype(int)) < 0):
                    offenders.append((r, i, side))
                    continue
                lim = mags[seq == LIMIT]
                mkt = mags[seq == MARKET]
                lim_c.append(int(lim.min()) if lim.size else None)
                mkt_c.append(int(mkt.min()) if mkt.size else None)
                kap_c.append(float(table.kappa[r, i, idx[seq == LIMIT][0]]) if lim.size else None)
                kap_row = table.kappa[r, i, idx]
                for kv in kappa_values:
                    on = mags[(seq == LIMIT) & (kap_row == kv)]
                    cont_c[kv].append((int(on.min()), int(on.max())) if on.size else None)
                comm = incr[r, i, idx][seq == CONTINUE]
                if np.any(np.diff(comm) < 0):
                    comm_bad.append((r, i, side))
                hit = mags[seq == CONTINUE][comm == top]
                sw_c.append(int(hit.min()) if hit.size else None)
            x_limit[(r, side)] = tuple(lim_c)
            x_market[(r, side)] = tuple(mkt_c)
            kappa_at[(r, side)] = tuple(kap_c)
            switch[(r, side)] = tuple(sw_c)
            for kv in kappa_values:
                contours[(r, side, kv)] = tuple(cont_c[kv])

    if offenders:
        raise BandStructureError(offenders)
    return BoundaryCurves(table.times.copy(), table.regimes, x_limit, x_market, kappa_at, contours,
                          switch, tuple(comm_bad))


# ---------------------------------------------------------------- CSV export

BOUNDARY_COLUMNS = ("regime", "t", "side", "x_limit", "x_market", "kappa_at_limit")
CONTOUR_COLUMNS = ("regime", "t", "side", "kappa", "x_from", "x_to")


def _opt(v, sign: int = 1) -> str:
    if v is None:
        return ""
    return str(sign * v) if isinstance(v, int) else repr(float(v))


def write_boundaries_csv(curves: BoundaryCurves, path) -> None:
    """Long-format boundaries; inventory levels are signed (negative on the ``-`` side)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUNDARY_COLUMNS)
        for r in range(len(curves.regimes)):
            for side in SIDES:
                for i, t in enumerate(curves.times):
                    w.writerow([r, repr(float(t)), "+" if side > 0 else "-",
                                _opt(curves.x_limit[(r, side)][i], side),
                                _opt(curves.x_market[(r, side)][i], side),
                                _opt(curves.kappa_at_limit[(r, side)][i])])


def write_contours_csv(curves: BoundaryCurves, path) -> None:
    """Spans of inventory on which each kappa offset is posted (signed levels)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTOUR_COLUMNS)
        for (r, side, kv), spans in sorted(curves.kappa_contours.items(), key=lambda e: (e[0][0], -e[0][1], e[0][2])):
            for i, span in enumerate(spans):
                if span is not None:
                    w.writerow([r, repr(float(curves.times[i])), "+" if side > 0 else "-", repr(kv),
                                side * span[0], side * span[1]])
