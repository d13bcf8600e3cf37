"""Command-line entry point: ``darkpool {toy,solve,simulate,boundaries}``.

Every run writes its artifacts plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 runtime failure, 2 configuration / validation
error, 3 stability refusal, 4 too many simulated paths left the grid.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, policy, qvi, sim, toy
from .model import ConfigError, DomainError, ValidationError, parse_config, validate

log = logging.getLogger("darkpool")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_STABILITY, EXIT_GRID_EXIT = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad input that is not a configuration-schema problem (exit 2)."""


# ---------------------------------------------------------------- helpers

def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def config_hash(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def load_config(path):
    """Read, parse and validate a configuration file.

    Returns ``(document, market, costs, grid)``.  Stability is left to the solver,
    which knows which menus the chosen variant uses.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    market, costs, grid = parse_config(doc)
    problems = [v for v in validate(market, costs, grid) if v.code != "stability"]
    if problems:
        raise ValidationError(problems)
    return doc, market, costs, grid


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def write_manifest(out: Path, subcommand: str, doc, parameters: dict, seed, outputs: list[str],
                   started: float, extra: dict | None = None) -> None:
    manifest = {
        "tool": "darkpool",
        "version": __version__,
        "subcommand": subcommand,
        "config_hash": config_hash(doc) if doc is not None else None,
        "parameters": parameters,
        "config": doc,
        "seed": seed,
        "outputs": outputs + [MANIFEST],
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "duration_s": time.time() - started,
    }
    if extra:
        manifest.update(extra)
    write_json(out / MANIFEST, manifest)


def default_variant(market, costs) -> qvi.Variant:
    if market.n_regimes > 1:
        return qvi.Variant.REGIME
    if len(costs.delta_menu_a) > 1 or len(costs.delta_menu_b) > 1:
        return qvi.Variant.MENU
    return qvi.Variant.FIXED


# ---------------------------------------------------------------- commands

def cmd_toy(args) -> int:
    started = time.time()
    doc, market, costs, grid = load_config(args.config)
    params = toy.ToyParams.from_config(market, costs, grid)
    table = toy.solve_toy(params, range(grid.x_min, grid.x_max + 1), y=grid.y0, s=market.s0)
    out = _outdir(args.out)
    toy.write_toy_csv(table, out / "toy.csv")
    stages = params.N + 1
    info = {"n": stages, "n_star": toy.count_distinguishable(stages),
            "viability": toy.limit_order_viable(params),
            "viability_threshold": toy.viability_threshold(params)}
    write_manifest(out, "toy", doc, {"config": str(args.config)}, None, ["toy.csv"], started, info)
    print(json.dumps(info))
    return EXIT_OK


def cmd_solve(args) -> int:
    started = time.time()
    doc, market, costs, grid = load_config(args.config)
    variant = qvi.Variant(args.variant) if args.variant else default_variant(market, costs)
    try:
        variant.check(market)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    surface = qvi.solve(variant, market, costs, grid)
    table = policy.extract_regions(surface)
    curves = policy.extract_boundaries(table)
    out = _outdir(args.out)
    qvi.write_surface_csv(surface, out / "surface.csv")
    policy.write_boundaries_csv(curves, out / "boundaries.csv")
    policy.write_contours_csv(curves, out / "contours.csv")
    x0 = grid.x0 - grid.x_min
    extra = {"value_at_start": grid.y0 + grid.x0 * market.s0 + float(surface.h[0, 0, x0]),
             "stability_bound": qvi.stability_bound(variant, market, costs, grid)}
    write_manifest(out, "solve", doc, {"config": str(args.config), "variant": variant.value}, None,
                   ["surface.csv", "boundaries.csv", "contours.csv"], started, extra)
    return EXIT_OK


def cmd_boundaries(args) -> int:
    started = time.time()
    if not args.policy:
        raise UsageError("boundaries needs --policy SURFACE_CSV")
    table, _ = _read_policy(args.policy)
    doc = None
    if args.config:
        doc, market, _, _ = load_config(args.config)
        if market.n_regimes != table.action.shape[0]:
            raise UsageError("config regime count differs from the policy file")
        table = policy.PolicyTable(table.xs, table.times, tuple(market.regimes), table.action,
                                   table.delta_a, table.delta_b, table.eta, table.kappa, table.xi)
    curves = policy.extract_boundaries(table)
    out = _outdir(args.out)
    policy.write_boundaries_csv(curves, out / "boundaries.csv")
    policy.write_contours_csv(curves, out / "contours.csv")
    write_manifest(out, "boundaries", doc, {"policy": str(args.policy), "config": args.config and str(args.config)},
                   None, ["boundaries.csv", "contours.csv"], started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    doc, market, costs, grid = load_config(args.config)
    if args.uncontrolled == bool(args.policy):
        raise UsageError("simulate needs exactly one of --policy SURFACE_CSV or --uncontrolled")
    table = None
    if args.policy:
        _check_policy_hash(Path(args.policy), doc)
        table, horizon = _read_policy(args.policy)
        if abs(horizon - grid.horizon) > 1e-9 * max(1.0, grid.horizon):
            raise UsageError(f"policy horizon {horizon!r} differs from config horizon {grid.horizon!r}")
    config = sim.SimConfig(paths=args.paths, seed=args.seed, dt_sim=args.dt_sim,
                           enforce_exit=args.enforce_exit, record_paths=args.log_paths)
    result = sim.simulate(table, market, costs, grid, config)
    out = _outdir(args.out)
    sim.write_summary(result, out / "summary.json")
    outputs = ["summary.json"]
    if args.log_paths:
        sim.write_path_log(result.records, out / "paths.jsonl")
        outputs.append("paths.jsonl")
    params = {"config": str(args.config), "policy": args.policy and str(args.policy),
              "uncontrolled": args.uncontrolled, "paths": args.paths, "dt_sim": args.dt_sim,
              "enforce_exit": args.enforce_exit, "log_paths": args.log_paths}
    write_manifest(out, "simulate", doc, params, args.seed, outputs, started)
    print(json.dumps(result.summary()))
    return EXIT_OK


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_policy(path):
    try:
        return policy.read_policy_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read policy {path}: {exc.strerror}") from exc
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: not a surface file ({exc})") from exc


def _check_policy_hash(policy_path: Path, doc) -> None:
    manifest = policy_path.parent / MANIFEST
    if not manifest.exists():
        log.warning("no %s next to %s; cannot verify the policy was solved for this config",
                    MANIFEST, policy_path)
        return
    with open(manifest, encoding="utf-8") as fh:
        recorded = json.load(fh).get("config_hash")
    if recorded != config_hash(doc):
        raise UsageError(f"config hash {config_hash(doc)[:12]} does not match the policy's "
                         f"manifest ({str(recorded)[:12]})")


# ---------------------------------------------------------------- entry point

def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darkpool", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="exact backward recursion for the discrete toy model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("solve", help="finite-difference solve, regions and boundaries")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=[v.value for v in qvi.Variant],
                   help="default: regime if several spreads, menu if several commissions, else fixed")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="Monte Carlo evaluation of a policy")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="surface.csv written by 'solve'")
    p.add_argument("--uncontrolled", action="store_true",
                   help="simulate the first menu commissions without lit-pool orders")
    p.add_argument("--paths", type=_positive_int, default=10_000)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--dt-sim", type=float, default=None, dest="dt_sim")
    p.add_argument("--enforce-exit", action="store_true", dest="enforce_exit")
    p.add_argument("--log-paths", type=int, default=10, dest="log_paths",
                   help="number of paths whose events go to paths.jsonl (0 disables)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("boundaries", help="boundary curves from an existing surface.csv")
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="optional; attaches spread levels and the config hash")
    p.set_defaults(func=cmd_boundaries)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DARKPOOL_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, DomainError, UsageError) as exc:
        print(f"darkpool: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except qvi.StabilityError as exc:
        print(f"darkpool: error: {exc}", file=sys.stderr)
        return EXIT_STABILITY
    except sim.GridExitError as exc:
        print(f"darkpool: error: {exc}", file=sys.stderr)
        return EXIT_GRID_EXIT
    except Exception as exc:  # noqa: BLE001 - report any other failure as a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"darkpool: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
