"""Command-line interface: closed-loop runs, parameter sweeps, routes, comparisons.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 infeasible problem.
All outputs are deterministic for fixed inputs; wall-clock timings are only
written when ``--timing`` is given.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click

from .baseline import DriverParams, simulate_driver
from .bnb import SearchInfeasible
from .mpc import MPCAborted, Trajectory, load_trajectory, run_mpc
from .ocp import SolverConfig
from .route import ROUTE_KINDS, RouteError, RouteProfile, bundled_route, dumps_route, generate_route, load_route
from .vehicle import VehicleError, VehicleParams, default_vehicle, load_vehicle

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2, 3
RUN_SCHEMA = "run-stats/1"
SWEEP_SCHEMA = "sweep/1"
COMPARE_SCHEMA = "comparison/1"

_SOLVER_KEYS = {"phi", "beta", "N", "ds", "v_f", "epsilon", "time_limit", "lut_velocity_step"}
_MPC_KEYS = {"stride", "reuse"}
_DRIVER_KEYS = set(DriverParams.__dataclass_fields__)


class InvalidInput(click.ClickException):
    exit_code = EXIT_INVALID


class Infeasible(click.ClickException):
    exit_code = EXIT_INFEASIBLE


# -- input helpers -------------------------------------------------------------------


def _load_route(spec: str) -> RouteProfile:
    """A route file path, or the name of a bundled route."""
    try:
        if spec in ROUTE_KINDS and not Path(spec).exists():
            return bundled_route(spec)
        return load_route(spec)
    except FileNotFoundError:
        raise InvalidInput(f"route file not found: {spec}") from None
    except RouteError as exc:
        raise InvalidInput(f"route {spec}: {exc}") from None


def _load_vehicle(path: str | None) -> VehicleParams:
    try:
        return default_vehicle() if path is None else load_vehicle(path)
    except FileNotFoundError:
        raise InvalidInput(f"vehicle file not found: {path}") from None
    except VehicleError as exc:
        raise InvalidInput(f"vehicle {path}: {exc}") from None


def _load_config(path: str | None) -> dict:
    """Read a TOML config with optional [solver], [mpc] and [driver] tables."""
    if path is None:
        return {"solver": {}, "mpc": {}, "driver": {}}
    try:
        data = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInput(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InvalidInput(f"config {path}: {exc}") from None
    allowed = {"solver": _SOLVER_KEYS, "mpc": _MPC_KEYS, "driver": _DRIVER_KEYS}
    out = {}
    for table, keys in allowed.items():
        section = data.pop(table, {})
        if not isinstance(section, dict):
            raise InvalidInput(f"config {path}: [{table}] must be a table")
        unknown = sorted(set(section) - keys)
        if unknown:
            raise InvalidInput(f"config {path}: unknown key {table}.{unknown[0]}")
        out[table] = section
    if data:
        raise InvalidInput(f"config {path}: unknown table {sorted(data)[0]!r}")
    return out


def _solver_config(config: dict, **flags) -> SolverConfig:
    values = dict(config["solver"])
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return SolverConfig(**values)
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"solver settings: {exc}") from None


def _driver_params(config: dict) -> DriverParams:
    try:
        return DriverParams(**config["driver"])
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"driver settings: {exc}") from None


def _floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}", param_hint=name) from None
    if not vals:
        raise click.BadParameter("empty list", param_hint=name)
    return vals


def _ints(text: str, name: str) -> list[int]:
    vals = _floats(text, name)
    if any(v != int(v) for v in vals):
        raise click.BadParameter(f"expected integers, got {text!r}", param_hint=name)
    return [int(v) for v in vals]


def _num(x):
    """JSON-safe number: floats keep full precision, infinities become null."""
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# -- simulation cores (shared by run and sweep) ---------------------------------------


def _simulate(kind: str, route: RouteProfile, cfg: SolverConfig, p: VehicleParams, config: dict,
              timing: bool = False):
    """Run one simulation; returns (trajectory, per-step stats csv or None, summary dict)."""
    mpc_opts = config["mpc"]
    if kind == "baseline":
        traj = simulate_driver(route, _driver_params(config), p, ds=cfg.ds)
        return traj, None, {}
    result = run_mpc(route, cfg, p, search=(kind == "mpc"), stride=int(mpc_opts.get("stride", 1)),
                     reuse=bool(mpc_opts.get("reuse", False)))
    steps = result.stats
    summary = {
        "solves": len(steps),
        "expanded_nodes": sum(s["expanded"] for s in steps),
        "max_frontier": max((s["max_frontier"] for s in steps), default=0),
        "terminations": dict(sorted(_count(s["termination"] for s in steps).items())),
        "sources": dict(sorted(_count(s["source"] for s in steps).items())),
    }
    if timing:
        times = [s["solve_time_s"] for s in steps]
        summary["mean_solve_time_s"] = sum(times) / len(times) if times else 0.0
        summary["max_solve_time_s"] = max(times, default=0.0)
    return result.trajectory, result.stats_csv(timing=timing), summary


def _count(items):
    out: dict = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return out


def _run_stats(kind, route, cfg, p, traj: Trajectory, summary: dict) -> dict:
    return {
        "schema": RUN_SCHEMA,
        "mode": kind,
        "route": route.name,
        "route_length_m": route.length,
        "vehicle": p.name,
        "config": {k: _num(v) for k, v in sorted(vars(cfg).items())},
        "steps": len(traj),
        "distance_m": traj.distance,
        "fuel_g": traj.fuel_total,
        "time_s": traj.time_total,
        "warnings": list(traj.warnings),
        "solver": summary,
    }


# -- commands -----------------------------------------------------------------------

_route_opt = click.option("--route", "route_spec", required=True,
                          help="Route CSV file or bundled route name (flat, hill, stops, mixed).")
_vehicle_opt = click.option("--vehicle", type=click.Path(dir_okay=False), default=None,
                            help="Vehicle TOML file (default: bundled tractor-trailer).")
_config_opt = click.option("--config", type=click.Path(dir_okay=False), default=None,
                           help="TOML file with [solver], [mpc] and [driver] tables.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact")
def cli():
    """Branch-and-bound eco-driving MPC for heavy-duty trucks."""


@cli.command()
@click.argument("kind", type=click.Choice(["mpc", "baseline", "warmstart"]))
@_route_opt
@_vehicle_opt
@_config_opt
@click.option("--phi", type=float, default=None, help="Time-versus-fuel weight ratio [g/s].")
@click.option("--beta", type=float, default=None, help="Terminal velocity penalty.")
@click.option("--horizon", type=int, default=None, help="Prediction horizon N [stages].")
@click.option("--ds", type=float, default=None, help="Stage length [m].")
@click.option("--epsilon", type=float, default=None, help="Velocity bin width for node elimination [m/s].")
@click.option("--time-limit", type=float, default=None, help="Search time budget per solve [s].")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--timing", is_flag=True, help="Also record wall-clock solve times (not reproducible).")
def run(kind, route_spec, vehicle, config, phi, beta, horizon, ds, epsilon, time_limit, out, timing):
    """Simulate one route with the MPC, the warm start alone, or the baseline driver.

    Writes trajectory.csv and stats.json (plus steps.csv for the MPC modes).
    """
    route = _load_route(route_spec)
    p = _load_vehicle(vehicle)
    conf = _load_config(config)
    cfg = _solver_config(conf, phi=phi, beta=beta, N=horizon, ds=ds, epsilon=epsilon, time_limit=time_limit)
    out = Path(out)
    try:
        traj, steps, summary = _simulate(kind, route, cfg, p, conf, timing)
    except MPCAborted as exc:
        _write(out / "trajectory.csv", exc.result.trajectory.to_csv())
        _write(out / "steps.csv", exc.result.stats_csv(timing=timing))
        raise Infeasible(str(exc)) from None
    except (SearchInfeasible, RouteError) as exc:
        raise Infeasible(str(exc)) from None
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    _write(out / "trajectory.csv", traj.to_csv())
    if steps is not None:
        _write(out / "steps.csv", steps)
    _write(out / "stats.json", _dump_json(_run_stats(kind, route, cfg, p, traj, summary)))
    click.echo(f"{kind} on {route.name}: fuel {traj.fuel_total:.2f} g, time {traj.time_total:.2f} s -> {out}")


def _sweep_cell(args):
    route, vehicle_path, conf, cell, timing = args
    phi, beta, N = cell
    row = {"phi": phi, "beta": beta, "N": N}
    try:
        p = _load_vehicle(vehicle_path)
        cfg = _solver_config(conf, phi=phi, beta=beta, N=N)
        traj, _, summary = _simulate("mpc", route, cfg, p, conf, timing)
        row.update(status="ok", fuel_g=traj.fuel_total, time_s=traj.time_total,
                   nodes=summary["expanded_nodes"], message="")
        if timing:
            row["mean_solve_time_s"] = summary["mean_solve_time_s"]
    except (MPCAborted, SearchInfeasible, RouteError, ValueError, click.ClickException) as exc:
        msg = exc.format_message() if isinstance(exc, click.ClickException) else str(exc)
        row.update(status="failed", fuel_g=math.nan, time_s=math.nan, nodes=0, message=msg)
        if timing:
            row["mean_solve_time_s"] = math.nan
    return row


@cli.command()
@_route_opt
@_vehicle_opt
@_config_opt
@click.option("--phi", default="4,10,40,100", show_default=True, help="Comma-separated phi values.")
@click.option("--beta", default="10", show_default=True, help="Comma-separated beta values.")
@click.option("--horizon", default="200", show_default=True, help="Comma-separated horizons N.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output CSV file.")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True,
              help="Cells simulated in parallel.")
@click.option("--timing", is_flag=True, help="Add a mean solve time column (not reproducible).")
def sweep(route_spec, vehicle, config, phi, beta, horizon, out, workers, timing):
    """Closed-loop MPC over the grid of phi, beta and N values (one CSV row per cell)."""
    route = _load_route(route_spec)
    _load_vehicle(vehicle)
    conf = _load_config(config)
    cells = sorted(itertools.product(_floats(phi, "--phi"), _floats(beta, "--beta"), _ints(horizon, "--horizon")))
    jobs = [(route, vehicle, conf, c, timing) for c in cells]
    if workers == 1:
        rows = [_sweep_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    rows.sort(key=lambda r: (r["phi"], r["beta"], r["N"]))
    fields = ["phi", "beta", "N", "status", "fuel_g", "time_s", "nodes"]
    fields += ["mean_solve_time_s"] if timing else []
    fields += ["message"]
    buf = io.StringIO()
    buf.write(f"# schema: {SWEEP_SCHEMA}\n# route: {route.name}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for r in rows:
        writer.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
    _write(Path(out), buf.getvalue())
    failed = sum(r["status"] != "ok" for r in rows)
    click.echo(f"{len(rows)} cells, {failed} failed -> {out}")


@cli.command()
@click.argument("kind", type=click.Choice(ROUTE_KINDS))
@click.option("--length", type=float, default=5000.0, show_default=True, help="Route length [m].")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for hill placement.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output CSV (default: stdout).")
def genroute(kind, length, seed, out):
    """Generate a synthetic route."""
    try:
        route = generate_route(kind, length=length, seed=seed)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    text = dumps_route(route)
    if out is None:
        click.echo(text, nl=False)
    else:
        _write(Path(out), text)


def _load_traj(path: str) -> Trajectory:
    try:
        return load_trajectory(path)
    except FileNotFoundError:
        raise InvalidInput(f"trajectory file not found: {path}") from None
    except ValueError as exc:
        raise InvalidInput(f"trajectory {path}: {exc}") from None


def savings(ref: float, value: float) -> float:
    """Relative reduction of ``value`` against ``ref`` [%]."""
    return 100.0 * (ref - value) / ref


def comparison_report(reference: Trajectory, candidates: list[tuple[str, Trajectory]], ref_name: str) -> dict:
    """Totals and savings of each candidate relative to ``reference``.

    Raises ``ValueError`` when the trajectories do not cover the same route grid.
    """
    for name, t in candidates:
        if t.route != reference.route or len(t) != len(reference) or t.ds != reference.ds:
            raise ValueError(f"{name} covers route {t.route!r} ({len(t)} x {t.ds:g} m), reference covers "
                             f"{reference.route!r} ({len(reference)} x {reference.ds:g} m)")
    rows = []
    for name, t in candidates:
        rows.append({
            "file": name,
            "source": t.source,
            "fuel_g": t.fuel_total,
            "time_s": t.time_total,
            "fuel_savings_pct": savings(reference.fuel_total, t.fuel_total),
            "time_increase_pct": -savings(reference.time_total, t.time_total),
        })
    report = {
        "schema": COMPARE_SCHEMA,
        "route": reference.route,
        "distance_m": reference.distance,
        "reference": {"file": ref_name, "source": reference.source,
                      "fuel_g": reference.fuel_total, "time_s": reference.time_total},
        "candidates": rows,
    }
    # per-strategy view: baseline, warm start only and the full search
    by_source = {reference.source: reference} | {t.source: t for _, t in candidates}
    summary = {}
    for key in ("baseline", "warmstart", "mpc"):
        if key in by_source:
            summary[f"{key}_fuel_g"] = by_source[key].fuel_total
            summary[f"{key}_time_s"] = by_source[key].time_total
    if "mpc" in by_source and reference.source != "mpc":
        summary["savings_pct"] = savings(reference.fuel_total, by_source["mpc"].fuel_total)
    report["summary"] = summary
    return report


@cli.command()
@click.argument("reference", type=click.Path(dir_okay=False))
@click.argument("candidates", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
def compare(reference, candidates, out):
    """Fuel and time of trajectory CSVs relative to REFERENCE (e.g. the baseline driver).

    Writes comparison.csv and comparison.json.
    """
    ref = _load_traj(reference)
    cands = [(c, _load_traj(c)) for c in candidates]
    try:
        report = comparison_report(ref, cands, reference)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    fields = ["file", "source", "fuel_g", "time_s", "fuel_savings_pct", "time_increase_pct"]
    buf = io.StringIO()
    buf.write(f"# schema: {COMPARE_SCHEMA}\n# route: {ref.route}\n# reference: {reference}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for r in report["candidates"]:
        writer.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
    out = Path(out)
    _write(out / "comparison.csv", buf.getvalue())
    _write(out / "comparison.json", _dump_json(report))
    for r in report["candidates"]:
        click.echo(f"{r['file']}: fuel {r['fuel_g']:.2f} g ({r['fuel_savings_pct']:+.2f} % saved), "
                   f"time {r['time_s']:.2f} s ({r['time_increase_pct']:+.2f} %)")


def main(argv=None) -> int:
    """Entry point mapping errors to exit codes (usage 1, invalid input 2, infeasible 3)."""
    try:
        cli.main(args=argv, prog_name="ecobnb", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.exceptions.Exit as exc:
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
