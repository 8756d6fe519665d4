"""``dvts`` command line: run experiments, compare runs and inspect snapshots."""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
import zipfile
from pathlib import Path

import click
import numpy as np

from .ann import restore
from .autoscaler import Policy
from .capacity import CapacityRepository
from .htm import HtmRegion
from .simenv import (
    SUMMARY_FIELDS,
    ScenarioError,
    read_scenario_dict,
    run_experiment,
    scenario_from_dict,
)

log = logging.getLogger("dvts")

BASELINES = ("static:m1.small", "static:m1.medium", "static:m3.medium")
COMPARISON_FIELDS = ["policy", "seed", "status", "total_cost", "vm_count", "scale_ups_before_change",
                     "scale_ups_after_change", "saving_vs_reference_pct"]
TIMELINE_FIELDS = ["policy", "vm_id", "vm_type", "start_s", "end_s", "billed_hours", "cost"]


def _setup_logging() -> None:
    level = os.environ.get("DVTS_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def policy_slug(policy: str) -> str:
    return policy.replace(":", "-")


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Dynamic VM type selection: autoscaling simulator and model tools."""
    _setup_logging()


@main.command()
@click.option("--scenario", "scenario_path", default="default", show_default=True,
              help="Scenario JSON file, or the name of a bundled scenario.")
@click.option("--policy", "policies", multiple=True, help="dvts or static:<type>; repeatable.")
@click.option("--all-policies", is_flag=True, help="Run DVTS and the three static baselines.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("runs"),
              show_default=True)
@click.option("--time-compression", type=float, default=None, help="Override the scenario's compression ratio.")
def run(scenario_path, policies, all_policies, seed, out_dir, time_compression):
    """Run one or more experiments; each policy gets its own output directory."""
    try:
        raw = read_scenario_dict(scenario_path)
        if time_compression is not None:
            raw = {**raw, "time_compression": time_compression}
        scenario = scenario_from_dict(raw)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc)) from exc
    except ScenarioError as exc:
        raise click.ClickException(f"{scenario_path}: {exc}") from exc

    chosen = list(policies)
    if all_policies:
        chosen = ["dvts", *BASELINES]
    if not chosen:
        chosen = ["dvts"]
    try:
        for p in chosen:
            Policy.parse(p)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--policy") from exc

    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    failed = False
    for p in chosen:
        target = out_dir / policy_slug(p)
        click.echo(f"running {p} -> {target}", err=True)
        try:
            result = run_experiment(scenario, p, seed=seed, out_dir=target)
        except ScenarioError as exc:
            raise click.ClickException(str(exc)) from exc
        (target / "scenario.json").write_text(json.dumps(raw, sort_keys=True, indent=2) + "\n")
        rows.append(result.summary_row(scenario))
        if result.status != "ok":
            failed = True
            err = next((e["message"] for e in result.events if e["event"] == "error"), "unknown error")
            click.echo(f"{p}: aborted: {err}", err=True)

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        click.echo(f"{r['policy']:<18} cost ${r['total_cost']:>8}  vms {r['vm_count']:>3}  "
                   f"scale-ups {r['scale_ups_before_change']}/{r['scale_ups_after_change']}  {r['status']}")
    if failed:
        sys.exit(1)


def _run_dirs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "ledger.json").is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(q.parent for q in p.glob("*/ledger.json")))
        else:
            raise click.ClickException(f"not a run directory: {p}")
    return found


def saving_pct(reference: float, others: list[float]) -> float:
    """How much cheaper ``reference`` is than the cheapest of ``others``, in percent."""
    best = min(others)
    return 0.0 if best == 0 else 100.0 * (best - reference) / best


@main.command()
@click.argument("runs", nargs=-1, required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Where to write comparison.csv and timeline.csv (default: first run's parent).")
def compare(runs, out_dir):
    """Compare finished runs (run directories, or a parent holding several)."""
    dirs = _run_dirs(runs)
    if len(dirs) < 2:
        raise click.ClickException("need at least two runs to compare")

    ledgers, scenarios = [], []
    for d in dirs:
        ledgers.append(json.loads((d / "ledger.json").read_text()))
        sc = d / "scenario.json"
        scenarios.append(json.loads(sc.read_text()) if sc.is_file() else ledgers[-1]["scenario"])
    if any(s != scenarios[0] for s in scenarios[1:]):
        raise click.ClickException("runs come from different scenarios")

    summaries = {}
    for d in dirs:
        with open(d / "summary.csv", newline="") as fh:
            summaries[d] = next(csv.DictReader(fh))

    costs = [lg["total_cost"] for lg in ledgers]
    ref = next((i for i, lg in enumerate(ledgers) if lg["policy"] == "dvts"), 0)
    saving = saving_pct(costs[ref], [c for i, c in enumerate(costs) if i != ref])

    out_dir = out_dir or dirs[0].parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        for i, (d, lg) in enumerate(zip(dirs, ledgers)):
            s = summaries[d]
            w.writerow({
                "policy": lg["policy"],
                "seed": lg["seed"],
                "status": lg["status"],
                "total_cost": f"{lg['total_cost']:.4f}",
                "vm_count": len(lg["vms"]),
                "scale_ups_before_change": s["scale_ups_before_change"],
                "scale_ups_after_change": s["scale_ups_after_change"],
                "saving_vs_reference_pct": f"{saving:.2f}" if i == ref else "",
            })
    with open(out_dir / "timeline.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMELINE_FIELDS)
        w.writeheader()
        for lg in ledgers:
            for vm in lg["vms"]:
                w.writerow({
                    "policy": lg["policy"],
                    "vm_id": vm["vm_id"],
                    "vm_type": vm["vm_type"],
                    "start_s": vm["start"],
                    "end_s": vm["end"],
                    "billed_hours": vm["billed_blocks"],
                    "cost": f"{vm['cost']:.4f}",
                })

    for lg in ledgers:
        click.echo(f"{lg['policy']:<18} ${lg['total_cost']:.4f}  vms {len(lg['vms'])}")
    click.echo(f"{ledgers[ref]['policy']} saving vs best alternative: {saving:.2f}%")


def _inspect_ann(path: Path) -> dict:
    model, state = restore(json.loads(path.read_text()))
    report = {
        "kind": "ann",
        "layers": [1, model.hidden, 2],
        "user_scale": model.user_scale,
        "k": state.k,
        "lr": state.lr,
        "momentum": state.momentum,
        "min_users": state.min_users,
        "max_users": state.max_users,
        "mean_rmse": state.mean_rmse(),
        "lr_tail": list(state.lr_history)[-10:],
    }
    cap = path.with_name("capacity.jsonl")
    if cap.is_file():
        report["capacity"] = CapacityRepository.load(cap).summary()
    return report


def _inspect_htm(path: Path) -> dict:
    r = HtmRegion.load(path)
    n = r.n_segments
    return {
        "kind": "htm",
        "columns": r.config.column_count,
        "cells_per_column": r.config.cells_per_column,
        "input_width": r.input_width,
        "samples_seen": r.samples_seen,
        "segments": n,
        "synapses": int((r.seg_presyn[:n] != r.n_cells).sum()),
        "connected_proximal_synapses": int(r.connected.sum()),
        "mean_segments_per_cell": float(np.mean(r.cell_nseg)),
    }


@main.command()
@click.argument("snapshot", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--json", "as_json", is_flag=True, help="Print the report as JSON.")
def inspect(snapshot, as_json):
    """Summarise an ANN (.json) or HTM (.npz) snapshot."""
    try:
        report = _inspect_htm(snapshot) if snapshot.suffix == ".npz" else _inspect_ann(snapshot)
    except (ValueError, KeyError, TypeError, OSError, EOFError, zipfile.BadZipFile) as exc:
        raise click.ClickException(f"{snapshot}: unreadable snapshot ({exc})") from exc
    if as_json:
        click.echo(json.dumps(report, indent=2, sort_keys=True))
        return
    for k, v in report.items():
        click.echo(f"{k}: {v}")


if __name__ == "__main__":
    main()
