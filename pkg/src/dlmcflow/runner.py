"""Scenario-matrix runner: per-cell pipeline, artifacts, and report tables.

Each (EV count, PV kVA, option) cell runs schedule -> solve/price ->
unbundle -> self-schedule check and persists everything it produced to its
own directory, so any cell can be inspected or re-run standalone.  The
zero-penetration cell is identical under every option and runs once as the
shared base case the cost table subtracts from.

No randomness anywhere in the pipeline; identical configs rewrite
byte-identical artifacts.
"""

from __future__ import annotations

import csv
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .feeder import OPTION_LABELS, OPTIONS, build_scenario, load_feeder, load_trajectories
from .fleet import bau_schedule, standard_fleet, tou_schedule
from .opf import build_full_opt, build_pq_opt, price_fixed_schedule, solve
from .selfsched import verify_fixed_point
from .sensitivity import compute_sensitivities
from .unbundle import (
    decompose_transformer_component,
    export_price_signals,
    read_components_csv,
    unbundle,
    write_components_csv,
    write_decomposition_csv,
)

BASE_TAG = "base"
TABLE_FIELDS = (
    "evs", "pv_kva", "option",
    "d_cost_p", "d_cost_q", "d_cost_transformer", "d_total", "lol_hours",
)


class MatrixError(RuntimeError):
    pass


@dataclass(frozen=True)
class MatrixConfig:
    feeder: str
    trajectories: str
    out_dir: str
    evs: tuple = (0, 3, 6)
    pv_kva: tuple = (0.0, 30.0, 60.0)
    options: tuple = OPTIONS
    protection: bool = False
    jobs: int = 1
    node: int = None  # place the fleet at one monitored transformer only

    def __post_init__(self):
        object.__setattr__(self, "evs", tuple(int(e) for e in self.evs))
        object.__setattr__(self, "pv_kva", tuple(float(p) for p in self.pv_kva))
        object.__setattr__(self, "options", tuple(self.options))
        if self.node is not None:
            object.__setattr__(self, "node", int(self.node))
        for opt in self.options:
            if opt not in OPTIONS:
                raise MatrixError(f"unknown option {opt!r}; expected one of {OPTIONS}")
        if not self.evs or not self.pv_kva or not self.options:
            raise MatrixError("grid and options must be non-empty")

    def cells(self):
        """(evs, pv_kva, option) runs; the no-DER cell collapses to one."""
        out = []
        for e in self.evs:
            for p in self.pv_kva:
                if e == 0 and p == 0:
                    out.append((e, p, BASE_TAG))
                else:
                    out.extend((e, p, opt) for opt in self.options)
        return out


def cell_dirname(evs, pv_kva, option):
    return f"ev{evs}_pv{pv_kva:g}_{option}"


def _fmt(x):
    return repr(float(x))


def _write_schedule_csv(sched, fleet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device", "node", "hour", "p_kw", "q_kvar"])
        for i, ev in enumerate(fleet.evs):
            for t in range(sched.ev_p.shape[1]):
                w.writerow([f"ev{i}", ev.node, t, _fmt(sched.ev_p[i, t]), _fmt(sched.ev_q[i, t])])
        for i, pv in enumerate(fleet.pvs):
            for t in range(sched.pv_p.shape[1]):
                w.writerow([f"pv{i}", pv.node, t, _fmt(sched.pv_p[i, t]), _fmt(sched.pv_q[i, t])])


def _write_solution_csv(sol, path):
    feeder = sol.case.feeder
    T = sol.P.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "hour", "flow_p", "flow_q", "v", "l", "lam_p", "lam_q"])
        for j in feeder.non_root:
            i = feeder.index[j]
            for t in range(T):
                w.writerow(
                    [j, t]
                    + [_fmt(a[i, t]) for a in (sol.P, sol.Q, sol.v, sol.l, sol.lam_p, sol.lam_q)]
                )


def _write_thermal_csv(sol, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["transformer", "hour", "top_oil", "hotspot", "aging"])
        for node in sorted(sol.thermal_sim):
            trj = sol.thermal_sim[node]
            for t in range(len(trj.hotspot)):
                w.writerow(
                    [node, t, _fmt(trj.top_oil[t + 1]), _fmt(trj.hotspot[t]), _fmt(trj.aging[t])]
                )


def run_cell(feeder, traj, evs, pv_kva, option, protection, cell_path, node=None) -> dict:
    """One pipeline pass; writes all artifacts and returns the summary dict.

    ``node`` restricts fleet placement to one monitored transformer instead
    of every one.
    """
    cell_path = Path(cell_path)
    cell_path.mkdir(parents=True, exist_ok=True)
    transformers = feeder.transformers
    if node is not None:
        transformers = tuple(tr for tr in transformers if tr.node == node)
        if not transformers:
            raise MatrixError(f"node {node} has no monitored transformer to host the fleet")
    fleet = standard_fleet(transformers, evs, pv_kva)
    tag = "full" if option == BASE_TAG else option
    label = "Base" if option == BASE_TAG else OPTION_LABELS[tag]
    case = build_scenario(
        feeder, traj, fleet, tag, protection=protection,
        name=f"EV{evs}/PV{pv_kva:g}/{label}",
    )
    if option == "bau":
        sol = price_fixed_schedule(case, bau_schedule(fleet, traj.pv_factor))
    elif option == "tou":
        sol = price_fixed_schedule(case, tou_schedule(fleet, traj.lmp, traj.pv_factor))
    elif option == "pq":
        sol = solve(build_pq_opt(case))
    else:
        sol = solve(build_full_opt(case))

    sens = compute_sensitivities(sol)
    table = unbundle(sol, sens)
    report = verify_fixed_point(sol)

    scenario = {
        "name": case.name,
        "evs": int(evs),
        "pv_kva": float(pv_kva),
        "option": option,
        "protection": bool(protection),
    }
    with open(cell_path / "scenario.json", "w") as fh:
        json.dump(scenario, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_schedule_csv(sol.schedule, fleet, cell_path / "schedule.csv")
    _write_solution_csv(sol, cell_path / "solution.csv")
    _write_thermal_csv(sol, cell_path / "thermal.csv")
    export_price_signals(sol, cell_path / "prices.csv")
    write_components_csv(table, cell_path / "components.csv")
    if sol.thermal_duals:
        decomps = [
            decompose_transformer_component(sol, sens, y, y, t, kind=kind)
            for y in sorted(sol.thermal_duals)
            for kind in ("real", "reactive")
            for t in range(sol.P.shape[1])
        ]
        write_decomposition_csv(decomps, cell_path / "decompose.csv")
    (cell_path / "verify.txt").write_text(report.summary() + "\n")

    err, node, hour, side = table.additivity_worst()
    summary = {
        "name": case.name,
        "evs": int(evs),
        "pv_kva": float(pv_kva),
        "option": option,
        "protection": bool(protection),
        "solver_status": sol.status,
        "objective": sol.objective,
        "cost_p": sol.cost_p,
        "cost_q": sol.cost_q,
        "cost_transformer": sol.cost_transformer,
        "total_cost": sol.total_cost,
        "lol": {str(n): v for n, v in sorted(sol.lol().items())},
        "cone_residual": sol.cone_residual,
        "solve_seconds": sol.solve_seconds,
        "additivity_worst": err,
        "verify_passed": report.passed,
        "verify_worst": report.worst(),
    }
    with open(cell_path / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


def _cell_entry(cfg_dict, evs, pv_kva, option):
    """Process-pool entry point; loads inputs itself so arguments pickle."""
    cfg = MatrixConfig(**cfg_dict)
    cell_path = Path(cfg.out_dir) / cell_dirname(evs, pv_kva, option)
    try:
        summary = run_cell(
            load_feeder(cfg.feeder), load_trajectories(cfg.trajectories),
            evs, pv_kva, option, cfg.protection, cell_path, node=cfg.node,
        )
        return {"status": "ok", "summary": summary}
    except Exception as exc:
        cell_path.mkdir(parents=True, exist_ok=True)
        (cell_path / "error.txt").write_text(traceback.format_exc())
        return {"status": "error", "message": f"{type(exc).__name__}: {exc}"}


def run_matrix(config: MatrixConfig) -> dict:
    """Run every cell, never aborting the matrix; returns the index mapping
    cell directory name -> outcome as also persisted in matrix.json."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = asdict(config)
    cells = config.cells()
    outcomes = {}
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = {
                cell: pool.submit(_cell_entry, cfg_dict, *cell) for cell in cells
            }
            for cell, fut in futures.items():
                outcomes[cell_dirname(*cell)] = fut.result()
    else:
        feeder = load_feeder(config.feeder)
        traj = load_trajectories(config.trajectories)
        for evs, pv_kva, option in cells:
            cell_path = out_dir / cell_dirname(evs, pv_kva, option)
            try:
                summary = run_cell(feeder, traj, evs, pv_kva, option,
                                   config.protection, cell_path, node=config.node)
                outcome = {"status": "ok", "summary": summary}
            except Exception as exc:
                cell_path.mkdir(parents=True, exist_ok=True)
                (cell_path / "error.txt").write_text(traceback.format_exc())
                outcome = {"status": "error", "message": f"{type(exc).__name__}: {exc}"}
            outcomes[cell_dirname(evs, pv_kva, option)] = outcome
    index = {"config": cfg_dict, "cells": outcomes}
    with open(out_dir / "matrix.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return index


def load_matrix(out_dir) -> dict:
    path = Path(out_dir) / "matrix.json"
    if not path.exists():
        raise MatrixError(f"no matrix.json under {out_dir}; run the matrix first")
    with open(path) as fh:
        return json.load(fh)


def _cell_summary(index, out_dir, evs, pv_kva, option):
    name = cell_dirname(evs, pv_kva, option)
    outcome = index["cells"].get(name)
    if outcome is None:
        raise MatrixError(f"cell {name} not in this run")
    if outcome["status"] != "ok":
        raise MatrixError(f"cell {name} failed: {outcome.get('message')}")
    return outcome["summary"], Path(out_dir) / name


def emit_cost_lol_table(out_dir, csv_path=None):
    """Cost deltas against the base case plus aggregate LoL, one row per cell.

    Returns the row dicts; writes ``table.csv`` (or ``csv_path``) alongside.
    """
    index = load_matrix(out_dir)
    cfg = index["config"]
    try:
        base, _ = _cell_summary(index, out_dir, 0, 0.0, BASE_TAG)
    except MatrixError as exc:
        raise MatrixError(f"missing base case: {exc}") from exc
    rows = [{
        "evs": 0, "pv_kva": 0.0, "option": BASE_TAG,
        "d_cost_p": 0.0, "d_cost_q": 0.0, "d_cost_transformer": 0.0, "d_total": 0.0,
        "lol_hours": sum(base["lol"].values()),
    }]
    for evs in cfg["evs"]:
        for pv_kva in cfg["pv_kva"]:
            if evs == 0 and pv_kva == 0:
                continue
            for option in cfg["options"]:
                s, _ = _cell_summary(index, out_dir, evs, pv_kva, option)
                rows.append({
                    "evs": evs, "pv_kva": pv_kva, "option": option,
                    "d_cost_p": s["cost_p"] - base["cost_p"],
                    "d_cost_q": s["cost_q"] - base["cost_q"],
                    "d_cost_transformer": s["cost_transformer"] - base["cost_transformer"],
                    "d_total": s["total_cost"] - base["total_cost"],
                    "lol_hours": sum(s["lol"].values()),
                })
    path = Path(csv_path) if csv_path else Path(out_dir) / "table.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows


def format_table(rows):
    head = f"{'evs':>4} {'pv_kva':>7} {'option':<7} " + " ".join(
        f"{c:>12}" for c in TABLE_FIELDS[3:]
    )
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['evs']:>4} {r['pv_kva']:>7g} {r['option']:<7} "
            + " ".join(f"{r[c]:>12.4f}" for c in TABLE_FIELDS[3:])
        )
    return "\n".join(lines)


def emit_dlmc_series(out_dir, node, evs, pv_kva, option, side="P", decompose=False):
    """Hourly component rows for one node in one cell, oldest hour first.

    With ``decompose`` the transformer component's time-unrolled terms are
    appended; only monitored transformer nodes carry them.
    """
    index = load_matrix(out_dir)
    _, cell_path = _cell_summary(index, out_dir, evs, pv_kva, option)
    comp = read_components_csv(cell_path / "components.csv")
    hours = sorted({h for (n, h, sd) in comp if n == node and sd == side})
    if not hours:
        raise MatrixError(f"node {node} not present in cell components")
    rows = []
    for h in hours:
        row = {"node": node, "hour": h, "side": side}
        row.update(comp[(node, h, side)])
        rows.append(row)
    if decompose:
        dec_path = cell_path / "decompose.csv"
        if not dec_path.exists():
            raise MatrixError(f"cell {cell_path.name} priced no transformer degradation")
        found = {}
        with open(dec_path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if int(rec["node"]) == node and rec["side"] == side:
                    found[int(rec["hour"])] = rec
        if not found:
            raise MatrixError(f"node {node} is not a monitored transformer")
        for row in rows:
            rec = found[row["hour"]]
            for k in ("same_hour_winding", "same_hour_top_oil",
                      "subsequent_hours", "beyond_horizon"):
                row[k] = float(rec[k])
    return rows


def write_series_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
