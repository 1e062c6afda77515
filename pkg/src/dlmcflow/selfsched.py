"""Price-taking DER self-scheduling and the price-support check.

Devices facing their node's hourly real and reactive prices schedule
themselves: PV maximizes revenue hour by hour in closed form, EVs solve a
small intertemporal program over the charger feasible set.  If the posted
prices are the marginal costs of the co-optimized dispatch, every device's
best response is worth exactly what its share of that dispatch was worth;
`verify_fixed_point` measures this gap device by device.

Costs are in dollars per daily cycle, consumption positive, so PV entries
are normally negative.  Value match is the contract; schedules may differ
wherever prices leave the argmin flat, which the report flags separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .fleet import Ev, Pv, ev_constraint_blocks
from .opf import DEFAULT_SOLVER_OPTS, OpfSolution

KW_PER_MW = 1000.0


class SelfSchedError(RuntimeError):
    pass


def pv_opt(lam_p, lam_q, pv: Pv, pv_factor):
    """Hourly revenue-maximizing (p, q) of one inverter, closed form.

    Each hour is a linear objective over the availability-truncated disk:
    the optimum sits where the price vector exits the capability set.  With
    a nonpositive real price the unit backs off to zero output and uses the
    whole rating for reactive support in the paying direction.
    """
    lam_p = np.asarray(lam_p, dtype=float)
    lam_q = np.asarray(lam_q, dtype=float)
    rho = np.asarray(pv_factor, dtype=float)
    s = float(pv.capacity_kva)
    cap = np.minimum(rho, 1.0) * s
    p = np.zeros_like(lam_p)
    sell = lam_p > 0
    norm = np.hypot(lam_p, lam_q)
    with np.errstate(invalid="ignore", divide="ignore"):
        along = np.where(norm > 0, s * lam_p / norm, 0.0)
    p[sell] = np.minimum(along[sell], cap[sell])
    q = np.sign(lam_q) * np.sqrt(np.maximum(s * s - p * p, 0.0))
    return p, q


def ev_opt(lam_p, lam_q, ev: Ev, solver_opts=None):
    """Cost-minimizing charge/reactive profile of one EV at posted prices."""
    lam_p = np.asarray(lam_p, dtype=float)
    lam_q = np.asarray(lam_q, dtype=float)
    T = len(lam_p)
    blk = ev_constraint_blocks(ev, T)
    cost = (lam_p @ blk.p + lam_q @ blk.q) / KW_PER_MW
    problem = cp.Problem(cp.Minimize(cost), blk.constraints)
    opts = dict(DEFAULT_SOLVER_OPTS)
    if solver_opts:
        opts.update(solver_opts)
    problem.solve(solver=cp.CLARABEL, **opts)
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise SelfSchedError(f"EV at node {ev.node}: self-schedule {problem.status}")
    return np.asarray(blk.p.value), np.asarray(blk.q.value)


def schedule_cost(lam_p, lam_q, p, q):
    """Dollars per cycle of a (p, q) profile in kW at $/MWh prices."""
    return float(np.asarray(lam_p) @ np.asarray(p) + np.asarray(lam_q) @ np.asarray(q)) / KW_PER_MW


@dataclass(frozen=True)
class DeviceCheck:
    """Value match of one device's best response against its dispatch share."""

    device: str
    node: int
    selfsched_cost: float
    imputed_cost: float
    rel_gap: float
    passed: bool
    schedule_close: bool
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class FixedPointReport:
    scenario: str
    checks: tuple
    tol: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def worst(self):
        return max((c.rel_gap for c in self.checks), default=0.0)

    def summary(self):
        lines = [
            f"price-support check: {self.scenario}",
            f"devices: {len(self.checks)}  tol: {self.tol:g} relative",
        ]
        for c in self.checks:
            mark = "ok" if c.passed else "GAP"
            note = "" if c.schedule_close else "  (schedule differs, value ties)"
            lines.append(
                f"  {mark}  {c.device:<12} node {c.node}: "
                f"self {c.selfsched_cost:+.6f} $  imputed {c.imputed_cost:+.6f} $  "
                f"gap {c.rel_gap:.2e}{note}"
            )
        lines.append("result: " + ("supported" if self.passed else "NOT SUPPORTED"))
        return "\n".join(lines)


def _gap(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-9)


def verify_fixed_point(solution: OpfSolution, prices=None, tol=1e-6) -> FixedPointReport:
    """Check that the solution's prices support its own DER schedules.

    ``prices`` may be a node -> (lam_p, lam_q) map as read back from an
    exported price file; by default the solution's duals are used directly.
    Mismatches are findings in the report, never exceptions.
    """
    case = solution.case
    feeder = case.feeder
    sched = solution.schedule
    if prices is None:
        prices = {
            j: (solution.lam_p[feeder.index[j]], solution.lam_q[feeder.index[j]])
            for j in feeder.non_root
        }
    checks = []
    for i, ev in enumerate(case.fleet.evs):
        lam_p, lam_q = prices[ev.node]
        p, q = ev_opt(lam_p, lam_q, ev)
        self_cost = schedule_cost(lam_p, lam_q, p, q)
        imputed = schedule_cost(lam_p, lam_q, sched.ev_p[i], sched.ev_q[i])
        close = np.allclose(p, sched.ev_p[i], atol=1e-2) and np.allclose(
            q, sched.ev_q[i], atol=1e-2
        )
        gap = _gap(self_cost, imputed)
        checks.append(
            DeviceCheck(f"ev{i}", ev.node, self_cost, imputed, gap, gap <= tol, close, p, q)
        )
    for i, pv in enumerate(case.fleet.pvs):
        lam_p, lam_q = prices[pv.node]
        p, q = pv_opt(lam_p, lam_q, pv, case.trajectories.pv_factor)
        # production displaces priced consumption: book it as negative cost
        self_cost = -schedule_cost(lam_p, lam_q, p, q)
        imputed = -schedule_cost(lam_p, lam_q, sched.pv_p[i], sched.pv_q[i])
        close = np.allclose(p, sched.pv_p[i], atol=1e-2) and np.allclose(
            q, sched.pv_q[i], atol=1e-2
        )
        gap = _gap(self_cost, imputed)
        checks.append(
            DeviceCheck(f"pv{i}", pv.node, self_cost, imputed, gap, gap <= tol, close, p, q)
        )
    return FixedPointReport(scenario=case.name, checks=tuple(checks), tol=tol)
