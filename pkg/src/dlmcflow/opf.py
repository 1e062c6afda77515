"""Day-ahead convex programs on the DistFlow second-order-cone relaxation.

Builds the network, DER, and transformer-thermal blocks into one program;
solves it; and exposes primal trajectories plus all duals needed for pricing:
nodal balance duals (the DLMCs), voltage/ampacity bound duals, and the thermal
recurrence duals that price squared current on monitored transformer lines.

Unit bridge: network quantities are per-unit; device blocks are in kW/kVAr;
the objective is in $.  A balance-row dual y prices one pu of net demand for
one hour, so the DLMC in $/MWh is -y / base_mva.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from .feeder import ScenarioCase
from .fleet import (
    DerSchedule,
    aggregate_by_node,
    ev_constraint_blocks,
    pv_constraint_blocks,
)
from .powerflow import PowerFlowError, solve_distflow
from .thermal import AgingPwl, simulate_temperatures, thermal_constraint_blocks

DEFAULT_AGING = AgingPwl.fit()

# squared-current cap under protection mode: twice nominal current
PROTECTION_L_FACTOR = 4.0

# Ruiz equilibration stays off: unscaling the duals of thermal rows (aging
# slopes ~1e3 against ~1e-2 network coefficients) costs four digits of price
# accuracy wherever solar curtailment parks a nodal price on zero.
DEFAULT_SOLVER_OPTS = {
    "tol_gap_abs": 1e-8,
    "tol_gap_rel": 1e-8,
    "tol_feas": 1e-9,
    "equilibrate_enable": False,
}

# pricing runs carry no device variables and tolerate a tighter gap before
# stalling; the extra digit keeps price additivity checks inside tolerance
PRICING_SOLVER_OPTS = {
    "tol_gap_abs": 1e-9,
    "tol_gap_rel": 1e-9,
    "tol_feas": 1e-10,
    "equilibrate_enable": False,
}


class OpfError(RuntimeError):
    """Solve failed (infeasible, unbounded, or solver breakdown)."""


@dataclass
class ProgramHandle:
    """A built convex program with semantically tagged constraints."""

    case: ScenarioCase
    kind: str
    problem: cp.Problem = None
    P: cp.Variable = None
    Q: cp.Variable = None
    v: cp.Variable = None
    l: cp.Variable = None
    root_p: cp.Variable = None
    root_q: cp.Variable = None
    q_imp: cp.Variable = None
    q_exp: cp.Variable = None
    ev_blocks: list = field(default_factory=list)
    pv_blocks: list = field(default_factory=list)
    thermal_blocks: dict = field(default_factory=dict)
    aging: AgingPwl = None
    tags: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    load_p: np.ndarray = None
    load_q: np.ndarray = None
    fixed: DerSchedule = None

    def add(self, tag, con, rows):
        self.tags[tag] = con
        self.counts[tag] = rows


@dataclass
class ThermalDuals:
    """Duals of one transformer's thermal rows."""

    beta: np.ndarray  # top-oil recurrence equalities
    gamma: np.ndarray  # HST definition equalities
    xi: np.ndarray  # aging-segment epigraph rows, (K, T)
    rho: float  # periodicity equality
    eta: np.ndarray  # aging nonnegativity


@dataclass
class OpfSolution:
    case: ScenarioCase
    kind: str
    status: str
    objective: float
    P: np.ndarray
    Q: np.ndarray
    v: np.ndarray
    l: np.ndarray
    vup: np.ndarray
    pnet: np.ndarray
    qnet: np.ndarray
    root_p: np.ndarray
    root_q: np.ndarray
    schedule: DerSchedule
    lam_p: np.ndarray  # $/MWh, (N, T) over feeder.non_root
    lam_q: np.ndarray
    lam_p_root: np.ndarray
    lam_q_root: np.ndarray
    mu_up: np.ndarray  # raw duals of v <= v_max, >= 0
    mu_lo: np.ndarray
    nu: dict  # node -> ampacity duals (T,)
    aging: AgingPwl  # tangent model priced by the program
    thermal_duals: dict  # node -> ThermalDuals (absent for pq programs)
    thermal_sim: dict  # node -> ThermalTrajectory simulated from solved l
    cone_residual: float
    cone_residuals: np.ndarray
    cost_p: float
    cost_q: float
    cost_transformer: float
    solve_seconds: float

    @property
    def total_cost(self):
        """P + Q + degradation cost used for option comparisons [$]."""
        return self.cost_p + self.cost_q + self.cost_transformer

    def lol(self):
        """Daily loss of life per monitored transformer [h]."""
        return {node: traj.lol for node, traj in self.thermal_sim.items()}


def _load_matrices(case: ScenarioCase):
    feeder, traj = case.feeder, case.trajectories
    T = traj.T
    load_p = np.zeros((feeder.n, T))
    load_q = np.zeros((feeder.n, T))
    for node, arr in traj.load_p.items():
        load_p[feeder.index[node]] = arr
    for node, arr in traj.load_q.items():
        load_q[feeder.index[node]] = arr
    return load_p, load_q


def _ampacity_caps(case: ScenarioCase):
    """node -> squared-current cap for every capped line."""
    caps = {}
    for j in case.feeder.non_root:
        cap = case.feeder.line_into(j).ampacity
        if cap is not None:
            caps[j] = cap
    if case.protection:
        for node, tr in case.feeder.transformer_by_node.items():
            cap = PROTECTION_L_FACTOR * tr.params.nominal_l
            caps[node] = min(caps.get(node, np.inf), cap)
    return caps


def _build(case: ScenarioCase, kind, fixed: DerSchedule = None, aging: AgingPwl = None):
    feeder, traj = case.feeder, case.trajectories
    n, T = feeder.n, traj.T
    base_kva = feeder.base_kva
    s = feeder.base_mva
    aging = DEFAULT_AGING if aging is None else aging

    h = ProgramHandle(case=case, kind=kind, aging=aging)
    P = h.P = cp.Variable((n, T), name="P")
    Q = h.Q = cp.Variable((n, T), name="Q")
    v = h.v = cp.Variable((n, T), name="v")
    l = h.l = cp.Variable((n, T), name="l")
    root_p = h.root_p = cp.Variable(T, name="root_p")
    root_q = h.root_q = cp.Variable(T, name="root_q")
    q_imp = h.q_imp = cp.Variable(T, nonneg=True, name="root_q_import")
    q_exp = h.q_exp = cp.Variable(T, nonneg=True, name="root_q_export")

    nodes = feeder.non_root
    idx = feeder.index
    r = np.array([feeder.line_into(j).r for j in nodes])
    x = np.array([feeder.line_into(j).x for j in nodes])
    child = sp.lil_matrix((n, n))
    par = sp.lil_matrix((n, n))
    root_pick = np.zeros(n)
    v0 = feeder.v_root**2
    v0_col = np.zeros(n)
    for j in nodes:
        i = idx[j]
        for k in feeder.children(j):
            child[i, idx[k]] = 1.0
        up = feeder.parent(j)
        if up == 0:
            v0_col[i] = v0
            root_pick[i] = 1.0
        else:
            par[i, idx[up]] = 1.0
    child = child.tocsr()
    par = par.tocsr()
    Rd, Xd = sp.diags(r), sp.diags(x)
    Zd = sp.diags(r**2 + x**2)

    h.load_p, h.load_q = _load_matrices(case)
    constraints = []
    if fixed is not None:
        # Pricing run: fold the frozen DER schedule into the load constants.
        # Keeping device variables pinned by equality instead would leave
        # cone rows tight with no strict interior and the duals ill-defined.
        h.fixed = fixed
        net_p, net_q = h.load_p.copy(), h.load_q.copy()
        agg_p, agg_q = aggregate_by_node(case.fleet, fixed)
        for node, arr in agg_p.items():
            net_p[idx[node]] += np.asarray(arr) / base_kva
        for node, arr in agg_q.items():
            net_q[idx[node]] += np.asarray(arr) / base_kva
        pnet = cp.Constant(net_p)
        qnet = cp.Constant(net_q)
    else:
        pnet = cp.Constant(h.load_p)
        qnet = cp.Constant(h.load_q)
        # DER blocks (device layer in kW; scaled into pu in the balance rows)
        for i, ev in enumerate(case.fleet.evs):
            blk = ev_constraint_blocks(ev, T)
            h.ev_blocks.append(blk)
            for tag, con in blk.tags.items():
                h.add(f"ev{i}:{tag}", con, blk.counts[tag])
            constraints += blk.constraints
            row = np.zeros((n, 1))
            row[idx[ev.node], 0] = 1.0 / base_kva
            pnet = pnet + row @ cp.reshape(blk.p, (1, T), order="C")
            qnet = qnet + row @ cp.reshape(blk.q, (1, T), order="C")
        for i, pv in enumerate(case.fleet.pvs):
            blk = pv_constraint_blocks(pv, traj.pv_factor)
            h.pv_blocks.append(blk)
            for tag, con in blk.tags.items():
                h.add(f"pv{i}:{tag}", con, blk.counts[tag])
            constraints += blk.constraints
            row = np.zeros((n, 1))
            row[idx[pv.node], 0] = -1.0 / base_kva
            pnet = pnet + row @ cp.reshape(blk.p, (1, T), order="C")
            qnet = qnet + row @ cp.reshape(blk.q, (1, T), order="C")

    # network rows
    bal_p = P == child @ P + Rd @ l + pnet
    bal_q = Q == child @ Q + Xd @ l + qnet
    vup = par @ v + np.outer(v0_col, np.ones(T))
    volt = v == vup - 2.0 * (Rd @ P + Xd @ Q) + Zd @ l
    h.add("balance_p", bal_p, n * T)
    h.add("balance_q", bal_q, n * T)
    h.add("voltage_eq", volt, n * T)
    constraints += [bal_p, bal_q, volt]

    nt = n * T
    flat = lambda e: cp.reshape(e, (nt,), order="C")
    cone = cp.SOC(
        flat(l + vup),
        cp.vstack([
            cp.reshape(2.0 * P, (1, nt), order="C"),
            cp.reshape(2.0 * Q, (1, nt), order="C"),
            cp.reshape(l - vup, (1, nt), order="C"),
        ]),
        axis=0,
    )
    h.add("cone", cone, nt)
    constraints.append(cone)

    v_lo = v >= case.feeder.limits.v_min
    v_up = v <= case.feeder.limits.v_max
    h.add("v_lo", v_lo, nt)
    h.add("v_up", v_up, nt)
    constraints += [v_lo, v_up]

    root_bal_p = root_p == root_pick @ P
    root_bal_q = root_q == root_pick @ Q
    split = q_imp - q_exp == root_q
    h.add("root_balance_p", root_bal_p, T)
    h.add("root_balance_q", root_bal_q, T)
    h.add("root_q_split", split, T)
    constraints += [root_bal_p, root_bal_q, split]

    for node, cap in _ampacity_caps(case).items():
        con = l[idx[node]] <= cap
        h.add(f"ampacity:{node}", con, T)
        constraints.append(con)

    cost = traj.lmp @ root_p * s + traj.q_price @ (q_imp + q_exp) * s
    if kind != "pq":
        for node, tr in case.feeder.transformer_by_node.items():
            blk = thermal_constraint_blocks(tr.params, aging, l[idx[node]], traj.ambient)
            h.thermal_blocks[node] = blk
            for tag, con in blk.tags.items():
                h.add(f"thermal:{node}:{tag}", con, blk.counts[tag])
            constraints += blk.constraints
            cost = cost + blk.cost

    h.problem = cp.Problem(cp.Minimize(cost), constraints)
    return h


def build_branch_flow(case: ScenarioCase) -> ProgramHandle:
    """Network-only program: fixed loads, no DER variables, no thermal rows."""
    stripped = ScenarioCase(
        name=case.name,
        feeder=case.feeder,
        trajectories=case.trajectories,
        fleet=_EMPTY_FLEET,
        option=case.option,
        protection=case.protection,
    )
    return _build(stripped, "pq")


class _Empty:
    evs = ()
    pvs = ()


_EMPTY_FLEET = _Empty()


def build_full_opt(case: ScenarioCase) -> ProgramHandle:
    """Co-optimize DER schedules, network flows, and transformer degradation."""
    return _build(case, "full")


def build_pq_opt(case: ScenarioCase) -> ProgramHandle:
    """Optimize DER schedules against real/reactive cost only; transformer
    temperatures are simulated ex post."""
    return _build(case, "pq")


def build_pricing(case: ScenarioCase, fixed: DerSchedule) -> ProgramHandle:
    """Full-opt constraint set with every DER pinned to a given schedule;
    duals give ex-post DLMCs for open-loop options."""
    return _build(case, "pricing", fixed=fixed)


def price_fixed_schedule(case: ScenarioCase, fixed: DerSchedule, solver_opts=None) -> OpfSolution:
    opts = dict(PRICING_SOLVER_OPTS)
    if solver_opts:
        opts.update(solver_opts)
    return solve(build_pricing(case, fixed), solver_opts=opts)


def _dual(handle, tag):
    con = handle.tags.get(tag)
    if con is None or con.dual_value is None:
        return None
    return np.asarray(con.dual_value)


def solve(handle: ProgramHandle, solver=cp.CLARABEL, solver_opts=None) -> OpfSolution:
    case = handle.case
    feeder, traj = case.feeder, case.trajectories
    n, T = feeder.n, traj.T
    s = feeder.base_mva
    opts = dict(DEFAULT_SOLVER_OPTS)
    if solver_opts:
        opts.update(solver_opts)
    t0 = time.perf_counter()
    try:
        # status is reported on the returned solution; the advisory warning
        # would otherwise fire on every dual-degenerate pricing run
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            handle.problem.solve(solver=solver, **opts)
    except cp.error.SolverError as exc:
        raise OpfError(f"{case.name}: solver failure ({exc})") from exc
    elapsed = time.perf_counter() - t0
    status = handle.problem.status
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise OpfError(f"{case.name}: solve ended with status {status}")

    idx = feeder.index
    if handle.fixed is not None:
        sched = DerSchedule(
            ev_p=handle.fixed.ev_p.copy(),
            ev_q=handle.fixed.ev_q.copy(),
            pv_p=handle.fixed.pv_p.copy(),
            pv_q=handle.fixed.pv_q.copy(),
        )
    else:
        sched = DerSchedule.zeros(case.fleet, T)
        for i, blk in enumerate(handle.ev_blocks):
            sched.ev_p[i] = np.asarray(blk.p.value)
            sched.ev_q[i] = np.asarray(blk.q.value)
        for i, blk in enumerate(handle.pv_blocks):
            sched.pv_p[i] = np.asarray(blk.p.value)
            sched.pv_q[i] = np.asarray(blk.q.value)
    pnet, qnet = handle.load_p.copy(), handle.load_q.copy()
    for i, ev in enumerate(case.fleet.evs):
        pnet[idx[ev.node]] += sched.ev_p[i] / feeder.base_kva
        qnet[idx[ev.node]] += sched.ev_q[i] / feeder.base_kva
    for i, pv in enumerate(case.fleet.pvs):
        pnet[idx[pv.node]] -= sched.pv_p[i] / feeder.base_kva
        qnet[idx[pv.node]] -= sched.pv_q[i] / feeder.base_kva

    if handle.fixed is not None:
        # With injections pinned the network state is just the power flow;
        # complete the primal with the exact sweep so cone rows are tight to
        # machine precision even when the conic solve stalls on slack lines.
        P = np.empty((feeder.n, T))
        Q, v, l = np.empty_like(P), np.empty_like(P), np.empty_like(P)
        try:
            for t in range(T):
                res = solve_distflow(feeder, pnet[:, t], qnet[:, t])
                P[:, t], Q[:, t], v[:, t], l[:, t] = res.P, res.Q, res.v, res.l
        except PowerFlowError as exc:
            raise OpfError(f"{case.name}: pinned schedule has no power flow ({exc})") from exc
    else:
        P, Q, v, l = (
            np.asarray(e.value) for e in (handle.P, handle.Q, handle.v, handle.l)
        )
    v0 = feeder.v_root**2
    vup = np.empty_like(v)
    for j in feeder.non_root:
        i = idx[j]
        up = feeder.parent(j)
        vup[i] = v0 if up == 0 else v[idx[up]]
    residuals = np.abs(l * vup - P**2 - Q**2)

    lam_p = -_dual(handle, "balance_p") / s
    lam_q = -_dual(handle, "balance_q") / s
    lam_p_root = -_dual(handle, "root_balance_p") / s
    lam_q_root = -_dual(handle, "root_balance_q") / s
    mu_up = _dual(handle, "v_up")
    mu_lo = _dual(handle, "v_lo")
    nu = {}
    for tag in handle.tags:
        if tag.startswith("ampacity:"):
            nu[int(tag.split(":")[1])] = _dual(handle, tag)

    thermal_duals = {}
    thermal_sim = {}
    for node, tr in feeder.transformer_by_node.items():
        li = l[idx[node]]
        thermal_sim[node] = simulate_temperatures(tr.params, handle.aging, li, traj.ambient)
        if node in handle.thermal_blocks:
            thermal_duals[node] = ThermalDuals(
                beta=_dual(handle, f"thermal:{node}:to_recurrence"),
                gamma=_dual(handle, f"thermal:{node}:hst_def"),
                xi=_dual(handle, f"thermal:{node}:aging_seg"),
                rho=float(_dual(handle, f"thermal:{node}:periodicity")),
                eta=_dual(handle, f"thermal:{node}:aging_nonneg"),
            )

    if handle.fixed is not None:
        roots = [idx[j] for j in feeder.non_root if feeder.parent(j) == 0]
        root_p = P[roots].sum(axis=0)
        root_q = Q[roots].sum(axis=0)
    else:
        root_p = np.asarray(handle.root_p.value)
        root_q = np.asarray(handle.root_q.value)
    cost_p = float(traj.lmp @ root_p * s)
    cost_q = float(traj.q_price @ np.abs(root_q) * s)
    cost_tr = float(
        sum(
            feeder.transformer_by_node[node].params.cost_per_lol_hour * trj.lol
            for node, trj in thermal_sim.items()
        )
    )
    # the completed primal's objective; differs from the solver iterate by its
    # residual complementarity slack on pinned runs
    objective = float(handle.problem.value)
    if handle.fixed is not None:
        objective = cost_p + cost_q + (cost_tr if handle.kind != "pq" else 0.0)

    return OpfSolution(
        case=case,
        kind=handle.kind,
        status=status,
        objective=objective,
        P=P,
        Q=Q,
        v=v,
        l=l,
        vup=vup,
        pnet=pnet,
        qnet=qnet,
        root_p=root_p,
        root_q=root_q,
        schedule=sched,
        lam_p=lam_p,
        lam_q=lam_q,
        lam_p_root=lam_p_root,
        lam_q_root=lam_q_root,
        mu_up=mu_up,
        mu_lo=mu_lo,
        nu=nu,
        aging=handle.aging,
        thermal_duals=thermal_duals,
        thermal_sim=thermal_sim,
        cone_residual=float(residuals.max()) if residuals.size else 0.0,
        cone_residuals=residuals,
        cost_p=cost_p,
        cost_q=cost_q,
        cost_transformer=cost_tr,
        solve_seconds=elapsed,
    )


def transformer_l_price(solution: OpfSolution, node):
    """Marginal degradation cost of squared current on transformer ``node``'s
    line, per hour [$/pu]: the thermal rows' shadow price of l."""
    tr = solution.case.feeder.transformer_by_node[node]
    d = solution.thermal_duals[node]
    return -(d.beta * tr.params.top_oil_gain + d.gamma * tr.params.winding_gain)


def dump_conic_program(handle: ProgramHandle, path):
    """Write the canonical conic form (min c'x : Ax + s = b, s in K) in the
    Conic Benchmark Format for external solver cross-checks."""
    data, _, _ = handle.problem.get_problem_data(cp.CLARABEL)
    A = sp.csc_matrix(data["A"])
    b = np.asarray(data["b"]).ravel()
    c = np.asarray(data["c"]).ravel()
    dims = data["dims"]
    zero, nonneg, socs = dims.zero, dims.nonneg, list(dims.soc)
    lines = ["VER", "1", "", "OBJSENSE", "MIN", "", "VAR", f"{len(c)} 1", f"F {len(c)}", ""]
    groups = []
    if zero:
        groups.append(f"L= {zero}")
    if nonneg:
        groups.append(f"L+ {nonneg}")
    groups += [f"Q {d}" for d in socs]
    lines += ["CON", f"{len(b)} {len(groups)}"] + groups + [""]
    obj_nz = [(j, cj) for j, cj in enumerate(c) if cj != 0.0]
    lines += ["OBJACOORD", str(len(obj_nz))]
    lines += [f"{j} {cj!r}" for j, cj in obj_nz]
    lines.append("")
    coo = (-A).tocoo()  # rows are b - Ax, elementwise in the listed domains
    lines += ["ACOORD", str(coo.nnz)]
    lines += [f"{i} {j} {val!r}" for i, j, val in zip(coo.row, coo.col, coo.data)]
    lines.append("")
    b_nz = [(i, bi) for i, bi in enumerate(b) if bi != 0.0]
    lines += ["BCOORD", str(len(b_nz))]
    lines += [f"{i} {bi!r}" for i, bi in b_nz]
    lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
