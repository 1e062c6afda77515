"""Operating-point sensitivities of flows, voltages, and squared currents.

With the conic relaxation tight, the branch-flow equations define the network
state implicitly from nodal net demand.  Differentiating them at the solved
point gives, per hour, one sparse 4N x 4N linear system whose right-hand side
picks the perturbed node and side (real or reactive).  The matrix is shared by
all 2N perturbations, so it is factorized once per hour and reused.

Everything here depends only on the primal operating point: the root voltage
is fixed, and demand perturbed at hour t moves nothing at other hours.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .feeder import Feeder
from .powerflow import solve_distflow

KINDS = ("real", "reactive")
_KIND_INDEX = {"real": 0, "reactive": 1}

# relative-error floor: entries at or below this magnitude are compared
# absolutely against it.  The conic operating point sits ~1e-9 off the exact
# power-flow manifold, so derivatives below 1e-5 pu/pu are indistinct from
# zero and would otherwise drown the check in noise.
REL_FLOOR = 1e-5


class SensitivityError(RuntimeError):
    """Assembly or solve failed (loose cone row, singular system)."""


@dataclass(frozen=True)
class SensitivityBlock:
    """Derivatives of every line flow, voltage, and squared current with
    respect to one nodal net-demand perturbation at one hour.

    Vectors are indexed like ``feeder.non_root``: position m holds the
    derivative of the quantity on the line into (or at) that node.
    """

    hour: int
    node: int
    kind: str
    x_p: np.ndarray
    x_q: np.ndarray
    x_v: np.ndarray
    x_l: np.ndarray

    def to_csv(self, feeder: Feeder, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "dP", "dQ", "dv", "dl"])
            for j in feeder.non_root:
                i = feeder.index[j]
                w.writerow(
                    [j]
                    + [repr(float(a[i])) for a in (self.x_p, self.x_q, self.x_v, self.x_l)]
                )


@dataclass(frozen=True)
class HourSystem:
    """One hour's assembled and factorized sensitivity system."""

    feeder: Feeder
    hour: int
    matrix: sp.csc_matrix
    lu: object


def assemble_system(solution, t, cone_tol=1e-6) -> HourSystem:
    """Differentiate the tight branch-flow equations at hour ``t``.

    Refuses if any cone row is loose beyond ``cone_tol``: the linearization
    l*v = P^2 + Q^2 only describes the feasible manifold where it binds.
    """
    feeder = solution.case.feeder
    N = feeder.n
    res = solution.cone_residuals[:, t]
    worst = int(np.argmax(res))
    if res[worst] > cone_tol:
        raise SensitivityError(
            f"cone row loose at node {feeder.non_root[worst]} hour {t}: "
            f"residual {res[worst]:.3e} > {cone_tol:.1e}"
        )

    P, Q = solution.P[:, t], solution.Q[:, t]
    vup, l = solution.vup[:, t], solution.l[:, t]
    rows, cols, vals = [], [], []

    def put(r, c, a):
        rows.append(r)
        cols.append(c)
        vals.append(a)

    idx = feeder.index
    for j in feeder.non_root:
        i = idx[j]
        line = feeder.line_into(j)
        r, x = line.r, line.x
        up = feeder.parent(j)
        # real balance on line into j
        put(i, i, 1.0)
        for k in feeder.children(j):
            put(i, idx[k], -1.0)
        put(i, 3 * N + i, -r)
        # reactive balance
        put(N + i, N + i, 1.0)
        for k in feeder.children(j):
            put(N + i, N + idx[k], -1.0)
        put(N + i, 3 * N + i, -x)
        # voltage drop
        put(2 * N + i, i, 2.0 * r)
        put(2 * N + i, N + i, 2.0 * x)
        put(2 * N + i, 2 * N + i, 1.0)
        if up != 0:
            put(2 * N + i, 2 * N + idx[up], -1.0)
        put(2 * N + i, 3 * N + i, -(r**2 + x**2))
        # tight cone: l * v_up = P^2 + Q^2
        put(3 * N + i, i, -2.0 * P[i])
        put(3 * N + i, N + i, -2.0 * Q[i])
        if up != 0:
            put(3 * N + i, 2 * N + idx[up], l[i])
        put(3 * N + i, 3 * N + i, vup[i])

    A = sp.csc_matrix((vals, (rows, cols)), shape=(4 * N, 4 * N))
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise SensitivityError(
            f"singular sensitivity system at hour {t} "
            f"(matrix 1-norm {sp.linalg.norm(A, 1):.3e}): {exc}"
        ) from exc
    return HourSystem(feeder=feeder, hour=t, matrix=A, lu=lu)


def _rhs_index(system: HourSystem, node, kind):
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if node == 0:
        raise ValueError("root is the slack node; no sensitivity is defined there")
    if node not in system.feeder.index:
        raise ValueError(f"unknown node {node}")
    i = system.feeder.index[node]
    return i if kind == "real" else system.feeder.n + i


def solve_block(system: HourSystem, node, kind) -> SensitivityBlock:
    """Sensitivities of all network quantities to one (node, side) demand."""
    N = system.feeder.n
    b = np.zeros(4 * N)
    b[_rhs_index(system, node, kind)] = 1.0
    x = system.lu.solve(b)
    resid = float(np.max(np.abs(system.matrix @ x - b)))
    if resid > 1e-10:
        raise SensitivityError(
            f"sensitivity solve residual {resid:.3e} at hour {system.hour}"
        )
    return SensitivityBlock(
        hour=system.hour,
        node=node,
        kind=kind,
        x_p=x[:N].copy(),
        x_q=x[N : 2 * N].copy(),
        x_v=x[2 * N : 3 * N].copy(),
        x_l=x[3 * N :].copy(),
    )


@dataclass(frozen=True)
class SensitivitySet:
    """Dense sensitivities for every (hour, side, perturbed node).

    Arrays are (T, 2, N, N) indexed [hour, side, perturbed, line], side 0 for
    real and 1 for reactive demand.  ``droot_p``/``droot_q`` hold the root
    import derivatives (T, 2, N), i.e. 1 + marginal losses on the real side.
    """

    feeder: Feeder
    x_p: np.ndarray
    x_q: np.ndarray
    x_v: np.ndarray
    x_l: np.ndarray
    droot_p: np.ndarray
    droot_q: np.ndarray

    def block(self, t, node, kind) -> SensitivityBlock:
        k = _KIND_INDEX[kind]
        i = self.feeder.index[node]
        return SensitivityBlock(
            hour=t,
            node=node,
            kind=kind,
            x_p=self.x_p[t, k, i].copy(),
            x_q=self.x_q[t, k, i].copy(),
            x_v=self.x_v[t, k, i].copy(),
            x_l=self.x_l[t, k, i].copy(),
        )


def compute_sensitivities(solution, cone_tol=1e-6) -> SensitivitySet:
    """Assemble, factorize, and batch-solve every hour of a solved case."""
    feeder = solution.case.feeder
    N, T = feeder.n, solution.P.shape[1]
    x_p = np.empty((T, 2, N, N))
    x_q = np.empty_like(x_p)
    x_v = np.empty_like(x_p)
    x_l = np.empty_like(x_p)
    rhs = np.zeros((4 * N, 2 * N))
    rhs[: 2 * N] = np.eye(2 * N)
    for t in range(T):
        system = assemble_system(solution, t, cone_tol=cone_tol)
        X = system.lu.solve(rhs)
        resid = float(np.max(np.abs(system.matrix @ X - rhs)))
        if resid > 1e-10:
            raise SensitivityError(f"batch solve residual {resid:.3e} at hour {t}")
        xt = X.T.reshape(2, N, 4, N)
        x_p[t] = xt[:, :, 0, :]
        x_q[t] = xt[:, :, 1, :]
        x_v[t] = xt[:, :, 2, :]
        x_l[t] = xt[:, :, 3, :]
    root_rows = [feeder.index[j] for j in feeder.non_root if feeder.parent(j) == 0]
    droot_p = x_p[:, :, :, root_rows].sum(axis=3)
    droot_q = x_q[:, :, :, root_rows].sum(axis=3)
    return SensitivitySet(
        feeder=feeder,
        x_p=x_p,
        x_q=x_q,
        x_v=x_v,
        x_l=x_l,
        droot_p=droot_p,
        droot_q=droot_q,
    )


def finite_difference_check(case, solution, t, node, kind, h=1e-5):
    """Max relative error of the analytic block vs central differences.

    Re-solves the exact power flow with net demand perturbed by +-h pu at
    (node, t), holding all schedules fixed.  Both sides are differentiated
    at the exact-manifold point for the solution's net demands: the conic
    primal sits O(cone residual) off that manifold, which is irrelevant
    downstream but would register against the relative floor here.  Relative
    error uses a small floor so exact-zero sensitivities compare against
    roundoff sanely.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    feeder = case.feeder
    i = feeder.index[node]
    p0 = solution.pnet[:, t].copy()
    q0 = solution.qnet[:, t].copy()

    base = solve_distflow(feeder, p0, q0, tol=1e-15)
    v0 = feeder.v_root**2
    vup = np.array(
        [v0 if feeder.parent(j) == 0 else base.v[feeder.index[feeder.parent(j)]]
         for j in feeder.non_root]
    )
    col = lambda a: np.asarray(a, float).reshape(-1, 1)
    projected = SimpleNamespace(
        case=SimpleNamespace(feeder=feeder),
        P=col(base.P),
        Q=col(base.Q),
        v=col(base.v),
        l=col(base.l),
        vup=col(vup),
        cone_residuals=np.zeros((feeder.n, 1)),
    )
    blk = solve_block(assemble_system(projected, 0), node, kind)

    def run(sign):
        p, q = p0.copy(), q0.copy()
        if kind == "real":
            p[i] += sign * h
        else:
            q[i] += sign * h
        return solve_distflow(feeder, p, q, tol=1e-15)

    hi = run(1.0)
    lo = run(-1.0)
    err = 0.0
    for x, a, b in (
        (blk.x_p, hi.P, lo.P),
        (blk.x_q, hi.Q, lo.Q),
        (blk.x_v, hi.v, lo.v),
        (blk.x_l, hi.l, lo.l),
    ):
        fd = (a - b) / (2.0 * h)
        err = max(err, float(np.max(np.abs(fd - x) / np.maximum(np.abs(x), REL_FLOOR))))
    return err
