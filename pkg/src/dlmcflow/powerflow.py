"""Nonlinear radial power-flow solves, independent of any optimization layer.

These are the oracles the conic programs are checked against: a backward/
forward sweep on the exact DistFlow recursion for arbitrary radial feeders,
and a scalar Newton solve for the two-bus case.  All quantities per-unit,
v and l squared magnitudes; net demand is consumption-positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import Feeder


class PowerFlowError(RuntimeError):
    """Sweep failed to converge (voltage collapse or absurd loading)."""


@dataclass(frozen=True)
class PowerFlowResult:
    """Flows/states indexed like ``feeder.non_root``: line quantities belong
    to the line into the node at the same position."""

    P: np.ndarray
    Q: np.ndarray
    v: np.ndarray
    l: np.ndarray
    iterations: int

    def at(self, feeder: Feeder, node):
        """(P, Q, v, l) for ``node`` and its incoming line."""
        i = feeder.index[node]
        return self.P[i], self.Q[i], self.v[i], self.l[i]


def solve_distflow(feeder: Feeder, p, q, tol=1e-13, max_iter=300) -> PowerFlowResult:
    """Solve the exact branch-flow equations by backward/forward sweep.

    ``p``, ``q``: net nodal demand [(N,) in ``feeder.non_root`` order].
    Converges to the high-voltage operating branch (start from zero losses).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = feeder.n
    if p.shape != (n,) or q.shape != (n,):
        raise ValueError(f"expected ({n},) net-demand vectors")
    idx = feeder.index
    nodes = feeder.non_root
    rs = np.array([feeder.line_into(j).r for j in nodes])
    xs = np.array([feeder.line_into(j).x for j in nodes])
    parent_ix = np.array([-1 if feeder.parent(j) == 0 else idx[feeder.parent(j)] for j in nodes])
    children_ix = [[idx[k] for k in feeder.children(j)] for j in nodes]
    v0 = feeder.v_root**2

    P = np.zeros(n)
    Q = np.zeros(n)
    v = np.full(n, v0)
    l = np.zeros(n)
    for it in range(1, max_iter + 1):
        # backward: accumulate sending-end flows with current-loss estimates
        newP = p + rs * l
        newQ = q + xs * l
        for i in range(n - 1, -1, -1):
            for c in children_ix[i]:
                newP[i] += newP[c]
                newQ[i] += newQ[c]
        # forward: propagate squared voltages from the root
        newv = np.empty(n)
        for i in range(n):
            up = v0 if parent_ix[i] < 0 else newv[parent_ix[i]]
            newv[i] = up - 2.0 * (rs[i] * newP[i] + xs[i] * newQ[i]) + (rs[i] ** 2 + xs[i] ** 2) * l[i]
        if np.any(newv <= 0):
            raise PowerFlowError("voltage collapsed during sweep")
        vup = np.where(parent_ix < 0, v0, newv[np.maximum(parent_ix, 0)])
        newl = (newP**2 + newQ**2) / vup
        delta = max(
            np.max(np.abs(newP - P)),
            np.max(np.abs(newQ - Q)),
            np.max(np.abs(newv - v)),
            np.max(np.abs(newl - l)),
        )
        P, Q, v, l = newP, newQ, newv, newl
        if delta < tol:
            return PowerFlowResult(P=P, Q=Q, v=v, l=l, iterations=it)
    raise PowerFlowError(f"sweep did not converge in {max_iter} iterations (delta={delta:.2e})")


def distflow_residuals(feeder: Feeder, p, q, res: PowerFlowResult):
    """Max violations of the three branch-flow equation groups; all should be
    at numerical noise for a converged solve."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    idx = feeder.index
    nodes = feeder.non_root
    bal_p = bal_q = volt = cone = 0.0
    v0 = feeder.v_root**2
    for j in nodes:
        i = idx[j]
        ln = feeder.line_into(j)
        down_p = sum(res.P[idx[k]] for k in feeder.children(j))
        down_q = sum(res.Q[idx[k]] for k in feeder.children(j))
        vup = v0 if ln.from_node == 0 else res.v[idx[ln.from_node]]
        bal_p = max(bal_p, abs(res.P[i] - down_p - ln.r * res.l[i] - p[i]))
        bal_q = max(bal_q, abs(res.Q[i] - down_q - ln.x * res.l[i] - q[i]))
        volt = max(
            volt,
            abs(
                res.v[i]
                - vup
                + 2.0 * (ln.r * res.P[i] + ln.x * res.Q[i])
                - (ln.r**2 + ln.x**2) * res.l[i]
            ),
        )
        cone = max(cone, abs(res.l[i] * vup - res.P[i] ** 2 - res.Q[i] ** 2))
    return {"balance_p": bal_p, "balance_q": bal_q, "voltage": volt, "cone": cone}


def two_bus_flow(r, x, p, q, v0_sq=1.0, tol=1e-15, max_iter=100):
    """Exact single-line power flow by Newton iteration on the squared current.

    Solves (p + r*l)^2 + (q + x*l)^2 = l*v0_sq from l=0, picking the physical
    (high-voltage) branch.  Returns (P, Q, v1, l).
    """
    l = 0.0
    for _ in range(max_iter):
        fp = p + r * l
        fq = q + x * l
        f = fp * fp + fq * fq - l * v0_sq
        df = 2.0 * r * fp + 2.0 * x * fq - v0_sq
        step = f / df
        l -= step
        if abs(step) < tol:
            break
    else:
        raise PowerFlowError("two-bus Newton did not converge")
    P = p + r * l
    Q = q + x * l
    v1 = v0_sq - 2.0 * (r * P + x * Q) + (r * r + x * x) * l
    return P, Q, v1, l
