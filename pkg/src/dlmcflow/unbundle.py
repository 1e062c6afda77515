"""Unbundling nodal marginal costs into named components.

A balance-row dual at (node, hour) decomposes along the operating-point
sensitivities into energy, real/reactive marginal losses, voltage- and
ampacity-congestion rents, and transformer degradation:

    lam_j = lam_root * dRoot_P/d.  +  lamQ_root * dRoot_Q/d.
          + sum_k (mu_up_k - mu_lo_k) * dv_k/d.
          + sum_lines nu * dl/d.  +  sum_y pi_y * dl_y/d.

with pi_y the degradation price of squared current on monitored transformer
line y (recurrence and hotspot duals combined).  The identity is exact at
optimality; `unbundle` asserts it and refuses on residuals beyond tolerance.

The degradation price itself unrolls over the thermal recurrence into
same-hour winding, same-hour top-oil, geometrically decaying subsequent-hour,
and beyond-horizon terms; see `decompose_transformer_component`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .opf import OpfSolution, transformer_l_price
from .sensitivity import SensitivitySet, compute_sensitivities
from .thermal import CLASSIC_TOP_OIL_COEFF, CLASSIC_WINDING_COEFF

COMPONENTS = ("energy", "loss_p", "loss_q", "voltage", "ampacity", "transformer")
SIDES = ("P", "Q")
TRANSFORMER_SCOPES = ("all", "colocated")



class UnbundleError(RuntimeError):
    """Component sums failed to reproduce the balance-row duals."""


@dataclass(frozen=True)
class DlmcComponents:
    """Component tables per side, each a dict name -> (N, T) [$ /MWh].

    ``total_*`` are the component sums; ``lam_*`` the balance duals they
    must reproduce.  Node order follows ``nodes``.
    """

    nodes: tuple
    p: dict
    q: dict
    total_p: np.ndarray
    total_q: np.ndarray
    lam_p: np.ndarray
    lam_q: np.ndarray
    lam_p_root: np.ndarray
    lam_q_root: np.ndarray

    def additivity_worst(self):
        """(error, node, hour, side), relative to the node-hour price scale.

        Both balance rows of a node-hour are judged against the larger of
        their local and root price magnitudes.  Wherever devices can zero a
        whole side out, the reactive dual parks on the root |Q| cost kink at
        exactly zero and a per-side denominator would amplify plain solver
        noise into spurious misses.
        """
        scale = np.maximum.reduce(
            [
                np.abs(self.lam_p),
                np.abs(self.lam_q),
                np.broadcast_to(np.abs(self.lam_p_root), self.lam_p.shape),
                np.broadcast_to(np.abs(self.lam_q_root), self.lam_p.shape),
            ]
        )
        scale = np.maximum(scale, 1e-6)
        worst = (0.0, None, None, None)
        for side, tot, lam in (
            ("P", self.total_p, self.lam_p),
            ("Q", self.total_q, self.lam_q),
        ):
            err = np.abs(tot - lam) / scale
            i, t = np.unravel_index(np.argmax(err), err.shape)
            if err[i, t] > worst[0]:
                worst = (float(err[i, t]), self.nodes[i], int(t), side)
        return worst

    def at(self, node, hour, side):
        """Component dict for one (node, hour, side), including the total."""
        i = self.nodes.index(node)
        tbl = self.p if side == "P" else self.q
        out = {name: float(tbl[name][i, hour]) for name in COMPONENTS}
        out["total"] = float((self.total_p if side == "P" else self.total_q)[i, hour])
        return out


def unbundle(
    solution: OpfSolution,
    sens: SensitivitySet = None,
    transformer_scope="all",
    tol=1e-4,
    check=True,
) -> DlmcComponents:
    """Build the full per-(node, hour) component table for both sides.

    ``transformer_scope="colocated"`` attributes to each node only its own
    transformer's degradation (the conventional reported figure); the sums
    then miss the small remote coupling and additivity is only guaranteed
    under the default ``"all"``.
    """
    if transformer_scope not in TRANSFORMER_SCOPES:
        raise ValueError(f"transformer_scope must be one of {TRANSFORMER_SCOPES}")
    feeder = solution.case.feeder
    if sens is None:
        sens = compute_sensitivities(solution)
    N, T = feeder.n, solution.P.shape[1]
    s = feeder.base_mva
    idx = feeder.index

    lam0 = solution.lam_p_root
    lamq0 = solution.lam_q_root
    mu = (solution.mu_up - solution.mu_lo) / s  # (N, T)
    # programs without thermal rows price no degradation; their duals then
    # contain no such term either and the identity closes with pi absent
    pi = {
        node: transformer_l_price(solution, node) / s
        for node in solution.thermal_duals
    }

    tables = {}
    for k, side in enumerate(SIDES):
        # d(root import)/d(demand at j): (T, N) -> (N, T)
        droot_p = sens.droot_p[:, k, :].T
        droot_q = sens.droot_q[:, k, :].T
        direct_p = 1.0 if side == "P" else 0.0
        direct_q = 1.0 if side == "Q" else 0.0
        comp = {
            "energy": np.tile(lam0 if side == "P" else lamq0, (N, 1)),
            "loss_p": lam0[None, :] * (droot_p - direct_p),
            "loss_q": lamq0[None, :] * (droot_q - direct_q),
        }
        # x_v[t, k, j, m]: dv_m / d(demand at j); contract over m
        comp["voltage"] = np.einsum("tjm,mt->jt", sens.x_v[:, k], mu)
        amp = np.zeros((N, T))
        for node, nu in solution.nu.items():
            amp += sens.x_l[:, k, :, idx[node]].T * (nu / s)[None, :]
        comp["ampacity"] = amp
        tr = np.zeros((N, T))
        for node, price in pi.items():
            contrib = sens.x_l[:, k, :, idx[node]].T * price[None, :]
            if transformer_scope == "all":
                tr += contrib
            else:
                tr[idx[node]] += contrib[idx[node]]
        comp["transformer"] = tr
        tables[side] = comp

    total_p = sum(tables["P"].values())
    total_q = sum(tables["Q"].values())
    out = DlmcComponents(
        nodes=feeder.non_root,
        p=tables["P"],
        q=tables["Q"],
        total_p=total_p,
        total_q=total_q,
        lam_p=solution.lam_p,
        lam_q=solution.lam_q,
        lam_p_root=solution.lam_p_root,
        lam_q_root=solution.lam_q_root,
    )
    if check and transformer_scope == "all":
        err, node, hour, side = out.additivity_worst()
        if err > tol:
            raise UnbundleError(
                f"component sum misses balance dual by {err:.3e} relative "
                f"at node {node} hour {hour} side {side}"
            )
    return out


def write_components_csv(table: DlmcComponents, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "hour", "side"] + list(COMPONENTS) + ["total"])
        T = table.total_p.shape[1]
        for side, tbl, tot in (("P", table.p, table.total_p), ("Q", table.q, table.total_q)):
            for i, node in enumerate(table.nodes):
                for t in range(T):
                    w.writerow(
                        [node, t, side]
                        + [repr(float(tbl[name][i, t])) for name in COMPONENTS]
                        + [repr(float(tot[i, t]))]
                    )


def read_components_csv(path):
    """Rows as dicts keyed (node, hour, side) -> {component: value}."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["node"]), int(row["hour"]), row["side"])
            out[key] = {
                name: float(row[name]) for name in COMPONENTS + ("total",)
            }
    return out


@dataclass(frozen=True)
class TransformerComponentDecomposition:
    """One transformer's degradation price at one hour, unrolled in time.

    All terms are in $/MWh and carry the sign of dl_y/d(demand).  The
    subsequent-hour detail arrays expose the geometric structure: ``coeffs``
    decay by exactly the top-oil persistence factor per added hour.
    """

    node: int
    hour: int
    transformer: int
    kind: str
    same_hour_winding: float
    same_hour_top_oil: float
    subsequent_hours: float
    beyond_horizon: float
    alpha_tilde: np.ndarray
    taus: np.ndarray
    coeffs: np.ndarray
    terms: np.ndarray

    @property
    def total(self):
        return (
            self.same_hour_winding
            + self.same_hour_top_oil
            + self.subsequent_hours
            + self.beyond_horizon
        )


def adjusted_slopes(solution: OpfSolution, y):
    """Effective aging slope per hour: the dual-weighted tangent mix.

    alpha~_t = (1/c) * sum_k xi_{t,k} * slope_k; between kinks this is the
    active tangent slope, at a kink the optimizer's interior mix.
    """
    duals = solution.thermal_duals[y]
    c = solution.case.feeder.transformer_by_node[y].params.cost_per_lol_hour
    return (duals.xi.T @ np.asarray(solution.aging.slopes)) / c


def decompose_transformer_component(
    solution: OpfSolution,
    sens: SensitivitySet,
    y,
    node,
    t,
    kind="real",
    constants="model",
) -> TransformerComponentDecomposition:
    """Unroll transformer ``y``'s degradation price at (node, t) over time.

    ``constants="classic"`` swaps the model-derived same-hour thermal gains
    for the legacy per-unit coefficients (top-oil 55/6, winding 20) for
    report comparability; only the two same-hour terms change and the sum
    then deviates from the exact component accordingly.
    """
    if constants not in ("model", "classic"):
        raise ValueError("constants must be 'model' or 'classic'")
    feeder = solution.case.feeder
    tr = feeder.transformer_by_node[y]
    params = tr.params
    c = params.cost_per_lol_hour
    a = params.decay
    T = solution.P.shape[1]
    k = 0 if kind == "real" else 1
    dl = float(sens.x_l[t, k, feeder.index[node], feeder.index[y]])
    s = feeder.base_mva
    alpha = adjusted_slopes(solution, y)

    g_to, g_h = params.top_oil_gain, params.winding_gain
    if constants == "classic":
        g_to = CLASSIC_TOP_OIL_COEFF / params.nominal_l
        g_h = CLASSIC_WINDING_COEFF / params.nominal_l

    scale = dl / s
    same_winding = c * alpha[t] * g_h * scale
    same_top_oil = c * alpha[t] * g_to * scale
    taus = np.arange(1, T - t)
    coeffs = np.empty(len(taus))
    w = c * params.top_oil_gain * scale
    for i, _ in enumerate(taus):
        w *= a
        coeffs[i] = w
    terms = coeffs * alpha[t + 1 :]
    beyond = solution.thermal_duals[y].rho * a ** (T - 1 - t) * params.top_oil_gain * scale
    return TransformerComponentDecomposition(
        node=node,
        hour=t,
        transformer=y,
        kind=kind,
        same_hour_winding=float(same_winding),
        same_hour_top_oil=float(same_top_oil),
        subsequent_hours=float(terms.sum()),
        beyond_horizon=float(beyond),
        alpha_tilde=alpha,
        taus=taus,
        coeffs=coeffs,
        terms=terms,
    )


def write_decomposition_csv(decomps, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "node",
                "hour",
                "transformer",
                "side",
                "same_hour_winding",
                "same_hour_top_oil",
                "subsequent_hours",
                "beyond_horizon",
                "total",
            ]
        )
        for d in decomps:
            w.writerow(
                [
                    d.node,
                    d.hour,
                    d.transformer,
                    "P" if d.kind == "real" else "Q",
                    repr(d.same_hour_winding),
                    repr(d.same_hour_top_oil),
                    repr(d.subsequent_hours),
                    repr(d.beyond_horizon),
                    repr(d.total),
                ]
            )


def export_price_signals(solution: OpfSolution, path):
    """Per-node hourly price file consumed by the self-scheduling check."""
    feeder = solution.case.feeder
    T = solution.lam_p.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "hour", "lam_p", "lam_q"])
        for t in range(T):
            w.writerow([0, t, repr(float(solution.lam_p_root[t])), repr(float(solution.lam_q_root[t]))])
        for j in feeder.non_root:
            i = feeder.index[j]
            for t in range(T):
                w.writerow(
                    [j, t, repr(float(solution.lam_p[i, t])), repr(float(solution.lam_q[i, t]))]
                )
    return path


def load_price_signals(path):
    """node -> (lam_p, lam_q) hourly arrays, as written by the exporter."""
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["node"]), []).append(
                (int(row["hour"]), float(row["lam_p"]), float(row["lam_q"]))
            )
    out = {}
    for node, entries in rows.items():
        entries.sort()
        out[node] = (
            np.array([e[1] for e in entries]),
            np.array([e[2] for e in entries]),
        )
    return out
