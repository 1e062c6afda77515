"""Radial feeder model: topology, per-unit bases, daily exogenous data, scenarios.

Conventions used throughout the package: node 0 is the substation (root); every
other node has exactly one incoming line, indexed by its receiving node; v is
squared voltage magnitude and l squared current magnitude, both per-unit on a
single system base.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .thermal import TransformerThermalParams


class FeederFormatError(ValueError):
    """Feeder or trajectory file does not parse against the documented schema."""


class FeederValidationError(ValueError):
    """Parsed feeder violates a structural or numeric invariant."""


def kva_to_pu(value, base_kva):
    """Convert kVA (or kW, kVAr) to per-unit on the system base."""
    return np.asarray(value, dtype=float) / float(base_kva)


def pu_to_kva(value, base_kva):
    """Inverse of kva_to_pu."""
    return np.asarray(value, dtype=float) * float(base_kva)


@dataclass(frozen=True)
class VoltageLimits:
    """Bounds on squared voltage magnitude [pu^2]."""

    v_min: float
    v_max: float

    def __post_init__(self):
        if not 0.0 < self.v_min < self.v_max:
            raise FeederValidationError("require 0 < v_min < v_max (squared pu)")

    @classmethod
    def from_magnitudes(cls, lo=0.95, hi=1.05):
        return cls(float(lo) ** 2, float(hi) ** 2)

    @property
    def magnitudes(self):
        return (self.v_min**0.5, self.v_max**0.5)


@dataclass(frozen=True)
class Line:
    """Distribution line or service transformer branch, indexed by receiving node.

    ``ampacity`` caps squared current [pu]; None means unconstrained.
    """

    from_node: int
    to_node: int
    r: float
    x: float
    ampacity: float | None = None

    def __post_init__(self):
        if self.r < 0 or self.x < 0:
            raise FeederValidationError(f"negative impedance on line into {self.to_node}")
        if self.ampacity is not None and self.ampacity <= 0:
            raise FeederValidationError(f"nonpositive ampacity on line into {self.to_node}")


@dataclass(frozen=True)
class Transformer:
    """Monitored service transformer on the line into ``node``."""

    node: int
    label: str
    params: TransformerThermalParams


@dataclass(frozen=True)
class Feeder:
    lines: tuple
    transformers: tuple = ()
    base_kva: float = 1000.0
    base_kv: float = 13.8
    limits: VoltageLimits = field(default_factory=VoltageLimits.from_magnitudes)
    v_root: float = 1.0
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base_kva <= 0 or self.base_kv <= 0:
            raise FeederValidationError("bases must be positive")
        lines = tuple(self.lines)
        object.__setattr__(self, "lines", lines)
        object.__setattr__(self, "transformers", tuple(self.transformers))
        parent, line_into = {}, {}
        for ln in lines:
            if ln.from_node == ln.to_node:
                raise FeederValidationError(f"node {ln.to_node} is its own parent (cycle)")
            if ln.to_node == 0:
                raise FeederValidationError("root node cannot have an incoming line")
            if ln.to_node in line_into:
                raise FeederValidationError(f"node {ln.to_node} has two incoming lines")
            parent[ln.to_node] = ln.from_node
            line_into[ln.to_node] = ln
        nodes = {0} | {ln.from_node for ln in lines} | {ln.to_node for ln in lines}
        for n in nodes - {0}:
            if n not in parent:
                raise FeederValidationError(f"node {n} is not reachable from the root (orphan)")
        children = {n: [] for n in nodes}
        for ln in lines:
            children[ln.from_node].append(ln.to_node)
        order = []
        stack = [0]
        while stack:
            n = stack.pop()
            order.append(n)
            stack.extend(sorted(children[n], reverse=True))
        if len(order) != len(nodes):
            raise FeederValidationError("feeder contains a cycle")
        seen = set()
        for tr in self.transformers:
            if tr.node not in line_into:
                raise FeederValidationError(f"transformer at {tr.node} has no incoming line")
            if tr.node in seen:
                raise FeederValidationError(f"duplicate transformer at node {tr.node}")
            seen.add(tr.node)
        object.__setattr__(self, "_parent", parent)
        object.__setattr__(self, "_children", {n: tuple(sorted(c)) for n, c in children.items()})
        object.__setattr__(self, "_line_into", line_into)
        object.__setattr__(self, "_order", tuple(order))
        non_root = tuple(n for n in order if n != 0)
        object.__setattr__(self, "_non_root", non_root)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(non_root)})

    # topology accessors ---------------------------------------------------

    @property
    def order(self):
        """All nodes, parents before children, root first."""
        return self._order

    @property
    def non_root(self):
        """Non-root nodes in topological order; fixes the index convention."""
        return self._non_root

    @property
    def n(self):
        """Number of non-root nodes (and lines)."""
        return len(self._non_root)

    @property
    def index(self):
        """node id -> position in ``non_root``."""
        return self._index

    def parent(self, node):
        return self._parent[node]

    def children(self, node):
        return self._children.get(node, ())

    def line_into(self, node):
        return self._line_into[node]

    def path_to_root(self, node):
        """Nodes from ``node`` up to and including the root."""
        path = [node]
        while path[-1] != 0:
            path.append(self._parent[path[-1]])
        return path

    @property
    def transformer_by_node(self):
        return {tr.node: tr for tr in self.transformers}

    @property
    def base_mva(self):
        """System base in MVA; converts pu-valued duals to $/MWh."""
        return self.base_kva / 1000.0


def topological_order(feeder: Feeder):
    """All nodes with every parent preceding its children, root first."""
    return list(feeder.order)


# serialization ------------------------------------------------------------


def save_feeder(feeder: Feeder, path):
    lo, hi = feeder.limits.magnitudes
    doc = {
        "base": {
            "kva": feeder.base_kva,
            "kv": feeder.base_kv,
            "v_min": lo,
            "v_max": hi,
            "v_root": feeder.v_root,
        },
        "nodes": [
            {"id": n, **({"label": feeder.labels[n]} if n in feeder.labels else {})}
            for n in sorted(feeder.order)
        ],
        "lines": [
            {"from": ln.from_node, "to": ln.to_node, "r": ln.r, "x": ln.x, "ampacity": ln.ampacity}
            for ln in feeder.lines
        ],
        "transformers": [
            {
                "node": tr.node,
                "label": tr.label,
                "thermal": {
                    "loss_ratio": tr.params.loss_ratio,
                    "top_oil_rise": tr.params.top_oil_rise,
                    "hotspot_rise": tr.params.hotspot_rise,
                    "decay": tr.params.decay,
                    "cost_per_lol_hour": tr.params.cost_per_lol_hour,
                    "nominal_l": tr.params.nominal_l,
                },
            }
            for tr in feeder.transformers
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_feeder(path) -> Feeder:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FeederFormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        base = doc["base"]
        lines = tuple(
            Line(
                from_node=int(rec["from"]),
                to_node=int(rec["to"]),
                r=float(rec["r"]),
                x=float(rec["x"]),
                ampacity=None if rec.get("ampacity") is None else float(rec["ampacity"]),
            )
            for rec in doc["lines"]
        )
        transformers = tuple(
            Transformer(
                node=int(rec["node"]),
                label=str(rec.get("label", "")),
                params=TransformerThermalParams(**{k: float(v) for k, v in rec["thermal"].items()}),
            )
            for rec in doc.get("transformers", ())
        )
        labels = {
            int(rec["id"]): str(rec["label"]) for rec in doc.get("nodes", ()) if "label" in rec
        }
        declared = {int(rec["id"]) for rec in doc.get("nodes", ())}
        feeder = Feeder(
            lines=lines,
            transformers=transformers,
            base_kva=float(base["kva"]),
            base_kv=float(base["kv"]),
            limits=VoltageLimits.from_magnitudes(base.get("v_min", 0.95), base.get("v_max", 1.05)),
            v_root=float(base.get("v_root", 1.0)),
            labels=labels,
        )
    except (KeyError, TypeError) as exc:
        raise FeederFormatError(f"{path}: missing or malformed field ({exc})") from exc
    except FeederValidationError:
        raise
    except ValueError as exc:
        raise FeederValidationError(str(exc)) from exc
    if declared and declared != set(feeder.order):
        raise FeederValidationError(f"{path}: nodes section disagrees with line endpoints")
    return feeder


# exogenous daily data -----------------------------------------------------


@dataclass(frozen=True)
class ExogenousTrajectories:
    """Hourly exogenous inputs for one daily cycle.

    ``lmp`` [$/MWh] and ``q_price`` [$/MVArh] at the root, ``ambient`` [degC],
    PV availability factor ``pv_factor`` in [0, 1], and fixed nodal loads in
    per-unit (consumption positive).
    """

    lmp: np.ndarray
    q_price: np.ndarray = None
    ambient: np.ndarray = None
    pv_factor: np.ndarray = None
    load_p: dict = field(default_factory=dict)
    load_q: dict = field(default_factory=dict)

    def __post_init__(self):
        lmp = np.asarray(self.lmp, dtype=float)
        T = len(lmp)
        qp = 0.10 * lmp if self.q_price is None else np.asarray(self.q_price, dtype=float)
        amb = np.zeros(T) if self.ambient is None else np.asarray(self.ambient, dtype=float)
        rho = np.zeros(T) if self.pv_factor is None else np.asarray(self.pv_factor, dtype=float)
        for name, arr in (("q_price", qp), ("ambient", amb), ("pv_factor", rho)):
            if len(arr) != T:
                raise FeederValidationError(f"{name} length {len(arr)} != {T}")
        if np.any(rho < -1e-12) or np.any(rho > 1 + 1e-12):
            raise FeederValidationError("pv_factor must lie in [0, 1]")
        lp = {int(n): np.asarray(v, dtype=float) for n, v in self.load_p.items()}
        lq = {int(n): np.asarray(v, dtype=float) for n, v in self.load_q.items()}
        for n, v in list(lp.items()) + list(lq.items()):
            if len(v) != T:
                raise FeederValidationError(f"load trajectory at node {n} length {len(v)} != {T}")
        object.__setattr__(self, "lmp", lmp)
        object.__setattr__(self, "q_price", qp)
        object.__setattr__(self, "ambient", amb)
        object.__setattr__(self, "pv_factor", rho)
        object.__setattr__(self, "load_p", lp)
        object.__setattr__(self, "load_q", lq)

    @property
    def T(self):
        return len(self.lmp)

    def load_at(self, node):
        """(p, q) load trajectories at ``node`` in pu; zeros if unlisted."""
        z = np.zeros(self.T)
        return self.load_p.get(node, z), self.load_q.get(node, z)


def save_trajectories(traj: ExogenousTrajectories, path):
    nodes = sorted(set(traj.load_p) | set(traj.load_q))
    header = ["hour", "lmp", "q_price", "ambient", "pv_factor"]
    header += [f"p_{n}" for n in nodes] + [f"q_{n}" for n in nodes]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(traj.T):
            zero = np.zeros(traj.T)
            row = [t, traj.lmp[t], traj.q_price[t], traj.ambient[t], traj.pv_factor[t]]
            row += [repr(float(traj.load_p.get(n, zero)[t])) for n in nodes]
            row += [repr(float(traj.load_q.get(n, zero)[t])) for n in nodes]
            w.writerow(row)


def load_trajectories(path) -> ExogenousTrajectories:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FeederFormatError(f"{path}: empty trajectory file")
    required = {"hour", "lmp", "q_price", "ambient", "pv_factor"}
    missing = required - set(rows[0])
    if missing:
        raise FeederFormatError(f"{path}: missing columns {sorted(missing)}")
    rows.sort(key=lambda r: int(r["hour"]))
    hours = [int(r["hour"]) for r in rows]
    if hours != list(range(len(rows))):
        raise FeederFormatError(f"{path}: hours must be 0..T-1 without gaps")

    def col(name):
        return np.array([float(r[name]) for r in rows])

    load_p, load_q = {}, {}
    for name in rows[0]:
        if name.startswith("p_") and name[2:].isdigit():
            load_p[int(name[2:])] = col(name)
        elif name.startswith("q_") and name[2:].isdigit():
            load_q[int(name[2:])] = col(name)
    return ExogenousTrajectories(
        lmp=col("lmp"),
        q_price=col("q_price"),
        ambient=col("ambient"),
        pv_factor=col("pv_factor"),
        load_p=load_p,
        load_q=load_q,
    )


# scenarios ----------------------------------------------------------------

OPTIONS = ("bau", "tou", "pq", "full")
OPTION_LABELS = {"bau": "BaU", "tou": "ToU", "pq": "PQ-opt", "full": "Full-opt"}


@dataclass(frozen=True)
class ScenarioCase:
    """One immutable experiment: feeder + daily data + DER fleet + option tag."""

    name: str
    feeder: Feeder
    trajectories: ExogenousTrajectories
    fleet: object
    option: str
    protection: bool = False


def build_scenario(
    feeder: Feeder,
    trajectories: ExogenousTrajectories,
    fleet,
    option: str,
    protection=False,
    name=None,
) -> ScenarioCase:
    """Validate and bundle one scenario; records EV/PV penetration in the name."""
    if option not in OPTIONS:
        raise ValueError(f"unknown scheduling option {option!r}; expected one of {OPTIONS}")
    known = set(feeder.order)
    for dev in tuple(fleet.evs) + tuple(fleet.pvs):
        if dev.node not in known:
            raise ValueError(f"device at unknown node {dev.node}")
    for n in set(trajectories.load_p) | set(trajectories.load_q):
        if n not in known:
            raise ValueError(f"load trajectory at unknown node {n}")
    if name is None:
        pv_kva = sum(pv.capacity_kva for pv in fleet.pvs)
        name = f"EV{len(tuple(fleet.evs))}/PV{pv_kva:g}/{OPTION_LABELS[option]}"
    return ScenarioCase(
        name=name,
        feeder=feeder,
        trajectories=trajectories,
        fleet=fleet,
        option=option,
        protection=protection,
    )
