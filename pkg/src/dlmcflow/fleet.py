"""EV and PV device models, their feasible sets, and open-loop schedulers.

Device-level quantities are in kW/kVAr/kWh; the network layer converts to
per-unit.  Sign conventions: EV real/reactive consumption positive (reactive
provision is negative q); PV production positive.  Hours are clock hours of a
24-hour daily cycle; period t covers [t, t+1).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import cvxpy as cp
import numpy as np

CYCLE_HOURS = 24


class FleetFormatError(ValueError):
    """Fleet file malformed or describes an infeasible device."""


@dataclass(frozen=True)
class Ev:
    """One EV charger connection with a cyclic daily plug-in window.

    The vehicle is plugged in from ``plug_hour`` until ``depart_hour`` (window
    may wrap midnight), must be full at departure, and consumes
    ``energy_kwh`` while away; state of charge is periodic over the cycle.
    ``initial_soc_kwh`` is the state of charge at plug-in; by periodicity it
    must equal battery - energy, which is the default.
    """

    node: int
    plug_hour: int
    depart_hour: int
    energy_kwh: float
    battery_kwh: float = 24.0
    max_rate_kw: float = 3.3
    charger_kva: float = 6.6
    initial_soc_kwh: float = None

    def __post_init__(self):
        if not (0 <= self.plug_hour < CYCLE_HOURS and 0 <= self.depart_hour < CYCLE_HOURS):
            raise ValueError("plug/depart hours must lie in 0..23")
        if self.energy_kwh < 0:
            raise ValueError("energy requirement must be nonnegative")
        if self.energy_kwh > self.battery_kwh:
            raise ValueError("energy requirement exceeds battery capacity")
        if self.max_rate_kw > self.charger_kva:
            raise ValueError("max charging rate exceeds charger capacity")
        if self.energy_kwh > len(self.window_hours()) * self.max_rate_kw:
            raise ValueError("window too short to deliver the energy requirement")
        if self.initial_soc_kwh is None:
            object.__setattr__(self, "initial_soc_kwh", self.battery_kwh - self.energy_kwh)
        elif abs(self.initial_soc_kwh - (self.battery_kwh - self.energy_kwh)) > 1e-9:
            raise ValueError("initial SoC inconsistent with periodic daily cycle")

    def window_hours(self, T=CYCLE_HOURS):
        """Charging periods plug..depart-1 in chronological (cyclic) order."""
        w = (self.depart_hour - self.plug_hour) % T
        return [(self.plug_hour + k) % T for k in range(w)]


@dataclass(frozen=True)
class Pv:
    """Rooftop PV inverter; available real power at hour t is rho_t * capacity."""

    node: int
    capacity_kva: float

    def __post_init__(self):
        if self.capacity_kva <= 0:
            raise ValueError("inverter capacity must be positive")


@dataclass(frozen=True)
class DerFleet:
    evs: tuple = ()
    pvs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "evs", tuple(self.evs))
        object.__setattr__(self, "pvs", tuple(self.pvs))

    @property
    def nodes(self):
        return sorted({d.node for d in self.evs + self.pvs})


@dataclass
class DerSchedule:
    """Hourly device set-points: rows are devices in fleet order, columns hours."""

    ev_p: np.ndarray
    ev_q: np.ndarray
    pv_p: np.ndarray
    pv_q: np.ndarray

    @property
    def T(self):
        return self.ev_p.shape[1] if self.ev_p.size else self.pv_p.shape[1]

    @classmethod
    def zeros(cls, fleet: DerFleet, T):
        return cls(
            ev_p=np.zeros((len(fleet.evs), T)),
            ev_q=np.zeros((len(fleet.evs), T)),
            pv_p=np.zeros((len(fleet.pvs), T)),
            pv_q=np.zeros((len(fleet.pvs), T)),
        )


def aggregate_by_node(fleet: DerFleet, schedule: DerSchedule):
    """Net DER demand added to each node: EV consumption minus PV production.

    Returns (p_kw, q_kvar) dicts of hourly arrays, only for nodes with DERs.
    """
    T = schedule.T
    p, q = {}, {}
    for i, ev in enumerate(fleet.evs):
        p[ev.node] = p.get(ev.node, np.zeros(T)) + schedule.ev_p[i]
        q[ev.node] = q.get(ev.node, np.zeros(T)) + schedule.ev_q[i]
    for i, pv in enumerate(fleet.pvs):
        p[pv.node] = p.get(pv.node, np.zeros(T)) - schedule.pv_p[i]
        q[pv.node] = q.get(pv.node, np.zeros(T)) - schedule.pv_q[i]
    return p, q


# open-loop schedulers -----------------------------------------------------


def _fill_hours(ev: Ev, hour_order, T):
    p = np.zeros(T)
    remaining = ev.energy_kwh
    for h in hour_order:
        if remaining <= 1e-12:
            break
        dose = min(ev.max_rate_kw, remaining)
        p[h] = dose
        remaining -= dose
    return p


def bau_schedule(fleet: DerFleet, pv_factor) -> DerSchedule:
    """Dumb charging: each EV draws max rate from plug-in until full, unity
    power factor; PV injects all available real power at unity power factor."""
    pv_factor = np.asarray(pv_factor, dtype=float)
    T = len(pv_factor)
    sched = DerSchedule.zeros(fleet, T)
    for i, ev in enumerate(fleet.evs):
        sched.ev_p[i] = _fill_hours(ev, ev.window_hours(T), T)
    for i, pv in enumerate(fleet.pvs):
        sched.pv_p[i] = pv_factor * pv.capacity_kva
    return sched


def tou_schedule(fleet: DerFleet, lmp, pv_factor) -> DerSchedule:
    """Each EV minimizes its real-energy cost against the posted price
    trajectory at unity power factor (cheapest-hours fill, ties broken by the
    earliest hour in the window); PV as in BaU."""
    lmp = np.asarray(lmp, dtype=float)
    pv_factor = np.asarray(pv_factor, dtype=float)
    T = len(lmp)
    sched = bau_schedule(fleet, pv_factor)
    for i, ev in enumerate(fleet.evs):
        window = ev.window_hours(T)
        order = [h for _, _, h in sorted((lmp[h], k, h) for k, h in enumerate(window))]
        sched.ev_p[i] = _fill_hours(ev, order, T)
    return sched


# constraint blocks (single source of truth for OPF and self-scheduling) ----


@dataclass
class DeviceBlock:
    """Convex feasible-set description of one device over cvxpy variables."""

    p: cp.Variable
    q: cp.Variable
    soc: cp.Variable = None
    constraints: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def add(self, tag, con, rows):
        self.constraints.append(con)
        self.tags[tag] = con
        self.counts[tag] = rows


def ev_constraint_blocks(ev: Ev, T, p=None, q=None) -> DeviceBlock:
    """Feasible set of one EV: SoC recursion with the driving drawdown lumped
    at the departure period, full battery at departure, periodic SoC, charging
    rate box and charger cone inside the window, zero outside."""
    p = cp.Variable(T, name="ev_p") if p is None else p
    q = cp.Variable(T, name="ev_q") if q is None else q
    soc = cp.Variable(T + 1, name="ev_soc")
    blk = DeviceBlock(p=p, q=q, soc=soc)
    window = ev.window_hours(T)
    outside = [t for t in range(T) if t not in set(window)]
    drain = np.zeros(T)
    drain[ev.depart_hour % T] = ev.energy_kwh
    blk.add("soc_recursion", soc[1:] == soc[:-1] + p - drain, T)
    blk.add("departure", soc[ev.depart_hour % T] == ev.battery_kwh, 1)
    blk.add("periodicity", soc[T] == soc[0], 1)
    blk.add("soc_lo", soc >= 0, T + 1)
    blk.add("soc_hi", soc <= ev.battery_kwh, T + 1)
    if window:
        blk.add("rate_lo", p[window] >= 0, len(window))
        blk.add("rate_hi", p[window] <= ev.max_rate_kw, len(window))
        blk.add(
            "cone",
            cp.SOC(
                np.full(len(window), float(ev.charger_kva)),
                cp.vstack([cp.reshape(p[window], (1, len(window)), order="C"),
                           cp.reshape(q[window], (1, len(window)), order="C")]),
                axis=0,
            ),
            len(window),
        )
    if outside:
        blk.add("idle_p", p[outside] == 0, len(outside))
        blk.add("idle_q", q[outside] == 0, len(outside))
    return blk


def pv_constraint_blocks(pv: Pv, pv_factor, p=None, q=None) -> DeviceBlock:
    """Feasible set of one PV: real output within availability, apparent power
    within the inverter cone every hour (reactive available day and night)."""
    pv_factor = np.asarray(pv_factor, dtype=float)
    T = len(pv_factor)
    p = cp.Variable(T, name="pv_p") if p is None else p
    q = cp.Variable(T, name="pv_q") if q is None else q
    blk = DeviceBlock(p=p, q=q)
    blk.add("p_nonneg", p >= 0, T)
    blk.add("avail", p <= pv_factor * pv.capacity_kva, T)
    blk.add(
        "cone",
        cp.SOC(
            np.full(T, float(pv.capacity_kva)),
            cp.vstack([cp.reshape(p, (1, T), order="C"), cp.reshape(q, (1, T), order="C")]),
            axis=0,
        ),
        T,
    )
    return blk


def verify_schedule(fleet: DerFleet, schedule: DerSchedule, pv_factor, tol=1e-6):
    """Independent feasibility check of a schedule against every device's
    constraints; returns a list of violation descriptions (empty = feasible)."""
    pv_factor = np.asarray(pv_factor, dtype=float)
    T = len(pv_factor)
    problems = []
    for i, ev in enumerate(fleet.evs):
        p, q = schedule.ev_p[i], schedule.ev_q[i]
        window = set(ev.window_hours(T))
        if abs(p.sum() - ev.energy_kwh) > tol:
            problems.append(f"ev{i}: delivered {p.sum():.6f} != required {ev.energy_kwh}")
        for t in range(T):
            if t in window:
                if p[t] < -tol or p[t] > ev.max_rate_kw + tol:
                    problems.append(f"ev{i}: rate violation at hour {t}")
                if np.hypot(p[t], q[t]) > ev.charger_kva + tol:
                    problems.append(f"ev{i}: charger cone violation at hour {t}")
            elif abs(p[t]) > tol or abs(q[t]) > tol:
                problems.append(f"ev{i}: active outside window at hour {t}")
        soc = ev.initial_soc_kwh
        for t in sorted(window, key=lambda h: (h - ev.plug_hour) % T):
            soc += p[t]
            if soc < -tol or soc > ev.battery_kwh + tol:
                problems.append(f"ev{i}: SoC out of bounds after hour {t} ({soc:.6f})")
        if abs(soc - ev.battery_kwh) > tol:
            problems.append(f"ev{i}: not full at departure ({soc:.6f})")
    for i, pv in enumerate(fleet.pvs):
        p, q = schedule.pv_p[i], schedule.pv_q[i]
        for t in range(T):
            if p[t] < -tol or p[t] > pv_factor[t] * pv.capacity_kva + tol:
                problems.append(f"pv{i}: availability violation at hour {t}")
            if np.hypot(p[t], q[t]) > pv.capacity_kva + tol:
                problems.append(f"pv{i}: inverter cone violation at hour {t}")
    return problems


# standard experiment fleets ------------------------------------------------

COMMERCIAL_WINDOW = (9, 17)
RESIDENTIAL_WINDOW = (19, 7)
COMMERCIAL_KWH = 12.0
RESIDENTIAL_KWH = 18.0
PV_UNIT_KVA = 10.0


def standard_fleet(transformers, evs_per_node, pv_kva_per_node) -> DerFleet:
    """Penetration-cell fleet: the given EV count and PV kVA at each monitored
    transformer node, daytime windows at commercial nodes and overnight at
    residential ones, PV in 10-kVA rooftop units."""
    evs, pvs = [], []
    for tr in transformers:
        commercial = tr.label == "commercial"
        plug, depart = COMMERCIAL_WINDOW if commercial else RESIDENTIAL_WINDOW
        kwh = COMMERCIAL_KWH if commercial else RESIDENTIAL_KWH
        for _ in range(int(evs_per_node)):
            evs.append(Ev(node=tr.node, plug_hour=plug, depart_hour=depart, energy_kwh=kwh))
        remaining = float(pv_kva_per_node)
        while remaining > 1e-9:
            unit = min(PV_UNIT_KVA, remaining)
            pvs.append(Pv(node=tr.node, capacity_kva=unit))
            remaining -= unit
    return DerFleet(evs=tuple(evs), pvs=tuple(pvs))


def save_fleet(fleet: DerFleet, path):
    doc = {
        "evs": [asdict(ev) for ev in fleet.evs],
        "pvs": [asdict(pv) for pv in fleet.pvs],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_fleet(path) -> DerFleet:
    """Read a fleet file: ``{"evs": [...], "pvs": [...]}`` records keyed by
    the device dataclass field names; missing fields take the defaults."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FleetFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FleetFormatError(f"{path}: expected an object with evs/pvs lists")
    devices = {"evs": [], "pvs": []}
    for kind, cls in (("evs", Ev), ("pvs", Pv)):
        for n, rec in enumerate(doc.get(kind, [])):
            try:
                devices[kind].append(cls(**rec))
            except (TypeError, ValueError) as exc:
                raise FleetFormatError(f"{path}: {kind}[{n}]: {exc}") from exc
    return DerFleet(evs=tuple(devices["evs"]), pvs=tuple(devices["pvs"]))
