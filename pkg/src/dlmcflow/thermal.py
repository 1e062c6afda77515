"""Transformer thermal dynamics, insulation aging, and their convex-program blocks.

Top-oil temperature follows a first-order lag of ambient plus a load-dependent
rise; the hot-spot temperature (HST) adds a winding rise proportional to the
squared current.  Insulation aging is the standard Arrhenius acceleration
factor, approximated for optimization purposes by a convex piecewise-linear
upper envelope (tangents to the Arrhenius curve).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

# Arrhenius reference: aging factor 1.0 at 110 degC hot-spot.
_ARRHENIUS_B = 15000.0
_ARRHENIUS_REF_K = 383.0  # 110 degC in kelvin


def arrhenius_aging(hst):
    """Exact insulation aging acceleration factor at hot-spot temperature ``hst`` [degC]."""
    hst = np.asarray(hst, dtype=float)
    return np.exp(_ARRHENIUS_B / _ARRHENIUS_REF_K - _ARRHENIUS_B / (hst + 273.0))


def _arrhenius_slope(hst):
    return arrhenius_aging(hst) * _ARRHENIUS_B / (hst + 273.0) ** 2


@dataclass(frozen=True)
class TransformerThermalParams:
    """Thermal and degradation-cost parameters of one transformer.

    loss_ratio        ratio of rated load losses to no-load losses (dimensionless)
    top_oil_rise      top-oil rise over ambient at rated load [degC]
    hotspot_rise      hot-spot rise over top-oil at rated load [degC]
    decay             per-hour memory of the top-oil state (0 < decay < 1)
    cost_per_lol_hour degradation cost per hour of loss-of-life [$/h]
    nominal_l         squared current at nameplate load [pu]
    """

    loss_ratio: float
    top_oil_rise: float
    hotspot_rise: float
    decay: float = 0.75
    cost_per_lol_hour: float = 1.0
    nominal_l: float = 1.0

    def __post_init__(self):
        if self.loss_ratio <= 0:
            raise ValueError("loss_ratio must be positive")
        if self.top_oil_rise <= 0 or self.hotspot_rise <= 0:
            raise ValueError("temperature rises must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.cost_per_lol_hour < 0:
            raise ValueError("cost_per_lol_hour must be nonnegative")
        if self.nominal_l <= 0:
            raise ValueError("nominal_l must be positive")

    @property
    def top_oil_gain(self):
        """Same-hour top-oil temperature response to a unit increase of squared current [degC/pu]."""
        r = self.loss_ratio
        return (1.0 - self.decay) * self.top_oil_rise * r / ((1.0 + r) * self.nominal_l)

    @property
    def winding_gain(self):
        """Same-hour hot-spot-over-top-oil response to a unit increase of squared current [degC/pu]."""
        return self.hotspot_rise / self.nominal_l


# Fixed same-hour coefficients used by the "classic" reporting mode of the
# intertemporal decomposition (per unit of l/nominal_l, degC).
CLASSIC_TOP_OIL_COEFF = 55.0 / 6.0
CLASSIC_WINDING_COEFF = 20.0


@dataclass(frozen=True)
class AgingPwl:
    """Convex piecewise-linear underestimate of the Arrhenius aging curve.

    The envelope is max(0, max_k(intercept_k + slope_k * hst)); slopes are
    strictly increasing.  ``breakpoints`` are the hot-spot temperatures where
    the active segment changes (length K-1).
    """

    slopes: tuple = ()
    intercepts: tuple = ()
    breakpoints: tuple = ()

    @property
    def segments(self):
        return len(self.slopes)

    def __post_init__(self):
        s = np.asarray(self.slopes)
        if len(s) < 2:
            raise ValueError("need at least two segments")
        if not np.all(np.diff(s) > 0):
            raise ValueError("slopes must be strictly increasing")
        if len(self.intercepts) != len(s):
            raise ValueError("intercepts/slopes length mismatch")

    @classmethod
    def fit(cls, segments=8, slope_lo=0.009, slope_hi=22.37):
        """Calibrate ``segments`` tangents to the Arrhenius curve.

        Tangent points are chosen so segment slopes are geometrically spaced
        between ``slope_lo`` and ``slope_hi`` (hit exactly at both ends).
        """
        targets = np.geomspace(slope_lo, slope_hi, segments)
        slopes, intercepts, points = [], [], []
        for s in targets:
            # Newton solve for the tangent point with slope s.
            theta = 110.0
            for _ in range(60):
                f = _arrhenius_slope(theta) - s
                # d slope / d theta
                df = _arrhenius_slope(theta) * (
                    _ARRHENIUS_B / (theta + 273.0) ** 2 - 2.0 / (theta + 273.0)
                )
                step = f / df
                theta -= step
                if abs(step) < 1e-12:
                    break
            val = float(arrhenius_aging(theta))
            slopes.append(float(_arrhenius_slope(theta)))
            intercepts.append(val - slopes[-1] * theta)
            points.append(theta)
        bps = [
            (intercepts[k] - intercepts[k + 1]) / (slopes[k + 1] - slopes[k])
            for k in range(segments - 1)
        ]
        return cls(tuple(slopes), tuple(intercepts), tuple(bps))

    def evaluate(self, hst):
        """Aging acceleration factor of the envelope at ``hst`` [degC]."""
        hst = np.asarray(hst, dtype=float)
        vals = np.asarray(self.intercepts)[:, None] + np.asarray(self.slopes)[:, None] * hst.ravel()
        out = np.maximum(vals.max(axis=0), 0.0)
        return out.reshape(hst.shape) if hst.shape else float(out[0])

    def active_slope(self, hst):
        """Slope of the binding segment at ``hst`` (0 where the envelope is clipped at zero)."""
        vals = np.asarray(self.intercepts) + np.asarray(self.slopes) * float(hst)
        k = int(np.argmax(vals))
        if vals[k] <= 0.0:
            return 0.0
        return float(self.slopes[k])

    def to_csv(self, path):
        """Write the segment table for inspection."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "slope", "intercept", "upper_breakpoint"])
            for k in range(self.segments):
                bp = self.breakpoints[k] if k < len(self.breakpoints) else ""
                w.writerow([k + 1, repr(self.slopes[k]), repr(self.intercepts[k]), bp])


def aging_factor(aging: AgingPwl, hst):
    """Piecewise-linear aging acceleration factor at hot-spot temperature ``hst``."""
    return aging.evaluate(hst)


@dataclass(frozen=True)
class ThermalTrajectory:
    """Simulated temperatures and aging of one transformer over a daily cycle.

    ``top_oil`` has T+1 entries (state at hour boundaries 0..T); ``hotspot``,
    ``aging`` and ``lol_per_hour`` have T entries (end-of-hour values).
    """

    top_oil: np.ndarray
    hotspot: np.ndarray
    aging: np.ndarray

    @property
    def lol(self):
        """Daily loss of life in equivalent hours."""
        return float(np.sum(self.aging))


def _drive(params: TransformerThermalParams, load, ambient):
    """Exogenous drive term of the top-oil recurrence: (1-a)*(ambient + rated-rise mix)."""
    r = params.loss_ratio
    rise = params.top_oil_rise * (1.0 + r * load / params.nominal_l) / (1.0 + r)
    return (1.0 - params.decay) * (np.asarray(ambient, dtype=float) + rise)


def solve_periodic_initial(params: TransformerThermalParams, aging: AgingPwl, load, ambient):
    """Initial top-oil temperature whose forward simulation closes the daily cycle.

    The recurrence is affine with contraction ``decay``; the periodic initial
    state is theta0 = sum(a^(T-1-t) * drive_t) / (1 - a^T).
    """
    load = np.asarray(load, dtype=float)
    T = len(load)
    a = params.decay
    d = _drive(params, load, ambient)
    weights = a ** np.arange(T - 1, -1, -1, dtype=float)
    return float(np.dot(weights, d) / (1.0 - a**T))


def simulate_temperatures(
    params: TransformerThermalParams,
    aging: AgingPwl,
    load,
    ambient,
    initial_top_oil=None,
) -> ThermalTrajectory:
    """Run the thermal recurrence over one cycle.

    ``load``: squared-current trajectory [pu], length T.  ``ambient``: degC,
    length T.  ``initial_top_oil=None`` requests the periodic fixed point.
    """
    load = np.asarray(load, dtype=float)
    ambient = np.asarray(ambient, dtype=float)
    if load.shape != ambient.shape:
        raise ValueError("load and ambient trajectories must have equal length")
    T = len(load)
    if initial_top_oil is None:
        initial_top_oil = solve_periodic_initial(params, aging, load, ambient)
    a = params.decay
    d = _drive(params, load, ambient)
    top_oil = np.empty(T + 1)
    top_oil[0] = initial_top_oil
    for t in range(T):
        top_oil[t + 1] = a * top_oil[t] + d[t]
    hotspot = top_oil[1:] + params.hotspot_rise * load / params.nominal_l
    factors = aging.evaluate(hotspot)
    return ThermalTrajectory(top_oil=top_oil, hotspot=hotspot, aging=factors)


@dataclass
class ThermalBlock:
    """Convex-program variables and constraints of one transformer's thermal model."""

    top_oil: cp.Variable
    hotspot: cp.Variable
    aging: cp.Variable
    constraints: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    cost: object = 0.0


def thermal_constraint_blocks(
    params: TransformerThermalParams,
    aging: AgingPwl,
    load_expr,
    ambient,
    periodic=True,
) -> ThermalBlock:
    """Emit the linear thermal constraints over a squared-current expression.

    Per hour: the top-oil recurrence, the HST definition, one epigraph row per
    aging segment, aging nonnegativity; plus one periodicity equality whose
    dual prices degradation carried past the horizon.  The returned ``cost``
    is cost_per_lol_hour * sum(aging).
    """
    ambient = np.asarray(ambient, dtype=float)
    T = len(ambient)
    a = params.decay
    r = params.loss_ratio
    top_oil = cp.Variable(T + 1, name="top_oil")
    hotspot = cp.Variable(T, name="hotspot")
    factor = cp.Variable(T, name="aging")
    blk = ThermalBlock(top_oil=top_oil, hotspot=hotspot, aging=factor)

    drive_const = (1.0 - a) * (ambient + params.top_oil_rise / (1.0 + r))
    load_gain = (1.0 - a) * params.top_oil_rise * r / ((1.0 + r) * params.nominal_l)

    def add(tag, con, rows):
        blk.constraints.append(con)
        blk.tags[tag] = con
        blk.counts[tag] = rows

    add(
        "to_recurrence",
        top_oil[1:] == a * top_oil[:-1] + drive_const + load_gain * load_expr,
        T,
    )
    add(
        "hst_def",
        hotspot == top_oil[1:] + (params.hotspot_rise / params.nominal_l) * load_expr,
        T,
    )
    slopes = np.asarray(aging.slopes)[:, None]
    intercepts = np.asarray(aging.intercepts)[:, None]
    k = aging.segments
    add(
        "aging_seg",
        cp.reshape(factor, (1, T), order="C")
        >= intercepts + slopes @ cp.reshape(hotspot, (1, T), order="C"),
        k * T,
    )
    add("aging_nonneg", factor >= 0, T)
    if periodic:
        add("periodicity", top_oil[T] == top_oil[0], 1)
    blk.cost = params.cost_per_lol_hour * cp.sum(factor)
    return blk
