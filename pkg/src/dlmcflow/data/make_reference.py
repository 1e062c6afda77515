"""Generate the shipped reference feeder and trajectory files.

Synthetic medium-voltage feeder: a 24-segment trunk with six 13-node laterals,
plus two monitored 30-kVA service transformers at the ends of two distant
laterals, one serving a commercial load (p.f. 0.85) and one a residential load
(p.f. 0.95).  Run as a module to regenerate the files in place:

    python3 -m dlmcflow.data.make_reference
"""

import math
import pathlib

import numpy as np

from ..feeder import (
    ExogenousTrajectories,
    Feeder,
    Line,
    Transformer,
    VoltageLimits,
    save_feeder,
    save_trajectories,
)
from ..thermal import TransformerThermalParams

BASE_KVA = 1000.0
BASE_KV = 13.8

TRUNK_LEN = 24
TRUNK_R, TRUNK_X = 0.0025, 0.0035
LATERAL_LEN = 13
LATERAL_R, LATERAL_X = 0.003, 0.0025
TAPS = (4, 8, 12, 16, 20, 24)
XFMR_R, XFMR_X = 0.05, 0.08
XFMR_KVA = 30.0
BG_KVA = 6.0

# Hourly shapes (percent of nameplate): commercial peaks midday, residential
# peaks in the evening.
COMMERCIAL_PCT = [14, 13, 13, 13, 14, 16, 22, 35, 55, 70, 80, 85,
                  88, 90, 88, 84, 76, 60, 45, 35, 28, 22, 18, 15]
RESIDENTIAL_PCT = [30, 26, 24, 23, 23, 25, 30, 38, 45, 42, 38, 36,
                   35, 36, 38, 42, 50, 62, 78, 90, 88, 75, 55, 40]

# Root real-power price [$/MWh]: morning ramp, evening peak, late-night valley.
LMP = [25.59, 25.80, 26.20, 27.00, 28.00, 30.00, 33.00, 36.00, 38.00, 40.00,
       42.00, 44.00, 45.00, 46.00, 47.00, 48.00, 49.00, 52.00, 53.48, 50.00,
       48.00, 40.00, 26.50, 25.60]

AMBIENT = [24.5, 24.0, 23.5, 23.0, 22.5, 22.2, 22.0, 22.5, 24.0, 26.0, 28.0,
           29.5, 31.0, 32.0, 32.5, 32.2, 31.5, 30.5, 29.0, 28.0, 27.0, 26.2,
           25.5, 25.0]

PV_FACTOR = [0, 0, 0, 0, 0, 0, 0.05, 0.15, 0.35, 0.55, 0.72, 0.85,
             0.92, 0.90, 0.82, 0.70, 0.52, 0.30, 0.10, 0, 0, 0, 0, 0]


def build_feeder() -> Feeder:
    lines = []
    for t in range(1, TRUNK_LEN + 1):
        lines.append(Line(from_node=t - 1, to_node=t, r=TRUNK_R, x=TRUNK_X))
    next_id = TRUNK_LEN + 1
    lateral_ends = []
    for tap in TAPS:
        prev = tap
        for _ in range(LATERAL_LEN):
            lines.append(Line(from_node=prev, to_node=next_id, r=LATERAL_R, x=LATERAL_X))
            prev = next_id
            next_id += 1
        lateral_ends.append(prev)
    nominal_l = (XFMR_KVA / BASE_KVA) ** 2
    params = TransformerThermalParams(
        loss_ratio=5.0,
        top_oil_rise=55.0,
        hotspot_rise=25.0,
        decay=0.75,
        cost_per_lol_hour=1.0,
        nominal_l=nominal_l,
    )
    commercial_node, residential_node = next_id, next_id + 1
    # ends of the second and fifth laterals: far apart along the trunk
    lines.append(Line(lateral_ends[1], commercial_node, r=XFMR_R, x=XFMR_X))
    lines.append(Line(lateral_ends[4], residential_node, r=XFMR_R, x=XFMR_X))
    transformers = (
        Transformer(node=commercial_node, label="commercial", params=params),
        Transformer(node=residential_node, label="residential", params=params),
    )
    return Feeder(
        lines=tuple(lines),
        transformers=transformers,
        base_kva=BASE_KVA,
        base_kv=BASE_KV,
        limits=VoltageLimits.from_magnitudes(0.95, 1.05),
        labels={0: "root", commercial_node: "commercial", residential_node: "residential"},
    )


def build_trajectories(feeder: Feeder) -> ExogenousTrajectories:
    com = np.asarray(COMMERCIAL_PCT) / 100.0
    res = np.asarray(RESIDENTIAL_PCT) / 100.0
    load_p, load_q = {}, {}

    def add_load(node, kva, shape, pf):
        s = kva * shape / BASE_KVA
        load_p[node] = s * pf
        load_q[node] = s * math.sin(math.acos(pf))

    xfmr_nodes = set(feeder.transformer_by_node)
    lateral_nodes = [n for n in feeder.order if n > TRUNK_LEN and n not in xfmr_nodes]
    for k, node in enumerate(lateral_nodes):
        if k % 2 == 0:
            add_load(node, BG_KVA, com, 0.85)
        else:
            add_load(node, BG_KVA, res, 0.95)
    for tr in feeder.transformers:
        if tr.label == "commercial":
            add_load(tr.node, XFMR_KVA, com, 0.85)
        else:
            add_load(tr.node, XFMR_KVA, res, 0.95)
    return ExogenousTrajectories(
        lmp=np.asarray(LMP),
        q_price=0.10 * np.asarray(LMP),
        ambient=np.asarray(AMBIENT),
        pv_factor=np.asarray(PV_FACTOR),
        load_p=load_p,
        load_q=load_q,
    )


def main():
    here = pathlib.Path(__file__).parent
    feeder = build_feeder()
    save_feeder(feeder, here / "reference_feeder.json")
    save_trajectories(build_trajectories(feeder), here / "reference_trajectories.csv")
    print(f"wrote reference feeder ({len(feeder.order)} nodes) and trajectories")


if __name__ == "__main__":
    main()
