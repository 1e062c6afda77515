"""Component tables against the balance duals and hand-sized congestion cases."""

import csv

import numpy as np
import pytest

from dlmcflow.data import reference_feeder_path, reference_trajectories_path
from dlmcflow.feeder import (
    ExogenousTrajectories,
    Feeder,
    Line,
    VoltageLimits,
    build_scenario,
    load_feeder,
    load_trajectories,
)
from dlmcflow.fleet import DerFleet, Pv, bau_schedule, standard_fleet
from dlmcflow.opf import (
    PRICING_SOLVER_OPTS,
    build_full_opt,
    price_fixed_schedule,
    solve,
    transformer_l_price,
)
from dlmcflow.sensitivity import compute_sensitivities
from dlmcflow.unbundle import (
    COMPONENTS,
    UnbundleError,
    adjusted_slopes,
    decompose_transformer_component,
    export_price_signals,
    load_price_signals,
    read_components_csv,
    unbundle,
    write_components_csv,
)

EV_NODE = 104  # residential transformer; overloads under unmanaged charging


@pytest.fixture(scope="module")
def reference():
    return load_feeder(reference_feeder_path()), load_trajectories(reference_trajectories_path())


@pytest.fixture(scope="module")
def base_full(reference):
    feeder, traj = reference
    sol = solve(build_full_opt(build_scenario(feeder, traj, DerFleet(), "full", name="base")))
    sens = compute_sensitivities(sol)
    return sol, sens, unbundle(sol, sens)


@pytest.fixture(scope="module")
def six_ev_bau(reference):
    """Unmanaged 6-EV schedule priced as-is; overloads the residential unit."""
    feeder, traj = reference
    fleet = standard_fleet(feeder.transformers, 6, 0.0)
    case = build_scenario(feeder, traj, fleet, "full", name="6ev-bau")
    sol = price_fixed_schedule(case, bau_schedule(fleet, traj.pv_factor))
    return sol, compute_sensitivities(sol)


def test_base_case_additivity(base_full):
    sol, _, tab = base_full
    err, node, hour, side = tab.additivity_worst()
    assert err < 1e-4, (err, node, hour, side)
    # energy rows are the root prices passed through unchanged
    assert np.array_equal(tab.p["energy"], np.tile(sol.lam_p_root, (len(tab.nodes), 1)))
    assert np.array_equal(tab.q["energy"], np.tile(sol.lam_q_root, (len(tab.nodes), 1)))
    cell = tab.at(EV_NODE, 19, "P")
    assert cell["total"] == pytest.approx(sum(cell[name] for name in COMPONENTS))


def test_lossless_feeder_all_rent_components_vanish():
    f = Feeder(lines=(Line(0, 1, r=1e-6, x=1e-6),))
    traj = ExogenousTrajectories(
        lmp=[40.0, 45.0], load_p={1: [0.2, 0.3]}, load_q={1: [0.05, 0.05]}
    )
    # at these impedances the loss incentive barely closes the cone; the
    # tighter gap keeps the residual inside the sensitivity gate
    case = build_scenario(f, traj, DerFleet(), "full")
    sol = solve(build_full_opt(case), solver_opts=PRICING_SOLVER_OPTS)
    tab = unbundle(sol)
    for side in (tab.p, tab.q):
        for name in COMPONENTS:
            if name != "energy":
                assert np.abs(side[name]).max() < 1e-3, name
    assert np.allclose(sol.lam_p[0], traj.lmp, atol=1e-3)
    assert np.allclose(tab.total_p[0], sol.lam_p_root, atol=2e-3)


def test_voltage_cap_rent_on_pv_export():
    # enough PV behind one line that the upper voltage bound stops export
    f = Feeder(
        lines=(Line(0, 1, r=0.03, x=0.01),),
        limits=VoltageLimits.from_magnitudes(0.9, 1.005),
    )
    traj = ExogenousTrajectories(lmp=[200.0], pv_factor=[1.0], load_p={1: [0.0]})
    case = build_scenario(f, traj, DerFleet(pvs=(Pv(node=1, capacity_kva=400.0),)), "full")
    sol = solve(build_full_opt(case))
    assert sol.v[0, 0] == pytest.approx(f.limits.v_max, abs=1e-6)
    assert sol.mu_up[0, 0] > 100.0
    assert np.abs(sol.mu_lo).max() < 1e-6
    tab = unbundle(sol)
    # extra demand at the constrained node relieves the bound: negative rent
    assert tab.at(1, 0, "P")["voltage"] < -50.0
    assert tab.additivity_worst()[0] < 1e-4


def test_ampacity_cap_rent_on_capped_line():
    # PV exports through a current-capped segment; reactive load is larger
    # than the inverter can cover so the root price stays off its kink
    f = Feeder(
        lines=(
            Line(0, 1, r=0.02, x=0.02),
            Line(1, 2, r=0.02, x=0.02, ampacity=0.04),
        ),
        limits=VoltageLimits.from_magnitudes(0.5, 1.5),
    )
    traj = ExogenousTrajectories(
        lmp=[100.0], pv_factor=[1.0], load_p={2: [0.0]}, load_q={2: [0.30]}
    )
    case = build_scenario(f, traj, DerFleet(pvs=(Pv(node=2, capacity_kva=300.0),)), "full")
    sol = solve(build_full_opt(case))
    i2 = f.index[2]
    assert sol.l[i2, 0] == pytest.approx(0.04, abs=1e-6)
    assert sol.nu[2][0] > 50.0
    tab = unbundle(sol)
    # with the line in reverse flow, demand below the cap relaxes it while
    # reactive demand loads it further
    assert tab.at(2, 0, "P")["ampacity"] < -20.0
    assert tab.at(2, 0, "Q")["ampacity"] > 5.0
    # upstream demand reaches the capped line only through voltage: lower v_1
    # means more current for the same power, so a small positive rent
    up = tab.at(1, 0, "P")["ampacity"]
    assert up == pytest.approx(2 * 0.02 * 0.04 * sol.nu[2][0], rel=0.05)
    assert tab.additivity_worst()[0] < 1e-4


def test_six_ev_overload_prices_unbundle(six_ev_bau):
    sol, sens = six_ev_bau
    tab = unbundle(sol, sens)
    assert tab.additivity_worst()[0] < 1e-4
    # the overloaded hour is dominated by the degradation component
    cell = tab.at(EV_NODE, 20, "P")
    assert cell["transformer"] > 0.9 * cell["total"] > 0


def test_transformer_scope_colocated(six_ev_bau):
    sol, sens = six_ev_bau
    full = unbundle(sol, sens)
    own = unbundle(sol, sens, transformer_scope="colocated")
    feeder = sol.case.feeder
    idx = feeder.index
    monitored = set(feeder.transformer_by_node)
    for j in feeder.non_root:
        if j not in monitored:
            assert np.array_equal(own.p["transformer"][idx[j]], np.zeros(24))
    # remote coupling via the voltage profile is real money at overload hours
    assert full.p["transformer"][idx[12], 20] > 10.0
    a, c = full.at(EV_NODE, 20, "P")["transformer"], own.at(EV_NODE, 20, "P")["transformer"]
    assert abs(a - c) < 0.01 * abs(a)
    # which is exactly why the colocated table cannot satisfy additivity
    assert own.additivity_worst()[0] > 1e-3


def test_reverse_flow_reverses_component_sign(reference):
    feeder, traj = reference
    fleet = standard_fleet(feeder.transformers, 0, 60.0)
    case = build_scenario(feeder, traj, fleet, "full", name="60pv-bau")
    sol = price_fixed_schedule(case, bau_schedule(fleet, traj.pv_factor))
    tab = unbundle(sol)
    i = feeder.index[EV_NODE]
    assert sol.P[i, 12] < 0  # midday export through the residential unit
    assert tab.p["transformer"][i, 12] < -100.0
    assert tab.additivity_worst()[0] < 1e-4


def test_decomposition_matches_component(six_ev_bau):
    sol, sens = six_ev_bau
    feeder = sol.case.feeder
    iy = feeder.index[EV_NODE]
    pi = transformer_l_price(sol, EV_NODE) / feeder.base_mva
    for t in (18, 20, 23):
        d = decompose_transformer_component(sol, sens, EV_NODE, EV_NODE, t)
        direct = pi[t] * sens.x_l[t, 0, iy, iy]
        assert d.total == pytest.approx(direct, rel=1e-6)
        assert d.taus.size == 23 - t
        if d.coeffs.size > 1:
            assert np.allclose(d.coeffs[1:] / d.coeffs[:-1], 0.75, rtol=1e-12)
        assert d.subsequent_hours == pytest.approx(d.terms.sum())


def test_decomposition_reactive_kind(six_ev_bau):
    sol, sens = six_ev_bau
    feeder = sol.case.feeder
    iy = feeder.index[EV_NODE]
    d = decompose_transformer_component(sol, sens, EV_NODE, EV_NODE, 20, kind="reactive")
    direct = transformer_l_price(sol, EV_NODE)[20] / feeder.base_mva * sens.x_l[20, 1, iy, iy]
    assert d.total == pytest.approx(direct, rel=1e-6)


def test_same_hour_ratio_in_both_constant_modes(six_ev_bau):
    sol, sens = six_ev_bau
    model = decompose_transformer_component(sol, sens, EV_NODE, EV_NODE, 20)
    classic = decompose_transformer_component(
        sol, sens, EV_NODE, EV_NODE, 20, constants="classic"
    )
    for d in (model, classic):
        assert d.same_hour_winding / d.same_hour_top_oil == pytest.approx(2.18, abs=0.01)
    # the legacy coefficients rescale the level, not the split
    assert classic.same_hour_winding != pytest.approx(model.same_hour_winding, rel=1e-3)
    assert classic.subsequent_hours == model.subsequent_hours
    with pytest.raises(ValueError):
        decompose_transformer_component(sol, sens, EV_NODE, EV_NODE, 20, constants="legacy")


def test_final_hour_has_no_subsequent_term(six_ev_bau):
    sol, sens = six_ev_bau
    d = decompose_transformer_component(sol, sens, EV_NODE, EV_NODE, 23)
    assert d.taus.size == 0
    assert d.subsequent_hours == 0.0
    assert d.beyond_horizon > 0.0


def test_pre_overload_hour_prices_the_future(six_ev_bau):
    # before the evening overload the hot hours ahead carry the whole price
    sol, sens = six_ev_bau
    d = decompose_transformer_component(sol, sens, EV_NODE, EV_NODE, 18)
    same = abs(d.same_hour_winding) + abs(d.same_hour_top_oil)
    assert d.subsequent_hours > 1000.0
    assert d.subsequent_hours > 100.0 * max(same, 1e-12)


def test_adjusted_slopes_are_a_tangent_mix(base_full):
    sol, _, _ = base_full
    for y in sol.thermal_duals:
        alpha = adjusted_slopes(sol, y)
        slopes = np.asarray(sol.aging.slopes)
        assert np.all(alpha > -1e-9)
        assert alpha.max() <= slopes.max() + 1e-9
        # epigraph duals of one variable can never outweigh its cost
        c = sol.case.feeder.transformer_by_node[y].params.cost_per_lol_hour
        assert np.all(sol.thermal_duals[y].xi.sum(axis=0) <= c + 1e-6)


def test_components_csv_roundtrip(tmp_path, six_ev_bau):
    sol, sens = six_ev_bau
    tab = unbundle(sol, sens)
    path = tmp_path / "components.csv"
    write_components_csv(tab, path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    assert header == [
        "node", "hour", "side",
        "energy", "loss_p", "loss_q", "voltage", "ampacity", "transformer", "total",
    ]
    back = read_components_csv(path)
    assert len(back) == 2 * len(tab.nodes) * 24
    i = tab.nodes.index(EV_NODE)
    for name in COMPONENTS:
        assert back[(EV_NODE, 20, "P")][name] == tab.p[name][i, 20]
        assert back[(EV_NODE, 20, "Q")][name] == tab.q[name][i, 20]
    assert back[(EV_NODE, 20, "P")]["total"] == tab.total_p[i, 20]


def test_price_signal_roundtrip(tmp_path, base_full):
    sol, _, _ = base_full
    path = tmp_path / "prices.csv"
    export_price_signals(sol, path)
    prices = load_price_signals(path)
    feeder = sol.case.feeder
    assert set(prices) == {0, *feeder.non_root}
    assert np.array_equal(prices[0][0], sol.lam_p_root)
    assert np.array_equal(prices[0][1], sol.lam_q_root)
    i = feeder.index[EV_NODE]
    assert np.array_equal(prices[EV_NODE][0], sol.lam_p[i])
    assert np.array_equal(prices[EV_NODE][1], sol.lam_q[i])


def test_corrupted_duals_refused():
    f = Feeder(lines=(Line(0, 1, r=0.01, x=0.02),))
    traj = ExogenousTrajectories(lmp=[40.0], load_p={1: [0.2]}, load_q={1: [0.05]})
    sol = solve(build_full_opt(build_scenario(f, traj, DerFleet(), "full")))
    sol.lam_p[0, 0] += 5.0
    with pytest.raises(UnbundleError, match="component sum misses"):
        unbundle(sol)
    with pytest.raises(ValueError, match="transformer_scope"):
        unbundle(sol, transformer_scope="own")
