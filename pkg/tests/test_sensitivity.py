"""Sensitivity system against hand solves and central differences."""

import csv
from types import SimpleNamespace

import numpy as np
import pytest

from dlmcflow.data import reference_feeder_path, reference_trajectories_path
from dlmcflow.feeder import Feeder, Line, VoltageLimits, build_scenario, load_feeder, load_trajectories
from dlmcflow.fleet import DerFleet
from dlmcflow.opf import build_full_opt, solve
from dlmcflow.powerflow import solve_distflow
from dlmcflow.sensitivity import (
    SensitivityError,
    assemble_system,
    compute_sensitivities,
    finite_difference_check,
    solve_block,
)

R, X = 0.03, 0.01


def small_feeder(lines):
    return Feeder(lines=tuple(lines), limits=VoltageLimits.from_magnitudes(0.5, 1.5))


def two_bus():
    return small_feeder([Line(from_node=0, to_node=1, r=R, x=X)])


def synthetic_solution(feeder, p, q):
    """Exact-manifold operating point packaged like a solved program."""
    res = solve_distflow(feeder, np.asarray(p, float), np.asarray(q, float))
    col = lambda a: np.asarray(a, float).reshape(-1, 1)
    v0 = feeder.v_root**2
    vup = np.array(
        [v0 if feeder.parent(j) == 0 else res.v[feeder.index[feeder.parent(j)]] for j in feeder.non_root]
    )
    return SimpleNamespace(
        case=SimpleNamespace(feeder=feeder),
        P=col(res.P),
        Q=col(res.Q),
        v=col(res.v),
        l=col(res.l),
        vup=col(vup),
        cone_residuals=np.zeros((feeder.n, 1)),
        pnet=col(p),
        qnet=col(q),
    )


def test_two_bus_matrix_rows():
    sol = synthetic_solution(two_bus(), [0.2], [0.05])
    A = assemble_system(sol, 0).matrix.toarray()
    P, Q = sol.P[0, 0], sol.Q[0, 0]
    assert A.shape == (4, 4)
    assert np.allclose(A[0], [1.0, 0.0, 0.0, -R])
    assert np.allclose(A[1], [0.0, 1.0, 0.0, -X])
    assert np.allclose(A[2], [2 * R, 2 * X, 1.0, -(R**2 + X**2)])
    # current row: [-2P, -2Q, 0, v_up]; the parent is the root, so no
    # voltage column and the diagonal carries the fixed root voltage
    assert np.allclose(A[3], [-2 * P, -2 * Q, 0.0, 1.0])


def test_chain_balance_block_is_bidiagonal():
    chain = small_feeder(
        [Line(from_node=0, to_node=1, r=R, x=X), Line(from_node=1, to_node=2, r=R, x=X)]
    )
    sol = synthetic_solution(chain, [0.1, 0.1], [0.0, 0.0])
    A = assemble_system(sol, 0).matrix.toarray()
    assert np.allclose(A[:2, :2], [[1.0, -1.0], [0.0, 1.0]])
    assert np.allclose(A[2:4, 2:4], [[1.0, -1.0], [0.0, 1.0]])  # reactive block


def test_flat_point_hand_solution():
    sol = synthetic_solution(two_bus(), [0.0], [0.0])
    sys0 = assemble_system(sol, 0)
    real = solve_block(sys0, 1, "real")
    assert real.x_p[0] == pytest.approx(1.0, abs=1e-12)
    assert real.x_q[0] == pytest.approx(0.0, abs=1e-12)
    assert real.x_l[0] == pytest.approx(0.0, abs=1e-12)
    assert real.x_v[0] == pytest.approx(-2 * R, abs=1e-12)
    reac = solve_block(sys0, 1, "reactive")
    assert reac.x_q[0] == pytest.approx(1.0, abs=1e-12)
    assert reac.x_p[0] == pytest.approx(0.0, abs=1e-12)
    assert reac.x_v[0] == pytest.approx(-2 * X, abs=1e-12)


def test_flat_point_voltage_follows_common_path():
    # Y feeder: 0-1 trunk, branches 1-2 and 1-3
    y = small_feeder(
        [
            Line(from_node=0, to_node=1, r=0.02, x=0.01),
            Line(from_node=1, to_node=2, r=0.05, x=0.02),
            Line(from_node=1, to_node=3, r=0.07, x=0.03),
        ]
    )
    sol = synthetic_solution(y, np.zeros(3), np.zeros(3))
    blk = solve_block(assemble_system(sol, 0), 2, "real")
    i = y.index
    # own node: full path; sibling: shared trunk only
    assert blk.x_v[i[2]] == pytest.approx(-2 * (0.02 + 0.05), abs=1e-12)
    assert blk.x_v[i[3]] == pytest.approx(-2 * 0.02, abs=1e-12)
    assert blk.x_v[i[1]] == pytest.approx(-2 * 0.02, abs=1e-12)


def test_reverse_flow_current_sensitivity_negative():
    sol = synthetic_solution(two_bus(), [-0.1], [0.02])
    blk = solve_block(assemble_system(sol, 0), 1, "real")
    assert blk.x_l[0] < 0.0


def test_rejects_root_and_bad_kind():
    sol = synthetic_solution(two_bus(), [0.1], [0.0])
    sys0 = assemble_system(sol, 0)
    with pytest.raises(ValueError):
        solve_block(sys0, 0, "real")
    with pytest.raises(ValueError):
        solve_block(sys0, 1, "apparent")
    with pytest.raises(ValueError):
        solve_block(sys0, 99, "real")


def test_refuses_loose_cone():
    sol = synthetic_solution(two_bus(), [0.1], [0.0])
    sol.cone_residuals = np.full((1, 1), 1e-3)
    with pytest.raises(SensitivityError, match="cone row loose"):
        assemble_system(sol, 0)


def test_central_difference_convergence_is_second_order():
    sol = synthetic_solution(two_bus(), [0.3], [0.1])
    case = SimpleNamespace(feeder=sol.case.feeder)
    coarse = finite_difference_check(case, sol, 0, 1, "real", h=1e-3)
    fine = finite_difference_check(case, sol, 0, 1, "real", h=5e-4)
    assert coarse < 1e-4
    assert 2.0 < coarse / fine < 8.0


@pytest.fixture(scope="module")
def reference_solution():
    feeder = load_feeder(reference_feeder_path())
    traj = load_trajectories(reference_trajectories_path())
    case = build_scenario(feeder, traj, DerFleet(), "full")
    return case, solve(build_full_opt(case))


def test_reference_matches_finite_differences(reference_solution):
    case, sol = reference_solution
    rng = np.random.default_rng(7)
    nodes = case.feeder.non_root
    for _ in range(6):
        node = int(nodes[rng.integers(len(nodes))])
        t = int(rng.integers(24))
        kind = ("real", "reactive")[rng.integers(2)]
        assert finite_difference_check(case, sol, t, node, kind) <= 1e-4


def test_loss_identity_and_batch_consistency(reference_solution):
    case, sol = reference_solution
    feeder = case.feeder
    sens = compute_sensitivities(sol)
    r = np.array([feeder.line_into(j).r for j in feeder.non_root])
    rng = np.random.default_rng(11)
    for _ in range(8):
        node = int(feeder.non_root[rng.integers(feeder.n)])
        t = int(rng.integers(24))
        kind = ("real", "reactive")[rng.integers(2)]
        k = 0 if kind == "real" else 1
        blk = sens.block(t, node, kind)
        single = solve_block(assemble_system(sol, t), node, kind)
        assert np.allclose(blk.x_l, single.x_l, atol=1e-12)
        assert np.allclose(blk.x_v, single.x_v, atol=1e-12)
        # marginal losses: sum r*dl = d(root import)/d(demand) - direct share
        direct = 1.0 if kind == "real" else 0.0
        i = feeder.index[node]
        assert r @ blk.x_l == pytest.approx(sens.droot_p[t, k, i] - direct, abs=1e-9)


def test_block_csv_export(tmp_path, reference_solution):
    case, sol = reference_solution
    blk = solve_block(assemble_system(sol, 12), case.feeder.non_root[0], "real")
    out = tmp_path / "block.csv"
    blk.to_csv(case.feeder, out)
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["node", "dP", "dQ", "dv", "dl"]
    assert len(rows) == case.feeder.n + 1
    first = {int(r[0]): float(r[1]) for r in rows[1:]}
    assert first[case.feeder.non_root[0]] == pytest.approx(blk.x_p[0])
