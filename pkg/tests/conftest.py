"""Shared small-feeder fixtures for runner and CLI tests."""

import numpy as np
import pytest

from dlmcflow.feeder import (
    ExogenousTrajectories,
    Feeder,
    Line,
    Transformer,
    save_feeder,
    save_trajectories,
)
from dlmcflow.runner import MatrixConfig, run_matrix
from dlmcflow.thermal import TransformerThermalParams


def toy_feeder():
    """Two-segment feeder with one monitored 30-kVA service transformer."""
    params = TransformerThermalParams(
        loss_ratio=5.0, top_oil_rise=55.0, hotspot_rise=25.0, nominal_l=9e-4
    )
    return Feeder(
        lines=(Line(0, 1, r=0.01, x=0.02), Line(1, 2, r=0.05, x=0.08)),
        transformers=(Transformer(node=2, label="residential", params=params),),
    )


def toy_trajectories():
    T = 24
    hours = np.arange(T)
    lmp = 30 + 15 * np.sin(np.pi * (hours - 4) / 12) ** 2
    rho = np.clip(np.sin(np.pi * (hours - 6) / 13), 0, None)
    load = 0.004 + 0.014 * np.exp(-0.5 * ((hours - 19) / 3.0) ** 2)
    return ExogenousTrajectories(
        lmp=lmp, ambient=np.full(T, 25.0), pv_factor=rho,
        load_p={2: load}, load_q={2: 0.3 * load},
    )


@pytest.fixture(scope="session")
def toy_inputs(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy_inputs")
    feeder_path, traj_path = d / "feeder.json", d / "trajectories.csv"
    save_feeder(toy_feeder(), feeder_path)
    save_trajectories(toy_trajectories(), traj_path)
    return str(feeder_path), str(traj_path)


@pytest.fixture(scope="session")
def toy_matrix(toy_inputs, tmp_path_factory):
    """A solved 2 x 2 x 4 matrix (base shared), reused read-only by tests."""
    feeder_path, traj_path = toy_inputs
    out = tmp_path_factory.mktemp("toy_matrix")
    config = MatrixConfig(
        feeder=feeder_path, trajectories=traj_path, out_dir=str(out),
        evs=(0, 2), pv_kva=(0.0, 15.0),
    )
    index = run_matrix(config)
    return out, index
