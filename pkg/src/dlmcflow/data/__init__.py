"""Shipped reference feeder and daily trajectory data."""

from importlib import resources


def reference_feeder_path():
    return resources.files(__package__) / "reference_feeder.json"


def reference_trajectories_path():
    return resources.files(__package__) / "reference_trajectories.csv"
