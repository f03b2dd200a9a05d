import numpy as np
import pytest

from gridcox import meshes, sim, trajectory


@pytest.fixture(scope="session")
def arena():
    return meshes.Rectangle(0.0, 0.0, 100.0, 100.0)


@pytest.fixture(scope="session")
def small_mesh(arena):
    return meshes.build_tri_mesh(arena, 15.0, 20.0)


@pytest.fixture(scope="session")
def circ8():
    return meshes.build_circular_mesh(8)


@pytest.fixture(scope="session")
def walk_session(arena):
    """Two-minute correlated walk with Bernoulli spike flags."""
    data = sim.random_walk_trajectory(120.0, 0.05, arena, persistence=0.9, seed=17)
    rng = np.random.default_rng(4)
    flags = rng.random(data.sample_count) < 0.08
    flags[0] = False
    data = trajectory.SessionData(data.times, data.xy, data.theta, flags)
    spikes = trajectory.SpikeTrain(data.times[flags])
    return data, spikes
