import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mhpf.datasets import discretize_uniform, gen_fixed_endpoints, gen_junction
from mhpf.filtration import single_linkage
from mhpf.geometry import Trajectory, distance_matrix


@pytest.fixture(scope="session")
def hand_tree():
    """Three leaves with d(0,1)=1, d(0,2)=4, d(1,2)=2: merges at 1 then 2."""
    d = np.array([
        [0.0, 1.0, 4.0],
        [1.0, 0.0, 2.0],
        [4.0, 2.0, 0.0],
    ])
    return single_linkage(d)


@pytest.fixture(scope="session")
def junction_corpus():
    rng = np.random.default_rng(42)
    raw = gen_junction(2, 7, jitter=0.1, rng=rng)
    return [discretize_uniform(t, 40) for t in raw]


@pytest.fixture(scope="session")
def fixed_corpus():
    rng = np.random.default_rng(7)
    raw = gen_fixed_endpoints(13, rng)
    return [discretize_uniform(t, 60) for t in raw]


@pytest.fixture(scope="session")
def fixed_tree(fixed_corpus):
    return single_linkage(distance_matrix(fixed_corpus),
                          member_ids=[t.id for t in fixed_corpus])


def make_trajectory(tid, pts):
    return Trajectory(tid, np.asarray(pts, dtype=float))
