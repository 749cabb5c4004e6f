import numpy as np
import pytest

from streamvecchia.network import Flowline, build_network
from streamvecchia.simulate import SyntheticNetworkSpec, generate_network


def y_flowlines():
    # A and B join at (1, 1) and drain through O
    return [
        Flowline(1, [(0, 2), (1, 1)], 5.0, 2.0),   # A
        Flowline(2, [(2, 2), (1, 1)], 3.0, 3.0),   # B
        Flowline(3, [(1, 1), (1, 0)], 10.0, 5.0),  # O
    ]


A, B, O = 1, 2, 3


@pytest.fixture
def ynet():
    return build_network(y_flowlines())


def random_network(seed, n_reaches=None, branching=0.5):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 300)) if n_reaches is None else n_reaches
    spec = SyntheticNetworkSpec(n, branching_prob=branching, seed=seed)
    return build_network(generate_network(spec))


def random_sites(network, n, seed, p=1):
    from streamvecchia.sites import SiteSet

    rng = np.random.default_rng(seed)
    reach = rng.integers(0, len(network), size=n)
    ratio = rng.uniform(0, 1, size=n)
    X = np.column_stack([np.ones(n)] + [rng.standard_normal(n) for _ in range(p - 1)])
    return SiteSet(network, np.arange(1, n + 1), reach, ratio, X=X)
