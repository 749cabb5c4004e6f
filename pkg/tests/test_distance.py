import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamvecchia.distance import (
    build_neighbor_graph,
    load_neighbor_graph,
    order_sites,
    pair_geometry,
    predict_neighbors,
    save_neighbor_graph,
    site_pair_arrays,
)
from streamvecchia.errors import ConfigurationError, ValidationError
from streamvecchia.network import Flowline, build_network
from streamvecchia.sites import SiteSet

from .conftest import A, B, O, random_network, random_sites


def y_sites(net):
    return SiteSet(net, [1, 2, 3], [net.idx(A), net.idx(B), net.idx(O)], [0.5, 0.5, 0.5])


def test_y_fixture_flow_connected(ynet):
    a, _, o = y_sites(ynet)
    g = pair_geometry(a, o, ynet)
    assert g.flow_connected
    assert g.h == 7.5 and g.total_dist == 7.5
    assert g.weight == pytest.approx(math.sqrt(0.4), abs=1e-15)
    assert g.weight == pytest.approx(0.6325, abs=5e-5)


def test_y_fixture_flow_unconnected(ynet):
    a, b, _ = y_sites(ynet)
    assert (a.updist, b.updist) == (12.5, 11.5)
    g = pair_geometry(a, b, ynet)
    assert not g.flow_connected
    assert g.total_dist == 4.0
    assert g.weight == 0.0


def test_identity_pair(ynet):
    a = y_sites(ynet)[0]
    g = pair_geometry(a, a, ynet)
    assert g.flow_connected and g.h == 0.0 and g.weight == 1.0


def test_different_components():
    fls = [Flowline(1, [(0, 1), (0, 0)], 1.0, 1.0), Flowline(2, [(9, 1), (9, 0)], 1.0, 1.0)]
    net = build_network(fls)
    s = SiteSet(net, [1, 2], [0, 1], [0.5, 0.5])
    g = pair_geometry(s[0], s[1], net)
    assert not g.flow_connected and math.isinf(g.total_dist) and g.weight == 0.0


def test_same_reach_pairs_compare_by_ratio(ynet):
    s = SiteSet(ynet, [1, 2], [ynet.idx(A)] * 2, [0.2, 0.9])
    g = pair_geometry(s[0], s[1], ynet)
    assert g.flow_connected and g.h == pytest.approx(3.5) and g.weight == 1.0


def test_order_sites_descending_updist(ynet):
    s = SiteSet(ynet, [10, 11, 12], [ynet.idx(O), ynet.idx(A), ynet.idx(B)], [0.5, 0.5, 0.5])
    order = order_sites(s)
    assert s.updist[order].tolist() == [12.5, 11.5, 5.0]


def test_order_ties_by_site_id(ynet):
    s = SiteSet(ynet, [7, 3, 5], [ynet.idx(A)] * 3, [0.5, 0.5, 0.5])
    assert s.site_ids[order_sites(s)].tolist() == [3, 5, 7]


def test_order_random_reproducible(ynet):
    s = random_sites(random_network(1, 50), 30, 2)
    assert np.array_equal(order_sites(s, "random", 4), order_sites(s, "random", 4))
    assert sorted(order_sites(s, "random", 4)) == list(range(30))
    with pytest.raises(ConfigurationError):
        order_sites(s, "bogus")


def brute_neighbors(sites, i, m, flow_only=False):
    prior = np.arange(i)
    if not len(prior):
        return []
    fc, _, total, _ = site_pair_arrays(sites.network, sites, np.full(i, i), sites, prior)
    ok = np.isfinite(total) & (fc if flow_only else True)
    prior, total = prior[ok], total[ok]
    order = np.lexsort((sites.site_ids[prior], total))
    return prior[order[:m]].tolist()


def test_full_conditioning_when_m_large():
    net = random_network(3, 40)
    s = random_sites(net, 25, 4)
    g = build_neighbor_graph(s, m=100)
    for i in range(len(s)):
        assert sorted(g.neighbors[i][g.neighbors[i] >= 0].tolist()) == list(range(i))
    assert g.counts[0] == 0


def test_m_must_be_positive(ynet):
    with pytest.raises(ConfigurationError):
        build_neighbor_graph(y_sites(ynet), m=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 12), metric=st.sampled_from(["total", "flow-connected-only"]))
def test_neighbor_graph_matches_brute_force(seed, m, metric):
    net = random_network(seed)
    s = random_sites(net, int(np.random.default_rng(seed).integers(1, 120)), seed + 1)
    g = build_neighbor_graph(s, m=m, metric=metric)
    flow_only = metric == "flow-connected-only"
    for i in range(len(s)):
        got = g.neighbors[i][g.neighbors[i] >= 0].tolist()
        assert got == brute_neighbors(g.sites, i, m, flow_only)
        if not flow_only:
            assert len(got) == min(i, m)
        else:
            assert g.fc[i][: len(got)].all()


def test_stored_geometry_matches_recomputation():
    net = random_network(8, 200)
    s = random_sites(net, 90, 9)
    g = build_neighbor_graph(s, m=6)
    rows, cols = np.nonzero(g.neighbors >= 0)
    fc, h, total, w = site_pair_arrays(net, g.sites, rows, g.sites, g.neighbors[rows, cols])
    assert np.array_equal(g.fc[rows, cols], fc)
    assert np.array_equal(g.h[rows, cols], h)
    assert np.array_equal(g.total_dist[rows, cols], total)
    assert np.array_equal(g.weight[rows, cols], w)


def test_predict_neighbors_colocated(ynet):
    obs = SiteSet(ynet, [1, 2], [ynet.idx(A), ynet.idx(O)], [0.5, 0.5])
    preds = SiteSet(ynet, [9], [ynet.idx(O)], [0.5])
    pn = predict_neighbors(preds, obs, m=1)
    assert pn.neighbors[0, 0] == 1 and pn.total_dist[0, 0] == 0.0


def test_predict_neighbors_requires_observations(ynet):
    empty = SiteSet(ynet, [], [], [])
    with pytest.raises(ValidationError):
        predict_neighbors(y_sites(ynet), empty, m=2)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 10))
def test_predict_neighbors_brute_force_and_batching(seed, m):
    net = random_network(seed)
    obs = random_sites(net, 60, seed + 1)
    preds = SiteSet(net, np.arange(1000, 1040), *(lambda r: (r.integers(0, len(net), 40), r.uniform(size=40)))(
        np.random.default_rng(seed + 2)))
    pn1 = predict_neighbors(preds, obs, m=m, batch_size=1)
    pnn = predict_neighbors(preds, obs, m=m, batch_size=len(preds))
    assert np.array_equal(pn1.neighbors, pnn.neighbors)
    for i in range(len(preds)):
        _, _, total, _ = site_pair_arrays(net, preds, np.full(len(obs), i), obs, np.arange(len(obs)))
        ok = np.flatnonzero(np.isfinite(total))
        best = ok[np.lexsort((obs.site_ids[ok], total[ok]))][:m]
        got = pn1.neighbors[i][pn1.neighbors[i] >= 0]
        assert got.tolist() == best.tolist()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pair_geometry_symmetric(seed):
    net = random_network(seed)
    s = random_sites(net, 40, seed)
    ii, jj = np.meshgrid(np.arange(40), np.arange(40), indexing="ij")
    fc, h, total, w = (x.reshape(40, 40) for x in site_pair_arrays(net, s, ii.ravel(), s, jj.ravel()))
    assert np.array_equal(h, h.T) and np.array_equal(total, total.T) and np.array_equal(w, w.T)
    assert np.all(total[fc] == h[fc])
    assert np.all(w[~fc] == 0.0)
    assert np.all((w[fc] > 0) & (w[fc] <= 1))
    # upstream site's afv in the numerator
    up = np.where(s.updist[:, None] >= s.updist[None, :], s.afv[:, None], s.afv[None, :])
    dn = np.where(s.updist[:, None] >= s.updist[None, :], s.afv[None, :], s.afv[:, None])
    assert np.allclose(w[fc], np.sqrt(up / dn)[fc], rtol=1e-15, atol=0)
    # tree metric triangle inequality
    tri = total[:, None, :] <= total[:, :, None] + total[None, :, :] + 1e-9
    assert tri.all()


def test_chain_all_flow_connected():
    fls = [Flowline(i, [(0, i), (0, i - 1)], 1.0 + i, 1.0) for i in range(1, 8)]
    net = build_network(fls)
    s = random_sites(net, 30, 3)
    ii, jj = np.meshgrid(np.arange(30), np.arange(30), indexing="ij")
    fc, _, total, _ = site_pair_arrays(net, s, ii.ravel(), s, jj.ravel())
    assert fc.all()
    assert np.array_equal(total, np.abs(s.updist[ii.ravel()] - s.updist[jj.ravel()]))


def split_vertex_graph(net, sites):
    """Reach graph with every site inserted as a vertex on its host reach."""
    G = nx.Graph()
    by_reach = {}
    for k in range(len(sites)):
        by_reach.setdefault(int(sites.reach[k]), []).append(k)
    for r in range(len(net)):
        chain = [("node", net.dn_node[r], 0.0)]
        for k in sorted(by_reach.get(r, []), key=lambda k: sites.updist[k]):
            chain.append(("site", k, sites.updist[k] - net.updist_dn[r]))
        chain.append(("node", net.up_node[r], net.lengths[r]))
        for (t1, a, pa), (t2, b, pb) in zip(chain, chain[1:]):
            G.add_edge((t1, a), (t2, b), weight=pb - pa)
    return G


def graph_search_distances(net, sites):
    G = split_vertex_graph(net, sites)
    n = len(sites)
    D = np.full((n, n), np.inf)
    for i in range(n):
        lengths = nx.single_source_dijkstra_path_length(G, ("site", i))
        for j in range(n):
            D[i, j] = lengths.get(("site", j), np.inf)
    return D


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_lca_distance_matches_graph_search(seed):
    net = random_network(seed)
    s = random_sites(net, 30, seed + 3)
    ii, jj = np.meshgrid(np.arange(30), np.arange(30), indexing="ij")
    _, _, total, _ = site_pair_arrays(net, s, ii.ravel(), s, jj.ravel())
    assert np.allclose(total.reshape(30, 30), graph_search_distances(net, s), rtol=1e-9, atol=1e-12)


def test_neighbor_graph_roundtrip(tmp_path):
    net = random_network(12, 80)
    s = random_sites(net, 50, 13)
    g = build_neighbor_graph(s, m=5)
    save_neighbor_graph(g, tmp_path)
    g2 = load_neighbor_graph(tmp_path, s)
    assert np.array_equal(g.neighbors, g2.neighbors)
    assert np.array_equal(g.order, g2.order)
    assert np.array_equal(g.weight, g2.weight)
