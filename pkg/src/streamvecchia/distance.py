"""Flow-connectedness, stream distance and nearest-neighbor selection.

Two sites are flow-connected when one host reach is the other or lies
downstream of it (Euler-interval test).  Otherwise their downstream paths
meet at a junction; ``total_dist`` runs through that junction.  Across
components the distance is ``inf``.

Neighbor search is a Dijkstra sweep over the reach tree outward from the
query point, pruned as soon as the next reach is farther than the current
m-th candidate.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ValidationError
from .sites import SiteSet, as_site_set

ORDER_SCHEMES = ("updist_desc", "input", "random")
NN_METRICS = ("total", "flow-connected-only")
DEFAULT_M = 15


@dataclass(frozen=True)
class PairGeometry:
    flow_connected: bool
    h: float  # |updist difference| for flow-connected pairs, inf otherwise
    total_dist: float
    weight: float


def pair_arrays(network, reach_a, updist_a, afv_a, reach_b, updist_b, afv_b):
    """Vectorised pair geometry: returns ``(flow_connected, h, total_dist, weight)``."""
    ra = np.asarray(reach_a, dtype=np.int64)
    rb = np.asarray(reach_b, dtype=np.int64)
    ua = np.asarray(updist_a, dtype=float)
    ub = np.asarray(updist_b, dtype=float)
    fa = np.asarray(afv_a, dtype=float)
    fb = np.asarray(afv_b, dtype=float)
    ra, rb, ua, ub, fa, fb = np.broadcast_arrays(ra, rb, ua, ub, fa, fb)

    same_comp = network.component_id[ra] == network.component_id[rb]
    fc = same_comp & (network.is_ancestor(ra, rb) | network.is_ancestor(rb, ra))
    diff = np.abs(ua - ub)
    h = np.where(fc, diff, np.inf)
    total = np.full(ra.shape, np.inf)
    total[fc] = diff[fc]
    fu = same_comp & ~fc
    if fu.any():
        ca, _ = network.junction_child(ra[fu], rb[fu])
        total[fu] = ua[fu] + ub[fu] - 2.0 * network.updist_dn[ca]
    weight = np.zeros(ra.shape)
    weight[fc] = np.sqrt(np.minimum(fa[fc], fb[fc]) / np.maximum(fa[fc], fb[fc]))
    return fc, h, total, weight


def pair_geometry(a, b, network):
    """Geometry of one site pair (``SitePoint`` objects)."""
    fc, h, total, w = pair_arrays(
        network, network.idx(a.reach_id), a.updist, a.afv, network.idx(b.reach_id), b.updist, b.afv)
    return PairGeometry(bool(fc), float(h), float(total), float(w))


def site_pair_arrays(network, sites_a, ia, sites_b, ib):
    """Pair geometry between ``sites_a[ia]`` and ``sites_b[ib]`` (index arrays)."""
    return pair_arrays(network, sites_a.reach[ia], sites_a.updist[ia], sites_a.afv[ia],
                       sites_b.reach[ib], sites_b.updist[ib], sites_b.afv[ib])


def order_sites(sites, scheme="updist_desc", seed=None):
    """Permutation of site positions defining the conditioning order.

    ``updist_desc`` puts headwater sites first (ties by site_id ascending).
    """
    if scheme == "updist_desc":
        return np.lexsort((sites.site_ids, -sites.updist))
    if scheme == "input":
        return np.arange(len(sites))
    if scheme == "random":
        return np.random.default_rng(seed).permutation(len(sites))
    raise ConfigurationError(f"unknown order scheme {scheme!r}; expected one of {ORDER_SCHEMES}")


class _TreeSearch:
    """Nearest inserted sites to a query point, by stream distance.

    ``k`` results are ranked by ``(distance, site_id)``.  With
    ``flow_only`` the sweep never turns into sibling branches, so only
    flow-connected sites are found.
    """

    def __init__(self, network, sites, flow_only=False):
        self.net = network
        self.sites = sites
        self.flow_only = flow_only
        self.on_reach = {}
        self.lo = network.updist_dn
        self.length = network.lengths
        # occupied[r]: some inserted site lies on r or upstream of it
        self.occupied = [False] * len(network)
        self._parent = network.parent.tolist()

    def insert(self, pos):
        r = int(self.sites.reach[pos])
        self.on_reach.setdefault(r, []).append(int(pos))
        occupied, parent = self.occupied, self._parent
        while r >= 0 and not occupied[r]:
            occupied[r] = True
            r = parent[r]

    def query(self, reach, u, k):
        net = self.net
        updist = self.sites.updist
        sid = self.sites.site_ids
        lo, length = self.lo, self.length
        children = net.children
        on_reach = self.on_reach
        occupied = self.occupied

        best = []  # max-heap of (-dist, -site_id, pos)

        def offer(d, pos):
            key = (-d, -sid[pos], pos)
            if len(best) < k:
                heapq.heappush(best, key)
            elif key > best[0]:
                heapq.heapreplace(best, key)

        def bound():
            return -best[0][0] if len(best) == k else np.inf

        for pos in on_reach.get(reach, ()):
            offer(abs(u - updist[pos]), pos)

        # heap entries: (entry distance, seq, reach, mode, junction updist)
        # mode 0: upstream of the query (flow-connected), 1: sibling branch, 2: downstream path
        heap = []
        seq = 0
        to_top = lo[reach] + length[reach] - u
        for c in children[reach]:
            if occupied[c]:
                heap.append((to_top, seq, c, 0, u))
                seq += 1
        seq = self._push_down(heap, reach, u - lo[reach], seq)
        heapq.heapify(heap)

        while heap:
            d, _, r, mode, junction = heapq.heappop(heap)
            if d > bound() * (1 + 1e-12):
                break
            cands = on_reach.get(r)
            if cands:
                for pos in cands:
                    us = updist[pos]
                    if mode == 0:
                        offer(us - u, pos)
                    elif mode == 1:
                        offer(u + us - 2.0 * junction, pos)
                    else:
                        offer(u - us, pos)
            if mode == 2:
                seq = self._push_down(heap, r, d + length[r], seq, heapify=True)
            else:
                nd = d + length[r]
                for c in children[r]:
                    if occupied[c]:
                        heapq.heappush(heap, (nd, seq, c, mode, junction))
                        seq += 1
        out = sorted((-nd, -ns, pos) for nd, ns, pos in best)
        return [(dist, pos) for dist, _, pos in out]

    def _push_down(self, heap, r, d, seq, heapify=False):
        """From the downstream node of reach ``r`` (at distance ``d``)."""
        p = self.net.parent[r]
        if p < 0:
            return seq
        push = heapq.heappush if heapify else list.append
        push(heap, (d, seq, int(p), 2, 0.0))
        seq += 1
        if not self.flow_only:
            junction = self.lo[r]
            for s in self.net.children[p]:
                if s != r and self.occupied[s]:
                    push(heap, (d, seq, s, 1, junction))
                    seq += 1
        return seq


class NeighborGraph:
    """Ordered observation sites with up to ``m`` prior neighbors each.

    Arrays are indexed by order position: ``neighbors[i]`` lists positions
    ``< i`` (padded with -1), with matching pair geometry in ``fc``, ``h``,
    ``total_dist`` and ``weight``.  ``sites`` is the input set permuted into
    order.
    """

    def __init__(self, sites, order, m, metric, neighbors, fc, h, total_dist, weight, scheme="updist_desc"):
        self.sites = sites
        self.order = np.asarray(order, dtype=np.int64)
        self.m = int(m)
        self.metric = metric
        self.scheme = scheme
        self.neighbors = neighbors
        self.fc = fc
        self.h = h
        self.total_dist = total_dist
        self.weight = weight
        self.counts = (neighbors >= 0).sum(axis=1)

    def __len__(self):
        return len(self.sites)

    @property
    def network(self):
        return self.sites.network

    @property
    def site_ids(self):
        return self.sites.site_ids

    def neighbor_ids(self, i):
        nb = self.neighbors[i]
        return self.sites.site_ids[nb[nb >= 0]].tolist()

    @cached_property
    def block_geometry(self):
        """``(h, weight)`` among each site's neighbors, shape ``(n, m, m)``.

        Padded slots have ``weight`` 0 and ``h`` inf.
        """
        n, m = self.neighbors.shape
        h = np.full((n, m, m), np.inf)
        w = np.zeros((n, m, m))
        if m == 0 or n == 0:
            return h, w
        nb = self.neighbors
        ii, jj = np.triu_indices(m, 1)
        a = nb[:, ii]
        b = nb[:, jj]
        ok = (a >= 0) & (b >= 0)
        rows, cols = np.nonzero(ok)
        _, hh, _, ww = site_pair_arrays(self.network, self.sites, a[ok], self.sites, b[ok])
        h[rows, ii[cols], jj[cols]] = hh
        h[rows, jj[cols], ii[cols]] = hh
        w[rows, ii[cols], jj[cols]] = ww
        w[rows, jj[cols], ii[cols]] = ww
        valid = nb >= 0
        diag = np.arange(m)
        h[:, diag, diag] = np.where(valid, 0.0, np.inf)
        w[:, diag, diag] = np.where(valid, 1.0, 0.0)
        return h, w


def _geometry_for(network, query_sites, qpos, neighbors, ref_sites):
    n, m = neighbors.shape
    fc = np.zeros((n, m), dtype=bool)
    h = np.full((n, m), np.inf)
    total = np.full((n, m), np.inf)
    w = np.zeros((n, m))
    rows, cols = np.nonzero(neighbors >= 0)
    if len(rows):
        f, hh, tt, ww = site_pair_arrays(network, query_sites, qpos[rows], ref_sites, neighbors[rows, cols])
        fc[rows, cols], h[rows, cols], total[rows, cols], w[rows, cols] = f, hh, tt, ww
    return fc, h, total, w


def build_neighbor_graph(sites, m=DEFAULT_M, network=None, order=None, scheme="updist_desc",
                         metric="total", seed=None):
    """Select up to ``m`` nearest prior-in-order neighbors for every site.

    ``order`` overrides ``scheme`` when given (a permutation of positions).
    """
    if m < 1:
        raise ConfigurationError(f"neighbor count m must be >= 1, got {m}")
    if metric not in NN_METRICS:
        raise ConfigurationError(f"unknown nn metric {metric!r}; expected one of {NN_METRICS}")
    network = network if network is not None else sites.network
    sites = as_site_set(network, sites)
    if order is None:
        order = order_sites(sites, scheme, seed)
    else:
        scheme = "given"
    order = np.asarray(order, dtype=np.int64)
    ordered = sites.take(order)
    n = len(ordered)
    width = min(m, max(n - 1, 0))
    neighbors = np.full((n, width), -1, dtype=np.int64)
    search = _TreeSearch(network, ordered, flow_only=(metric == "flow-connected-only"))
    for i in range(n):
        if i and width:
            found = search.query(int(ordered.reach[i]), float(ordered.updist[i]), min(i, width))
            for j, (_, pos) in enumerate(found):
                neighbors[i, j] = pos
        search.insert(i)
    fc, h, total, w = _geometry_for(network, ordered, np.arange(n), neighbors, ordered)
    return NeighborGraph(ordered, order, m, metric, neighbors, fc, h, total, w, scheme)


@dataclass
class PredictionNeighbors:
    """Observation neighbors (positions into ``obs``) for each prediction site."""

    preds: SiteSet
    obs: SiteSet
    m: int
    neighbors: np.ndarray
    fc: np.ndarray
    h: np.ndarray
    total_dist: np.ndarray
    weight: np.ndarray
    batch_size: int


def predict_neighbors(preds, obs, m=DEFAULT_M, network=None, batch_size=5000, metric="total"):
    """Nearest ``m`` observations for every prediction site, in independent batches."""
    if m < 1:
        raise ConfigurationError(f"neighbor count m must be >= 1, got {m}")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    network = network if network is not None else obs.network
    preds = as_site_set(network, preds)
    obs = as_site_set(network, obs)
    if len(obs) == 0:
        raise ValidationError("no observation sites to draw prediction neighbors from")
    width = min(m, len(obs))
    search = _TreeSearch(network, obs, flow_only=(metric == "flow-connected-only"))
    for pos in range(len(obs)):
        search.insert(pos)
    neighbors = np.full((len(preds), width), -1, dtype=np.int64)
    for start in range(0, len(preds), batch_size):
        for i in range(start, min(start + batch_size, len(preds))):
            found = search.query(int(preds.reach[i]), float(preds.updist[i]), width)
            for j, (_, pos) in enumerate(found):
                neighbors[i, j] = pos
    fc, h, total, w = _geometry_for(network, preds, np.arange(len(preds)), neighbors, obs)
    return PredictionNeighbors(preds, obs, m, neighbors, fc, h, total, w, batch_size)


# --------------------------------------------------------------------- I/O

def _triplets(site_i, site_j, neighbors, fc, h, total, w):
    import pandas as pd

    rows, cols = np.nonzero(neighbors >= 0)
    return pd.DataFrame({
        "site_i": site_i[rows],
        "site_j": site_j[neighbors[rows, cols]],
        "rank": cols,
        "flow_connected": fc[rows, cols],
        "h": h[rows, cols],
        "total_dist": total[rows, cols],
        "weight": w[rows, cols],
    })


def save_neighbor_graph(graph, directory, name="obs_neighbors", extra_manifest=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _triplets(graph.site_ids, graph.site_ids, graph.neighbors, graph.fc, graph.h,
              graph.total_dist, graph.weight).to_csv(d / f"{name}.csv", index=False)
    manifest = {
        "order_scheme": graph.scheme,
        "order_site_ids": graph.site_ids.tolist(),
        "m": graph.m,
        "metric": graph.metric,
    }
    manifest.update(extra_manifest or {})
    (d / f"{name}.json").write_text(json.dumps(manifest, indent=2))


def save_prediction_neighbors(pn, directory, name="pred_neighbors", extra_manifest=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _triplets(pn.preds.site_ids, pn.obs.site_ids, pn.neighbors, pn.fc, pn.h,
              pn.total_dist, pn.weight).to_csv(d / f"{name}.csv", index=False)
    manifest = {"m": pn.m, "batch_size": pn.batch_size}
    manifest.update(extra_manifest or {})
    (d / f"{name}.json").write_text(json.dumps(manifest, indent=2))


def load_neighbor_graph(directory, sites, name="obs_neighbors"):
    """Rebuild a :class:`NeighborGraph` for ``sites`` from saved triplets."""
    import pandas as pd

    d = Path(directory)
    manifest = json.loads((d / f"{name}.json").read_text())
    pos_of = {int(s): i for i, s in enumerate(sites.site_ids)}
    try:
        order = np.array([pos_of[int(s)] for s in manifest["order_site_ids"]], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"neighbor graph refers to unknown site {exc}") from None
    ordered = sites.take(order)
    opos = {int(s): i for i, s in enumerate(ordered.site_ids)}
    df = pd.read_csv(d / f"{name}.csv")
    n = len(ordered)
    width = min(manifest["m"], max(n - 1, 0))
    neighbors = np.full((n, width), -1, dtype=np.int64)
    for si, sj, rank in zip(df["site_i"], df["site_j"], df["rank"]):
        neighbors[opos[int(si)], int(rank)] = opos[int(sj)]
    fc, h, total, w = _geometry_for(sites.network, ordered, np.arange(n), neighbors, ordered)
    return NeighborGraph(ordered, order, manifest["m"], manifest["metric"], neighbors, fc, h, total, w,
                         manifest["order_scheme"])


def load_prediction_neighbors(directory, preds, obs, name="pred_neighbors"):
    import pandas as pd

    d = Path(directory)
    manifest = json.loads((d / f"{name}.json").read_text())
    ppos = {int(s): i for i, s in enumerate(preds.site_ids)}
    opos = {int(s): i for i, s in enumerate(obs.site_ids)}
    df = pd.read_csv(d / f"{name}.csv")
    width = min(manifest["m"], len(obs))
    neighbors = np.full((len(preds), width), -1, dtype=np.int64)
    for si, sj, rank in zip(df["site_i"], df["site_j"], df["rank"]):
        neighbors[ppos[int(si)], int(rank)] = opos[int(sj)]
    fc, h, total, w = _geometry_for(obs.network, preds, np.arange(len(preds)), neighbors, obs)
    return PredictionNeighbors(preds, obs, manifest["m"], neighbors, fc, h, total, w, manifest["batch_size"])
