"""Placing observation and prediction points on the reach tree."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ImputationError, UnsnappableSiteError, ValidationError

DEFAULT_SNAP_THRESHOLD = 500.0


@dataclass(frozen=True)
class SitePoint:
    site_id: int
    reach_id: int
    ratio: float  # fraction of reach length, measured from the downstream node
    updist: float
    afv: float
    x: np.ndarray
    y: Optional[float] = None
    snap_distance: float = 0.0


class SiteSet:
    """Column store of sites on one network.

    ``reach`` holds internal reach indices; ``X`` is ``(n, p)`` and includes
    the intercept column; ``y`` uses NaN for missing responses.
    """

    def __init__(self, network, site_ids, reach, ratio, X=None, y=None, snap_distance=None):
        self.network = network
        self.site_ids = np.asarray(site_ids, dtype=np.int64)
        self.reach = np.asarray(reach, dtype=np.int64)
        self.ratio = np.asarray(ratio, dtype=float)
        n = len(self.site_ids)
        if len(self.reach) != n or len(self.ratio) != n:
            raise ValidationError("site arrays have mismatched lengths")
        if n and ((self.ratio < 0) | (self.ratio > 1)).any():
            raise ValidationError("site ratio outside [0, 1]")
        if len(np.unique(self.site_ids)) != n:
            raise ValidationError("duplicate site_id values")
        self.updist = network.updist_dn[self.reach] + self.ratio * network.lengths[self.reach]
        self.afv = network.afv[self.reach]
        self.X = np.ones((n, 1)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
        self.y = np.full(n, np.nan) if y is None else np.asarray(y, dtype=float).reshape(n)
        self.snap_distance = np.zeros(n) if snap_distance is None else np.asarray(snap_distance, dtype=float)

    def __len__(self):
        return len(self.site_ids)

    def __getitem__(self, i):
        r = int(self.reach[i])
        yi = self.y[i]
        return SitePoint(
            site_id=int(self.site_ids[i]),
            reach_id=int(self.network.reach_ids[r]),
            ratio=float(self.ratio[i]),
            updist=float(self.updist[i]),
            afv=float(self.afv[i]),
            x=self.X[i],
            y=None if np.isnan(yi) else float(yi),
            snap_distance=float(self.snap_distance[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def reach_ids(self):
        return self.network.reach_ids[self.reach]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SiteSet(self.network, self.site_ids[idx], self.reach[idx], self.ratio[idx],
                       self.X[idx], self.y[idx], self.snap_distance[idx])

    def with_data(self, X=None, y=None):
        return SiteSet(self.network, self.site_ids, self.reach, self.ratio,
                       self.X if X is None else X, self.y if y is None else y, self.snap_distance)

    @classmethod
    def from_points(cls, network, points):
        points = list(points)
        p = len(points[0].x) if points else 1
        return cls(
            network,
            [s.site_id for s in points],
            [network.idx(s.reach_id) for s in points],
            [s.ratio for s in points],
            np.array([s.x for s in points], dtype=float).reshape(len(points), p),
            [np.nan if s.y is None else s.y for s in points],
            [s.snap_distance for s in points],
        )

    def to_frame(self):
        import pandas as pd

        df = pd.DataFrame({
            "site_id": self.site_ids,
            "reach_id": self.reach_ids,
            "ratio": self.ratio,
            "updist": self.updist,
            "afv": self.afv,
            "snap_distance": self.snap_distance,
            "y_obs": self.y,
        })
        for j in range(self.X.shape[1]):
            df[f"x_{j}"] = self.X[:, j]
        return df


def as_site_set(network, sites):
    return sites if isinstance(sites, SiteSet) else SiteSet.from_points(network, sites)


def _snap_coordinates(network, xs, ys):
    import shapely

    lines = shapely.linestrings([fl.vertices for fl in network.flowlines])
    tree = shapely.STRtree(lines)
    pts = shapely.points(np.column_stack([xs, ys]))
    (pi, ti), dist = tree.query_nearest(pts, all_matches=True, return_distance=True)
    best = np.full(len(pts), -1, dtype=np.int64)
    best_d = np.full(len(pts), np.inf)
    for p, t, d in zip(pi, ti, dist):
        b = best[p]
        if d < best_d[p] or (d == best_d[p] and network.reach_ids[t] < network.reach_ids[b]):
            best[p], best_d[p] = t, d
    along = shapely.line_locate_point(lines[best], pts)
    total = shapely.length(lines[best])
    ratio = np.where(total > 0, 1.0 - along / np.where(total > 0, total, 1.0), 0.5)
    return best, np.clip(ratio, 0.0, 1.0), best_d


def snap_sites(network, site_ids, xs=None, ys=None, reach_ids=None, ratios=None, X=None, y=None,
               threshold=DEFAULT_SNAP_THRESHOLD):
    """Build a :class:`SiteSet` from coordinates and/or ``(reach_id, ratio)`` pairs.

    Rows with a finite ``reach_id`` and ``ratio`` are placed directly; the rest
    are projected onto the nearest reach polyline (Euclidean), with ties going
    to the smaller reach id.
    """
    n = len(site_ids)
    direct = np.zeros(n, dtype=bool)
    if reach_ids is not None and ratios is not None:
        rid = np.asarray(reach_ids, dtype=float)
        rat = np.asarray(ratios, dtype=float)
        direct = np.isfinite(rid) & np.isfinite(rat)
    reach = np.zeros(n, dtype=np.int64)
    ratio = np.zeros(n)
    snap_d = np.zeros(n)
    for i in np.flatnonzero(direct):
        reach[i] = network.idx(int(rid[i]))
        ratio[i] = rat[i]
    todo = np.flatnonzero(~direct)
    if len(todo):
        if xs is None or ys is None:
            raise ValidationError("sites without reach_id/ratio need x, y coordinates")
        r, q, d = _snap_coordinates(network, np.asarray(xs, float)[todo], np.asarray(ys, float)[todo])
        far = d > threshold
        if far.any():
            raise UnsnappableSiteError(np.asarray(site_ids)[todo[far]].tolist(), threshold)
        reach[todo], ratio[todo], snap_d[todo] = r, q, d
    return SiteSet(network, site_ids, reach, ratio, X, y, snap_d)


def reach_midpoints(network, exclude=()):
    """One prediction point at ratio 0.5 on every reach not in ``exclude``.

    ``site_id`` equals the host ``reach_id`` so ids are stable across runs.
    """
    excluded = {int(e) for e in exclude}
    keep = np.array([int(r) not in excluded for r in network.reach_ids], dtype=bool)
    idx = np.flatnonzero(keep)
    return SiteSet(network, network.reach_ids[idx], idx, np.full(len(idx), 0.5))


def _node_graph(network):
    """Integer node ids for the upstream and downstream end of every reach."""
    ids = {}
    up = np.array([ids.setdefault(k, len(ids)) for k in network.up_node])
    dn = np.array([ids.setdefault(k, len(ids)) for k in network.dn_node])
    return up, dn, len(ids)


def impute_nearest_reach(network, values):
    """Fill missing (NaN/None) per-reach values from the nearest observed reach.

    Distance is stream distance between reach midpoints; ties go to the
    smaller reach id.  ``values`` is aligned with ``network.reach_ids``.
    """
    vals = np.array([np.nan if v is None else v for v in values], dtype=float)
    if len(vals) != len(network):
        raise ValidationError("values must have one entry per reach")
    missing = np.isnan(vals)
    if not missing.any():
        return vals
    for comp in np.unique(network.component_id[missing]):
        if missing[network.component_id == comp].all():
            raise ImputationError(f"component {comp} has no non-missing values")

    # Multi-source Dijkstra over midpoint vertices (0..R-1) and node vertices (R..).
    up, dn, n_nodes = _node_graph(network)
    R = len(network)
    adj = [[] for _ in range(R + n_nodes)]
    half = network.lengths / 2.0
    for r in range(R):
        for node in (up[r], dn[r]):
            adj[r].append((R + node, half[r]))
            adj[R + node].append((r, half[r]))
    best = [None] * (R + n_nodes)
    heap = [(0.0, int(network.reach_ids[r]), r, r) for r in np.flatnonzero(~missing)]
    heapq.heapify(heap)
    while heap:
        d, sid, src, v = heapq.heappop(heap)
        if best[v] is not None:
            continue
        best[v] = src
        for w, length in adj[v]:
            if best[w] is None:
                heapq.heappush(heap, (d + length, sid, src, w))
    out = vals.copy()
    for r in np.flatnonzero(missing):
        out[r] = vals[best[r]]
    return out


# --------------------------------------------------------------------- I/O

def read_sites_csv(path, network, threshold=DEFAULT_SNAP_THRESHOLD, response=None):
    """Read ``site_id,x,y[,reach_id,ratio],y_obs,cov_1..cov_p``.

    An intercept column is prepended to the ``cov_*`` columns.  ``response``
    selects a response column other than ``y_obs``.
    """
    import pandas as pd

    df = pd.read_csv(path)
    if "site_id" not in df.columns:
        raise ValidationError(f"{path}: missing site_id column")
    covs = sorted((c for c in df.columns if c.startswith("cov_")), key=lambda c: int(c[4:]))
    X = np.column_stack([np.ones(len(df))] + [df[c].to_numpy(float) for c in covs])
    col = response or "y_obs"
    y = df[col].to_numpy(float) if col in df.columns else None
    return snap_sites(
        network,
        df["site_id"].to_numpy(),
        xs=df["x"].to_numpy(float) if "x" in df.columns else None,
        ys=df["y"].to_numpy(float) if "y" in df.columns else None,
        reach_ids=df["reach_id"].to_numpy(float) if "reach_id" in df.columns else None,
        ratios=df["ratio"].to_numpy(float) if "ratio" in df.columns else None,
        X=X,
        y=y,
        threshold=threshold,
    )
