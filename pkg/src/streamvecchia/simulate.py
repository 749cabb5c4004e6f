"""Synthetic networks, exact dense simulation, and dense reference oracles.

The oracles here deliberately avoid the Euler-interval / binary-lifting
machinery used by :mod:`streamvecchia.distance`: flow-connection comes from
walking parent pointers, and junction distances from a generic
shortest-path solve over the node graph.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph

from .errors import SimulationError, ValidationError
from .network import Flowline

DENSE_SIM_LIMIT = 20000
DENSE_SIM_WARN = 5000
DENSE_ORACLE_LIMIT = 2000


@dataclass(frozen=True)
class SyntheticNetworkSpec:
    n_reaches: int
    branching_prob: float = 0.5
    length_dist: tuple = (0.005, 0.05)
    attribute_dist: tuple = (1.0, 10.0)
    seed: int = 0


def generate_network(spec):
    """Grow a rooted tree from one outlet by extending or splitting random tips.

    Coordinates are schematic: each reach's upstream node sits at a unique x
    (so node keys never collide) and y equal to its upstream distance.
    """
    if spec.n_reaches < 1:
        raise ValidationError("n_reaches must be >= 1")
    rng = np.random.default_rng(spec.seed)
    parent = [-1]
    tips = [0]
    while len(parent) < spec.n_reaches:
        t = int(rng.integers(len(tips)))
        tip = tips[t]
        split = spec.n_reaches - len(parent) >= 2 and rng.random() < spec.branching_prob
        new = [len(parent), len(parent) + 1] if split else [len(parent)]
        parent.extend([tip] * len(new))
        tips[t] = new[0]
        tips.extend(new[1:])
    n = len(parent)
    lengths = rng.uniform(*spec.length_dist, size=n)
    attrs = rng.uniform(*spec.attribute_dist, size=n)
    top = np.zeros(n)  # upstream distance of each reach's upstream node
    for r in range(n):  # parents always precede children
        top[r] = (top[parent[r]] if parent[r] >= 0 else 0.0) + lengths[r]
    up_xy = np.column_stack([10.0 * (np.arange(n) + 1), top])
    flowlines = []
    for r in range(n):
        dn = up_xy[parent[r]] if parent[r] >= 0 else np.array([0.0, 0.0])
        flowlines.append(Flowline(r + 1, np.vstack([up_xy[r], dn]), float(lengths[r]), float(attrs[r])))
    return flowlines


def observation_count(n_pred):
    """Observation sample size used by the benchmark protocol."""
    return min(int(math.ceil(n_pred / 2)), 10000)


# ------------------------------------------------------------ dense geometry

def _ancestor_matrix(network):
    """``anc[a, b]`` is True when reach ``a`` is ``b`` or downstream of ``b``."""
    R = len(network)
    anc = np.zeros((R, R), dtype=bool)
    cur = np.arange(R)
    alive = np.ones(R, dtype=bool)
    while alive.any():
        anc[cur[alive], np.flatnonzero(alive)] = True
        nxt = network.parent[cur]
        alive &= nxt >= 0
        cur = np.where(alive, nxt, cur)
    return anc


def _node_distances(network):
    keys = {}
    up = np.array([keys.setdefault(k, len(keys)) for k in network.up_node])
    dn = np.array([keys.setdefault(k, len(keys)) for k in network.dn_node])
    g = scipy.sparse.coo_matrix((network.lengths, (up, dn)), shape=(len(keys), len(keys)))
    D = scipy.sparse.csgraph.shortest_path(g.tocsr(), method="D", directed=False)
    return D, dn


def dense_geometry(network, sites_a, sites_b=None):
    """Full ``(weight, h)`` matrices between two site sets, by brute force."""
    sites_b = sites_a if sites_b is None else sites_b
    anc = _ancestor_matrix(network)
    ra, rb = sites_a.reach[:, None], sites_b.reach[None, :]
    fc = anc[ra, rb] | anc[rb, ra]
    ua, ub = sites_a.updist[:, None], sites_b.updist[None, :]
    h = np.where(fc, np.abs(ua - ub), np.inf)
    fa, fb = sites_a.afv[:, None], sites_b.afv[None, :]
    w = np.where(fc, np.sqrt(np.minimum(fa, fb) / np.maximum(fa, fb)), 0.0)
    return w, h, fc


def dense_total_distance(network, sites_a, sites_b=None):
    """All-pairs stream distance via a shortest-path solve on the node graph."""
    sites_b = sites_a if sites_b is None else sites_b
    D, dn = _node_distances(network)
    w, h, fc = dense_geometry(network, sites_a, sites_b)
    off_a = sites_a.updist - network.updist_dn[sites_a.reach]
    off_b = sites_b.updist - network.updist_dn[sites_b.reach]
    via = off_a[:, None] + D[dn[sites_a.reach]][:, dn[sites_b.reach]] + off_b[None, :]
    return np.where(fc, h, via)


def dense_covariance(network, sites_a, params, sites_b=None, nugget=True):
    w, h, _ = dense_geometry(network, sites_a, sites_b)
    with np.errstate(over="ignore"):
        C = np.where(w > 0, w * params.sigma2 * np.exp(-h / params.lam), 0.0)
    if nugget:
        b_ids = (sites_a if sites_b is None else sites_b).site_ids
        C = C + params.tau2 * (sites_a.site_ids[:, None] == b_ids[None, :])
    return C


# ------------------------------------------------------------ simulation

def _dense_chol(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * max(float(np.mean(np.diag(S))), 1e-300)
        try:
            return np.linalg.cholesky(S + jitter * np.eye(len(S)))
        except np.linalg.LinAlgError:
            raise SimulationError("dense covariance is not factorizable after jitter") from None


def simulate_ssn(network, sites, params, seed=None, X=None, n_draws=None, cov=None):
    """Draw responses from the exact dense model (no neighbor approximation).

    Without ``X`` the design is an intercept plus one iid standard normal
    covariate.  Returns ``(y, X)``; with ``n_draws`` set, ``y`` has shape
    ``(n_draws, n)``.  ``cov`` may supply a precomputed dense covariance.
    """
    n = len(sites)
    if n > DENSE_SIM_LIMIT:
        raise SimulationError(f"dense simulation limited to {DENSE_SIM_LIMIT} sites, got {n}")
    if n > DENSE_SIM_WARN:
        warnings.warn(f"dense simulation with n={n} needs {8 * n * n / 1e9:.1f} GB", ResourceWarning)
    rng = np.random.default_rng(seed)
    if X is None:
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    X = np.asarray(X, dtype=float).reshape(n, -1)
    mean = X @ params.beta
    if params.sigma2 == 0 and params.tau2 == 0:
        y = np.tile(mean, (n_draws, 1)) if n_draws else mean.copy()
        return y, X
    S = dense_covariance(network, sites, params) if cov is None else cov
    L = _dense_chol(S)
    z = rng.standard_normal((n_draws or 1, n))
    y = mean + z @ L.T
    return (y if n_draws else y[0]), X


# ------------------------------------------------------------ dense oracles

def dense_loglik(S, y, X, beta):
    r = np.asarray(y, float) - np.asarray(X, float) @ np.asarray(beta, float)
    c, low = scipy.linalg.cho_factor(S, lower=True)
    alpha = scipy.linalg.cho_solve((c, low), r)
    return float(-0.5 * (len(r) * np.log(2 * np.pi) + 2 * np.log(np.diag(c)).sum() + r @ alpha))


def dense_gls(S, y, X):
    cf = scipy.linalg.cho_factor(S, lower=True)
    SiX = scipy.linalg.cho_solve(cf, X)
    beta_cov = np.linalg.inv(X.T @ SiX)
    beta = beta_cov @ (SiX.T @ y)
    return beta, beta_cov


def dense_kriging(S11, S21, var22, y, X1, X2, beta):
    """Conditional mean and marginal variance of the prediction block."""
    cf = scipy.linalg.cho_factor(S11, lower=True)
    mean = X2 @ beta + S21 @ scipy.linalg.cho_solve(cf, y - X1 @ beta)
    var = var22 - np.einsum("ij,ji->i", S21, scipy.linalg.cho_solve(cf, S21.T))
    return mean, var


def dense_oracles(network, sites, params, y=None, X=None, preds=None):
    """Dense log-likelihood, GLS and (optionally) kriging at ``preds``.

    ``sites`` must carry ``y`` and ``X`` unless given explicitly.  Kriging
    uses ``params.beta``.
    """
    if len(sites) > DENSE_ORACLE_LIMIT:
        raise ValidationError(f"dense oracles limited to n <= {DENSE_ORACLE_LIMIT}")
    y = sites.y if y is None else np.asarray(y, float)
    X = sites.X if X is None else np.asarray(X, float)
    S = dense_covariance(network, sites, params)
    out = {"cov": S, "loglik": dense_loglik(S, y, X, params.beta)}
    out["beta_gls"], out["beta_cov"] = dense_gls(S, y, X)
    if preds is not None:
        S21 = dense_covariance(network, preds, params, sites_b=sites, nugget=False)
        var22 = np.full(len(preds), params.sigma2 + params.tau2)
        out["krig_mean"], out["krig_var"] = dense_kriging(S, S21, var22, y, X, preds.X, params.beta)
    return out


def sample_observations(preds, seed=None, n_obs=None):
    """Random subset of prediction sites used as observation locations."""
    rng = np.random.default_rng(seed)
    n_obs = observation_count(len(preds)) if n_obs is None else n_obs
    idx = np.sort(rng.choice(len(preds), size=n_obs, replace=False))
    return preds.take(idx)


def brute_afv(network, r):
    """Product of proportional influences walking down from reach ``r``."""
    val = 1.0
    while network.parent[r] >= 0:
        p = network.parent[r]
        val *= network.attributes[r] / sum(network.attributes[c] for c in network.children[p])
        r = p
    return val



def write_simulation(directory, n_reaches, params, seed=0, n_responses=1, n_obs=None,
                     network_spec=None):
    """Write ``flowlines.csv``, ``sites.csv``, ``preds.csv`` and ``truth.json``.

    Prediction sites are reach midpoints carrying one standard-normal
    covariate; observations are a random subset of them with responses drawn
    from the dense model.  Extra response columns are independent draws
    named ``y_obs_2``, ``y_obs_3``, ...
    """
    import json
    from pathlib import Path

    import pandas as pd
    import shapely

    from .network import build_network, write_flowlines_csv
    from .sites import reach_midpoints

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    spec = network_spec or SyntheticNetworkSpec(n_reaches, seed=seed)
    flowlines = generate_network(spec)
    write_flowlines_csv(flowlines, d / "flowlines.csv")
    net = build_network(flowlines)
    rng = np.random.default_rng([seed, 1])
    preds = reach_midpoints(net)
    preds = preds.with_data(np.column_stack([np.ones(len(preds)), rng.standard_normal(len(preds))]))
    obs = sample_observations(preds, seed=int(rng.integers(2**31)), n_obs=n_obs)
    S = dense_covariance(net, obs, params)
    ys, _ = simulate_ssn(net, obs, params, seed=int(rng.integers(2**31)), X=obs.X, n_draws=n_responses, cov=S)

    lines = [shapely.LineString(net.flowlines[r].vertices) for r in range(len(net))]

    def frame(sites):
        pts = [lines[r].interpolate(1.0 - q, normalized=True) for r, q in zip(sites.reach, sites.ratio)]
        return pd.DataFrame({"site_id": sites.site_ids, "x": [p.x for p in pts], "y": [p.y for p in pts],
                             "reach_id": sites.reach_ids, "ratio": sites.ratio})

    obs_df = frame(obs)
    for k in range(n_responses):
        obs_df["y_obs" if k == 0 else f"y_obs_{k + 1}"] = ys[k]
    obs_df["cov_1"] = obs.X[:, 1]
    obs_df.to_csv(d / "sites.csv", index=False)
    preds_df = frame(preds)
    preds_df["cov_1"] = preds.X[:, 1]
    preds_df.to_csv(d / "preds.csv", index=False)
    (d / "truth.json").write_text(json.dumps({
        "params": params.to_dict(), "n_reaches": len(net), "n_obs": len(obs), "seed": seed,
        "responses": ["y_obs"] + [f"y_obs_{k + 1}" for k in range(1, n_responses)],
    }, indent=2))
    return d
