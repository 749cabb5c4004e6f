"""Kriging from observation neighbors, and regional totals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import spatial_cov
from .distance import site_pair_arrays
from .errors import ConsistencyError

VAR_FLOOR = -1e-10


@dataclass(frozen=True)
class PredictionRecord:
    site_id: int
    reach_id: int
    mean: float
    var: float
    clamped_mean: float
    reach_contribution: float
    no_neighbors: bool = False


def predict(pred_neighbors, fit, X=None, batch_size=5000):
    """Local kriging mean and variance for every prediction site.

    Each site conditions only on its observation neighbors; the variance is
    that of a new observation (nugget included).  ``X`` overrides the
    prediction covariates stored on ``pred_neighbors.preds``.
    """
    pn = pred_neighbors
    preds, obs = pn.preds, pn.obs
    params = fit.params
    beta = params.beta
    X2 = preds.X if X is None else np.asarray(X, dtype=float).reshape(len(preds), -1)
    if np.isnan(obs.y).any():
        raise ConsistencyError("observation responses contain missing values")
    resid = obs.y - obs.X @ beta
    var0 = params.sigma2 + params.tau2
    n, m = pn.neighbors.shape
    mean = X2 @ beta
    var = np.full(n, var0)
    if m:
        resid_ext = np.append(resid, 0.0)
        ii, jj = np.triu_indices(m, 1)
        diag = np.arange(m)
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            nb = pn.neighbors[sl]
            valid = nb >= 0
            k = len(nb)
            C = np.zeros((k, m, m))
            a, b = nb[:, ii], nb[:, jj]
            ok = (a >= 0) & (b >= 0)
            rows, cols = np.nonzero(ok)
            if len(rows):
                _, h, _, w = site_pair_arrays(obs.network, obs, a[ok], obs, b[ok])
                cv = spatial_cov(h, w, params, fit.kernel)
                C[rows, ii[cols], jj[cols]] = cv
                C[rows, jj[cols], ii[cols]] = cv
            C[:, diag, diag] = np.where(valid, var0, 1.0)
            c = spatial_cov(pn.h[sl], pn.weight[sl], params, fit.kernel)
            wts = np.linalg.solve(C, c[..., None])[..., 0]
            mean[sl] += np.einsum("ij,ij->i", wts, resid_ext[nb])
            var[sl] = var0 - np.einsum("ij,ij->i", c, wts)
    var = np.where(var < 0, np.where(var >= VAR_FLOOR, 0.0, var), var)
    if (var < 0).any():
        raise ConsistencyError(f"negative predictive variance {var.min():.3g} beyond numerical floor")
    no_nb = (pn.neighbors < 0).all(axis=1) if m else np.ones(n, dtype=bool)
    clamped = np.maximum(mean, 0.0)
    lengths = preds.network.lengths[preds.reach]
    contrib = clamped * lengths / 100.0
    reach_ids = preds.reach_ids
    return [
        PredictionRecord(int(preds.site_ids[i]), int(reach_ids[i]), float(mean[i]), float(var[i]),
                         float(clamped[i]), float(contrib[i]), bool(no_nb[i]))
        for i in range(n)
    ]


def predictions_frame(records):
    import pandas as pd

    return pd.DataFrame({
        "site_id": [r.site_id for r in records],
        "reach_id": [r.reach_id for r in records],
        "mean": [r.mean for r in records],
        "var": [r.var for r in records],
        "clamped_mean": [r.clamped_mean for r in records],
        "reach_contribution": [r.reach_contribution for r in records],
    })


@dataclass
class RegionalSummary:
    total: float
    n_reaches: int
    total_length: float
    negative_fraction: float
    per_reach: object  # DataFrame: reach_id, length, mean, clamped_mean, contribution

    def to_dict(self):
        return {
            "total": self.total,
            "n_reaches": self.n_reaches,
            "total_length": self.total_length,
            "negative_fraction": self.negative_fraction,
        }


def regional_total(records, network, per_100m_scale=100.0):
    """Sum clamped densities times reach length over the region.

    Densities are per ``per_100m_scale`` length units; negative predicted
    densities are set to zero before summing.
    """
    import pandas as pd

    seen = set()
    rids, means = [], []
    for r in records:
        if int(r.reach_id) not in network.index:
            raise ConsistencyError(f"prediction record for unknown reach {r.reach_id}")
        if r.reach_id in seen:
            raise ConsistencyError(f"more than one prediction record for reach {r.reach_id}")
        seen.add(r.reach_id)
        rids.append(int(r.reach_id))
        means.append(float(r.mean))
    means = np.asarray(means, dtype=float)
    idx = np.array([network.index[r] for r in rids], dtype=np.int64)
    lengths = network.lengths[idx] if len(idx) else np.zeros(0)
    clamped = np.maximum(means, 0.0)
    contrib = clamped * lengths / per_100m_scale
    per_reach = pd.DataFrame({"reach_id": rids, "length": lengths, "mean": means,
                              "clamped_mean": clamped, "contribution": contrib})
    return RegionalSummary(
        total=float(contrib.sum()),
        n_reaches=len(rids),
        total_length=float(lengths.sum()),
        negative_fraction=float((means < 0).mean()) if len(means) else 0.0,
        per_reach=per_reach,
    )


def _corr(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    if len(a) < 3 or np.std(a) == 0 or np.std(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def predicted_observed_diagnostics(predicted, observed, groups=None):
    """Correlations between predicted and observed values.

    ``predicted`` and ``observed`` are ``(sites, groups)`` arrays (a 1-D
    array is one group).  Correlations are ``None`` where undefined: fewer
    than three values or zero variance.
    """
    P = np.asarray(predicted, dtype=float)
    O = np.asarray(observed, dtype=float)
    if P.ndim == 1:
        P, O = P[:, None], O[:, None]
    if P.shape != O.shape:
        raise ConsistencyError(f"predicted {P.shape} and observed {O.shape} shapes differ")
    names = list(groups) if groups is not None else [f"group_{j}" for j in range(P.shape[1])]
    per_group = {}
    for j, name in enumerate(names):
        obs_total = float(np.nansum(O[:, j]))
        per_group[name] = {
            "correlation": _corr(P[:, j], O[:, j]),
            "n_sites": int(np.isfinite(O[:, j]).sum()),
            "pred_obs_ratio": float(np.nansum(P[:, j]) / obs_total) if obs_total else None,
        }
    per_site = [_corr(P[i], O[i]) for i in range(P.shape[0])]
    return {"per_group": per_group, "per_site": per_site,
            "undefined_groups": [k for k, v in per_group.items() if v["correlation"] is None]}
