"""Sparse nearest-neighbor likelihood, ML fitting and bootstrap intervals.

For site ``i`` (in conditioning order) with neighbor set ``N(i)``:

    a_i = C(N, N)^{-1} C(N, i)
    d_i = C(i, i) - C(i, N) a_i

so that ``L = D^{-1/2} (I - A)`` whitens the residual field.  All per-site
systems are solved as one batched ``(n, m, m)`` stack; padded neighbor
slots carry an identity row and zero cross-covariance, which forces their
coefficient to zero.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .covariance import CovarianceParams, spatial_cov
from .errors import ConfigurationError, DimensionError, FactorizationError, SingularDesignError

log = logging.getLogger(__name__)

PARAM_NAMES = ("sigma2", "lambda", "tau2")


@dataclass
class VecchiaFactor:
    a: np.ndarray  # (n, m), aligned with neighbors; zeros on padding
    d: np.ndarray  # (n,)
    neighbors: np.ndarray  # (n, m), order positions, -1 padded
    order: np.ndarray
    jitter: float = 0.0

    def __len__(self):
        return len(self.d)

    def _gather(self, v):
        # index -1 picks the appended zero row
        ext = np.concatenate([v, np.zeros((1,) + v.shape[1:])])
        return ext[self.neighbors]

    def whiten(self, v):
        """Apply ``D^{-1/2}(I - A)`` to a vector or ``(n, p)`` matrix in factor order."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != len(self):
            raise DimensionError(f"expected {len(self)} rows, got {v.shape[0]}")
        if v.ndim == 1:
            pred = np.einsum("ij,ij->i", self.a, self._gather(v))
            return (v - pred) / np.sqrt(self.d)
        pred = np.einsum("ij,ijk->ik", self.a, self._gather(v))
        return (v - pred) / np.sqrt(self.d)[:, None]

    @property
    def i_minus_a(self):
        n, m = self.a.shape
        rows = np.repeat(np.arange(n), m)
        cols = self.neighbors.ravel()
        keep = cols >= 0
        A = scipy.sparse.csr_matrix((self.a.ravel()[keep], (rows[keep], cols[keep])), shape=(n, n))
        return (scipy.sparse.identity(n, format="csr") - A).tocsr()

    def unwhiten(self, e):
        """Inverse of :meth:`whiten`: solve ``(I - A) w = D^{1/2} e``."""
        e = np.asarray(e, dtype=float)
        rhs = e * (np.sqrt(self.d) if e.ndim == 1 else np.sqrt(self.d)[:, None])
        return scipy.sparse.linalg.spsolve_triangular(self.i_minus_a, rhs, lower=True)

    def covariance(self):
        """Dense ``(I - A)^{-1} D (I - A)^{-T}``; for testing on small n only."""
        L_inv = np.linalg.inv(self.i_minus_a.toarray())
        return L_inv @ np.diag(self.d) @ L_inv.T


def _chol_ok(blocks):
    try:
        np.linalg.cholesky(blocks)
        return True
    except np.linalg.LinAlgError:
        return False


def vecchia_factor(graph, params, network=None, kernel="exponential_tailup"):
    """Nearest-neighbor factor of the covariance at ``params`` for an ordered graph."""
    n, m = graph.neighbors.shape
    var0 = params.sigma2 + params.tau2
    if m == 0:
        return VecchiaFactor(np.zeros((n, 0)), np.full(n, var0), graph.neighbors, graph.order)

    hb, wb = graph.block_geometry
    valid = graph.neighbors >= 0
    C = spatial_cov(hb, wb, params, kernel)
    diag = np.arange(m)
    C[:, diag, diag] += np.where(valid, params.tau2, 1.0)
    c = spatial_cov(graph.h, graph.weight, params, kernel)

    jitter = 0.0
    if not _chol_ok(C):
        jitter = 1e-10 * var0
        C[:, diag, diag] += np.where(valid, jitter, 0.0)
        if not _chol_ok(C):
            for i in range(n):
                if not _chol_ok(C[i]):
                    raise FactorizationError(
                        f"neighbor covariance of site {graph.site_ids[i]} is not positive definite",
                        int(graph.site_ids[i]))
    a = np.linalg.solve(C, c[..., None])[..., 0]
    d = var0 + jitter - np.einsum("ij,ij->i", c, a)
    if (d <= 0).any():
        i = int(np.flatnonzero(d <= 0)[0])
        raise FactorizationError(f"nonpositive conditional variance at site {graph.site_ids[i]}",
                                 int(graph.site_ids[i]))
    return VecchiaFactor(a, d, graph.neighbors, graph.order, jitter)


def loglik(factor, y, X=None, beta=None):
    """Approximate Gaussian log-likelihood of ``y`` (factor order) given ``X beta``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (len(factor),):
        raise DimensionError(f"y has shape {y.shape}, expected ({len(factor)},)")
    r = y if X is None else y - np.asarray(X, dtype=float) @ np.asarray(beta, dtype=float)
    e = factor.whiten(r)
    return float(-0.5 * (len(r) * np.log(2 * np.pi) + np.log(factor.d).sum() + e @ e))


def profile_beta(factor, y, X):
    """GLS coefficients and their covariance ``(X' S^{-1} X)^{-1}`` via whitening."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != len(factor) or y.shape[0] != len(factor):
        raise DimensionError("X, y and factor lengths differ")
    Xw = factor.whiten(X)
    yw = factor.whiten(y)
    if np.linalg.matrix_rank(Xw) < X.shape[1]:
        raise SingularDesignError(f"whitened design has rank < {X.shape[1]}")
    beta, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    XtX = Xw.T @ Xw
    beta_cov = np.linalg.inv(XtX)
    return beta, 0.5 * (beta_cov + beta_cov.T)


@dataclass
class OptimizerConfig:
    max_iter: int = 500
    tol: float = 1e-8  # relative change in loglik
    xatol: float = 1e-4  # simplex size in log-parameter space
    init: dict | None = None  # optional {"sigma2":, "lambda":, "tau2":}


@dataclass
class FitResult:
    params: CovarianceParams
    beta_cov: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    n_evals: int
    n: int
    m: int
    kernel: str = "exponential_tailup"
    jitter: float = 0.0
    timing: dict = field(default_factory=dict)
    cis: dict | None = None
    bootstrap: dict | None = None

    @property
    def beta(self):
        return self.params.beta

    @property
    def beta_se(self):
        return np.sqrt(np.diag(self.beta_cov))

    def to_dict(self):
        return {
            "kernel": self.kernel,
            "params": self.params.to_dict(),
            "beta_cov": self.beta_cov.tolist(),
            "beta_se": self.beta_se.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_evals": self.n_evals,
            "n": self.n,
            "m": self.m,
            "jitter": self.jitter,
            "timing": self.timing,
            "cis": {k: list(v) for k, v in self.cis.items()} if self.cis else None,
            "bootstrap": self.bootstrap,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            params=CovarianceParams.from_dict(d["params"]),
            beta_cov=np.asarray(d["beta_cov"], dtype=float),
            loglik=d["loglik"],
            converged=d["converged"],
            iterations=d["iterations"],
            n_evals=d["n_evals"],
            n=d["n"],
            m=d["m"],
            kernel=d.get("kernel", "exponential_tailup"),
            jitter=d.get("jitter", 0.0),
            timing=d.get("timing", {}),
            cis={k: tuple(v) for k, v in d["cis"].items()} if d.get("cis") else None,
            bootstrap=d.get("bootstrap"),
        )


def _ordered_data(graph, y, X):
    if y is None:
        y_ord = graph.sites.y
    else:
        y_ord = np.asarray(y, dtype=float)[graph.order]
    if X is None:
        X_ord = graph.sites.X
    else:
        X_ord = np.asarray(X, dtype=float).reshape(len(graph), -1)[graph.order]
    if np.isnan(y_ord).any():
        raise DimensionError("response has missing values at observation sites")
    return y_ord, X_ord


def default_init(graph, y_ord, X_ord):
    beta, *_ = np.linalg.lstsq(X_ord, y_ord, rcond=None)
    resid = y_ord - X_ord @ beta
    v = float(np.var(resid, ddof=min(X_ord.shape[1], len(resid) - 1))) if len(resid) > 1 else 1.0
    v = v if v > 0 else 1.0
    dists = graph.total_dist[np.isfinite(graph.total_dist) & (graph.total_dist > 0)]
    lam = float(np.median(dists)) if dists.size else 1.0
    return {"sigma2": v / 2, "lambda": lam, "tau2": v / 2}


def _bounds(graph, y_ord, init):
    v = float(np.var(y_ord)) or 1.0
    dists = graph.total_dist[np.isfinite(graph.total_dist) & (graph.total_dist > 0)]
    dlo = float(dists.min()) if dists.size else init["lambda"]
    dhi = float(dists.max()) if dists.size else init["lambda"]
    lv = np.log(v)
    return [
        (lv - 25.0, lv + 10.0),
        (min(np.log(dlo), np.log(init["lambda"])) - 10.0, max(np.log(dhi), np.log(init["lambda"])) + 10.0),
        (lv - 25.0, lv + 10.0),
    ]


def _profile_objective(graph, y_ord, X_ord, kernel):
    def objective(theta):
        s2, lam, t2 = np.exp(theta)
        try:
            f = vecchia_factor(graph, CovarianceParams(s2, lam, t2), kernel=kernel)
            beta, _ = profile_beta(f, y_ord, X_ord)
            val = -loglik(f, y_ord, X_ord, beta)
        except (FactorizationError, SingularDesignError, np.linalg.LinAlgError):
            return 1e300
        return val if np.isfinite(val) else 1e300
    return objective


def _finish(graph, y_ord, X_ord, s2, lam, t2, kernel):
    f = vecchia_factor(graph, CovarianceParams(s2, lam, t2), kernel=kernel)
    beta, beta_cov = profile_beta(f, y_ord, X_ord)
    return f, beta, beta_cov, loglik(f, y_ord, X_ord, beta)


def fit(graph, y=None, X=None, init=None, config=None, kernel="exponential_tailup"):
    """Maximum-likelihood fit with ``beta`` profiled out by GLS.

    ``y`` and ``X`` are in the input order of the sites the graph was built
    from; when omitted they are taken from ``graph.sites``.  Covariance
    parameters are optimised on the log scale by bounded Nelder-Mead.
    """
    y_ord, X_ord = _ordered_data(graph, y, X)
    return _fit_ordered(graph, y_ord, X_ord, init, config, kernel)


def _fit_ordered(graph, y_ord, X_ord, init=None, config=None, kernel="exponential_tailup"):
    config = config or OptimizerConfig()
    t0 = time.perf_counter()
    n, p = X_ord.shape
    if n < p + 1:
        raise DimensionError(f"need n >= p + 1 observations, got n={n}, p={p}")
    init = dict(init or config.init or default_init(graph, y_ord, X_ord))
    theta0 = np.log([init["sigma2"], init["lambda"], init["tau2"]])
    bounds = _bounds(graph, y_ord, init)
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])

    objective = _profile_objective(graph, y_ord, X_ord, kernel)
    f0 = objective(theta0)
    fatol = config.tol * max(1.0, abs(f0)) if f0 < 1e300 else config.tol
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = scipy.optimize.minimize(
            objective, theta0, method="Nelder-Mead", bounds=bounds,
            options={"maxiter": config.max_iter, "xatol": config.xatol, "fatol": fatol},
        )
    t1 = time.perf_counter()
    s2, lam, t2 = np.exp(res.x)
    factor, beta, beta_cov, ll = _finish(graph, y_ord, X_ord, s2, lam, t2, kernel)
    t2_ = time.perf_counter()
    return FitResult(
        params=CovarianceParams(float(s2), float(lam), float(t2), beta),
        beta_cov=beta_cov,
        loglik=ll,
        converged=bool(res.success),
        iterations=int(res.nit),
        n_evals=int(res.nfev),
        n=n,
        m=graph.m,
        kernel=kernel,
        jitter=factor.jitter,
        timing={"optimize_s": t1 - t0, "finalize_s": t2_ - t1},
    )


def _replicate(graph, X_ord, mean, factor, resid_pool, mode, seed, init, config, kernel):
    rng = np.random.default_rng(seed)
    n = len(mean)
    if mode == "resample":
        eps = rng.choice(resid_pool, size=n, replace=True)
    else:
        eps = rng.standard_normal(n)
    y_star = mean + factor.unwhiten(eps)
    return _fit_ordered(graph, y_star, X_ord, init, config, kernel)


def bootstrap_ci(fit_result, graph, y=None, X=None, B=100, seed=0, mode="resample", level=0.95,
                 config=None, n_jobs=1):
    """Decorrelate, resample, recorrelate, refit; percentile intervals.

    Returns ``(cis, info)`` where ``cis`` maps parameter name to ``(lo, hi)``
    and ``info`` records replicate estimates and non-convergence counts.
    Intervals are widened if needed to contain the point estimate.
    """
    if B < 2:
        raise ConfigurationError(f"bootstrap needs B >= 2, got {B}")
    if mode not in ("resample", "normal"):
        raise ConfigurationError(f"unknown bootstrap mode {mode!r}")
    y_ord, X_ord = _ordered_data(graph, y, X)
    p = fit_result.params
    factor = vecchia_factor(graph, p, kernel=fit_result.kernel)
    mean = X_ord @ p.beta
    eps = factor.whiten(y_ord - mean)
    pool = eps - eps.mean()
    init = {"sigma2": max(p.sigma2, 1e-12), "lambda": p.lam, "tau2": max(p.tau2, 1e-12)}
    seeds = np.random.SeedSequence(seed).spawn(B)
    args = (graph, X_ord, mean, factor, pool, mode)
    if n_jobs == 1:
        reps = [_replicate(*args, s, init, config, fit_result.kernel) for s in seeds]
    else:
        from joblib import Parallel, delayed

        reps = Parallel(n_jobs=n_jobs)(
            delayed(_replicate)(*args, s, init, config, fit_result.kernel) for s in seeds)

    ok = [r for r in reps if r.converged]
    n_failed = len(reps) - len(ok)
    if n_failed:
        log.warning("%d of %d bootstrap replicates did not converge and were dropped", n_failed, len(reps))
    names = list(PARAM_NAMES) + [f"beta_{j}" for j in range(len(p.beta))]
    estimates = {k: [] for k in names}
    for r in ok:
        estimates["sigma2"].append(r.params.sigma2)
        estimates["lambda"].append(r.params.lam)
        estimates["tau2"].append(r.params.tau2)
        for j, b in enumerate(r.params.beta):
            estimates[f"beta_{j}"].append(float(b))
    point = {"sigma2": p.sigma2, "lambda": p.lam, "tau2": p.tau2}
    point.update({f"beta_{j}": float(b) for j, b in enumerate(p.beta)})
    alpha = (1.0 - level) / 2.0
    cis = {}
    if ok:
        for k in names:
            lo, hi = np.quantile(estimates[k], [alpha, 1.0 - alpha])
            cis[k] = (float(min(lo, point[k])), float(max(hi, point[k])))
    info = {"B": B, "mode": mode, "level": level, "seed": seed, "n_converged": len(ok),
            "n_failed": n_failed, "estimates": estimates}
    return cis, info
