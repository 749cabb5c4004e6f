"""Scaling benchmark over synthetic networks of increasing size."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceParams
from .distance import build_neighbor_graph, predict_neighbors
from .network import build_network
from .pipeline import TABLE_STAGES, BenchmarkSpec
from .predict import predict
from .simulate import SyntheticNetworkSpec, generate_network, observation_count, sample_observations
from .sites import reach_midpoints
from .vecchia import OptimizerConfig, fit, loglik, vecchia_factor

LIKELIHOOD = "likelihood"
PREPROCESS = "preprocess"
# stages whose natural size is the observation count
OBS_SIZED = {"obs-obs distances", "estimation", LIKELIHOOD}

TRUTH = CovarianceParams(5.0, 0.1, 5.0, [0.5, -44.0])


@dataclass
class BenchmarkResult:
    frame: object  # DataFrame: stage, reach_count, obs_count, replicate, seconds
    slopes: dict  # stage -> log-log slope against its size variable

    def table(self):
        """Median seconds per stage and size, one row per reach count."""
        return self.frame.pivot_table(index=["reach_count", "obs_count"], columns="stage",
                                      values="seconds", aggfunc="median")


def loglog_slope(sizes, seconds):
    """Least-squares slope of log(seconds) against log(size), on per-size medians."""
    sizes = np.asarray(sizes, dtype=float)
    seconds = np.asarray(seconds, dtype=float)
    xs = np.unique(sizes)
    if len(xs) < 2:
        return float("nan")
    med = np.array([np.median(seconds[sizes == x]) for x in xs])
    med = np.maximum(med, 1e-9)
    return float(np.polyfit(np.log(xs), np.log(med), 1)[0])


def _clock(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def _one_size(R, n_obs, replicate, spec, want):
    seed = int(np.random.SeedSequence([spec.seed, R, replicate]).generate_state(1)[0])
    rng = np.random.default_rng(seed)
    flowlines = generate_network(SyntheticNetworkSpec(R, seed=seed))
    rows = []

    def row(stage, seconds):
        rows.append({"stage": stage, "reach_count": R, "obs_count": n_obs, "replicate": replicate,
                     "seconds": seconds})

    timings = {}
    net = build_network(flowlines, timings=timings)
    for name in ("configure network", "updist/AFV"):
        if name in want:
            row(name, timings[name])
    if PREPROCESS in want:
        row(PREPROCESS, timings["configure network"] + timings["updist/AFV"])
    needs_obs = want - {"configure network", "updist/AFV", PREPROCESS}
    if not needs_obs:
        return rows

    preds = reach_midpoints(net)
    preds = preds.with_data(np.column_stack([np.ones(len(preds)), rng.standard_normal(len(preds))]))
    obs = sample_observations(preds, seed=seed, n_obs=n_obs)
    graph, t = _clock(build_neighbor_graph, obs, m=spec.m)
    if "obs-obs distances" in want:
        row("obs-obs distances", t)
    # responses drawn from the nearest-neighbor model itself; dense draws are infeasible here
    factor = vecchia_factor(graph, TRUTH)
    y_ord = graph.sites.X @ TRUTH.beta + factor.unwhiten(rng.standard_normal(len(obs)))
    y = np.empty_like(y_ord)
    y[graph.order] = y_ord
    obs = obs.with_data(obs.X, y)

    if LIKELIHOOD in want:
        _, t = _clock(lambda: loglik(vecchia_factor(graph, TRUTH), y_ord, graph.sites.X, TRUTH.beta))
        row(LIKELIHOOD, t)
    res = None
    if "estimation" in want or "prediction" in want:
        res, t = _clock(fit, graph, y, obs.X, config=OptimizerConfig())
        if "estimation" in want:
            row("estimation", t)
    if "preds-obs distances" in want or "prediction" in want:
        pn, t = _clock(predict_neighbors, preds, obs, m=spec.m)
        if "preds-obs distances" in want:
            row("preds-obs distances", t)
        if "prediction" in want:
            _, t = _clock(predict, pn, res)
            row("prediction", t)
    return rows


def run_benchmark(spec=None, out_csv=None):
    """Time each requested stage across ``spec.reach_counts`` and fit log-log slopes.

    Stage names follow the usual runtime table (configure network,
    updist/AFV, obs-obs distances, preds-obs distances, estimation,
    prediction) plus ``preprocess`` (the first two combined) and
    ``likelihood`` (one factor build and log-likelihood evaluation at fixed
    parameters).
    """
    import pandas as pd

    spec = spec or BenchmarkSpec()
    want = set(spec.stages)
    unknown = want - set(TABLE_STAGES) - {PREPROCESS, LIKELIHOOD}
    if unknown:
        from .errors import ConfigurationError

        raise ConfigurationError(f"unknown benchmark stages {sorted(unknown)}")
    obs_counts = spec.obs_counts or [observation_count(r) for r in spec.reach_counts]
    rows = []
    for R, n_obs in zip(spec.reach_counts, obs_counts):
        for k in range(spec.replicates):
            rows.extend(_one_size(int(R), int(n_obs), k, spec, want))
    frame = pd.DataFrame(rows, columns=["stage", "reach_count", "obs_count", "replicate", "seconds"])
    slopes = {}
    for stage, grp in frame.groupby("stage"):
        size = grp["obs_count"] if stage in OBS_SIZED else grp["reach_count"]
        slopes[stage] = loglog_slope(size, grp["seconds"])
    if out_csv is not None:
        frame.to_csv(out_csv, index=False)
    return BenchmarkResult(frame, slopes)
