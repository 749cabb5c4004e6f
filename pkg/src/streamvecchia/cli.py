"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``) and applies
flag overrides on top.  Stage subcommands write into ``--output-dir`` and
share the same content-hash cache as ``pipeline``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import EXIT_INPUT, StreamVecchiaError


def _common(p):
    p.add_argument("--config", help="JSON pipeline config; flags override its values")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("-v", "--verbose", action="store_true")


def _network_flags(p):
    p.add_argument("--flowlines", help="flowline CSV (reach_id,length_m,additive_attr,wkt) or NDJSON")
    p.add_argument("--precision", type=int)
    p.add_argument("--fix-complex-confluences", dest="fix_complex_confluences", action="store_true",
                   default=None)
    p.add_argument("--largest-component-only", dest="largest_component_only", action="store_true",
                   default=None)


def _site_flags(p):
    p.add_argument("--sites", help="observation sites CSV")
    p.add_argument("--preds", help="prediction sites CSV (default: one midpoint per reach)")
    p.add_argument("--snap-threshold", dest="snap_threshold", type=float)
    p.add_argument("--response", dest="responses", action="append",
                   help="response column; repeat for several")


def _distance_flags(p):
    p.add_argument("--m", type=int)
    p.add_argument("--order", choices=["updist_desc", "input", "random"])
    p.add_argument("--nn-metric", dest="nn_metric", choices=["total", "flow-connected-only"])
    p.add_argument("--order-seed", dest="order_seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)


def _fit_flags(p):
    p.add_argument("--init", help='JSON like {"sigma2": 1, "lambda": 0.1, "tau2": 1}')
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--bootstrap", type=int, help="number of bootstrap replicates B")
    p.add_argument("--bootstrap-mode", dest="bootstrap_mode", choices=["resample", "normal"])
    p.add_argument("--seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="streamvecchia", description="Stream-network nearest-neighbor Gaussian process pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build and persist the reach tree")
    _common(p), _network_flags(p)

    p = sub.add_parser("sites", help="snap observation sites and write the site table")
    _common(p), _network_flags(p), _site_flags(p)

    p = sub.add_parser("distances", help="neighbor sets for observations and prediction sites")
    _common(p), _network_flags(p), _site_flags(p), _distance_flags(p)

    p = sub.add_parser("fit", help="maximum-likelihood fit, optional bootstrap")
    _common(p), _network_flags(p), _site_flags(p), _distance_flags(p), _fit_flags(p)

    p = sub.add_parser("predict", help="kriging at prediction sites from a saved fit")
    _common(p), _network_flags(p), _site_flags(p), _distance_flags(p)
    p.add_argument("--fit", dest="fit_path", help="fit JSON (default: <output-dir>/fits/<response>.json)")

    p = sub.add_parser("aggregate", help="regional total from a predictions CSV")
    _common(p), _network_flags(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--scale", dest="per_100m_scale", type=float, help="length units per density unit")

    p = sub.add_parser("simulate", help="write a synthetic network, sites and responses")
    p.add_argument("--output-dir", dest="output_dir", required=True)
    p.add_argument("--reaches", type=int, default=1000)
    p.add_argument("--obs", type=int, help="observation count (default ceil(reaches / 2))")
    p.add_argument("--responses", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", default='{"sigma2": 5, "lambda": 0.1, "tau2": 5, "beta": [0.5, -44]}')
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("bench", help="scaling benchmark over synthetic networks")
    _common(p)
    p.add_argument("--reach-counts", dest="reach_counts", type=int, nargs="+")
    p.add_argument("--obs-counts", dest="obs_counts", type=int, nargs="+")
    p.add_argument("--replicates", type=int)
    p.add_argument("--stages", nargs="+")
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p), _network_flags(p), _site_flags(p), _distance_flags(p), _fit_flags(p)
    return parser


_NOT_CONFIG = {"command", "config", "verbose", "fit_path", "predictions", "reach_counts", "obs_counts",
               "replicates", "stages"}


def load_config(args):
    from .pipeline import PipelineConfig

    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if isinstance(overrides.get("init"), str):
        try:
            overrides["init"] = json.loads(overrides["init"])
        except json.JSONDecodeError as exc:
            from .errors import ConfigurationError

            raise ConfigurationError(f"--init is not valid JSON: {exc}") from None
    return cfg.with_overrides(**overrides)


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _fit_path(cfg, args, response):
    return Path(args.fit_path) if args.fit_path else Path(cfg.output_dir) / "fits" / f"{response}.json"


def run(args):
    from . import pipeline as pl

    if args.command == "simulate":
        from .covariance import CovarianceParams
        from .simulate import write_simulation

        params = CovarianceParams.from_dict(json.loads(args.params))
        d = write_simulation(args.output_dir, args.reaches, params, seed=args.seed,
                             n_responses=args.responses, n_obs=args.obs)
        names = json.loads((d / "truth.json").read_text())["responses"]
        cfg = pl.PipelineConfig(flowlines=str(d / "flowlines.csv"), sites=str(d / "sites.csv"),
                                preds=str(d / "preds.csv"), output_dir=str(d / "run"), responses=names)
        cfg.save(d / "config.json")
        _emit({"written": sorted(p.name for p in d.iterdir())})
        return

    cfg = load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()

    if args.command == "pipeline":
        doc = pl.run_pipeline(cfg)
        _emit({k: doc[k] for k in ("config_hash", "n_reaches", "n_obs", "n_preds", "cache", "responses")})
        return

    if args.command == "bench":
        from .bench import run_benchmark

        spec = pl.BenchmarkSpec(**{**cfg.bench.__dict__, **{
            k: v for k, v in vars(args).items()
            if k in ("reach_counts", "obs_counts", "replicates", "stages", "m", "seed") and v is not None}})
        res = run_benchmark(spec, out_csv=out / "bench.csv")
        res.table().to_csv(out / "bench_table.csv")
        _emit({"slopes": res.slopes, "csv": str(out / "bench.csv")})
        return

    timer = pl.Timer()
    net, net_key, cached = pl.stage_preprocess(cfg, timer)
    if args.command == "preprocess":
        from .network import save_network

        save_network(net, out / "network", {"config_hash": chash})
        _emit({"n_reaches": len(net), "n_components": net.n_components, "cached": cached,
               "cleaning_steps": list(net.cleaning_steps), "timings": timer.rows})
        return

    if args.command == "aggregate":
        import pandas as pd

        from .predict import PredictionRecord, regional_total

        df = pd.read_csv(args.predictions)
        records = [PredictionRecord(int(r.site_id), int(r.reach_id), float(r.mean), float(r.var),
                                    float(r.clamped_mean), float(r.reach_contribution))
                   for r in df.itertuples()]
        summary = regional_total(records, net, cfg.per_100m_scale)
        doc = {**summary.to_dict(), "config_hash": chash, "predictions": str(args.predictions)}
        pl._write_json(out / "regional.json", doc)
        summary.per_reach.assign(config_hash=chash).to_csv(out / "regional_reaches.csv", index=False)
        _emit(doc)
        return

    obs, preds = pl.stage_sites(cfg, net)
    if args.command == "sites":
        obs.to_frame().assign(config_hash=chash).to_csv(out / "sites.csv", index=False)
        _emit({"n_obs": len(obs), "n_preds": len(preds), "max_snap_distance": float(obs.snap_distance.max())
               if len(obs) else 0.0})
        return

    graph, pn, dist_cached = pl.stage_distances(cfg, net, net_key, obs, preds, timer)
    if args.command == "distances":
        _emit({"n_obs": len(obs), "n_preds": len(preds), "m": cfg.m, "cached": dist_cached,
               "timings": timer.rows})
        return

    from .predict import predictions_frame
    from .vecchia import FitResult

    report = {}
    for name in cfg.responses:
        y = pl.response_values(cfg, obs, name)
        if args.command == "fit":
            res = pl.stage_fit(cfg, graph, y, obs.X, timer, response=name)
            doc = {**res.to_dict(), "config_hash": chash, "response": name}
            (out / "fits").mkdir(exist_ok=True)
            pl._write_json(out / "fits" / f"{name}.json", doc)
            report[name] = {"params": res.params.to_dict(), "loglik": res.loglik, "converged": res.converged,
                            "cis": doc["cis"]}
        else:
            path = _fit_path(cfg, args, name)
            try:
                res = FitResult.from_dict(json.loads(path.read_text()))
            except OSError as exc:
                from .errors import ConfigurationError

                raise ConfigurationError(f"cannot read fit {path}: {exc}") from None
            records = pl.stage_predict(cfg, pn, obs.with_data(obs.X, y), res, timer, response=name)
            (out / "predictions").mkdir(exist_ok=True)
            dest = out / "predictions" / f"{name}.csv"
            predictions_frame(records).assign(config_hash=chash).to_csv(dest, index=False)
            report[name] = {"predictions": str(dest), "n": len(records)}
    _emit({"responses": report, "timings": timer.rows})


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except StreamVecchiaError as exc:
        stage = getattr(exc, "stage", None)
        prefix = f"error in stage {stage!r}: " if stage else "error: "
        print(prefix + str(exc), file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_INPUT)
    return 0


if __name__ == "__main__":
    sys.exit(main())
