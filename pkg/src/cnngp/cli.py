"""Command-line entry points tying the pipeline together.

Subcommands: simulate, prepare, fit, predict, evaluate, prior-phi,
experiment, report. Most take a JSON config file; configs are schema-checked
and unknown keys are rejected before anything runs. Exit codes: 0 success,
2 validation error, 3 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import dataio
from .clustering import ClusterModel, build_cluster_model
from .evaluation import crps_mean, point_metrics, waic
from .geometry import NeighborGraph, SpatialDataset, build_neighbor_graph, maxmin_order
from .inference import (PosteriorChain, PriorSpec, SamplerConfig,
                        phi_prior_from_distances, run_chain)
from .prediction import predict
from .simulate import (ModelConfig, ScenarioSpec, generate_dataset,
                       run_experiment, spatial_block_folds)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


def _check_keys(cfg: dict, allowed: dict, where: str) -> None:
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = [k for k, required in allowed.items() if required and k not in cfg]
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {missing}")


def _load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cfg = dataio.read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg


def _coords_sha(coords: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(coords).tobytes()).hexdigest()


def _priors_from_cfg(cfg: dict) -> PriorSpec:
    _check_keys(cfg, {"phi": True, "sigma2": True, "tau2": True}, "priors")
    try:
        return PriorSpec(
            phi_lower=float(cfg["phi"][0]), phi_upper=float(cfg["phi"][1]),
            sigma2_shape=float(cfg["sigma2"][0]), sigma2_scale=float(cfg["sigma2"][1]),
            tau2_shape=float(cfg["tau2"][0]), tau2_scale=float(cfg["tau2"][1]),
        )
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"priors: {exc}") from exc


def _sampler_from_cfg(cfg: dict) -> SamplerConfig:
    allowed = {"iterations": True, "burn_in": True, "thin": False,
               "seed": False, "step_sigma2": False, "step_phi": False,
               "adapt": False, "target_accept": False, "w_thin": False,
               "store_w": False, "recenter_beta": False}
    _check_keys(cfg, allowed, "sampler")
    try:
        return SamplerConfig(**{k: cfg[k] for k in cfg})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sampler: {exc}") from exc


def _load_dataset(coords_path, design_path, response_path) -> SpatialDataset:
    ids_c, coords = dataio.read_coords(coords_path)
    ids_d, design = dataio.read_design(design_path)
    ids_r, response = dataio.read_response(response_path)
    if not (np.array_equal(ids_c, ids_d) and np.array_equal(ids_c, ids_r)):
        raise ConfigError("coords/design/response id columns do not match")
    return SpatialDataset(coords, design, response)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"n": True, "phi_true": True, "sigma2_true": True,
               "tau2_true": True, "beta_true": False, "seed": False,
               "out_dir": False}
    _check_keys(cfg, allowed, "simulate")
    try:
        spec = ScenarioSpec(n=int(cfg["n"]), phi_true=float(cfg["phi_true"]),
                            sigma2_true=float(cfg["sigma2_true"]),
                            tau2_true=float(cfg["tau2_true"]),
                            beta_true=tuple(cfg.get("beta_true", (1.0, 5.0))))
    except ValueError as exc:
        raise ConfigError(f"simulate: {exc}") from exc
    seed = int(cfg.get("seed", 0))
    out_dir = args.out_dir or cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("simulate: out_dir required (config key or --out-dir)")
    dataset, w = generate_dataset(spec, seed)
    dataio.ensure_dir(out_dir)
    dataio.write_coords(os.path.join(out_dir, "coords.csv"), dataset.coords)
    dataio.write_design(os.path.join(out_dir, "design.csv"), dataset.design)
    dataio.write_response(os.path.join(out_dir, "response.csv"), dataset.response)
    dataio.write_response(os.path.join(out_dir, "w_true.csv"), w)
    dataio.write_json(os.path.join(out_dir, "truth.json"),
                      {**spec.to_dict(), "seed": seed})
    print(f"wrote {dataset.n} locations to {out_dir}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"coords": True, "m": True, "cluster": False, "out_dir": False}
    _check_keys(cfg, allowed, "prepare")
    out_dir = args.out_dir or cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("prepare: out_dir required (config key or --out-dir)")
    _, coords = dataio.read_coords(cfg["coords"])
    m = int(cfg["m"])
    ordering = maxmin_order(coords)
    graph = build_neighbor_graph(coords, ordering, m)
    dataio.ensure_dir(out_dir)
    sha = _coords_sha(coords)
    dataio.write_json(os.path.join(out_dir, "graph.json"),
                      {**graph.to_dict(), "coords_sha256": sha})
    manifest = {"coords": cfg["coords"], "n": graph.n, "m": m,
                "coords_sha256": sha}

    if "cluster" in cfg:
        ccfg = cfg["cluster"]
        callowed = {"variance_threshold": False, "subsample": False,
                    "radius": False, "radii": False, "seed": False}
        _check_keys(ccfg, callowed, "prepare.cluster")
        model, sweep = build_cluster_model(
            graph, coords,
            variance_threshold=float(ccfg.get("variance_threshold", 0.9)),
            radius=ccfg.get("radius"),
            radii=ccfg.get("radii"),
            subsample=int(ccfg.get("subsample", 10_000)),
            seed=int(ccfg.get("seed", 0)),
        )
        dataio.write_json(os.path.join(out_dir, "clusters.json"),
                          {**model.to_dict(), "coords_sha256": sha})
        manifest["kappa"] = model.kappa
        manifest["radius"] = model.radius
        manifest["pca_components"] = model.reducer.k
        if sweep is not None:
            dataio.write_table(os.path.join(out_dir, "sweep.csv"),
                               ["radius", "kappa"],
                               [sweep.radii, sweep.kappas])
            manifest["suggested_radius"] = sweep.suggested
        print(f"clusters: kappa={model.kappa} radius={model.radius:.6g}")
    dataio.write_json(os.path.join(out_dir, "prepare.json"), manifest)
    print(f"prepared artifacts in {out_dir}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"coords": True, "design": True, "response": True, "m": True,
               "graph": False, "clusters": False, "priors": False,
               "sampler": True, "out_dir": False}
    _check_keys(cfg, allowed, "fit")
    out_dir = args.out_dir or cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("fit: out_dir required (config key or --out-dir)")
    dataset = _load_dataset(cfg["coords"], cfg["design"], cfg["response"])
    m = int(cfg["m"])
    sha = _coords_sha(dataset.coords)

    if "graph" in cfg:
        gd = dataio.read_json(cfg["graph"])
        if gd.get("coords_sha256") != sha:
            raise ConfigError("fit: graph.json was built from different coordinates")
        graph = NeighborGraph.from_dict(gd)
        if graph.m != m:
            raise ConfigError(f"fit: graph has m={graph.m}, config says m={m}")
    else:
        graph = build_neighbor_graph(dataset.coords, maxmin_order(dataset.coords), m)

    clusters = None
    if "clusters" in cfg:
        if not os.path.exists(cfg["clusters"]):
            raise ConfigError(f"fit: cluster file not found: {cfg['clusters']}")
        cd = dataio.read_json(cfg["clusters"])
        if cd.get("coords_sha256") != sha:
            raise ConfigError("fit: clusters.json was built from different coordinates")
        cd.pop("coords_sha256", None)
        clusters = ClusterModel.from_dict(cd)

    priors = _priors_from_cfg(cfg["priors"]) if "priors" in cfg else PriorSpec()
    config = _sampler_from_cfg(cfg["sampler"])
    chain = run_chain(dataset, graph, priors, config, clusters=clusters)
    chain.save(out_dir)
    print(f"chain: {chain.n_draws} draws, accept={chain.accept_rate:.3f}, "
          f"ops/proposal={chain.ops_per_proposal}"
          + (f", kappa={chain.kappa}" if chain.kappa is not None else ""))
    print(f"wrote chain to {out_dir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"coords": True, "chain_dir": True, "new_coords": True,
               "new_design": True, "m": True, "thin": False, "seed": False,
               "include_draws": False, "out": True}
    _check_keys(cfg, allowed, "predict")
    _, coords = dataio.read_coords(cfg["coords"])
    _, new_coords = dataio.read_coords(cfg["new_coords"])
    _, new_design = dataio.read_design(cfg["new_design"])
    chain = PosteriorChain.load(cfg["chain_dir"])
    if chain.n_draws == 0:
        raise ConfigError("predict: chain holds no draws")
    # Prediction conditions on the observed w draws; only coords are needed
    # from the training data, so build a placeholder dataset around them.
    dataset = SpatialDataset(coords, np.ones((len(coords), 1)),
                             np.zeros(len(coords)))
    result = predict(dataset, chain, new_coords, new_design, m=int(cfg["m"]),
                     thin=int(cfg.get("thin", 10)), seed=int(cfg.get("seed", 0)),
                     include_draws=bool(cfg.get("include_draws", True)))
    result.save(cfg["out"])
    print(f"wrote {result.n_locations} predictions to {cfg['out']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"predictions": True, "truth": True, "draws": False,
               "chain_dir": False, "train_coords": False, "train_design": False,
               "train_response": False, "out_dir": False}
    _check_keys(cfg, allowed, "evaluate")
    out_dir = args.out_dir or cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("evaluate: out_dir required (config key or --out-dir)")
    _, pdata = dataio.read_table(
        cfg["predictions"],
        expected_header=["id", "x", "y", "mean", "sd", "q025", "q975"])
    _, y = dataio.read_response(cfg["truth"])
    if len(y) != len(pdata):
        raise ConfigError("evaluate: truth and predictions lengths differ")
    mae, rmspe, coverage, median_width = point_metrics(
        pdata[:, 3], pdata[:, 5], pdata[:, 6], y)
    metrics = {"crps": None, "mae": mae, "rmspe": rmspe, "coverage": coverage,
               "median_width": median_width, "waic": None,
               "fitting_time_hours": None}

    draws_path = cfg.get("draws")
    if draws_path is None:
        root, _ = os.path.splitext(cfg["predictions"])
        candidate = root + "_draws.npz"
        draws_path = candidate if os.path.exists(candidate) else None
    if draws_path is not None:
        with np.load(draws_path) as z:
            metrics["crps"] = crps_mean(z["draws"], y)

    if "chain_dir" in cfg:
        for key in ("train_coords", "train_design", "train_response"):
            if key not in cfg:
                raise ConfigError(f"evaluate: WAIC needs {key} next to chain_dir")
        chain = PosteriorChain.load(cfg["chain_dir"])
        train = _load_dataset(cfg["train_coords"], cfg["train_design"],
                              cfg["train_response"])
        metrics["waic"] = waic(chain, train)
        metrics["fitting_time_hours"] = chain.timings["total"] / 3600.0

    dataio.ensure_dir(out_dir)
    dataio.write_json(os.path.join(out_dir, "metrics.json"), metrics)
    header = list(metrics.keys())
    row = [np.array([float("nan") if metrics[k] is None else float(metrics[k])])
           for k in header]
    dataio.write_table(os.path.join(out_dir, "metrics.csv"), header, row)
    print(f"wrote metrics to {out_dir}")
    return EXIT_OK


def cmd_prior_phi(args) -> int:
    ids, coords = dataio.read_coords(args.coords)
    if len(coords) < 2:
        raise ConfigError("prior-phi: need at least 2 locations")
    out = phi_prior_from_distances(coords, subsample=args.subsample,
                                   seed=args.seed)
    if out["lower"] == out["upper"]:
        print("warning: degenerate bounds (all pairwise distances equal)",
              file=sys.stderr)
    print(f"{dataio.fmt(out['lower'])},{dataio.fmt(out['upper'])}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"scenario": True, "models": True, "n_replicates": True,
               "sampler": True, "priors": False, "grid_g": False,
               "k_folds": False, "holdout_fold": False, "base_seed": False,
               "pred_thin": False, "out_dir": False}
    _check_keys(cfg, allowed, "experiment")
    out_dir = args.out_dir or cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("experiment: out_dir required (config key or --out-dir)")
    scfg = cfg["scenario"]
    _check_keys(scfg, {"n": True, "phi_true": True, "sigma2_true": True,
                       "tau2_true": True, "beta_true": False}, "scenario")
    try:
        scenario = ScenarioSpec(
            n=int(scfg["n"]), phi_true=float(scfg["phi_true"]),
            sigma2_true=float(scfg["sigma2_true"]),
            tau2_true=float(scfg["tau2_true"]),
            beta_true=tuple(scfg.get("beta_true", (1.0, 5.0))))
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    models = []
    mallowed = {"name": True, "m": True, "clustered": False, "radius": False,
                "variance_threshold": False, "subsample": False,
                "cluster_seed": False, "radii": False}
    for mcfg in cfg["models"]:
        _check_keys(mcfg, mallowed, "model")
        kwargs = dict(mcfg)
        if "radii" in kwargs and kwargs["radii"] is not None:
            kwargs["radii"] = tuple(kwargs["radii"])
        models.append(ModelConfig(**kwargs))
    sampler = _sampler_from_cfg(cfg["sampler"])
    priors = _priors_from_cfg(cfg["priors"]) if "priors" in cfg else PriorSpec()
    rows = run_experiment(
        scenario, models, int(cfg["n_replicates"]), sampler, priors=priors,
        grid_g=int(cfg.get("grid_g", 20)), k_folds=int(cfg.get("k_folds", 5)),
        holdout_fold=int(cfg.get("holdout_fold", 1)),
        base_seed=int(cfg.get("base_seed", 0)),
        pred_thin=int(cfg.get("pred_thin", 10)), out_dir=out_dir)
    failures = sum("error" in r for r in rows)
    print(f"experiment: {len(rows)} rows, {failures} failures -> {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_run_dir

    if not os.path.isdir(args.run_dir):
        raise ConfigError(f"report: run directory not found: {args.run_dir}")
    written = render_run_dir(args.run_dir, out_dir=args.out_dir,
                             truth_path=args.truth)
    if not written:
        raise ConfigError(
            f"report: no renderable artifacts found in {args.run_dir}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cnngp",
        description="NNGP / clustered-NNGP spatial regression toolkit")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("CNNGP_THREADS", "1")),
                        help="cap BLAS worker threads "
                             "(default 1, or CNNGP_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in [
        ("simulate", cmd_simulate, "generate a synthetic dataset"),
        ("prepare", cmd_prepare, "build ordering, neighbor graph and clusters"),
        ("fit", cmd_fit, "run the MCMC sampler"),
        ("predict", cmd_predict, "posterior-predictive inference"),
        ("evaluate", cmd_evaluate, "score predictions"),
        ("experiment", cmd_experiment, "replicated simulate/fit/score protocol"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out-dir", default=None,
                       help="output directory (overrides config)")
        p.set_defaults(fn=fn)

    p = sub.add_parser("prior-phi",
                       help="uniform phi-prior bounds from pairwise distances")
    p.add_argument("--coords", required=True)
    p.add_argument("--subsample", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prior_phi)

    p = sub.add_parser("report", help="render figures for run artifacts")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--truth", default=None,
                   help="holdout response CSV for the prediction scatter")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=max(1, args.threads)):
            return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except np.linalg.LinAlgError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
