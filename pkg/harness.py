"""Experiment runner: cross-validated NLPD for a dataset / model / site-update rule combination.

    python harness.py run --config configs/coal_pep.json
    python harness.py run --dataset coal --rule pep --alpha 1.0 --cubature gh20 --folds 10 --iters 250 --seed 0 --out results
    python harness.py plot --record results/coal-pep-1a2b3c4d.json
    python harness.py results
    python harness.py selftest
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pytest

from datasets import Dataset, load_dataset
from errors import ConfigError
from likelihoods import likelihood_from_dict
from prior_ssm import KernelSpec
from records import RESULTS_DB, ResultRecord, ResultStore, load_record_json, write_posterior_csv, write_record_json
from sequential_engine import (OPTIMISERS, MarkovGP, TimeGrid, fit_hyperparameters, posterior_marginals,
                               predictive_nlpd, run_inference)
from site_rules import RuleConfig
from spatiotemporal import DEFAULT_NUM_INDUCING, LATTICE_SIZE, SpatialConfig, SpatioTemporalGP, predict_on_lattice

LOGGER = logging.getLogger(__name__)

THREADS_ENV = "MARKOVGP_THREADS"
SPATIAL_KEYS = {"kernel", "num_inducing", "mode", "inducing"}
PLOT_STYLES = ("csv", "gnuplot")
Z95 = 1.959963984540054


@dataclass
class ExperimentConfig:
    dataset: str
    kernels: List[Dict] = field(default_factory=lambda: [{"variant": "Matern52"}])
    likelihood: Dict = field(default_factory=lambda: {"variant": "Gaussian"})
    rule: str = "PEP"
    cubature: Optional[str] = "gh20"
    alpha: float = 1.0
    damping: float = 1.0
    preset: Optional[str] = None
    optimiser: str = "adam"
    step_size: float = 0.1
    iterations: int = 250
    line_search: bool = False
    inference_passes: int = 2
    folds: int = 10
    seed: int = 0
    bins: Optional[Union[int, List[int]]] = None
    spatial: Optional[Dict] = None
    lattice: int = LATTICE_SIZE
    normalise_y: bool = False
    output_dir: str = "results"

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError(f"cross-validation needs folds >= 2, got {self.folds}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.inference_passes < 1:
            raise ConfigError(f"inference_passes must be >= 1, got {self.inference_passes}")
        if self.optimiser not in OPTIMISERS:
            raise ConfigError(f"unknown optimiser {self.optimiser!r}; expected one of {sorted(OPTIMISERS)}")
        if not self.kernels:
            raise ConfigError("at least one kernel is required")
        if self.spatial is not None:
            unknown = set(self.spatial) - SPATIAL_KEYS
            if unknown:
                raise ConfigError(f"unknown spatial keys {sorted(unknown)}")
            if "kernel" not in self.spatial:
                raise ConfigError("spatial config needs a 'kernel'")
        self.rule_config()

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "dataset" not in data:
            raise ConfigError("config needs a 'dataset'")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as handle:
            return cls.from_dict(json.load(handle))

    def rule_config(self) -> RuleConfig:
        if self.preset:
            return RuleConfig.preset(self.preset)
        return RuleConfig(rule=self.rule, cubature=self.cubature, alpha=self.alpha, damping=self.damping)

    def to_dict(self) -> Dict:
        return asdict(self)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def build_model(config: ExperimentConfig, dataset: Dataset):
    lik_spec = dict(config.likelihood)
    if lik_spec.get("variant") == "Poisson" and dataset.binsize and "binsize" not in lik_spec:
        lik_spec["binsize"] = dataset.binsize
    likelihood = likelihood_from_dict(lik_spec)
    kernels = [KernelSpec.from_dict(k) for k in config.kernels]
    if config.spatial is None:
        return MarkovGP(kernels, likelihood)
    if dataset.r is None:
        raise ConfigError(f"{dataset.name} has no spatial coordinate for a spatio-temporal model")
    spatial_kernel = KernelSpec.from_dict(config.spatial["kernel"])
    mode = config.spatial.get("mode", "inducing")
    if "inducing" in config.spatial:
        spatial = SpatialConfig(kernel=spatial_kernel, inducing=np.asarray(config.spatial["inducing"]), mode=mode)
    else:
        spatial = SpatialConfig.from_locations(spatial_kernel, dataset.r,
                                               config.spatial.get("num_inducing", DEFAULT_NUM_INDUCING), mode)
    return SpatioTemporalGP(spatial, kernels[0], likelihood)


def cv_folds(n: int, folds: int, seed: int) -> List[np.ndarray]:
    """Disjoint, covering test sets whose sizes differ by at most one."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def posterior_summary(model, grid: TimeGrid, posterior) -> Dict[str, list]:
    """Per-step mean and variance of the latent functions at the first row of each step."""
    m = model.likelihood.latent_dim
    marginals = posterior_marginals(model, grid, posterior)
    return {
        "t": grid.times.tolist(),
        "mean": [g.mean[:m].tolist() for g in marginals],
        "var": [np.diag(g.cov)[:m].tolist() for g in marginals],
    }


def standardise_on_training(y: np.ndarray, test_idx: np.ndarray) -> np.ndarray:
    """Shift and scale y by the mean and std of the rows outside the test fold."""
    rows = np.asarray(y, dtype=float).reshape(len(y), -1)
    train = np.setdiff1d(np.arange(rows.shape[0]), test_idx)
    shift, scale = np.mean(rows[train], axis=0), np.std(rows[train], axis=0)
    return ((rows - shift) / scale).reshape(np.shape(y))


def run_fold(config: ExperimentConfig, fold: int, test_idx: np.ndarray, keep_posterior: bool = False) -> Dict:
    dataset = load_dataset(config.dataset, bins=config.bins, seed=config.seed)
    if config.normalise_y:
        dataset.y = standardise_on_training(dataset.y, test_idx)
    model = build_model(config, dataset)
    grid = TimeGrid.from_points(dataset.t, dataset.y, dataset.r)
    points = [tuple(int(v) for v in grid.origin[i]) for i in test_idx]
    train = grid.with_masked(points)
    rule = config.rule_config()
    trained, history, sites = fit_hyperparameters(model, train, rule, num_iters=config.iterations,
                                                  step_size=config.step_size, optimiser=config.optimiser,
                                                  line_search=config.line_search)
    result = run_inference(trained, train, rule, num_iters=config.inference_passes, sites=sites)
    targets = dataset.y.reshape(dataset.n, -1)[test_idx]
    nlpd = predictive_nlpd(trained, train, result.posterior, points, targets)
    outcome = {
        "fold": fold,
        "nlpd": float(np.mean(nlpd)),
        "energies": history.energies,
        "hyperparameters": {name: float(v) for name, v in zip(trained.parameter_names(), np.exp(trained.unconstrained()))},
        "diagnostics": result.diagnostics.to_dict(),
    }
    if keep_posterior:
        outcome["posterior"] = posterior_summary(trained, train, result.posterior)
        if isinstance(trained, SpatioTemporalGP) and trained.spatial.inducing.shape[1] == 1:
            lattice = predict_on_lattice(trained, train, result.sites, rule, size=config.lattice)
            outcome["lattice"] = {
                "t": lattice.t_axis.tolist(),
                "r": lattice.r_axis.tolist(),
                "mean": lattice.mean.tolist(),
                "var": lattice.var.tolist(),
                "predictive_mean": lattice.predictive_mean.tolist(),
            }
    LOGGER.info("fold %d: NLPD %.4f", fold, outcome["nlpd"])
    return outcome


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> ResultRecord:
    start = time.perf_counter()
    dataset = load_dataset(config.dataset, bins=config.bins, seed=config.seed)
    folds = cv_folds(dataset.n, config.folds, config.seed)
    threads = threads or int(os.environ.get(THREADS_ENV, "1"))
    LOGGER.info("experiment %s: %d points, %d folds, rule %s", dataset.name, dataset.n, config.folds,
                config.preset or config.rule)
    outcomes, errors = {}, {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=min(threads, config.folds)) as pool:
            futures = {pool.submit(run_fold, config, i, idx, i == 0): i for i, idx in enumerate(folds)}
            for future in as_completed(futures):
                i = futures[future]
                try:
                    outcomes[i] = future.result()
                except Exception as exc:
                    errors[str(i)] = f"{type(exc).__name__}: {exc}"
                    LOGGER.warning("fold %d failed: %s", i, errors[str(i)])
    else:
        for i, idx in enumerate(folds):
            try:
                outcomes[i] = run_fold(config, i, idx, keep_posterior=(i == 0))
            except Exception as exc:
                errors[str(i)] = f"{type(exc).__name__}: {exc}"
                LOGGER.warning("fold %d failed: %s", i, errors[str(i)])
    fold_nlpd = [outcomes[i]["nlpd"] if i in outcomes else None for i in range(config.folds)]
    finite = [v for v in fold_nlpd if v is not None and np.isfinite(v)]
    first = outcomes[min(outcomes)] if outcomes else {}
    fold0 = outcomes.get(0, {})
    record = ResultRecord(
        config=config.to_dict(),
        config_hash=config.config_hash(),
        fold_nlpd=fold_nlpd,
        fold_errors=errors,
        nlpd_mean=float(np.mean(finite)) if finite else None,
        nlpd_std=float(np.std(finite)) if finite else None,
        energy_trace=first.get("energies", []),
        wall_clock=time.perf_counter() - start,
        hyperparameters=first.get("hyperparameters", {}),
        posterior=fold0.get("posterior", {}),
        lattice=fold0.get("lattice"),
        diagnostics={str(i): o["diagnostics"] for i, o in sorted(outcomes.items())},
    )
    LOGGER.info("experiment %s finished in %.1fs: NLPD %s", dataset.name, record.wall_clock,
                "n/a" if record.nlpd_mean is None else f"{record.nlpd_mean:.4f} ± {record.nlpd_std:.4f}")
    return record


def _write_rows(path: Path, header: Sequence[str], rows, style: str):
    with open(path, "w", newline="") as handle:
        if style == "gnuplot":
            handle.write("# " + " ".join(header) + "\n")
            for row in rows:
                handle.write(" ".join(f"{v:.10g}" for v in row) + "\n")
        else:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)


def emit_plot_data(record: ResultRecord, out_dir, style: str = "csv") -> List[Path]:
    """Posterior band (t, mean, lower95, upper95) of the first latent and, for 2D runs, the lattice map."""
    if style not in PLOT_STYLES:
        raise ValueError(f"unknown plot style {style!r}; expected one of {PLOT_STYLES}")
    if not record.posterior or not record.posterior.get("t"):
        raise ValueError("record has no posterior trajectory to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "csv" if style == "csv" else "dat"
    t = np.asarray(record.posterior["t"])
    mean = np.asarray(record.posterior["mean"])[:, 0]
    sd = np.sqrt(np.maximum(np.asarray(record.posterior["var"])[:, 0], 0.0))
    band = out_dir / f"{record.stem}-band.{ext}"
    _write_rows(band, ["t", "mean", "lower95", "upper95"],
                np.column_stack([t, mean, mean - Z95 * sd, mean + Z95 * sd]).tolist(), style)
    paths = [band]
    if record.lattice:
        lat = record.lattice
        tt, rr = np.meshgrid(lat["t"], lat["r"], indexing="ij")
        rows = np.column_stack([tt.ravel(), rr.ravel(), np.ravel(lat["mean"]), np.ravel(lat["var"]),
                                np.ravel(lat["predictive_mean"])])
        lattice_path = out_dir / f"{record.stem}-lattice.{ext}"
        _write_rows(lattice_path, ["t", "r", "mean", "var", "predictive_mean"], rows.tolist(), style)
        paths.append(lattice_path)
    return paths


# command line

RUN_OVERRIDES = ("dataset", "rule", "alpha", "cubature", "preset", "folds", "iterations", "seed", "step_size",
                 "optimiser", "line_search", "bins", "output_dir")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Sequential GP inference experiments.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a cross-validated experiment")
    run.add_argument("--config", help="JSON experiment config")
    run.add_argument("--dataset")
    run.add_argument("--rule", choices=["pep", "eep", "slep", "cvi", "PEP", "EEP", "SLEP", "CVI"])
    run.add_argument("--preset", help="named rule preset, e.g. ekf, uks, ep, vi")
    run.add_argument("--alpha", type=float)
    run.add_argument("--cubature")
    run.add_argument("--folds", type=int)
    run.add_argument("--iters", dest="iterations", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--step-size", type=float)
    run.add_argument("--optimiser", choices=sorted(OPTIMISERS))
    run.add_argument("--line-search", action="store_true", default=None)
    run.add_argument("--bins", type=int)
    run.add_argument("--out", dest="output_dir")
    run.add_argument("--threads", type=int, help=f"parallel folds (default ${THREADS_ENV} or 1)")
    run.add_argument("--db", default=RESULTS_DB)

    plot = sub.add_parser("plot", help="write plot data for a stored record")
    plot.add_argument("--record", required=True)
    plot.add_argument("--style", default="csv", choices=PLOT_STYLES)
    plot.add_argument("--out")

    results = sub.add_parser("results", help="list stored experiments")
    results.add_argument("--db", default=RESULTS_DB)

    selftest = sub.add_parser("selftest", help="run the oracle and equivalence test suites")
    selftest.add_argument("--fast", action="store_true", help="skip slow reproductions")
    return parser.parse_args(argv)


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as handle:
            data = json.load(handle)
    for key in RUN_OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return ExperimentConfig.from_dict(data)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        try:
            config = _config_from_args(args)
        except (ConfigError, OSError, ValueError) as exc:
            print(f"❌ Invalid configuration: {exc}")
            return 2
        record = run_experiment(config, threads=args.threads)
        json_path = write_record_json(record, config.output_dir)
        csv_path = write_posterior_csv(record, config.output_dir)
        ResultStore(args.db).save_record(record)
        if record.nlpd_mean is None:
            print(f"❌ All folds failed; record written to {json_path}")
            return 1
        mark = "⚠️" if record.fold_errors else "✅"
        print(f"{mark} {record.dataset} [{record.rule}] NLPD {record.nlpd_mean:.4f} ± {record.nlpd_std:.4f}"
              f" ({len(record.fold_errors)} failed folds)")
        print(f"   -> {json_path}\n   -> {csv_path}")
        return 0

    if args.command == "plot":
        record = load_record_json(args.record)
        out_dir = args.out or str(Path(args.record).parent)
        try:
            paths = emit_plot_data(record, out_dir, style=args.style)
        except ValueError as exc:
            print(f"❌ {exc}")
            return 1
        for path in paths:
            print(f"✅ Wrote {path}")
        return 0

    if args.command == "results":
        ResultStore(args.db).display()
        return 0

    tests = str(Path(__file__).resolve().parent / "tests")
    marker = "not slow" if args.fast else "slow or not slow"
    return int(pytest.main(["-q", "-m", marker, tests]))


if __name__ == "__main__":
    sys.exit(main())
