"""
Command-line entry point: ``ckmm simulate|fit|select|evaluate|scenarios``.

Every command reads its settings through ``config.load_config`` and writes
deterministic files into the output directory. Failures print one line
``ckmm: error code=<CODE> [line=<n>] message=<text>`` to stderr.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import ConfigurationError, ExperimentConfig, load_config

from .data_io import (
    LongitudinalDataset,
    difference,
    read_dataset,
    read_dataset_csv,
    read_manifest,
    save_model,
    load_model,
    standardize,
    write_dataset_csv,
    write_json,
    write_manifest,
)
from .errors import CkmmError
from .evaluation import (
    ari,
    confusion_matrix,
    correlation_mse,
    kde_mse,
    match_clusters,
    oracle_posterior,
    summarize,
)
from .mixture import KDE_EVALUATIONS, FitResult, adjusted_bic, fit, nec
from .simulate import (
    build_covariance,
    generate_batch,
    get_scenario,
    scenario_catalog,
    scenario_from_dict,
    scenario_to_dict,
)

# Configure logging
logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["scenario", "T", "seed", "dataset", "method", "ARI", "loglik", "iterations", "runtime_ms"]
ESTIMATOR_COLUMNS = ["scenario", "T", "seed", "dataset", "true_cluster", "fitted_cluster", "quantity",
                     "feature", "mse"]


class OutputError(CkmmError):
    """Raised when the output directory cannot be written."""
    code = "OUTPUT_ERROR"


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")


def _prepare_output(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker = out / ".ckmm-write-test"
        marker.write_text("", encoding="utf-8")
        marker.unlink()
    except OSError as e:
        raise OutputError(f"Output directory {out} is not writable: {e}")
    return out


class _Stopwatch:
    """Milliseconds since creation, or 0 when runtimes are not recorded."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def elapsed_ms(self) -> int:
        return int(round((time.perf_counter() - self.start) * 1000)) if self.enabled else 0


def _load_dataset(path: str, config: ExperimentConfig) -> Tuple[LongitudinalDataset, Optional[np.ndarray]]:
    """Read a CSV or `.ts` dataset and apply the configured preprocessing."""
    dataset, labels = read_dataset(path)
    if config.difference:
        dataset = difference(dataset)
        logger.info(f"Applied first differences: T={dataset.T}")
    if config.standardize:
        dataset = standardize(dataset)
        logger.info("Standardized every feature")
    return dataset, labels


def _resolve_scenario(config: ExperimentConfig):
    if config.scenario_file:
        try:
            text = Path(config.scenario_file).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"Cannot read scenario file {config.scenario_file}: {e}")
        try:
            scenario = scenario_from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in scenario file: {e}")
        overrides = {k: v for k, v in (("T", config.T), ("n_subjects", config.n_subjects)) if v is not None}
        if overrides:
            scenario = replace(scenario, **overrides)
            scenario.validate()
        return scenario
    if config.scenario is None:
        raise ConfigurationError("simulate needs --scenario or --scenario-file")
    return get_scenario(config.scenario, T=config.T, n_subjects=config.n_subjects)


def cmd_simulate(config: ExperimentConfig) -> List[Path]:
    """
    Generate ``config.count`` datasets and their manifest.

    Returns:
        Paths of the written dataset files
    """
    scenario = _resolve_scenario(config)
    out = _prepare_output(config.out)
    batch = generate_batch(scenario, config.seed, config.count, config.threads)

    paths, entries = [], []
    for index, (dataset, labels) in enumerate(batch):
        path = out / f"dataset_{index:03d}.csv"
        write_dataset_csv(dataset, path)
        paths.append(path)
        entries.append({"file": path.name, "index": index, "labels": [int(v) for v in labels]})
    write_manifest(out / "manifest.json", scenario_to_dict(scenario), config.seed, entries)
    logger.info(f"Wrote {len(paths)} datasets and manifest.json to {out}")
    return paths


def _fit_one(dataset: LongitudinalDataset, config: ExperimentConfig, out: Path) -> FitResult:
    stopwatch = _Stopwatch(config.record_runtime)
    result = fit(dataset, config.G, config.to_fit_config())
    runtime_ms = stopwatch.elapsed_ms()

    save_model(result.model, out / "model.ckmm")
    _write_csv(pd.DataFrame({"subject": dataset.subject_ids, "label": result.labels}), out / "labels.csv")
    responsibilities = pd.DataFrame(result.responsibilities,
                                    columns=[f"p{g}" for g in range(result.responsibilities.shape[1])])
    responsibilities.insert(0, "subject", dataset.subject_ids)
    _write_csv(responsibilities, out / "responsibilities.csv")
    _write_csv(pd.DataFrame({"iteration": np.arange(len(result.loglik_trace)),
                             "loglik": result.loglik_trace}), out / "trace.csv")
    write_json({
        "G": config.G,
        "loglik": result.loglik,
        "iterations": result.iterations,
        "converged": result.converged,
        "restart_index": result.restart_index,
        "runtime_ms": runtime_ms,
        "warnings": list(result.warnings),
    }, out / "fit.json")
    return result


def cmd_fit(config: ExperimentConfig) -> Dict[str, FitResult]:
    """
    Fit one dataset (``--data``) or every dataset of a manifest (``--manifest``).

    A manifest fit writes each dataset's files into ``<out>/<dataset stem>/``.

    Returns:
        Fit results keyed by dataset stem
    """
    if config.data is None and config.manifest is None:
        raise ConfigurationError("fit needs --data or --manifest")
    out = _prepare_output(config.out)
    results = {}
    if config.manifest is not None:
        manifest = read_manifest(config.manifest)
        base = Path(config.manifest).parent
        for entry in manifest["datasets"]:
            stem = Path(entry["file"]).stem
            dataset, _ = _load_dataset(str(base / entry["file"]), config)
            logger.info(f"Fitting {entry['file']}")
            results[stem] = _fit_one(dataset, config, _prepare_output(out / stem))
    else:
        dataset, _ = _load_dataset(config.data, config)
        results[Path(config.data).stem] = _fit_one(dataset, config, out)
    logger.info(f"Finished {len(results)} fits")
    return results


def cmd_select(config: ExperimentConfig) -> pd.DataFrame:
    """
    Fit every G in [g_min, g_max] and tabulate adjusted BIC and NEC.

    G=1 is always fitted because NEC needs L(1). The NEC reference fit keeps
    every correlation at the single-cluster estimate and uses the best
    multi-cluster G. A failing G is flagged in ``status`` and the sweep
    continues.

    Returns:
        The table written to ``selection.csv``
    """
    if config.data is None:
        raise ConfigurationError("select needs --data")
    dataset, true_labels = _load_dataset(config.data, config)
    out = _prepare_output(config.out)
    fit_config = config.to_fit_config()
    candidates = list(range(config.g_min, config.g_max + 1))

    fits: Dict[int, FitResult] = {}
    failures: Dict[int, str] = {}
    for G in sorted(set(candidates) | {1}):
        try:
            fits[G] = fit(dataset, G, fit_config)
        except CkmmError as e:
            logger.error(f"Fit with G={G} failed: {e}")
            failures[G] = e.code

    nec_result = None
    if 1 in fits and any(G >= 2 for G in fits):
        nec_result = nec(fits)
        if nec_result.best_multi is not None:
            try:
                special = fit(dataset, nec_result.best_multi, fit_config, fixed_correlation=fits[1].model.corr[0])
                nec_result = nec(fits, special)
            except CkmmError as e:
                logger.error(f"NEC reference fit failed, NEC(1) defaults to 1: {e}")

    bic = {G: adjusted_bic(fits[G], dataset) for G in candidates if G in fits}
    best_bic = min(bic, key=lambda G: (bic[G], G)) if bic else None

    rows = []
    for G in candidates:
        row: Dict[str, Any] = {"G": G, "loglik": np.nan, "adjusted_bic": np.nan, "nec": np.nan}
        if G in fits:
            row["loglik"] = fits[G].loglik
            row["adjusted_bic"] = bic[G]
            if nec_result is not None:
                row["nec"] = nec_result.nec_one if G == 1 else nec_result.values.get(G, np.nan)
            row["status"] = "ok"
        else:
            row["status"] = f"failed:{failures[G]}"
        if true_labels is not None:
            row["ari"] = ari(true_labels, fits[G].labels) if G in fits else np.nan
        selected = []
        if G == best_bic:
            selected.append("adjusted_bic")
        if nec_result is not None and G == nec_result.selected:
            selected.append("nec")
        row["selected"] = ";".join(selected)
        rows.append(row)

    columns = ["G", "loglik", "adjusted_bic", "nec"] + (["ari"] if true_labels is not None else []) + \
        ["selected", "status"]
    table = pd.DataFrame(rows, columns=columns)
    _write_csv(table, out / "selection.csv")
    logger.info(f"Adjusted BIC selects G={best_bic}; NEC selects "
                f"G={nec_result.selected if nec_result is not None else 'n/a'}")
    return table


def _read_fit(fit_dir: Path) -> Tuple[dict, np.ndarray]:
    try:
        summary = json.loads((fit_dir / "fit.json").read_text(encoding="utf-8"))
        labels = pd.read_csv(fit_dir / "labels.csv")["label"].to_numpy()
    except (OSError, KeyError, ValueError) as e:
        raise OutputError(f"Cannot read fit results in {fit_dir}: {e}")
    return summary, labels


def _estimator_rows(key: dict, dataset: LongitudinalDataset, true_labels: np.ndarray,
                    fitted_labels: np.ndarray, fit_dir: Path, scenario) -> List[dict]:
    model = load_model(fit_dir / "model.ckmm")
    if (model.D, model.T) != (scenario.D, dataset.T):
        logger.warning(f"Skipping estimator errors for {fit_dir}: model shape differs from the scenario")
        return []
    rows = []
    for fitted, true in sorted(match_clusters(true_labels, fitted_labels).items()):
        process = scenario.clusters[true]
        for d in range(model.D):
            rows.append({**key, "true_cluster": true, "fitted_cluster": fitted, "quantity": "kde",
                         "feature": dataset.feature_names[d],
                         "mse": kde_mse(model.kdes[fitted][d], process.margins[d])})
        rows.append({**key, "true_cluster": true, "fitted_cluster": fitted, "quantity": "correlation",
                     "feature": "all",
                     "mse": correlation_mse(model.corr[fitted], build_covariance(scenario, true, dataset.T))})
    return rows


def _evaluate_without_manifest(config: ExperimentConfig, fits_dir: Path, out: Path) -> pd.DataFrame:
    logger.warning("No manifest: ARI rows omitted, reporting fit summaries only")
    rows = []
    for fit_json in sorted(fits_dir.glob("**/fit.json")):
        summary, _ = _read_fit(fit_json.parent)
        rows.append({"fit": str(fit_json.parent.relative_to(fits_dir)), "G": summary["G"],
                     "loglik": summary["loglik"], "iterations": summary["iterations"],
                     "runtime_ms": summary["runtime_ms"]})
    table = pd.DataFrame(rows, columns=["fit", "G", "loglik", "iterations", "runtime_ms"])
    _write_csv(table, out / "results.csv")
    (out / "summary.txt").write_text(f"fits: {len(table)}\nno ground truth available\n", encoding="utf-8")
    return table


def cmd_evaluate(config: ExperimentConfig) -> pd.DataFrame:
    """
    Score manifest fits against the true labels and the true-parameter baseline.

    Writes ``results.csv`` (ARI, log-likelihood, iterations and runtime for
    ``ckmm`` and ``baseline``), ``estimators.csv`` (KDE and correlation MSE
    per matched cluster), ``confusion.csv`` and ``summary.txt``.

    Returns:
        The results table
    """
    if config.fits is None:
        raise ConfigurationError("evaluate needs --fits")
    fits_dir = Path(config.fits)
    out = _prepare_output(config.out)
    if config.manifest is None or not Path(config.manifest).exists():
        return _evaluate_without_manifest(config, fits_dir, out)

    manifest = read_manifest(config.manifest)
    scenario = scenario_from_dict(manifest["scenario"])
    base = Path(config.manifest).parent
    results, estimators, confusion = [], [], []
    for entry in manifest["datasets"]:
        stem = Path(entry["file"]).stem
        fit_dir = fits_dir / stem if (fits_dir / stem).is_dir() else fits_dir
        if not (fit_dir / "fit.json").exists():
            logger.warning(f"No fit found for {entry['file']}; skipped")
            continue
        dataset = read_dataset_csv(base / entry["file"])
        true_labels = np.asarray(entry["labels"], dtype=int)
        summary, fitted_labels = _read_fit(fit_dir)
        key = {"scenario": scenario.name, "T": dataset.T, "seed": manifest["seed"], "dataset": entry["index"]}

        results.append({**key, "method": "ckmm", "ARI": ari(true_labels, fitted_labels),
                        "loglik": summary["loglik"], "iterations": summary["iterations"],
                        "runtime_ms": summary["runtime_ms"]})
        stopwatch = _Stopwatch(config.record_runtime)
        posterior, baseline_loglik = oracle_posterior(dataset, scenario)
        baseline_labels = np.argmax(posterior, axis=1)
        results.append({**key, "method": "baseline", "ARI": ari(true_labels, baseline_labels),
                        "loglik": baseline_loglik, "iterations": 0, "runtime_ms": stopwatch.elapsed_ms()})

        table = confusion_matrix(true_labels, fitted_labels).stack().rename("count").reset_index()
        for record in table.to_dict("records"):
            confusion.append({**key, **record})
        estimators.extend(_estimator_rows(key, dataset, true_labels, fitted_labels, fit_dir, scenario))

    order = ["scenario", "T", "seed", "dataset"]
    results_table = pd.DataFrame(results, columns=RESULT_COLUMNS).sort_values(order + ["method"], kind="stable")
    estimator_table = pd.DataFrame(estimators, columns=ESTIMATOR_COLUMNS)
    confusion_table = pd.DataFrame(confusion, columns=order + ["class", "cluster", "count"])
    _write_csv(results_table, out / "results.csv")
    _write_csv(estimator_table, out / "estimators.csv")
    _write_csv(confusion_table, out / "confusion.csv")
    (out / "summary.txt").write_text(_summary_text(results_table, estimator_table), encoding="utf-8")
    logger.info(f"Evaluated {len(results_table) // 2} fits against {config.manifest}")
    return results_table


def _summary_text(results: pd.DataFrame, estimators: pd.DataFrame) -> str:
    if results.empty:
        return "no fits evaluated\n"
    summary = summarize(results)
    lines = ["ARI mean(sd) per scenario, T and method", "",
             summary[["scenario", "T", "method", "datasets", "ari_table", "ari_se", "mean_iterations"]]
             .to_string(index=False, float_format=lambda v: f"{v:.4f}")]
    if not estimators.empty:
        errors = estimators.groupby(["quantity", "true_cluster", "feature"], sort=True)["mse"].mean()
        lines += ["", "Mean estimator MSE", errors.reset_index()
                  .to_string(index=False, float_format=lambda v: f"{v:.6f}")]
    return "\n".join(lines) + "\n"


def cmd_scenarios(config: ExperimentConfig) -> pd.DataFrame:
    """Print the built-in simulation designs."""
    rows = []
    for name, scenario in scenario_catalog().items():
        rows.append({"scenario": name, "rho_cross_1": scenario.clusters[0].rho_cross,
                     "rho_cross_2": scenario.clusters[1].rho_cross, "pi": scenario.pi,
                     "N": scenario.n_subjects, "T": scenario.T})
    table = pd.DataFrame(rows)
    print(table.to_string(index=False))
    return table


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON configuration file (overrides flags)")
    parser.add_argument("--seed", type=int, help="Root random seed")
    parser.add_argument("--threads", type=int, help="Worker threads (default: available cores)")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    parser.add_argument("--log-file", dest="log_file", help="Also log to this file")
    parser.add_argument("--record-runtime", dest="record_runtime", action="store_true", default=None,
                        help="Record wall-clock runtimes (outputs are then not byte-identical)")


def _add_fit_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--restarts", type=int, help="Independent k-means++ initializations")
    parser.add_argument("--epsilon", type=float, help="Relative log-likelihood convergence tolerance")
    parser.add_argument("--max-iterations", dest="max_iterations", type=int, help="GEM iteration cap")
    parser.add_argument("--eta", type=float, help="Bandwidth search step size")
    parser.add_argument("--delta-h", dest="delta_h", type=float, help="Relative size of the first bandwidth step")
    parser.add_argument("--ridge", type=float, help="Ridge added to correlation blocks")
    parser.add_argument("--kde-evaluation", dest="kde_evaluation", choices=KDE_EVALUATIONS,
                        help="Exact kernel sums (default) or the faster binned grid")
    parser.add_argument("--difference", action="store_true", default=None, help="Fit first differences")
    parser.add_argument("--standardize", action="store_true", default=None, help="Standardize every feature")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ckmm", description="Copula kernel mixture models for longitudinal data")
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="Generate datasets from a simulation scenario")
    _add_common(simulate)
    simulate.add_argument("--scenario", help="Catalog scenario S1-S6")
    simulate.add_argument("--scenario-file", dest="scenario_file", help="JSON scenario description")
    simulate.add_argument("--T", dest="T", type=int, help="Time points per series")
    simulate.add_argument("--n", dest="n_subjects", type=int, help="Subjects per dataset")
    simulate.add_argument("--count", type=int, help="Number of datasets")
    simulate.set_defaults(handler=cmd_simulate)

    fit_parser = subparsers.add_parser("fit", help="Fit a G-cluster model")
    _add_common(fit_parser)
    _add_fit_options(fit_parser)
    source = fit_parser.add_mutually_exclusive_group()
    source.add_argument("--data", help="CSV or .ts dataset")
    source.add_argument("--manifest", help="Fit every dataset of a simulation manifest")
    fit_parser.add_argument("--g", dest="G", type=int, help="Number of clusters")
    fit_parser.set_defaults(handler=cmd_fit)

    select = subparsers.add_parser("select", help="Compare cluster counts by adjusted BIC and NEC")
    _add_common(select)
    _add_fit_options(select)
    select.add_argument("--data", help="CSV or .ts dataset")
    select.add_argument("--g-min", dest="g_min", type=int, help="Smallest G")
    select.add_argument("--g-max", dest="g_max", type=int, help="Largest G")
    select.set_defaults(handler=cmd_select)

    evaluate = subparsers.add_parser("evaluate", help="Score fits against a simulation manifest")
    _add_common(evaluate)
    evaluate.add_argument("--manifest", help="Simulation manifest with the true labels")
    evaluate.add_argument("--fits", help="Directory written by `ckmm fit`")
    evaluate.set_defaults(handler=cmd_evaluate)

    scenarios = subparsers.add_parser("scenarios", help="List the built-in simulation designs")
    _add_common(scenarios)
    scenarios.set_defaults(handler=cmd_scenarios)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k not in ("command", "config", "handler")}


def _report(code: str, message: str, line: Optional[int] = None) -> None:
    location = f" line={line}" if line is not None else ""
    text = " ".join(str(message).split())
    print(f"ckmm: error code={code}{location} message={text}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one command.

    Returns:
        0 on success, 2 for a ckmm error, 1 for an unexpected failure
    """
    args = build_parser().parse_args(argv)
    handler: Callable[[ExperimentConfig], Any] = args.handler
    try:
        config = load_config(args.config, _overrides(args))
        config.setup_logging()
        handler(config)
        return 0
    except CkmmError as e:
        logger.error(f"{args.command} failed: {e}")
        _report(e.code, getattr(e, "detail", str(e)), getattr(e, "line", None))
        return 2
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        _report("INTERNAL", f"{type(e).__name__}: {e}")
        return 1
