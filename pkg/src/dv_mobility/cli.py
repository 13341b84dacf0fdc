"""
Command-line interface.

Every command reads a pipeline configuration (``--config``), applies the
flags on top of it and writes its outputs plus ``resolved_config.json`` to
the output directory. Exit codes: 0 success, 1 invalid input or parameters,
2 numerical failure, 3 file system error and 64 for usage errors.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd

from . import FORMAT_VERSION, __version__
from .config import (
    InputPaths,
    PipelineConfig,
    load_config,
    write_resolved_config,
)
from .diagnostics import (
    correlation_table,
    morans_i,
    vif_prune,
)
from .errors import NumericalError, ParameterError, ValidationError
from .evaluation import (
    CONDITIONS,
    MODELS,
    Dataset,
    ExportBundle,
    cross_validate,
    export_report,
    jenks_breaks,
    kfold_split,
    run_experiment,
)
from .geo import cbg_centroids, spatial_weights
from .ingest import (
    filter_alcohol_pois,
    filter_dv_incidents,
    link,
    load_cbgs,
    load_incidents,
    load_pois,
    load_visits,
)
from .io import feature_collection, write_json
from .models import ForestModel, MlpRegressor
from .models.base import standardized_residuals
from .models.forest import rf_grid_search
from .models.gwr import golden_search_bandwidth, gwr_fit
from .models.ols import ols_fit
from .models.utils import ModelSpec
from .rates import ACS_VARIABLES, assemble_features, derive_rates
from .synth import PRESETS, generate, load_scenario
from .utils import sha256_file

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3
EXIT_USAGE = 64


def setup_logger(level="INFO") -> logging.Logger:
    """Send the package logs to stderr as ``LEVEL name: message`` lines.

    Calling it again replaces the handler rather than adding another one.
    """
    logging.addLevelName(logging.WARNING, "WARN")
    package_logger = logging.getLogger("dv_mobility")
    package_logger.setLevel(level)
    for handler in list(package_logger.handlers):
        if getattr(handler, "_dv_mobility_cli", False):
            package_logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        logging.Formatter("%(levelname)s %(name)s: %(message)s")
    )
    handler._dv_mobility_cli = True
    package_logger.addHandler(handler)
    return package_logger


class ArgumentParser(argparse.ArgumentParser):
    """Parser that exits with the usage code on errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args) -> Dict:
    overrides = {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "threads": getattr(args, "threads", None),
        "cv.k": getattr(args, "k", None),
        "gwr.kernel": getattr(args, "kernel", None),
        "gwr.bandwidth": getattr(args, "bandwidth", None),
        "weights.scheme": getattr(args, "scheme", None),
        "weights.n_perm": getattr(args, "n_perm", None),
        "models": getattr(args, "models", None),
    }
    if getattr(args, "search", False):
        overrides["rf.search"] = True
    if getattr(args, "data", None) is not None:
        inputs = InputPaths.from_directory(args.data)
        overrides["inputs"] = inputs.model_dump(mode="json")
    return overrides


def _load_tables(config: PipelineConfig):
    cbgs_path, pois_path, visits_path, incidents_path = config.inputs.require(
        "cbgs", "pois", "visits", "incidents"
    )
    return (
        load_cbgs(cbgs_path),
        load_pois(pois_path),
        load_visits(visits_path),
        load_incidents(incidents_path),
    )


def _ground_truth_sha256(config: PipelineConfig) -> Optional[str]:
    path = config.inputs.ground_truth
    if path is None or not Path(path).exists():
        return None
    return sha256_file(path)


def _dataset(config: PipelineConfig) -> Dataset:
    cbgs, pois, visits, incidents = _load_tables(config)
    rates = derive_rates(
        cbgs,
        incidents,
        pois,
        visits,
        naics=config.naics,
        dv_types=config.dv_types,
        home_locations=config.home_locations,
        min_pop=config.min_pop,
        min_devices=config.min_devices,
        threads=config.threads,
    )
    return Dataset(
        cbgs=cbgs,
        rates=rates,
        variables=tuple(config.variables),
        ground_truth_sha256=_ground_truth_sha256(config),
    )


def _weights(config: PipelineConfig, dataset: Dataset, ids):
    return spatial_weights(
        dataset.cbgs.subset(ids), config.weights.scheme, config.weights.k
    )


def _provenance(config: PipelineConfig, dataset: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": config.seed,
        "ground_truth_sha256": dataset.ground_truth_sha256,
    }


def cmd_synth(args, config) -> List[Path]:
    scenario = load_scenario(args.preset, args.scenario, args.seed)
    city = generate(scenario)
    return list(city.write(args.out).values())


def cmd_ingest_check(args, config: PipelineConfig) -> List[Path]:
    cbgs, pois, visits, incidents = _load_tables(config)
    linked = link(cbgs, pois, visits, strict=False)
    outlets = filter_alcohol_pois(pois, config.naics)
    _, dv_report = filter_dv_incidents(
        incidents, config.dv_types, config.home_locations
    )
    outlet_counts: Dict[str, int] = {}
    for record in outlets:
        outlet_counts[record.outlet_type] = (
            outlet_counts.get(record.outlet_type, 0) + 1
        )

    def table_report(table):
        return {
            "n_input": table.n_input,
            "accepted": len(table),
            "rejected": len(table.rejected),
            "rejections": [
                {"row": r.row, "key": r.key, "reason": r.reason}
                for r in table.rejected
            ],
        }

    report = {
        "format_version": FORMAT_VERSION,
        "cbgs": table_report(cbgs),
        "pois": table_report(pois),
        "visits": table_report(visits),
        "incidents": table_report(incidents),
        "dangling_visits": len(visits) - len(linked),
        "outlet_pois": dict(sorted(outlet_counts.items())),
        "dv_filter": {
            "n_input": dv_report.n_input,
            "non_domestic": dv_report.non_domestic,
            "mislabelled_type": dv_report.mislabelled_type,
            "public_space": dv_report.public_space,
            "n_kept": dv_report.n_kept,
        },
        "ground_truth_sha256": _ground_truth_sha256(config),
    }
    return [write_json(report, config.out_dir / "ingest_report.json")]


def cmd_derive(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    path = config.out_dir / "rates.csv"
    dataset.rates.to_csv(path)
    for stage, excluded in dataset.rates.excluded.items():
        if excluded:
            logger.warning(f"{stage}: excluded CBGs {list(excluded)}")
    return [path]


def cmd_diagnose(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    available = set(dataset.cbgs.attribute_names)
    candidates = [v for v in ACS_VARIABLES if v in available]
    candidates.append("population_density")
    features, target = assemble_features(
        dataset.cbgs,
        dataset.rates,
        include_visits=True,
        variable_list=candidates,
    )
    raw = features.raw_values()
    correlations = correlation_table(
        target, {c: raw[:, j] for j, c in enumerate(features.columns)}
    )
    written = [config.out_dir / "correlations.csv"]
    correlations.to_csv(written[-1], index=False)

    weights = _weights(config, dataset, features.ids)
    moran = morans_i(
        target,
        weights,
        n_perm=config.weights.n_perm,
        seed=config.moran_seed,
        threads=config.threads,
    )
    written.append(
        write_json(
            {**_provenance(config, dataset), "dv_rate": moran.to_dict()},
            config.out_dir / "moran.json",
        )
    )

    report = vif_prune(
        features,
        threshold=config.vif.threshold,
        composition_groups=config.vif.groups(),
        manual_drops=config.vif.manual_drops,
        threads=config.threads,
    )
    written.append(config.out_dir / "vif_report.csv")
    report.to_frame().to_csv(written[-1])
    removed = pd.DataFrame(
        [
            {
                "round": r.round,
                "variable": r.variable,
                "vif": r.vif,
                "reason": r.reason,
            }
            for r in report.trail
        ],
        columns=["round", "variable", "vif", "reason"],
    )
    written.append(config.out_dir / "vif_removed.csv")
    removed.to_csv(written[-1], index=False)
    logger.info(f"VIF pruning retained {len(report.retained)} variables")
    return written


def _condition_features(args, dataset: Dataset):
    features, target = dataset.features(args.condition)
    coordinates = cbg_centroids(dataset.cbgs.subset(features.ids))
    return features, target, coordinates


def cmd_fit_ols(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    features, target, _ = _condition_features(args, dataset)
    fit = ols_fit(features, target)
    moran = morans_i(
        standardized_residuals(fit),
        _weights(config, dataset, features.ids),
        n_perm=config.weights.n_perm,
        seed=config.moran_seed,
        threads=config.threads,
    )
    written = [config.out_dir / "ols_fit.csv"]
    fit.to_frame().to_csv(written[-1], index=False)
    summary = {
        **_provenance(config, dataset),
        "condition": args.condition,
        **fit.summary(),
        "significant": fit.significant(0.05).to_dict(orient="records"),
        "residual_moran": moran.to_dict(),
    }
    written.append(write_json(summary, config.out_dir / "ols_summary.json"))
    return written


def cmd_fit_gwr(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    features, target, coordinates = _condition_features(args, dataset)
    if config.gwr.bandwidth is None:
        search = golden_search_bandwidth(
            features,
            target,
            coordinates,
            threads=config.threads,
            **config.gwr.search_options(),
        )
        fit, profile = search.fit, search.profile
    else:
        fit = gwr_fit(
            features,
            target,
            coordinates,
            config.gwr.bandwidth,
            kernel=config.gwr.kernel,
            ids=features.ids,
            threads=config.threads,
        )
        profile = {}
    local = fit.local_frame()
    moran = morans_i(
        fit.std_residuals,
        _weights(config, dataset, features.ids),
        n_perm=config.weights.n_perm,
        seed=config.moran_seed,
        threads=config.threads,
    )
    polygons = {r.cbg_id: r.polygon for r in dataset.cbgs}
    properties = {
        cbg_id: row
        for cbg_id, row in zip(features.ids, local.to_dict(orient="records"))
    }
    written = [
        write_json(
            feature_collection(features.ids, polygons, properties),
            config.out_dir / "gwr_local.geojson",
        )
    ]
    summary = {
        **_provenance(config, dataset),
        "condition": args.condition,
        **fit.summary(),
        "profile": [[k, v] for k, v in sorted(profile.items())],
        "jenks_breaks": {
            c: jenks_breaks(local[c].to_numpy())
            for c in local.columns
            if c.startswith("coef_")
        },
        "residual_moran": moran.to_dict(),
    }
    written.append(write_json(summary, config.out_dir / "gwr_summary.json"))
    return written


def cmd_fit_rf(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    features, target, _ = _condition_features(args, dataset)
    rf_config = config.rf.to_config(config.seed)
    search = None
    if config.rf.search:
        search = rf_grid_search(
            features.values,
            target,
            n_trees=config.rf.n_tree_grid,
            m_try_rules=config.rf.m_try_rules,
            seed=config.seed,
            base=rf_config,
            threads=config.threads,
        )
        rf_config = search.best
    regressor = ForestModel(features.columns, rf_config, config.threads)
    model = regressor.fit(features.values, target).result
    folds = kfold_split(features.n, config.cv.k, config.seed)
    cv = cross_validate(
        ModelSpec("rf", {"config": rf_config, "threads": config.threads}),
        features,
        target,
        folds,
        prestandardized=config.cv.prestandardized,
    )
    importance = model.importance_frame()
    for fold, values in enumerate(cv.importances):
        importance[f"fold_{fold}"] = values
    written = [config.out_dir / "rf_importance.csv"]
    importance.to_csv(written[-1], index=False)
    written.append(write_json(model.to_dict(), config.out_dir / "rf.json"))
    summary = {
        **_provenance(config, dataset),
        "condition": args.condition,
        **regressor.summary(),
        "cv": cv.summary(),
        "grid_search": None
        if search is None
        else {
            "best_score": search.best_score,
            "scores": search.scores.to_dict(orient="records"),
        },
    }
    written.append(write_json(summary, config.out_dir / "rf_summary.json"))
    return written


def cmd_fit_mlp(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    features, target, _ = _condition_features(args, dataset)
    mlp_config = config.mlp.to_config(config.seed)
    regressor = MlpRegressor(features.columns, mlp_config)
    regressor.fit(features.values, target)
    folds = kfold_split(features.n, config.cv.k, config.seed)
    cv = cross_validate(
        ModelSpec("mlp", {"config": mlp_config}),
        features,
        target,
        folds,
        prestandardized=config.cv.prestandardized,
    )
    written = [
        write_json(regressor.result.to_dict(), config.out_dir / "mlp.json")
    ]
    summary = {
        **_provenance(config, dataset),
        "condition": args.condition,
        **regressor.summary(),
        "cv": cv.summary(),
    }
    written.append(write_json(summary, config.out_dir / "mlp_summary.json"))
    return written


def cmd_cv(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    features, target, coordinates = _condition_features(args, dataset)
    folds = kfold_split(features.n, config.cv.k, config.seed)
    options = {
        "ols": {},
        "gwr": {
            "bandwidth": config.gwr.bandwidth,
            "k_min": config.gwr.k_min,
            "k_max": config.gwr.k_max,
            "kernel": config.gwr.kernel,
            "threads": config.threads,
        },
        "rf": {
            "config": config.rf.to_config(config.seed),
            "threads": config.threads,
        },
        "mlp": {"config": config.mlp.to_config(config.seed)},
    }
    results = {}
    for name in args.model:
        results[name] = cross_validate(
            ModelSpec(name, options[name]),
            features,
            target,
            folds,
            coordinates=coordinates,
            prestandardized=config.cv.prestandardized,
        ).summary()
    report = {
        **_provenance(config, dataset),
        "condition": args.condition,
        "k": folds.k,
        "fold_digest": folds.digest,
        "models": results,
    }
    return [write_json(report, config.out_dir / "cv_results.json")]


def cmd_experiment(args, config: PipelineConfig) -> List[Path]:
    dataset = _dataset(config)
    gwr_options = {
        **config.gwr.search_options(),
        "bandwidth": config.gwr.bandwidth,
    }
    report = run_experiment(
        dataset,
        config.seed,
        k=config.cv.k,
        models=config.models,
        rf_config=config.rf.to_config(config.seed),
        mlp_config=config.mlp.to_config(config.seed),
        gwr_options=gwr_options,
        weights_scheme=config.weights.scheme,
        weights_k=config.weights.k,
        n_perm=config.weights.n_perm,
        prestandardized=config.cv.prestandardized,
        threads=config.threads,
    )
    bundle = ExportBundle.from_report(report, dataset)
    written = [bundle.save(config.out_dir / "bundle.json")]
    written += export_report(bundle, config.out_dir)
    return written


def cmd_export(args, config: PipelineConfig) -> List[Path]:
    bundle = ExportBundle.load(args.bundle)
    return export_report(bundle, config.out_dir)


COMMANDS: Dict[str, Callable] = {
    "synth": cmd_synth,
    "ingest-check": cmd_ingest_check,
    "derive": cmd_derive,
    "diagnose": cmd_diagnose,
    "fit-ols": cmd_fit_ols,
    "fit-gwr": cmd_fit_gwr,
    "fit-rf": cmd_fit_rf,
    "fit-mlp": cmd_fit_mlp,
    "cv": cmd_cv,
    "experiment": cmd_experiment,
    "export": cmd_export,
}


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="dv-mobility",
        description=(
            "Derive DV and alcohol-outlet visit rates and compare predictive "
            "models with and without the visit rates."
        ),
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"dv-mobility {__version__} (format {FORMAT_VERSION})",
    )
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument(
        "--threads", type=int, help="Maximum number of worker threads"
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )

    pipeline = ArgumentParser(add_help=False, parents=[common])
    pipeline.add_argument(
        "--config", type=Path, help="Pipeline configuration (JSON)"
    )
    pipeline.add_argument(
        "--data",
        type=Path,
        help="Directory holding cbgs.geojson, pois.csv, visits.csv and "
        "incidents.csv",
    )

    conditional = ArgumentParser(add_help=False, parents=[pipeline])
    conditional.add_argument(
        "--condition",
        choices=CONDITIONS,
        default="test",
        help="Feature set: without (baseline) or with (test) visit rates",
    )
    conditional.add_argument(
        "--scheme",
        choices=["queen", "rook", "knn"],
        help="Spatial weights for Moran's I",
    )
    conditional.add_argument("--n-perm", type=int, dest="n_perm")

    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    synth = subparsers.add_parser(
        "synth", parents=[common], help="Generate a synthetic city"
    )
    source = synth.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=sorted(PRESETS))
    source.add_argument(
        "--config", dest="scenario", type=Path, help="Scenario file (JSON)"
    )

    subparsers.add_parser(
        "ingest-check", parents=[pipeline], help="Validate the input files"
    )
    subparsers.add_parser(
        "derive", parents=[pipeline], help="Derive the rate table"
    )
    diagnose = subparsers.add_parser(
        "diagnose",
        parents=[pipeline],
        help="Correlations, Moran's I and VIF pruning",
    )
    diagnose.add_argument(
        "--scheme", choices=["queen", "rook", "knn"], dest="scheme"
    )
    diagnose.add_argument("--n-perm", type=int, dest="n_perm")
    subparsers.add_parser(
        "fit-ols", parents=[conditional], help="Fit the global linear model"
    )
    gwr = subparsers.add_parser(
        "fit-gwr", parents=[conditional], help="Fit GWR"
    )
    gwr.add_argument("--kernel", choices=["adaptive", "fixed"])
    gwr.add_argument(
        "--bandwidth", type=float, help="Fixed bandwidth, skips the search"
    )
    rf = subparsers.add_parser(
        "fit-rf", parents=[conditional], help="Fit the random forest"
    )
    rf.add_argument("--k", type=int, help="Number of folds")
    rf.add_argument(
        "--search",
        action="store_true",
        help="Select n_tree and m_try by grid search",
    )
    mlp = subparsers.add_parser(
        "fit-mlp", parents=[conditional], help="Fit the neural network"
    )
    mlp.add_argument("--k", type=int, help="Number of folds")
    cv = subparsers.add_parser(
        "cv", parents=[conditional], help="Cross-validate models"
    )
    cv.add_argument("--model", nargs="+", choices=MODELS, required=True)
    cv.add_argument("--k", type=int, help="Number of folds")
    experiment = subparsers.add_parser(
        "experiment",
        parents=[pipeline],
        help="Compare every model with and without visit rates",
    )
    experiment.add_argument("--models", nargs="+", choices=MODELS)
    experiment.add_argument("--k", type=int, help="Number of folds")
    export = subparsers.add_parser(
        "export",
        parents=[pipeline],
        help="Write the export files from a saved bundle",
    )
    export.add_argument("--bundle", type=Path, required=True)
    return parser


def run(command: str, args) -> int:
    """Execute a command and return its exit code."""
    try:
        if command == "synth":
            if args.out is None:
                raise ParameterError("synth needs --out")
            config = None
        else:
            config = load_config(args.config, _overrides(args))
            write_resolved_config(config, config.out_dir)
        written = COMMANDS[command](args, config)
    except ValidationError as e:
        logger.error(str(e))
        return EXIT_VALIDATION
    except NumericalError as e:
        logger.error(str(e))
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"{e}")
        return EXIT_IO
    for path in written:
        logger.info(f"Wrote {path}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logger(args.log_level)
    return run(args.command, args)
