"""
Cross-validation, the baseline-versus-test experiment and result export.

OLS and GWR are reported with in-sample statistics, the random forest and
the MLP with 10-fold cross-validation. Both experimental conditions use the
same folds so that their metrics are directly comparable.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import mapclassify
import numpy as np
import pandas as pd
from sklearn.model_selection import KFold

from . import FORMAT_VERSION
from .diagnostics import MoranResult, morans_i
from .errors import ParameterError
from .geo import WeightsMatrix, cbg_centroids, spatial_weights
from .ingest import CbgTable
from .io import feature_collection, read_json, to_jsonable, write_json
from .models.base import r_squared, rmse, standardized_residuals
from .models.forest import RfConfig
from .models.gwr import BandwidthSearch, golden_search_bandwidth, gwr_fit
from .models.mlp import MlpConfig
from .models.ols import OlsFit, ols_fit
from .models.utils import ModelSpec
from .rates import (
    BASELINE_VARIABLES,
    RATE_COLUMNS,
    VISIT_RATE_COLUMNS,
    FeatureMatrix,
    RateTable,
    Scaler,
    assemble_features,
)
from .utils import derive_seed

logger = logging.getLogger(__name__)

CONDITIONS = ("baseline", "test")
MODELS = ("ols", "gwr", "rf", "mlp")
JENKS_CLASSES = 6


@dataclass(frozen=True)
class FoldSpec:
    """Assignment of every row to one of ``k`` folds."""

    n: int
    k: int
    seed: int
    assignment: Tuple[int, ...]

    @property
    def sizes(self) -> Tuple[int, ...]:
        counts = np.bincount(self.assignment, minlength=self.k)
        return tuple(int(c) for c in counts)

    def folds(self) -> List[np.ndarray]:
        """Held-out row indices of each fold."""
        assignment = np.asarray(self.assignment)
        return [np.flatnonzero(assignment == f) for f in range(self.k)]

    def splits(self):
        """Yield ``(train, test)`` row indices for every fold."""
        assignment = np.asarray(self.assignment)
        for f in range(self.k):
            yield (
                np.flatnonzero(assignment != f),
                np.flatnonzero(assignment == f),
            )

    @property
    def digest(self) -> str:
        payload = json.dumps(
            [self.n, self.k, self.seed, list(self.assignment)]
        ).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def kfold_split(n: int, k: int = 10, seed: int = 0) -> FoldSpec:
    """Shuffle the rows with a seeded RNG and cut them into k folds.

    The first ``n % k`` folds hold one row more than the others.
    """
    if not 2 <= k <= n:
        raise ParameterError(f"k must satisfy 2 <= k <= n={n}, got {k}")
    splitter = KFold(
        n_splits=k, shuffle=True, random_state=derive_seed(seed, "kfold")
    )
    assignment = np.empty(n, dtype=int)
    for fold, (_, test) in enumerate(splitter.split(np.zeros((n, 1)))):
        assignment[test] = fold
    return FoldSpec(
        n=n, k=k, seed=seed, assignment=tuple(assignment.tolist())
    )


@dataclass(frozen=True, eq=False)
class CvResult:
    """Cross-validation metrics and out-of-fold predictions."""

    model: str
    mean_r2: float
    rmse: float
    """Root mean squared error of the pooled held-out residuals."""
    fold_r2: Tuple[float, ...]
    fold_rmse: Tuple[float, ...]
    predictions: np.ndarray
    """Out-of-fold prediction of every row."""
    residuals: np.ndarray
    fold_digest: str
    importances: Optional[np.ndarray] = None
    """Per-fold feature importances, shape (k, p), for the forest."""

    def summary(self) -> dict:
        return {
            "r2": self.mean_r2,
            "rmse": self.rmse,
            "fold_r2": list(self.fold_r2),
            "fold_rmse": list(self.fold_rmse),
            "fold_digest": self.fold_digest,
            "provenance": "cross-validation",
        }


def _as_spec(model) -> ModelSpec:
    if isinstance(model, ModelSpec):
        return model
    if isinstance(model, str):
        return ModelSpec(model)
    raise ParameterError(f"Cannot interpret {model!r} as a model spec")


def cross_validate(
    model: Union[str, ModelSpec],
    X: FeatureMatrix,
    y,
    folds: FoldSpec,
    coordinates=None,
    prestandardized: bool = False,
) -> CvResult:
    """Evaluate a model by k-fold cross-validation.

    Parameters
    ----------
    model : str or ModelSpec
        Model to evaluate.
    X : FeatureMatrix
        Features. Unless ``prestandardized`` the scaler is refit on the
        training rows of each fold and applied to its held-out rows.
    y : array_like
        Target.
    folds : FoldSpec
        Fold assignment.
    coordinates : array_like, optional
        Row centroids, required by spatial models.
    prestandardized : bool
        Use the globally standardised matrix as is.

    Returns
    -------
    CvResult
        Mean fold R^2, pooled RMSE and per-fold details.
    """
    spec = _as_spec(model)
    y = np.asarray(y, dtype=float).reshape(-1)
    if folds.n != len(y) or X.n != len(y):
        raise ParameterError(
            f"Folds cover {folds.n} rows but the data has {len(y)}"
        )
    raw = X.raw_values()
    coordinates = None if coordinates is None else np.asarray(coordinates)
    predictions = np.empty(len(y))
    fold_r2 = []
    fold_rmse = []
    importances = []
    for fold, (train, test) in enumerate(folds.splits()):
        if len(train) < X.p + 2:
            raise ParameterError(
                f"Fold {fold} leaves {len(train)} training rows for "
                f"{X.p} features"
            )
        if prestandardized:
            x_train, x_test = X.values[train], X.values[test]
        else:
            scaler = Scaler.fit(raw[train], X.columns)
            x_train = scaler.transform(raw[train])
            x_test = scaler.transform(raw[test])
        regressor = spec.build(columns=X.columns)
        regressor.fit(
            x_train,
            y[train],
            None if coordinates is None else coordinates[train],
        )
        predicted = regressor.predict(
            x_test, None if coordinates is None else coordinates[test]
        )
        predictions[test] = predicted
        fold_r2.append(r_squared(y[test], predicted))
        fold_rmse.append(rmse(y[test], predicted))
        if hasattr(regressor, "importance"):
            importances.append(regressor.importance)
        logger.debug(
            f"{spec.name} fold {fold}: R2={fold_r2[-1]:.4f}, "
            f"RMSE={fold_rmse[-1]:.4f}"
        )
    residuals = y - predictions
    result = CvResult(
        model=spec.name,
        mean_r2=float(np.mean(fold_r2)),
        rmse=rmse(y, predictions),
        fold_r2=tuple(fold_r2),
        fold_rmse=tuple(fold_rmse),
        predictions=predictions,
        residuals=residuals,
        fold_digest=folds.digest,
        importances=np.array(importances) if importances else None,
    )
    logger.info(
        f"{spec.name} {folds.k}-fold CV: mean R2={result.mean_r2:.4f}, "
        f"pooled RMSE={result.rmse:.4f}"
    )
    return result


def residual_moran(
    fit,
    weights: WeightsMatrix,
    n_perm: int = 999,
    seed: int = 1234,
    threads: int = 1,
) -> MoranResult:
    """Moran's I of the standardised residuals of a fit.

    The residuals must be in the order of ``weights.ids``.
    """
    ids = getattr(fit, "ids", None)
    if ids is not None and tuple(ids) != tuple(weights.ids):
        raise ParameterError("Fit rows are not aligned with the weights")
    return morans_i(
        standardized_residuals(fit), weights, n_perm, seed, threads=threads
    )


def jenks_breaks(values, n_classes: int = JENKS_CLASSES) -> List[float]:
    """Natural-breaks class edges by Fisher's exact optimisation.

    Classes are contiguous runs of the sorted values chosen to minimise the
    total within-class sum of squared deviations.

    Returns
    -------
    list
        ``n_classes + 1`` ascending edges from the minimum to the maximum,
        fewer when there are fewer distinct values than classes.
    """
    x = np.sort(np.asarray(values, dtype=float))
    x = x[np.isfinite(x)]
    if not len(x):
        return []
    if n_classes < 1:
        raise ParameterError("n_classes must be positive")
    unique = np.unique(x)
    if len(unique) <= n_classes:
        return [float(x[0])] + [float(v) for v in unique]
    if n_classes == 1:
        return [float(x[0]), float(x[-1])]
    bins = mapclassify.FisherJenks(x, k=n_classes).bins
    return [float(x[0])] + [float(v) for v in bins]


@dataclass(frozen=True)
class Dataset:
    """Inputs of an experiment."""

    cbgs: CbgTable
    rates: RateTable
    variables: Tuple[str, ...] = BASELINE_VARIABLES
    ground_truth_sha256: Optional[str] = None

    @property
    def socioeconomic(self) -> List[str]:
        return [v for v in self.variables if v not in VISIT_RATE_COLUMNS]

    def features(self, condition: str):
        """Feature matrix and target of a condition."""
        return assemble_features(
            self.cbgs,
            self.rates,
            include_visits=condition == "test",
            variable_list=self.socioeconomic,
        )


@dataclass(eq=False)
class ConditionResult:
    """Every model fitted under one experimental condition."""

    condition: str
    features: FeatureMatrix
    target: np.ndarray
    coordinates: np.ndarray
    ols: Optional[OlsFit] = None
    gwr: Optional[BandwidthSearch] = None
    cv: Dict[str, "CvResult"] = field(default_factory=dict)
    moran: Dict[str, MoranResult] = field(default_factory=dict)

    def metrics(self) -> Dict[str, dict]:
        metrics = {}
        if self.ols is not None:
            metrics["ols"] = {
                "r2": self.ols.r2,
                "rmse": self.ols.rmse,
                "adj_r2": self.ols.adj_r2,
                "aic": self.ols.aic,
                "provenance": "in-sample",
            }
        if self.gwr is not None:
            fit = self.gwr.fit
            metrics["gwr"] = {
                "r2": fit.r2,
                "rmse": fit.rmse,
                "adj_r2": fit.adj_r2,
                "aic": fit.aicc,
                "aicc": fit.aicc,
                "tr_S": fit.tr_s,
                "provenance": "in-sample",
            }
        for name, result in self.cv.items():
            metrics[name] = result.summary()
        for name, moran in self.moran.items():
            metrics.setdefault(name, {})["residual_moran"] = moran.to_dict()
        return metrics


@dataclass(eq=False)
class ComparisonReport:
    """Metrics of every model under the baseline and test conditions."""

    seed: int
    fold_digest: str
    variables: Dict[str, Tuple[str, ...]]
    metrics: Dict[str, Dict[str, dict]]
    """``metrics[model][condition]`` holds the metric dictionary."""
    bandwidth: Dict[str, Optional[float]]
    ground_truth_sha256: Optional[str] = None
    conditions: Dict[str, ConditionResult] = field(
        default_factory=dict, repr=False
    )

    def deltas(self) -> Dict[str, dict]:
        """Test minus baseline for every shared numeric metric."""
        deltas = {}
        for model, by_condition in self.metrics.items():
            if not all(c in by_condition for c in CONDITIONS):
                continue
            base, test = by_condition["baseline"], by_condition["test"]
            deltas[model] = {
                key: test[key] - base[key]
                for key in ("r2", "rmse", "adj_r2", "aic")
                if isinstance(base.get(key), float)
                and isinstance(test.get(key), float)
            }
        return deltas

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "models": self.metrics,
            "deltas": self.deltas(),
            "seed": self.seed,
            "fold_digest": self.fold_digest,
            "bandwidth": self.bandwidth,
            "variables": {k: list(v) for k, v in self.variables.items()},
            "ground_truth_sha256": self.ground_truth_sha256,
        }


def run_condition(
    dataset: Dataset,
    condition: str,
    folds: Optional[FoldSpec],
    models: Sequence[str] = MODELS,
    rf_config: Optional[RfConfig] = None,
    mlp_config: Optional[MlpConfig] = None,
    gwr_options: Optional[Mapping] = None,
    weights: Optional[WeightsMatrix] = None,
    n_perm: int = 999,
    seed: int = 0,
    prestandardized: bool = False,
    threads: int = 1,
) -> ConditionResult:
    """Fit the requested models under one condition."""
    if condition not in CONDITIONS:
        raise ParameterError(f"Unknown condition {condition!r}")
    features, target = dataset.features(condition)
    coordinates = cbg_centroids(dataset.cbgs.subset(features.ids))
    result = ConditionResult(condition, features, target, coordinates)
    if "ols" in models:
        result.ols = ols_fit(features, target)
    if "gwr" in models:
        options = dict(gwr_options or {})
        bandwidth = options.pop("bandwidth", None)
        if bandwidth is None:
            result.gwr = golden_search_bandwidth(
                features, target, coordinates, threads=threads, **options
            )
        else:
            fit = gwr_fit(
                features,
                target,
                coordinates,
                bandwidth,
                kernel=options.get("kernel", "adaptive"),
                ids=features.ids,
                threads=threads,
            )
            result.gwr = BandwidthSearch(
                bandwidth, fit.aicc, {bandwidth: fit.aicc}, fit
            )
    cv_specs = {
        "rf": ModelSpec(
            "rf",
            {"config": rf_config or RfConfig(seed=seed), "threads": threads},
        ),
        "mlp": ModelSpec(
            "mlp", {"config": mlp_config or MlpConfig(seed=seed)}
        ),
    }
    for name, spec in cv_specs.items():
        if name in models:
            if folds is None:
                raise ParameterError(f"Model {name} needs a fold spec")
            result.cv[name] = cross_validate(
                spec,
                features,
                target,
                folds,
                coordinates=coordinates,
                prestandardized=prestandardized,
            )
    if weights is not None:
        for name, fit in (("ols", result.ols), ("gwr", result.gwr)):
            if fit is None:
                continue
            fit = fit.fit if isinstance(fit, BandwidthSearch) else fit
            result.moran[name] = morans_i(
                standardized_residuals(fit),
                weights,
                n_perm,
                seed,
                threads=threads,
            )
    return result


def run_experiment(
    dataset: Dataset,
    seed: int,
    k: int = 10,
    models: Sequence[str] = MODELS,
    rf_config: Optional[RfConfig] = None,
    mlp_config: Optional[MlpConfig] = None,
    gwr_options: Optional[Mapping] = None,
    weights_scheme: Optional[str] = "queen",
    weights_k: int = 8,
    n_perm: int = 999,
    prestandardized: bool = False,
    threads: int = 1,
) -> ComparisonReport:
    """Run every model under the baseline and test conditions.

    Parameters
    ----------
    dataset : Dataset
        CBGs, rates and the baseline variable list.
    seed : int
        Seed shared by both conditions for the folds and the models.
    k : int
        Number of folds.
    models : Sequence[str]
        Subset of ``('ols', 'gwr', 'rf', 'mlp')``.
    rf_config, mlp_config : optional
        Model settings, seeded from ``seed`` by default.
    gwr_options : Mapping, optional
        Keyword arguments for :py:func:`golden_search_bandwidth`, or a
        ``bandwidth`` to fit without searching. Otherwise the
        bandwidth is searched separately for each condition.
    weights_scheme : str, optional
        Spatial weights for the residual Moran's I, None to skip it.
    weights_k : int
        Neighbour count for knn weights.
    n_perm : int
        Permutations of the residual Moran's I.
    prestandardized : bool
        Skip per-fold standardisation.
    threads : int
        Maximum worker threads.

    Returns
    -------
    ComparisonReport
        Metrics per model and condition with the fitted results attached.
    """
    unknown = [m for m in models if m not in MODELS]
    if unknown:
        raise ParameterError(f"Unknown models {unknown}")
    features, _ = dataset.features("test")
    folds = kfold_split(features.n, k, seed)
    weights = None
    if weights_scheme is not None:
        weights = spatial_weights(
            dataset.cbgs.subset(features.ids), weights_scheme, weights_k
        )
    conditions = {}
    for condition in CONDITIONS:
        logger.info(f"Running {condition} condition")
        conditions[condition] = run_condition(
            dataset,
            condition,
            folds,
            models=models,
            rf_config=rf_config,
            mlp_config=mlp_config,
            gwr_options=gwr_options,
            weights=weights,
            n_perm=n_perm,
            seed=seed,
            prestandardized=prestandardized,
            threads=threads,
        )
    ids = {c: r.features.ids for c, r in conditions.items()}
    if ids["baseline"] != ids["test"]:
        raise ParameterError("Baseline and test conditions use different rows")

    metrics: Dict[str, Dict[str, dict]] = {}
    for condition, result in conditions.items():
        for model, values in result.metrics().items():
            metrics.setdefault(model, {})[condition] = values
    report = ComparisonReport(
        seed=seed,
        fold_digest=folds.digest,
        variables={c: r.features.columns for c, r in conditions.items()},
        metrics=metrics,
        bandwidth={
            c: (r.gwr.bandwidth if r.gwr is not None else None)
            for c, r in conditions.items()
        },
        ground_truth_sha256=dataset.ground_truth_sha256,
        conditions=conditions,
    )
    for model, delta in report.deltas().items():
        logger.info(f"{model}: test - baseline = {delta}")
    return report


@dataclass
class ExportBundle:
    """Everything needed to write the export files, as plain JSON data."""

    data: dict

    @classmethod
    def from_report(
        cls,
        report: ComparisonReport,
        dataset: Dataset,
        condition: str = "test",
    ) -> "ExportBundle":
        """Collect the per-CBG layers of one condition."""
        result = report.conditions[condition]
        ids = list(result.features.ids)
        frame = dataset.rates.to_frame()
        rates = {
            row["cbg_id"]: {k: v for k, v in row.items() if k != "cbg_id"}
            for row in frame.to_dict(orient="records")
        }
        polygons = {
            r.cbg_id: [[list(p) for p in ring] for ring in r.polygon]
            for r in dataset.cbgs
            if r.cbg_id in rates
        }
        observed = result.target
        predictions = {"observed": observed}
        residuals = {}
        gwr_local = {}
        breaks = {}
        if result.ols is not None:
            predictions["ols"] = result.ols.fitted
            residuals["ols_std_resid"] = standardized_residuals(result.ols)
        if result.gwr is not None:
            fit = result.gwr.fit
            predictions["gwr"] = fit.fitted
            local = fit.local_frame()
            residuals["gwr_std_resid"] = local["std_resid"].to_numpy()
            gwr_local = {
                cbg_id: row
                for cbg_id, row in zip(ids, local.to_dict(orient="records"))
            }
            breaks = {
                column: jenks_breaks(local[column].to_numpy())
                for column in local.columns
                if column.startswith("coef_")
            }
        for name, cv in result.cv.items():
            predictions[name] = cv.predictions
        data = {
            "format_version": FORMAT_VERSION,
            "condition": condition,
            "ids": ids,
            "rate_ids": list(frame["cbg_id"]),
            "polygons": polygons,
            "rates": rates,
            "gwr_local": gwr_local,
            "jenks_breaks": breaks,
            "residuals": {
                cbg_id: {k: float(v[i]) for k, v in residuals.items()}
                for i, cbg_id in enumerate(ids)
            },
            "predictions": {
                k: [float(v) for v in values]
                for k, values in predictions.items()
            },
            "report": report.to_dict(),
        }
        return cls(data=json.loads(json.dumps(to_jsonable(data))))

    def save(self, path) -> Path:
        return write_json(self.data, path)

    @classmethod
    def load(cls, path) -> "ExportBundle":
        data = read_json(path)
        if data.get("format_version") != FORMAT_VERSION:
            raise ParameterError(
                f"Unsupported bundle format {data.get('format_version')}"
            )
        return cls(data=data)


def export_report(bundle: ExportBundle, out_dir) -> List[Path]:
    """Write the report files of an experiment.

    Files: ``comparison.json``, ``rates.csv``, ``rates.geojson``,
    ``gwr_local.geojson``, ``residuals.geojson`` and
    ``predicted_vs_observed.csv``. Exporting the same bundle twice gives
    byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = bundle.data
    written = [write_json(data["report"], out_dir / "comparison.json")]

    rate_ids = data["rate_ids"]
    rates = pd.DataFrame(
        [{"cbg_id": i, **data["rates"][i]} for i in rate_ids],
        columns=list(RATE_COLUMNS),
    )
    rates_csv = out_dir / "rates.csv"
    rates.to_csv(rates_csv, index=False)
    written.append(rates_csv)
    written.append(
        write_json(
            feature_collection(rate_ids, data["polygons"], data["rates"]),
            out_dir / "rates.geojson",
        )
    )
    ids = data["ids"]
    if data["gwr_local"]:
        written.append(
            write_json(
                feature_collection(ids, data["polygons"], data["gwr_local"]),
                out_dir / "gwr_local.geojson",
            )
        )
    written.append(
        write_json(
            feature_collection(ids, data["polygons"], data["residuals"]),
            out_dir / "residuals.geojson",
        )
    )
    columns = [c for c in ("observed", *MODELS) if c in data["predictions"]]
    predictions = pd.DataFrame(
        {"cbg_id": ids, **{c: data["predictions"][c] for c in columns}}
    )
    predicted_csv = out_dir / "predicted_vs_observed.csv"
    predictions.to_csv(predicted_csv, index=False)
    written.append(predicted_csv)
    logger.info(f"Exported {len(written)} files to {out_dir}")
    return written
