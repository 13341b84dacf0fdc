"""
Random forest regressor built from CART regression trees.

Trees are grown on bootstrap samples with a random subset of the features
considered at every split. Each tree owns an RNG derived from the master
seed and its index, so a forest does not depend on the number of threads
and the first ``m`` trees of a large forest equal a forest of ``m`` trees.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .. import FORMAT_VERSION
from ..errors import ParameterError
from ..utils import derive_seed, map_jobs
from .base import Regressor, r_squared

logger = logging.getLogger(__name__)

M_TRY_RULES = ("all", "sqrt", "log2", "half", "third")
"""Rules for the number of features per split, in tie-break order."""

N_TREE_GRID = tuple(range(10, 201, 10))


def resolve_m_try(rule: Union[str, int], n_features: int) -> int:
    """Number of features considered at each split.

    Parameters
    ----------
    rule : str or int
        One of :py:data:`M_TRY_RULES` or an explicit count.
    n_features : int
        Number of input features ``S``.

    Returns
    -------
    int
        Count in ``[1, S]``.
    """
    if isinstance(rule, (int, np.integer)) and not isinstance(rule, bool):
        if not 1 <= rule <= n_features:
            raise ParameterError(
                f"m_try must be in [1, {n_features}], got {rule}"
            )
        return int(rule)
    if rule == "all":
        count = n_features
    elif rule == "sqrt":
        count = int(np.sqrt(n_features))
    elif rule == "log2":
        count = int(np.log2(n_features))
    elif rule == "half":
        count = n_features // 2
    elif rule == "third":
        count = n_features // 3
    else:
        raise ParameterError(
            f"Unknown m_try rule {rule!r}, expected one of {M_TRY_RULES}"
        )
    return min(max(count, 1), n_features)


@dataclass(frozen=True)
class RfConfig:
    n_tree: int = 80
    m_try: Union[str, int] = "sqrt"
    min_leaf: int = 1
    max_depth: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_tree < 1:
            raise ParameterError(f"n_tree must be >= 1, got {self.n_tree}")
        if self.min_leaf < 1:
            raise ParameterError(
                f"min_leaf must be >= 1, got {self.min_leaf}"
            )
        if self.max_depth is not None and self.max_depth < 0:
            raise ParameterError("max_depth must be non-negative")
        if isinstance(self.m_try, str) and self.m_try not in M_TRY_RULES:
            raise ParameterError(f"Unknown m_try rule {self.m_try!r}")


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Binary regression tree stored as parallel arrays.

    Node 0 is the root. Leaves have ``feature == -1``; samples go left when
    ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Index of the leaf reached by every row."""
        node = np.zeros(len(X), dtype=int)
        rows = np.flatnonzero(self.feature[node] >= 0)
        while rows.size:
            current = node[rows]
            go_left = (
                X[rows, self.feature[current]] <= self.threshold[current]
            )
            node[rows] = np.where(
                go_left, self.left[current], self.right[current]
            )
            rows = rows[self.feature[node[rows]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RegressionTree":
        return cls(
            feature=np.asarray(data["feature"], dtype=int),
            threshold=np.asarray(data["threshold"], dtype=float),
            left=np.asarray(data["left"], dtype=int),
            right=np.asarray(data["right"], dtype=int),
            value=np.asarray(data["value"], dtype=float),
            n_samples=np.asarray(data["n_samples"], dtype=int),
            seed=int(data.get("seed", 0)),
        )


def _best_split(X: np.ndarray, y: np.ndarray, features, min_leaf: int):
    """Best variance-reducing split of a node over the given features.

    Ties go to the lowest feature index, then the lowest threshold.

    Returns
    -------
    tuple or None
        ``(feature, threshold, decrease)`` or None if no valid split
        reduces the squared error.
    """
    m = len(y)
    values = X[:, features]
    order = np.argsort(values, axis=0, kind="stable")
    values = np.take_along_axis(values, order, axis=0)
    centred = y - y.mean()
    targets = centred[order]
    sums = np.cumsum(targets, axis=0)[:-1]
    squares = np.cumsum(targets**2, axis=0)[:-1]
    total = centred.sum()
    total_sq = float(centred @ centred)
    n_left = np.arange(1, m, dtype=float)[:, np.newaxis]
    n_right = m - n_left
    sse = (
        squares
        - sums**2 / n_left
        + (total_sq - squares)
        - (total - sums) ** 2 / n_right
    )
    valid = (
        (values[1:] > values[:-1])
        & (n_left >= min_leaf)
        & (n_right >= min_leaf)
    )
    sse = np.where(valid, np.maximum(sse, 0.0), np.inf)
    position, column = np.unravel_index(np.argmin(sse.T), sse.T.shape)[::-1]
    best = sse[position, column]
    if not np.isfinite(best):
        return None
    decrease = total_sq - best
    if not decrease > 1e-12 * max(total_sq, 1e-300):
        return None
    lo = values[position, column]
    hi = values[position + 1, column]
    threshold = 0.5 * (lo + hi)
    if not lo <= threshold < hi:
        threshold = lo
    return int(features[column]), float(threshold), float(decrease)


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    m_try: int,
    rng: np.random.Generator,
    min_leaf: int = 1,
    max_depth: Optional[int] = None,
    seed: int = 0,
) -> Tuple[RegressionTree, np.ndarray]:
    """Grow one CART regression tree depth first.

    Returns
    -------
    RegressionTree
        The tree.
    numpy.ndarray
        Total squared-error decrease attributed to each feature.
    """
    n_features = X.shape[1]
    importance = np.zeros(n_features)
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []
    n_samples: List[int] = []

    def add_node(index):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(y[index])))
        n_samples.append(len(index))
        return len(feature) - 1

    stack = [(add_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, index, depth = stack.pop()
        targets = y[index]
        if (
            len(index) < 2 * min_leaf
            or (max_depth is not None and depth >= max_depth)
            or np.all(targets == targets[0])
        ):
            continue
        features = np.sort(rng.choice(n_features, m_try, replace=False))
        split = _best_split(X[index], targets, features, min_leaf)
        if split is None:
            continue
        f, t, decrease = split
        mask = X[index, f] <= t
        importance[f] += decrease
        feature[node] = f
        threshold[node] = t
        left[node] = add_node(index[mask])
        right[node] = add_node(index[~mask])
        stack.append((right[node], index[~mask], depth + 1))
        stack.append((left[node], index[mask], depth + 1))

    tree = RegressionTree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        value=np.asarray(value, dtype=float),
        n_samples=np.asarray(n_samples, dtype=int),
        seed=seed,
    )
    return tree, importance


@dataclass(frozen=True, eq=False)
class RfModel:
    """A trained random forest."""

    config: RfConfig
    trees: Tuple[RegressionTree, ...]
    importance: np.ndarray
    """Normalised importance, sums to one unless no split exists."""
    importance_defined: bool
    """False when no tree contains a split, importance is then all zero."""
    n_features: int
    columns: Optional[Tuple[str, ...]] = None
    m_try: int = field(default=1)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ParameterError(
                f"Expected {self.n_features} columns, got shape {X.shape}"
            )
        return X

    def tree_predictions(self, X) -> np.ndarray:
        """Predictions of every tree, shape (n_tree, n)."""
        X = self._check(X)
        return np.array([tree.predict(X) for tree in self.trees])

    def predict(self, X) -> np.ndarray:
        return self.tree_predictions(X).mean(axis=0)

    def importance_frame(self) -> pd.DataFrame:
        columns = self.columns or tuple(
            f"x{j}" for j in range(self.n_features)
        )
        return pd.DataFrame(
            {"variable": columns, "importance": self.importance}
        )

    def to_dict(self) -> dict:
        """Portable JSON representation."""
        return {
            "format_version": FORMAT_VERSION,
            "model": "rf",
            "config": asdict(self.config),
            "columns": None if self.columns is None else list(self.columns),
            "n_features": self.n_features,
            "m_try": self.m_try,
            "importance": self.importance.tolist(),
            "importance_defined": self.importance_defined,
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RfModel":
        if data.get("format_version") != FORMAT_VERSION:
            raise ParameterError(
                f"Unsupported model format {data.get('format_version')}"
            )
        columns = data.get("columns")
        return cls(
            config=RfConfig(**data["config"]),
            trees=tuple(RegressionTree.from_dict(t) for t in data["trees"]),
            importance=np.asarray(data["importance"], dtype=float),
            importance_defined=bool(data["importance_defined"]),
            n_features=int(data["n_features"]),
            columns=None if columns is None else tuple(columns),
            m_try=int(data["m_try"]),
        )


def rf_train(
    X,
    y,
    config: Optional[RfConfig] = None,
    columns: Optional[Sequence[str]] = None,
    threads: int = 1,
) -> RfModel:
    """Train a random forest.

    Parameters
    ----------
    X : array_like
        Features, shape (n, S).
    y : array_like
        Target.
    config : RfConfig, optional
        Hyperparameters, defaults to 80 trees with ``sqrt(S)`` features per
        split.
    columns : Sequence[str], optional
        Feature names.
    threads : int
        Number of threads used to grow trees.

    Returns
    -------
    RfModel
        Trained forest.
    """
    config = RfConfig() if config is None else config
    if hasattr(X, "values") and hasattr(X, "columns") and columns is None:
        columns = tuple(X.columns)
        X = X.values
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, n_features = X.shape
    if n < 2:
        raise ParameterError("Random forest needs at least two rows")
    if len(y) != n:
        raise ParameterError(f"X has {n} rows but y has {len(y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ParameterError("Random forest inputs must be finite")
    m_try = resolve_m_try(config.m_try, n_features)

    def train(index):
        seed = derive_seed(config.seed, index)
        rng = np.random.default_rng(seed)
        if config.bootstrap:
            sample = rng.integers(0, n, n)
        else:
            sample = np.arange(n)
        return grow_tree(
            X[sample],
            y[sample],
            m_try,
            rng,
            min_leaf=config.min_leaf,
            max_depth=config.max_depth,
            seed=seed,
        )

    grown = map_jobs(train, range(config.n_tree), threads)
    trees = tuple(tree for tree, _ in grown)
    raw = np.mean([imp for _, imp in grown], axis=0)
    total = raw.sum()
    defined = bool(total > 0)
    if defined:
        importance = raw / total
    else:
        importance = np.zeros(n_features)
        logger.warning(
            "No tree contains a split, feature importance is undefined"
        )
    logger.debug(
        f"Trained forest with {config.n_tree} trees, m_try={m_try}, "
        f"{sum(t.n_leaves for t in trees)} leaves"
    )
    return RfModel(
        config=config,
        trees=trees,
        importance=importance,
        importance_defined=defined,
        n_features=n_features,
        columns=None if columns is None else tuple(columns),
        m_try=m_try,
    )


def rf_predict(model: RfModel, X) -> np.ndarray:
    """Mean prediction of the trees of a forest."""
    return model.predict(X)


@dataclass(frozen=True)
class GridSearchResult:
    best: RfConfig
    best_score: float
    scores: pd.DataFrame = field(repr=False)
    """Mean held-out R^2 per ``(n_tree, m_try)`` cell."""


def rf_grid_search(
    X,
    y,
    n_trees: Sequence[int] = N_TREE_GRID,
    m_try_rules: Sequence[Union[str, int]] = M_TRY_RULES,
    folds=None,
    seed: int = 0,
    base: Optional[RfConfig] = None,
    threads: int = 1,
) -> GridSearchResult:
    """Select ``n_tree`` and ``m_try`` by cross-validated R^2.

    One forest with the largest ``n_tree`` is trained per fold and
    ``m_try`` rule; smaller forests are scored from its leading trees.

    Parameters
    ----------
    X, y : array_like
        Training data.
    n_trees : Sequence[int]
        Candidate tree counts.
    m_try_rules : Sequence
        Candidate ``m_try`` rules, in tie-break order.
    folds : FoldSpec, optional
        Folds to score on. Defaults to ten folds seeded from
        ``derive_seed(seed, "rf-grid")``.
    seed : int
        Master seed of the forests.
    base : RfConfig, optional
        Remaining hyperparameters.
    threads : int
        Number of threads used to grow trees.

    Returns
    -------
    GridSearchResult
        Best configuration and the full score table. Ties go to the smaller
        ``n_tree``, then the earlier ``m_try`` rule.
    """
    from ..evaluation import kfold_split

    n_trees = sorted(set(int(t) for t in n_trees))
    m_try_rules = list(m_try_rules)
    if not n_trees or not m_try_rules:
        raise ParameterError("Grid search needs nonempty grids")
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if folds is None:
        folds = kfold_split(
            len(y), min(10, len(y)), derive_seed(seed, "rf-grid")
        )
    base = RfConfig(seed=seed) if base is None else base
    largest = n_trees[-1]
    counts = np.asarray(n_trees)

    scores = np.zeros((len(m_try_rules), len(n_trees)))
    for train, test in folds.splits():
        for r, rule in enumerate(m_try_rules):
            config = RfConfig(
                n_tree=largest,
                m_try=rule,
                min_leaf=base.min_leaf,
                max_depth=base.max_depth,
                bootstrap=base.bootstrap,
                seed=seed,
            )
            model = rf_train(X[train], y[train], config, threads=threads)
            cumulative = np.cumsum(model.tree_predictions(X[test]), axis=0)
            for c, count in enumerate(counts):
                prediction = cumulative[count - 1] / count
                scores[r, c] += r_squared(y[test], prediction)
    scores /= folds.k

    rows = [
        (count, rule, scores[r, c])
        for c, count in enumerate(n_trees)
        for r, rule in enumerate(m_try_rules)
    ]
    table = pd.DataFrame(rows, columns=["n_tree", "m_try", "mean_r2"])
    rank = {rule: r for r, rule in enumerate(m_try_rules)}
    count, rule, score = max(
        rows, key=lambda row: (row[2], -row[0], -rank[row[1]])
    )
    best = RfConfig(
        n_tree=count,
        m_try=rule,
        min_leaf=base.min_leaf,
        max_depth=base.max_depth,
        bootstrap=base.bootstrap,
        seed=seed,
    )
    logger.info(
        f"RF grid search selected n_tree={count}, m_try={rule} "
        f"(mean R2 {score:.4f} over {len(rows)} cells)"
    )
    return GridSearchResult(best=best, best_score=float(score), scores=table)


class ForestModel(Regressor):
    """Random forest wrapped for the cross-validation harness."""

    name = "rf"

    def __init__(
        self,
        columns: Optional[Sequence[str]] = None,
        config: Optional[RfConfig] = None,
        threads: int = 1,
    ):
        super().__init__(columns)
        self.config = RfConfig() if config is None else config
        self.threads = threads

    def fit(self, X, y, coordinates=None) -> "ForestModel":
        self.result = rf_train(
            X, y, self.config, columns=self.columns, threads=self.threads
        )
        return self

    def predict(self, X, coordinates=None) -> np.ndarray:
        return self.result.predict(X)

    @property
    def importance(self) -> np.ndarray:
        return self.result.importance

    def summary(self) -> dict:
        frame = self.result.importance_frame()
        return {
            "n_tree": self.config.n_tree,
            "m_try": self.result.m_try,
            "importance": dict(zip(frame["variable"], frame["importance"])),
            "importance_defined": self.result.importance_defined,
        }
