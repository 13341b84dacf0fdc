"""Tests for spatial autocorrelation, correlation and VIF diagnostics"""

import numpy as np
import pytest
from scipy import stats
from statsmodels.stats.outliers_influence import variance_inflation_factor

from dv_mobility.diagnostics import (
    DEFAULT_COMPOSITION_GROUPS,
    correlation_table,
    morans_i,
    pearson,
    spearman,
    vif,
    vif_prune,
)
from dv_mobility.errors import DegenerateInputError, ParameterError
from dv_mobility.geo import WeightsMatrix, spatial_weights
from dv_mobility.rates import FeatureMatrix


def features_from(columns, names=None):
    raw = np.column_stack(columns)
    names = names or [f"x{i}" for i in range(raw.shape[1])]
    return FeatureMatrix.from_raw(
        ids=[f"u{i:03d}" for i in range(raw.shape[0])],
        columns=names,
        raw=raw,
        categories=["age"] * len(names),
    )


def test_morans_i_checkerboard(make_grid):
    """Assert a checkerboard on a 2x2 rook grid is perfectly dispersed"""
    w = spatial_weights(make_grid(2, 2), "rook")
    result = morans_i([1.0, -1.0, -1.0, 1.0], w, n_perm=99)
    assert result.statistic == pytest.approx(-1.0)
    assert result.expected == pytest.approx(-1 / 3)
    assert result.n == 4


def test_morans_i_direct_sum(make_grid, rng):
    """Compare with the double sum over all pairs of units"""
    w = spatial_weights(make_grid(5, 5), "queen")
    x = rng.standard_normal(25)
    result = morans_i(x, w, n_perm=0)
    dense = w.to_sparse().toarray()
    z = x - x.mean()
    numerator = sum(
        dense[i, j] * z[i] * z[j] for i in range(25) for j in range(25)
    )
    expected = 25 / dense.sum() * numerator / np.sum(z**2)
    assert result.statistic == pytest.approx(expected, rel=1e-12)
    assert result.n_perm == 0
    assert result.p_perm == 1.0


def test_morans_i_gradient_is_significant(make_grid):
    w = spatial_weights(make_grid(6, 6), "queen")
    x = np.add.outer(np.arange(6.0), np.arange(6.0)).ravel()
    result = morans_i(x, w, n_perm=199, seed=7)
    assert result.statistic > 0.5
    assert result.p_perm == pytest.approx(1 / 200)
    assert result.p_norm < 0.001
    assert result.z > 0


@pytest.mark.parametrize("threads", [1, 3])
def test_morans_i_permutations_independent_of_threads(
    make_grid, rng, threads
):
    w = spatial_weights(make_grid(4, 4), "queen")
    x = rng.standard_normal(16)
    reference = morans_i(x, w, n_perm=300, seed=11, threads=1)
    result = morans_i(x, w, n_perm=300, seed=11, threads=threads)
    assert result == reference
    assert 0 < result.p_perm <= 1


def test_morans_i_islands_are_dropped():
    """Assert units with empty rows are excluded from the statistic"""
    w = WeightsMatrix.from_neighbors([[1], [0, 2], [1, 3], [2], []])
    result = morans_i([1.0, 2.0, 3.0, 4.0, 100.0], w, n_perm=0)
    reference = morans_i(
        [1.0, 2.0, 3.0, 4.0],
        WeightsMatrix.from_neighbors([[1], [0, 2], [1, 3], [2]]),
        n_perm=0,
    )
    assert result.statistic == pytest.approx(reference.statistic)
    assert result.n == 4
    assert result.n_islands == 1
    assert result.to_dict()["n_islands"] == 1


def test_morans_i_constant(make_grid):
    w = spatial_weights(make_grid(2, 2), "queen")
    with pytest.raises(DegenerateInputError):
        morans_i(np.ones(4), w)


def test_morans_i_length_mismatch(make_grid):
    w = spatial_weights(make_grid(2, 2), "queen")
    with pytest.raises(ParameterError):
        morans_i([1.0, 2.0, 3.0], w)


def test_morans_i_to_dict_keys(make_grid, rng):
    w = spatial_weights(make_grid(3, 3), "queen")
    result = morans_i(rng.standard_normal(9), w, n_perm=9)
    assert set(result.to_dict()) == {
        "I",
        "expected",
        "z",
        "p_norm",
        "p_perm",
        "n_perm",
        "n",
        "n_islands",
        "scheme",
    }
    assert result.to_dict()["scheme"]["scheme"] == "queen"


def test_pearson_matches_scipy(rng):
    x = rng.standard_normal(40)
    y = 0.5 * x + rng.standard_normal(40)
    result = pearson(x, y)
    r, p = stats.pearsonr(x, y)
    assert result.coefficient == pytest.approx(r)
    assert result.p_value == pytest.approx(p)
    assert result.n == 40


def test_spearman_with_ties(rng):
    x = rng.integers(0, 5, 50).astype(float)
    y = x + rng.standard_normal(50)
    result = spearman(x, y)
    rho, p = stats.spearmanr(x, y)
    assert result.coefficient == pytest.approx(rho)
    assert result.p_value == pytest.approx(p)


def test_perfect_correlation():
    result = pearson([1, 2, 3, 4], [2, 4, 6, 8])
    assert result.coefficient == 1.0
    assert result.p_value == 0.0


def test_correlation_constant_input():
    with pytest.raises(DegenerateInputError):
        pearson([1, 1, 1], [1, 2, 3])


def test_correlation_too_short():
    with pytest.raises(ParameterError):
        spearman([1, 2], [2, 1])


def test_correlation_table(rng):
    target = rng.standard_normal(20)
    table = correlation_table(
        target, {"a": target + 1, "b": rng.standard_normal(20)}
    )
    assert list(table.columns) == [
        "variable",
        "pearson_r",
        "pearson_p",
        "spearman_rho",
        "spearman_p",
    ]
    assert list(table["variable"]) == ["a", "b"]
    assert table.loc[0, "pearson_r"] == pytest.approx(1.0)
    assert table.loc[0, "spearman_rho"] == pytest.approx(1.0)


def test_vif_orthogonal():
    """Assert mutually orthogonal columns have VIF 1"""
    a = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=float)
    b = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=float)
    c = np.array([1, 1, 1, 1, -1, -1, -1, -1], dtype=float)
    values = vif(features_from([a, b, c]))
    assert values == pytest.approx({"x0": 1.0, "x1": 1.0, "x2": 1.0})


def test_vif_collinear(rng):
    a = rng.standard_normal(30)
    b = rng.standard_normal(30)
    values = vif(features_from([a, b, a + b]))
    assert all(np.isinf(v) for v in values.values())


def test_vif_matches_statsmodels(rng):
    a = rng.standard_normal(50)
    b = a + 0.5 * rng.standard_normal(50)
    c = rng.standard_normal(50)
    features = features_from([a, b, c])
    design = np.column_stack([np.ones(50), features.values])
    values = vif(features, threads=2)
    for j, name in enumerate(features.columns):
        expected = variance_inflation_factor(design, j + 1)
        assert values[name] == pytest.approx(expected)


def test_vif_too_few_rows():
    with pytest.raises(ParameterError):
        vif(features_from([[1.0, 2.0, 3.0], [3.0, 1.0, 2.0]]))


def test_vif_prune(rng):
    """Assert pruning leaves every VIF below the threshold"""
    a, b, c, d = rng.standard_normal((4, 80))
    e = a + b + 0.05 * rng.standard_normal(80)
    features = features_from([a, b, c, d, e], ["a", "b", "c", "d", "e"])
    report = vif_prune(features, threshold=5.0)
    assert len(report.removed) == 1
    assert report.removed[0] in ("a", "b", "e")
    assert all(v < 5.0 for v in report.rounds[-1].values())
    assert set(report.retained) | set(report.removed) == set("abcde")
    assert report.stages == ("initial", "threshold")
    assert report.trail[0].vif >= 5.0
    frame = report.to_frame()
    assert frame.shape == (5, 2)
    assert np.isnan(frame.loc[report.removed[0], "round_1"])


def test_vif_prune_composition_group(rng):
    """Assert the reference of a composition group is removed first"""
    shares = rng.dirichlet(np.ones(3), 60) * 100
    other = rng.standard_normal(60)
    features = features_from(
        [shares[:, 0], shares[:, 1], shares[:, 2], other],
        ["low", "mid", "high", "other"],
    )
    assert np.isinf(vif(features)["mid"])
    report = vif_prune(
        features,
        composition_groups=[
            {
                "name": "edu",
                "members": ["low", "mid", "high"],
                "reference": "mid",
            }
        ],
    )
    assert report.trail[0].variable == "mid"
    assert report.trail[0].reason == "composition"
    assert "mid" not in report.retained
    assert all(np.isfinite(v) for v in report.rounds[1].values())


def test_vif_prune_manual_drop(rng):
    features = features_from(list(rng.standard_normal((4, 40))))
    report = vif_prune(features, manual_drops=["x2"])
    assert report.removed == ("x2",)
    assert report.stages == ("initial", "manual")


def test_vif_prune_rejects_unknown_drop(rng):
    features = features_from(list(rng.standard_normal((3, 40))))
    with pytest.raises(ParameterError):
        vif_prune(features, manual_drops=["nope"])


def test_vif_prune_bad_threshold(rng):
    features = features_from(list(rng.standard_normal((3, 40))))
    with pytest.raises(ParameterError):
        vif_prune(features, threshold=1.0)


def test_default_composition_groups_reference_members():
    for group in DEFAULT_COMPOSITION_GROUPS:
        assert group.reference in group.members
