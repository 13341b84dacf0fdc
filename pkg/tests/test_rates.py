"""Tests for derived rates and the feature matrix"""

import numpy as np
import pandas as pd
import pytest
from sklearn.preprocessing import StandardScaler

from dv_mobility.errors import (
    DegenerateInputError,
    ParameterError,
    SchemaError,
)
from dv_mobility.ingest import (
    CbgRecord,
    CbgTable,
    IncidentRecord,
    IncidentTable,
    PoiRecord,
    PoiTable,
    VisitRecord,
    VisitTable,
    filter_alcohol_pois,
)
from dv_mobility.rates import (
    BASELINE_VARIABLES,
    RATE_COLUMNS,
    VISIT_RATE_COLUMNS,
    FeatureMatrix,
    RateTable,
    Scaler,
    assemble_features,
    build_rate_table,
    derive_rates,
    dv_rate,
    population_density,
    reverse_visits,
    visit_rate,
)

SQUARE = (((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)),)


def cbg(cbg_id, population=1000, devices=100, area=1.0):
    return CbgRecord(cbg_id, SQUARE, population, devices, area)


@pytest.fixture()
def outlets():
    return filter_alcohol_pois(
        PoiTable(
            records=[
                PoiRecord("liquor", "445310", (0.0, 0.0), "x"),
                PoiRecord("bar", "722410", (0.0, 0.0), "x"),
                PoiRecord("grocery", "445110", (0.0, 0.0), "x"),
            ]
        ),
        codes={"445310", "722410"},
    )


def test_dv_rate():
    cbgs = CbgTable(records=[cbg("a", 1000), cbg("b", 350), cbg("c", 10)])
    rates = dv_rate({"a": 5, "b": 7}, cbgs)
    assert rates.values["a"] == 5.0
    assert rates.values["b"] == pytest.approx(20.0)
    assert rates.values["c"] == 0.0


def test_dv_rate_zero_population(caplog):
    """Assert CBGs without residents are excluded with a warning"""
    cbgs = CbgTable(records=[cbg("a", 0), cbg("b", 100)])
    rates = dv_rate({"a": 3}, cbgs)
    assert "a" not in rates.values
    assert rates.excluded == ("a",)
    assert "no population" in caplog.text


def test_dv_rate_min_pop():
    cbgs = CbgTable(records=[cbg("a", 40), cbg("b", 100)])
    rates = dv_rate({}, cbgs, min_pop=50)
    assert rates.excluded == ("a",)
    assert rates.values == {"b": 0.0}


def test_dv_rate_sums_to_count(rng):
    """Assert rates times populations recover the incident total"""
    populations = rng.integers(50, 5000, 30)
    counts = rng.integers(0, 40, 30)
    cbgs = CbgTable(
        records=[cbg(f"c{i:02d}", int(p)) for i, p in enumerate(populations)]
    )
    rates = dv_rate(
        {f"c{i:02d}": int(c) for i, c in enumerate(counts)}, cbgs
    )
    total = sum(
        rates.values[r.cbg_id] * r.population / 1000 for r in cbgs
    )
    assert total == pytest.approx(counts.sum())


def test_reverse_visits(outlets):
    visits = VisitTable(
        records=[
            VisitRecord("liquor", "a", 10),
            VisitRecord("liquor", "b", 4),
            VisitRecord("bar", "a", 5),
            VisitRecord("grocery", "a", 100),
        ]
    )
    sums = reverse_visits(visits, outlets)
    assert list(sums.index) == ["a", "b"]
    assert sums.loc["a", "liquor_store"] == 10
    assert sums.loc["a", "drinking_place"] == 5
    assert sums.loc["b", "drinking_place"] == 0
    assert sums.loc["a", "brewery"] == 0
    assert int(sums.to_numpy().sum()) == 19


def test_reverse_visits_empty(outlets):
    sums = reverse_visits(VisitTable(), outlets)
    assert len(sums) == 0
    assert "liquor_store" in sums.columns


def test_visit_rate(outlets):
    cbgs = CbgTable(records=[cbg("a", devices=30), cbg("b", devices=20)])
    sums = reverse_visits(
        VisitTable(records=[VisitRecord("liquor", "a", 15)]), outlets
    )
    rates = visit_rate(sums, cbgs)
    assert rates.frame.loc["a", "liquor_store_vr"] == pytest.approx(0.5)
    assert rates.frame.loc["b", "liquor_store_vr"] == 0.0
    assert set(VISIT_RATE_COLUMNS) <= set(rates.frame.columns)


def test_visit_rate_no_devices(outlets, caplog):
    cbgs = CbgTable(records=[cbg("a", devices=0), cbg("b", devices=20)])
    sums = reverse_visits(VisitTable(), outlets)
    rates = visit_rate(sums, cbgs)
    assert rates.excluded == ("a",)
    assert list(rates.frame.index) == ["b"]
    assert "no resident devices" in caplog.text


def test_population_density():
    cbgs = CbgTable(records=[cbg("a", 500, area=0.5), cbg("b", area=0.0)])
    density = population_density(cbgs)
    assert density.values == {"a": 1000.0}
    assert density.excluded == ("b",)


def test_build_rate_table_intersection(outlets):
    """Assert only CBGs eligible for every derivation are kept"""
    cbgs = CbgTable(
        records=[cbg("a"), cbg("b", population=0), cbg("c", devices=0)]
    )
    table = build_rate_table(
        dv_rate({}, cbgs),
        visit_rate(reverse_visits(VisitTable(), outlets), cbgs),
        population_density(cbgs),
    )
    assert table.ids == ("a",)
    assert table.excluded["dv_rate"] == ("b",)
    assert table.excluded["visit_rate"] == ("c",)
    assert tuple(table.to_frame().columns) == RATE_COLUMNS


def test_rate_table_csv(tmp_path):
    frame = RateTable(
        frame=pd.DataFrame(
            {c: [1.0, 2.0] for c in RATE_COLUMNS[1:]},
            index=pd.Index(["0042", "0007"], name="cbg_id"),
        ).sort_index()
    )
    path = tmp_path / "rates.csv"
    frame.to_csv(path)
    loaded = RateTable.from_csv(path)
    assert loaded.ids == ("0007", "0042")
    assert loaded.frame.equals(frame.frame)


def test_rate_table_csv_missing_column(tmp_path):
    path = tmp_path / "rates.csv"
    path.write_text("cbg_id,dv_rate\na,1.0\n")
    with pytest.raises(SchemaError):
        RateTable.from_csv(path)


def test_derive_rates(make_grid):
    """Run the derivation on a small grid with every kind of incident"""
    cbgs = make_grid(1, 2, size=1.0, population=500, devices=10)
    pois = PoiTable(
        records=[
            PoiRecord("p1", "445310", (0.5, 0.5), "liquor"),
            PoiRecord("p2", "722511", (1.5, 0.5), "restaurant"),
        ]
    )
    visits = VisitTable(
        records=[
            VisitRecord("p1", "c0000", 5),
            VisitRecord("p1", "c0001", 2),
            VisitRecord("p2", "c0001", 9),
        ]
    )
    incidents = IncidentTable(
        records=[
            IncidentRecord("i1", (0.5, 0.5), True, "BATTERY", "RESIDENCE"),
            IncidentRecord("i2", (0.5, 0.6), True, "ASSAULT", "APARTMENT"),
            IncidentRecord("i3", (1.5, 0.5), True, "BATTERY", "STREET"),
            IncidentRecord("i4", (1.5, 0.5), False, "BATTERY", "RESIDENCE"),
            IncidentRecord("i5", (1.5, 0.5), True, "BATTERY", "RESIDENCE"),
        ]
    )
    table = derive_rates(cbgs, incidents, pois, visits)
    frame = table.frame
    assert frame.loc["c0000", "dv_rate"] == pytest.approx(4.0)
    assert frame.loc["c0001", "dv_rate"] == pytest.approx(2.0)
    assert frame.loc["c0000", "liquor_store_vr"] == pytest.approx(0.5)
    assert frame.loc["c0001", "liquor_store_vr"] == pytest.approx(0.2)
    assert frame.loc["c0001", "drinking_place_vr"] == 0.0
    assert frame.loc["c0000", "population_density"] == 500.0


def test_scaler(rng):
    values = rng.normal(5.0, 3.0, (100, 3))
    scaler = Scaler.fit(values)
    z = scaler.transform(values)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0)
    np.testing.assert_allclose(scaler.inverse_transform(z), values)
    np.testing.assert_allclose(z, StandardScaler().fit_transform(values))


def test_scaler_constant_column():
    values = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
    with pytest.raises(DegenerateInputError, match="flat"):
        Scaler.fit(values, ["slope", "flat"])


@pytest.fixture()
def feature_inputs(make_grid, rng):
    """Grid with every baseline attribute and a matching rate table."""
    n = 16
    attrs = {
        name: rng.uniform(0, 100, n)
        for name in BASELINE_VARIABLES
        if name != "population_density"
    }
    cbgs = make_grid(4, 4, **attrs)
    frame = pd.DataFrame(
        {
            "dv_rate": rng.uniform(0, 20, n),
            **{c: rng.uniform(0, 1, n) for c in VISIT_RATE_COLUMNS},
            "population_density": rng.uniform(100, 9000, n),
        },
        index=pd.Index(cbgs.ids, name="cbg_id"),
    )
    return cbgs, RateTable(frame=frame)


def test_assemble_features(feature_inputs):
    cbgs, rates = feature_inputs
    features, target = assemble_features(cbgs, rates)
    assert features.p == len(BASELINE_VARIABLES) + 4
    assert features.columns[-4:] == VISIT_RATE_COLUMNS
    assert features.ids == cbgs.ids
    np.testing.assert_allclose(features.values.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(features.values.std(axis=0), 1)
    np.testing.assert_array_equal(target, rates.frame["dv_rate"])
    np.testing.assert_allclose(
        features.raw_values()[:, -1], rates.frame[VISIT_RATE_COLUMNS[-1]]
    )


def test_assemble_features_baseline(feature_inputs):
    cbgs, rates = feature_inputs
    features, _ = assemble_features(cbgs, rates, include_visits=False)
    assert features.columns == BASELINE_VARIABLES
    assert "urbanicity" in features.categories


def test_assemble_features_unknown_variable(feature_inputs):
    cbgs, rates = feature_inputs
    with pytest.raises(ParameterError, match="No category"):
        assemble_features(cbgs, rates, variable_list=["shoe_size"])


def test_assemble_features_missing_variable(feature_inputs):
    cbgs, rates = feature_inputs
    with pytest.raises(SchemaError):
        assemble_features(
            cbgs,
            rates,
            variable_list=["shoe_size"],
            categories={"shoe_size": "age"},
        )


def test_feature_matrix_select_and_drop(feature_inputs):
    cbgs, rates = feature_inputs
    features, _ = assemble_features(cbgs, rates)
    subset = features.select(["winery_vr", "pct_white"])
    assert subset.columns == ("winery_vr", "pct_white")
    np.testing.assert_array_equal(
        subset.values[:, 1], features.column("pct_white")
    )
    np.testing.assert_allclose(
        subset.raw_values()[:, 1],
        [cbgs.get(i).attributes["pct_white"] for i in cbgs.ids],
    )
    dropped = features.drop(VISIT_RATE_COLUMNS)
    assert dropped.columns == BASELINE_VARIABLES
    with pytest.raises(ParameterError):
        features.select(["nope"])


def test_feature_matrix_read_only(feature_inputs):
    features, _ = assemble_features(*feature_inputs)
    with pytest.raises(ValueError):
        features.values[0, 0] = 1.0


def test_feature_matrix_rejects_non_finite():
    with pytest.raises(ParameterError):
        FeatureMatrix(
            ids=("a", "b"),
            columns=("x",),
            categories=("age",),
            values=np.array([[0.0], [np.nan]]),
            scaler=Scaler(mean=np.zeros(1), std=np.ones(1)),
        )
