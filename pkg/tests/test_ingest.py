"""Tests for loading and filtering the input tables"""

import json
import logging

import pytest

from dv_mobility.errors import GeometryError, ReferentialError, SchemaError
from dv_mobility.ingest import (
    INCIDENT_COLUMNS,
    POI_COLUMNS,
    VISIT_COLUMNS,
    IncidentRecord,
    IncidentTable,
    PoiRecord,
    PoiTable,
    filter_alcohol_pois,
    filter_dv_incidents,
    link,
    load_cbgs,
    load_incidents,
    load_pois,
    load_visits,
)


def incident(incident_id, domestic, primary_type, location):
    return IncidentRecord(
        incident_id=incident_id,
        location=(0.5, 0.5),
        domestic_flag=domestic,
        primary_type=primary_type,
        location_description=location,
    )


@pytest.fixture()
def pois():
    codes = ["445310", "722511", "312120", "445110", "722410"]
    return PoiTable(
        records=[
            PoiRecord(f"p{i}", code, (0.0, 0.0), "label")
            for i, code in enumerate(codes)
        ]
    )


def test_load_cbgs(write_cbgs, cbg_feature):
    """Assert valid features are loaded in cbg_id order"""
    path = write_cbgs(
        [
            cbg_feature("c", 0.02, pct_white=10.0),
            cbg_feature("a", 0.0, pct_white=20.0, area_km2=2.5),
            cbg_feature("b", 0.01, pct_white=30.0),
        ]
    )
    table = load_cbgs(path, attribute_schema=["pct_white"])
    assert table.ids == ("a", "b", "c")
    assert table.get("a").area_km2 == 2.5
    assert table.get("b").area_km2 == pytest.approx(1.2364, rel=1e-3)
    assert table.get("c").attributes["pct_white"] == 10.0
    assert table.attribute_names == ("pct_white",)
    assert table.n_input == 3


def test_load_cbgs_unclosed_ring(write_cbgs, cbg_feature):
    """Assert the error names the feature with the unclosed ring"""
    feature = cbg_feature("17031010100")
    feature["geometry"]["coordinates"][0][-1] = [5.0, 5.0]
    path = write_cbgs([feature])
    with pytest.raises(GeometryError, match="17031010100.*not closed"):
        load_cbgs(path)


def test_load_cbgs_duplicate_id(write_cbgs, cbg_feature):
    path = write_cbgs([cbg_feature("17031"), cbg_feature("17031", 0.01)])
    with pytest.raises(SchemaError, match="Duplicate cbg_id"):
        load_cbgs(path)


def test_load_cbgs_missing_attribute(write_cbgs, cbg_feature):
    path = write_cbgs([cbg_feature("a")])
    with pytest.raises(SchemaError, match="med_income"):
        load_cbgs(path, attribute_schema=["med_income"])


def test_load_cbgs_rejects_negative_population(write_cbgs, cbg_feature):
    """Assert invalid counts reject the feature rather than the file"""
    path = write_cbgs([cbg_feature("a", population=-1), cbg_feature("b")])
    table = load_cbgs(path)
    assert table.ids == ("b",)
    assert len(table.rejected) == 1
    assert table.rejected[0].key == "a"
    assert table.n_input == 2


def test_load_cbgs_not_a_collection(tmp_path):
    path = tmp_path / "cbgs.geojson"
    path.write_text(json.dumps({"type": "Feature"}))
    with pytest.raises(SchemaError):
        load_cbgs(path)


def test_load_visits(write_csv):
    path = write_csv(
        "visits.csv", VISIT_COLUMNS, [("p1", "c1", 10), ("p1", "c2", 5)]
    )
    table = load_visits(path)
    assert len(table) == 2
    assert [r.visitor_count for r in table] == [10, 5]


def test_load_visits_rejects_non_numeric(write_csv, caplog):
    """Assert a non-numeric count is logged and counted as rejected"""
    caplog.set_level(logging.WARNING)
    path = write_csv(
        "visits.csv", VISIT_COLUMNS, [("p1", "c1", "abc"), ("p1", "c2", 5)]
    )
    table = load_visits(path)
    assert len(table) == 1
    assert len(table.rejected) == 1
    assert table.rejected[0].row == 1
    assert len(table) + len(table.rejected) == table.n_input == 2
    assert "visitor_count is not numeric" in caplog.text


def test_load_visits_duplicate_pair(write_csv):
    path = write_csv(
        "visits.csv", VISIT_COLUMNS, [("p1", "c1", 1), ("p1", "c1", 2)]
    )
    with pytest.raises(SchemaError, match="Duplicate"):
        load_visits(path)


def test_load_incidents_rejects_bad_latitude(write_csv):
    rows = [
        ("i1", -87.6, 95.0, "true", "BATTERY", "RESIDENCE"),
        ("i2", -87.6, 41.8, "false", "THEFT", "STREET"),
    ]
    table = load_incidents(write_csv("incidents.csv", INCIDENT_COLUMNS, rows))
    assert table.ids == ("i2",)
    assert "lat outside" in table.rejected[0].reason
    assert table.get("i2").domestic_flag is False


def test_load_incidents_rejects_bad_flag(write_csv):
    rows = [("i1", 0.0, 0.0, "yes", "BATTERY", "RESIDENCE")]
    table = load_incidents(write_csv("incidents.csv", INCIDENT_COLUMNS, rows))
    assert len(table) == 0
    assert len(table.rejected) == 1


def test_load_pois_missing_column(write_csv):
    path = write_csv("pois.csv", ["poi_id", "naics"], [("p1", "445310")])
    with pytest.raises(SchemaError, match="missing columns"):
        load_pois(path)


def test_load_pois_rejects_short_naics(write_csv):
    rows = [("p1", "4453", 0.0, 0.0, "x"), ("p2", "445310", 0.0, 0.0, "y")]
    table = load_pois(write_csv("pois.csv", POI_COLUMNS, rows))
    assert table.ids == ("p2",)


def test_loading_is_deterministic(write_csv):
    rows = [("p1", "445310", 1.0, 2.0, "a"), ("p2", "722410", 3.0, 4.0, "b")]
    path = write_csv("pois.csv", POI_COLUMNS, rows)
    assert load_pois(path) == load_pois(path)


def test_filter_alcohol_pois(pois):
    """Assert the four outlet codes are kept and tagged"""
    out = filter_alcohol_pois(pois)
    assert out.ids == ("p0", "p2", "p4")
    assert [r.outlet_type for r in out] == [
        "liquor_store",
        "brewery",
        "drinking_place",
    ]


def test_filter_alcohol_pois_all_codes(pois):
    codes = {r.naics for r in pois}
    assert filter_alcohol_pois(pois, codes).ids == pois.ids


def test_filter_alcohol_pois_union(pois):
    """Assert filtering by a union equals the union of the filters"""
    c1, c2 = {"445310"}, {"312120", "722410"}
    union = set(filter_alcohol_pois(pois, c1 | c2).ids)
    assert union == set(filter_alcohol_pois(pois, c1).ids) | set(
        filter_alcohol_pois(pois, c2).ids
    )


def test_filter_alcohol_pois_table_counts():
    """Assert per-type counts for a city-scale table"""
    counts = {"445310": 410, "312120": 103, "312130": 16, "722410": 135}
    records = []
    for code, count in counts.items():
        records += [
            PoiRecord(f"{code}-{i}", code, (0.0, 0.0), "x")
            for i in range(count)
        ]
    records += [
        PoiRecord(f"o-{i}", "722511", (0.0, 0.0), "x") for i in range(7)
    ]
    out = filter_alcohol_pois(PoiTable(records=records))
    found = {}
    for record in out:
        found[record.outlet_type] = found.get(record.outlet_type, 0) + 1
    assert found == {
        "liquor_store": 410,
        "brewery": 103,
        "winery": 16,
        "drinking_place": 135,
    }


@pytest.mark.parametrize(
    "record, kept",
    [
        (incident("a", True, "BATTERY", "Residence"), True),
        (incident("b", True, "ARSON", "Residence"), False),
        (incident("c", True, "BATTERY", "Street"), False),
        (incident("d", False, "BATTERY", "Residence"), False),
        (incident("e", True, " battery ", "driveway -  residential"), True),
    ],
)
def test_filter_dv_incidents(record, kept):
    table, report = filter_dv_incidents(IncidentTable(records=[record]))
    assert (len(table) == 1) is kept
    assert report.n_kept == len(table)


def test_filter_dv_incidents_report():
    """Assert each removal is attributed to its stage"""
    table = IncidentTable(
        records=[
            incident("a", True, "BATTERY", "RESIDENCE"),
            incident("b", True, "THEFT", "RESIDENCE"),
            incident("c", True, "ASSAULT", "STREET"),
            incident("d", False, "ASSAULT", "APARTMENT"),
        ]
    )
    _, report = filter_dv_incidents(table)
    assert report.n_input == 4
    assert report.non_domestic == 1
    assert report.mislabelled_type == 1
    assert report.public_space == 1
    assert report.n_kept == 1


def test_filter_dv_incidents_idempotent():
    table = IncidentTable(
        records=[
            incident("a", True, "BATTERY", "RESIDENCE"),
            incident("b", True, "THEFT", "RESIDENCE"),
            incident("c", True, "ASSAULT", "STREET"),
        ]
    )
    once, _ = filter_dv_incidents(table)
    twice, _ = filter_dv_incidents(once)
    assert once.records == twice.records


def test_link_strict(make_grid, write_csv, pois):
    cbgs = make_grid(1, 2)
    path = write_csv(
        "visits.csv",
        VISIT_COLUMNS,
        [("p0", "c0000", 3), ("missing", "c0001", 2)],
    )
    with pytest.raises(ReferentialError, match="missing"):
        link(cbgs, pois, load_visits(path))


def test_link_non_strict(make_grid, write_csv, pois):
    """Assert dangling visits are dropped and recorded"""
    cbgs = make_grid(1, 2)
    path = write_csv(
        "visits.csv",
        VISIT_COLUMNS,
        [("p0", "c0000", 3), ("p0", "nowhere", 2)],
    )
    visits = link(cbgs, pois, load_visits(path), strict=False)
    assert len(visits) == 1
    assert visits.rejected[-1].row is None
    assert "unknown cbg_id" in visits.rejected[-1].reason
