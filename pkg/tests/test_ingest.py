import json

import numpy as np
import pytest

from urbanembed import ingest
from urbanembed.errors import ValidationError
from urbanembed.ingest import AdjacencySet, PoiRecord, RegionRegistry, TripRecord


@pytest.fixture
def abc():
    return RegionRegistry(["A", "B", "C"])


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def square(x, y, size=1.0):
    return {"type": "Polygon", "coordinates": [[[x, y], [x + size, y], [x + size, y + size], [x, y + size], [x, y]]]}


def geojson(tmp_path, polys):
    feats = [{"type": "Feature", "properties": {"region_id": rid}, "geometry": g} for rid, g in polys.items()]
    return write(tmp_path, "regions.geojson", json.dumps({"type": "FeatureCollection", "features": feats}))


def test_registry_rejects_duplicates():
    with pytest.raises(ValidationError, match="duplicate"):
        RegionRegistry(["A", "B", "A"])


def test_load_trips(tmp_path, abc):
    p = write(tmp_path, "trips.csv", "origin,destination\nA,B\nA,B\nA,C\n")
    trips = ingest.load_trips(p, abc)
    assert trips == [TripRecord(0, 1), TripRecord(0, 1), TripRecord(0, 2)]
    assert ingest.group_trips(trips) == {(0, 1): 2, (0, 2): 1}


def test_load_trips_empty_and_counts(tmp_path, abc):
    assert ingest.load_trips(write(tmp_path, "e.csv", "origin,destination\n"), abc) == []
    trips = ingest.load_trips(write(tmp_path, "c.csv", "origin,destination,count\nB,C,4\n"), abc)
    assert trips == [TripRecord(1, 2, 4)]


def test_load_trips_errors(tmp_path, abc):
    with pytest.raises(ValidationError, match=r":3: unknown region 'Z'"):
        ingest.load_trips(write(tmp_path, "t.csv", "origin,destination\nA,B\nZ,A\n"), abc)
    with pytest.raises(ValidationError, match="positive"):
        ingest.load_trips(write(tmp_path, "n.csv", "origin,destination,count\nA,B,0\n"), abc)


def test_polygon_adjacency_grid_2x2(tmp_path):
    reg = RegionRegistry(["a", "b", "c", "d"])
    p = geojson(tmp_path, {"a": square(0, 0), "b": square(1, 0), "c": square(0, 1), "d": square(1, 1)})
    adj = ingest.adjacency_from_polygons(p, reg)
    assert all(len(adj.neighbors(i)) == 3 for i in range(4))


def test_polygon_adjacency_strip_and_gap(tmp_path):
    reg = RegionRegistry(["a", "b", "c"])
    adj = ingest.adjacency_from_polygons(geojson(tmp_path, {"a": square(0, 0), "b": square(1, 0), "c": square(2, 0)}), reg)
    assert adj.neighbors(1) == [0, 2] and adj.neighbors(0) == [1] and adj.neighbors(2) == [1]
    tol = 1e-6
    gap = ingest.adjacency_from_polygons(
        geojson(tmp_path, {"a": square(0, 0), "b": square(1 + 10 * tol, 0), "c": square(5, 5)}), reg, tolerance=tol)
    assert gap.edges() == []


def test_polygon_adjacency_errors(tmp_path):
    reg = RegionRegistry(["a", "b"])
    with pytest.raises(ValidationError, match="no feature for region"):
        ingest.adjacency_from_polygons(geojson(tmp_path, {"a": square(0, 0)}), reg)
    bowtie = {"type": "Polygon", "coordinates": [[[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]]]}
    with pytest.raises(ValidationError, match="feature b: malformed"):
        ingest.adjacency_from_polygons(geojson(tmp_path, {"a": square(0, 0), "b": bowtie}), reg)


def test_load_adjacency(tmp_path, abc):
    adj = ingest.load_adjacency(write(tmp_path, "a.csv", "region_a,region_b\nA,B\nB,C\nB,A\n"), abc)
    assert adj.neighbors(1) == [0, 2]
    assert adj.edges() == [(0, 1), (1, 2)]
    with pytest.warns(UserWarning, match="self-edge"):
        adj = ingest.load_adjacency(write(tmp_path, "s.csv", "region_a,region_b\nA,A\n"), abc)
    assert adj.edges() == []


def test_load_pois(tmp_path, abc):
    text = "place_id,region_id,facility_t,faci_dom,sos\np1,A,park, playground ,\np2,C,school,,L\n"
    pois = ingest.load_pois(write(tmp_path, "p.csv", text), abc)
    assert pois[0] == PoiRecord("p1", 0, {"FACILITY_T": "park", "FACI_DOM": "playground"})
    assert pois[1].attributes == {"FACILITY_T": "school", "SOS": "L"}
    with pytest.raises(ValidationError, match="duplicate place_id"):
        ingest.load_pois(write(tmp_path, "d.csv", "place_id,region_id,facility_t\np,A,x\np,B,y\n"), abc)


def test_load_checkins_both_forms(tmp_path, abc):
    agg = ingest.load_checkins(write(tmp_path, "c.csv", "region_id,count\nA,3\nC,1.5\n"), abc)
    assert agg.tolist() == [3.0, 0.0, 1.5]
    events = ingest.load_checkins(write(tmp_path, "e.csv", "region_id,timestamp\nB,t1\nB,t2\nA,t3\n"), abc)
    assert events.tolist() == [1.0, 2.0, 0.0]


def test_load_labels(tmp_path, abc):
    labels = ingest.load_labels(write(tmp_path, "l.csv", "region_id,district\nC,2\nA,0\nB,1\n"), abc)
    assert labels.tolist() == [0, 1, 2]


def test_roundtrip(tmp_path):
    reg = RegionRegistry(["x", "y", "z"])
    trips = [TripRecord(0, 1, 2), TripRecord(2, 2, 1)]
    adj = AdjacencySet(3, [(0, 1), (1, 2)])
    pois = [PoiRecord("p", 2, {"FACILITY_T": "museum", "BIN": "1001"})]
    vols = np.array([0.0, 2.5, 1e-3])
    ingest.write_regions(tmp_path / "regions.csv", reg)
    ingest.write_trips(tmp_path / "trips.csv", trips, reg)
    ingest.write_adjacency(tmp_path / "adj.csv", adj, reg)
    ingest.write_pois(tmp_path / "pois.csv", pois, reg)
    ingest.write_checkins(tmp_path / "checkins.csv", vols, reg)
    reg2 = ingest.load_regions(tmp_path / "regions.csv")
    assert reg2.ids == reg.ids
    assert ingest.load_trips(tmp_path / "trips.csv", reg2) == trips
    assert ingest.load_adjacency(tmp_path / "adj.csv", reg2) == adj
    assert ingest.load_pois(tmp_path / "pois.csv", reg2) == pois
    assert np.array_equal(ingest.load_checkins(tmp_path / "checkins.csv", reg2), vols)
