"""Loading and validating the region-level input files.

All files are UTF-8 CSV with a header row. Region identifiers are resolved
through a :class:`RegionRegistry` built from ``regions.csv``; no loader relies
on row position.
"""

from __future__ import annotations

import csv
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

POI_FIELDS = ("FACILITY_T", "FACI_DOM", "SEGMENTID", "PRI_ADD", "BIN", "SOS", "SAFTYPE", "COMPLEXID", "SOURCE")


class RegionRegistry:
    """Ordered, unique region identifiers with a reverse index."""

    def __init__(self, ids: Iterable[str]):
        self.ids: list[str] = []
        self._index: dict[str, int] = {}
        for rid in ids:
            rid = str(rid).strip()
            if not rid:
                raise ValidationError("empty region identifier")
            if rid in self._index:
                raise ValidationError(f"duplicate region identifier {rid!r}")
            self._index[rid] = len(self.ids)
            self.ids.append(rid)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, rid: str) -> bool:
        return rid in self._index

    def __iter__(self):
        return iter(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    def index(self, rid: str) -> int:
        return self._index[rid]

    def resolve(self, rid: str, where: str) -> int:
        try:
            return self._index[rid.strip()]
        except KeyError:
            raise ValidationError(f"{where}: unknown region {rid!r}") from None


@dataclass(frozen=True)
class TripRecord:
    origin: int
    destination: int
    count: int = 1


@dataclass(frozen=True)
class PoiRecord:
    place_id: str
    region: int
    attributes: dict[str, str] = field(default_factory=dict)


class AdjacencySet:
    """Symmetric, self-free neighbour lists over region indices."""

    def __init__(self, n: int, edges: Iterable[tuple[int, int]] = ()):
        self.n = n
        self._nbrs: list[set[int]] = [set() for _ in range(n)]
        for a, b in edges:
            self.add(a, b)

    def add(self, a: int, b: int) -> None:
        if a == b:
            return
        self._nbrs[a].add(b)
        self._nbrs[b].add(a)

    def neighbors(self, i: int) -> list[int]:
        return sorted(self._nbrs[i])

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in sorted(self._nbrs[i]) if i < j]

    def degree(self) -> np.ndarray:
        return np.array([len(s) for s in self._nbrs])

    def to_matrix(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges():
            m[i, j] = m[j, i] = True
        return m

    def __eq__(self, other) -> bool:
        return isinstance(other, AdjacencySet) and self.n == other.n and self._nbrs == other._nbrs


# -- csv helpers ----------------------------------------------------------
def _rows(path, required: Sequence[str]):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: missing header row")
        header = [h.strip().lower() for h in reader.fieldnames]
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            clean = {k.strip().lower(): (v or "").strip() for k, v in row.items() if k is not None}
            yield lineno, clean, header


def load_regions(path) -> RegionRegistry:
    return RegionRegistry(row["region_id"] for _, row, _ in _rows(path, ["region_id"]))


def load_trips(path, registry: RegionRegistry) -> list[TripRecord]:
    trips = []
    for lineno, row, header in _rows(path, ["origin", "destination"]):
        where = f"{path}:{lineno}"
        o = registry.resolve(row["origin"], where)
        d = registry.resolve(row["destination"], where)
        count = 1
        if "count" in header and row.get("count"):
            try:
                count = int(row["count"])
            except ValueError:
                raise ValidationError(f"{where}: count {row['count']!r} is not an integer") from None
            if count <= 0:
                raise ValidationError(f"{where}: count must be positive, got {count}")
        trips.append(TripRecord(o, d, count))
    return trips


def load_adjacency(path, registry: RegionRegistry) -> AdjacencySet:
    adj = AdjacencySet(registry.n)
    for lineno, row, _ in _rows(path, ["region_a", "region_b"]):
        where = f"{path}:{lineno}"
        a = registry.resolve(row["region_a"], where)
        b = registry.resolve(row["region_b"], where)
        if a == b:
            warnings.warn(f"{where}: self-edge on {row['region_a']!r} dropped", stacklevel=2)
            continue
        adj.add(a, b)
    return adj


def adjacency_from_polygons(geojson_path, registry: RegionRegistry, tolerance: float = 1e-9) -> AdjacencySet:
    """Regions are neighbours when their boundaries come within ``tolerance``.

    Corner contact counts, so diagonal cells of a grid are adjacent.
    """
    import shapely
    from shapely.geometry import shape

    with Path(geojson_path).open(encoding="utf-8") as fh:
        doc = json.load(fh)
    geoms: dict[int, object] = {}
    for k, feat in enumerate(doc.get("features", [])):
        rid = str((feat.get("properties") or {}).get("region_id", "")).strip()
        where = f"{geojson_path}: feature {rid or k}"
        idx = registry.resolve(rid, where)
        try:
            geom = shape(feat["geometry"])
        except Exception as exc:  # shapely raises a variety of types here
            raise ValidationError(f"{where}: malformed geometry ({exc})") from None
        if geom.geom_type not in ("Polygon", "MultiPolygon") or geom.is_empty or not geom.is_valid:
            raise ValidationError(f"{where}: malformed geometry ({geom.geom_type})")
        if idx in geoms:
            raise ValidationError(f"{where}: duplicate feature for region")
        geoms[idx] = geom
    missing = [registry.ids[i] for i in range(registry.n) if i not in geoms]
    if missing:
        raise ValidationError(f"{geojson_path}: no feature for region(s) {', '.join(missing)}")

    ordered = [geoms[i] for i in range(registry.n)]
    tree = shapely.STRtree(ordered)
    left, right = tree.query(ordered, predicate="dwithin", distance=tolerance)
    return AdjacencySet(registry.n, zip(left.tolist(), right.tolist()))


def load_pois(path, registry: RegionRegistry) -> list[PoiRecord]:
    pois, seen = [], set()
    for lineno, row, header in _rows(path, ["place_id", "region_id", "facility_t"]):
        where = f"{path}:{lineno}"
        pid = row["place_id"]
        if not pid:
            raise ValidationError(f"{where}: empty place_id")
        if pid in seen:
            raise ValidationError(f"{where}: duplicate place_id {pid!r}")
        seen.add(pid)
        region = registry.resolve(row["region_id"], where)
        if not row["facility_t"]:
            raise ValidationError(f"{where}: facility_t is required")
        attrs = {f: row[f.lower()] for f in POI_FIELDS if f.lower() in header and row.get(f.lower())}
        pois.append(PoiRecord(pid, region, attrs))
    return pois


def load_checkins(path, registry: RegionRegistry) -> np.ndarray:
    """Per-region check-in volume.

    Accepts pre-aggregated ``region_id,count`` rows or per-event
    ``region_id,timestamp`` rows (each row counts once).
    """
    volumes = np.zeros(registry.n)
    for lineno, row, header in _rows(path, ["region_id"]):
        where = f"{path}:{lineno}"
        idx = registry.resolve(row["region_id"], where)
        if "count" in header:
            try:
                value = float(row["count"])
            except ValueError:
                raise ValidationError(f"{where}: count {row['count']!r} is not a number") from None
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"{where}: count must be a finite nonnegative number")
        elif "timestamp" in header:
            value = 1.0
        else:
            raise ValidationError(f"{path}: expected a count or timestamp column")
        volumes[idx] += value
    return volumes


def load_labels(path, registry: RegionRegistry) -> np.ndarray:
    labels = np.full(registry.n, -1, dtype=np.int64)
    for lineno, row, _ in _rows(path, ["region_id", "district"]):
        where = f"{path}:{lineno}"
        idx = registry.resolve(row["region_id"], where)
        try:
            labels[idx] = int(row["district"])
        except ValueError:
            raise ValidationError(f"{where}: district {row['district']!r} is not an integer") from None
    if (labels < 0).any():
        missing = [registry.ids[i] for i in np.flatnonzero(labels < 0)]
        raise ValidationError(f"{path}: no label for region(s) {', '.join(missing[:5])}")
    return labels


# -- writers --------------------------------------------------------------
def _write(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_regions(path, registry: RegionRegistry) -> None:
    _write(path, ["region_id"], ([r] for r in registry.ids))


def write_trips(path, trips: Sequence[TripRecord], registry: RegionRegistry) -> None:
    ids = registry.ids
    _write(path, ["origin", "destination", "count"], ((ids[t.origin], ids[t.destination], t.count) for t in trips))


def write_adjacency(path, adj: AdjacencySet, registry: RegionRegistry) -> None:
    ids = registry.ids
    _write(path, ["region_a", "region_b"], ((ids[a], ids[b]) for a, b in adj.edges()))


def write_pois(path, pois: Sequence[PoiRecord], registry: RegionRegistry) -> None:
    header = ["place_id", "region_id"] + [f.lower() for f in POI_FIELDS]
    rows = ([p.place_id, registry.ids[p.region]] + [p.attributes.get(f, "") for f in POI_FIELDS] for p in pois)
    _write(path, header, rows)


def write_checkins(path, volumes: np.ndarray, registry: RegionRegistry) -> None:
    _write(path, ["region_id", "count"], ((rid, repr(float(v))) for rid, v in zip(registry.ids, volumes)))


def write_labels(path, labels: np.ndarray, registry: RegionRegistry, column: str = "district") -> None:
    _write(path, ["region_id", column], ((rid, int(v)) for rid, v in zip(registry.ids, labels)))


def write_geojson(path, registry: RegionRegistry, geometries: Sequence[dict], properties: dict[str, Sequence] | None = None) -> None:
    """FeatureCollection with ``region_id`` plus any extra per-region properties."""
    properties = properties or {}
    features = []
    for i, rid in enumerate(registry.ids):
        props = {"region_id": rid}
        for key, values in properties.items():
            v = values[i]
            props[key] = v.item() if hasattr(v, "item") else v
        features.append({"type": "Feature", "properties": props, "geometry": geometries[i]})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}), encoding="utf-8")


def read_geometries(geojson_path, registry: RegionRegistry) -> list[dict]:
    """Raw GeoJSON geometry dicts in registry order."""
    doc = json.loads(Path(geojson_path).read_text(encoding="utf-8"))
    by_id = {str(f["properties"]["region_id"]): f["geometry"] for f in doc["features"]}
    return [by_id[rid] for rid in registry.ids]


def group_trips(trips: Sequence[TripRecord]) -> dict[tuple[int, int], int]:
    """Merge duplicate (origin, destination) rows into weighted pairs."""
    pairs: dict[tuple[int, int], int] = defaultdict(int)
    for t in trips:
        pairs[(t.origin, t.destination)] += t.count
    return dict(pairs)
