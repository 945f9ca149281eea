"""Synthetic grid city with planted communities.

Each grid cell is a region. Regions are grouped into communities laid out as
rectangular blocks, after which a fraction of cells swap labels so geography
alone cannot recover the partition. The community then drives all modalities:

* trips: a fixed share of each region's trips stays inside its community,
  the rest go to uniformly chosen regions of other communities;
* POIs: categories are drawn from a community-specific preferred set, mixed
  with uniform noise, and subclasses lean towards a community-specific
  variant; the source and street-side attributes are uninformative;
* check-ins: a linear function of the community one-hot plus Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ingest
from .errors import ContractError
from .ingest import AdjacencySet, PoiRecord, RegionRegistry, TripRecord
from .seeding import substream


@dataclass
class SynthConfig:
    width: int = 6
    height: int = 6
    communities: int = 4
    trips_per_region: int = 20
    within_fraction: float = 0.8
    pois_per_region: int = 6
    categories: int = 8
    category_noise: float = 0.3
    shuffle_fraction: float = 0.25
    checkin_noise: float = 0.1  # noise sd as a multiple of the signal sd
    seed: int = 0

    def validate(self) -> None:
        n = self.width * self.height
        if min(self.width, self.height, self.communities, self.trips_per_region,
               self.pois_per_region, self.categories) < 1:
            raise ContractError("grid size, communities and per-region counts must be positive")
        if self.communities > n:
            raise ContractError(f"{self.communities} communities exceed {n} regions")
        for name in ("within_fraction", "category_noise", "shuffle_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")


@dataclass
class SyntheticCity:
    registry: RegionRegistry
    trips: list[TripRecord]
    adjacency: AdjacencySet
    pois: list[PoiRecord]
    checkins: np.ndarray
    labels: np.ndarray
    geometries: list[dict]
    config: SynthConfig


def region_id(row: int, col: int) -> str:
    return f"R{row:02d}{col:02d}"


def block_labels(width: int, height: int, communities: int) -> np.ndarray:
    bx = math.ceil(math.sqrt(communities))
    by = math.ceil(communities / bx)
    labels = np.empty(width * height, dtype=np.int64)
    for row in range(height):
        for col in range(width):
            block = (row * by // height) * bx + (col * bx // width)
            labels[row * width + col] = block % communities
    return labels


def grid_adjacency(width: int, height: int) -> AdjacencySet:
    """8-connectivity: edge and corner contact both count."""
    adj = AdjacencySet(width * height)
    for row in range(height):
        for col in range(width):
            for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
                r2, c2 = row + dr, col + dc
                if 0 <= r2 < height and 0 <= c2 < width:
                    adj.add(row * width + col, r2 * width + c2)
    return adj


def _cell(row: int, col: int) -> dict:
    ring = [[col, row], [col + 1, row], [col + 1, row + 1], [col, row + 1], [col, row]]
    return {"type": "Polygon", "coordinates": [[[float(x), float(y)] for x, y in ring]]}


def generate_city(config: SynthConfig | None = None) -> SyntheticCity:
    config = config or SynthConfig()
    config.validate()
    w, h, c = config.width, config.height, config.communities
    n = w * h
    registry = RegionRegistry(region_id(r, q) for r in range(h) for q in range(w))

    rng = substream(config.seed, "synth.layout")
    labels = block_labels(w, h, c)
    n_shuffle = int(round(config.shuffle_fraction * n))
    if n_shuffle > 1:
        cells = rng.choice(n, size=n_shuffle, replace=False)
        labels[cells] = labels[rng.permutation(cells)]

    members = [np.flatnonzero(labels == k) for k in range(c)]
    outsiders = [np.flatnonzero(labels != k) for k in range(c)]

    rng = substream(config.seed, "synth.trips")
    trips = []
    for o in range(n):
        k = labels[o]
        within = rng.random(config.trips_per_region) < config.within_fraction
        if len(outsiders[k]) == 0:
            within[:] = True
        dest_in = rng.choice(members[k], size=config.trips_per_region)
        dest_out = rng.choice(outsiders[k], size=config.trips_per_region) if len(outsiders[k]) else dest_in
        for d in np.where(within, dest_in, dest_out):
            trips.append(TripRecord(o, int(d), 1))

    rng = substream(config.seed, "synth.pois")
    n_pref = max(1, config.categories // c)
    preferred = [(np.arange(n_pref) + k * n_pref) % config.categories for k in range(c)]
    sources, sides = ("DCP", "DOT", "DPR"), ("L", "R")
    pois = []
    for i in range(n):
        for j in range(config.pois_per_region):
            if rng.random() < config.category_noise:
                cat = int(rng.integers(config.categories))
            else:
                cat = int(rng.choice(preferred[labels[i]]))
            # the subclass leans towards a community-specific variant
            sub = labels[i] % 3 if rng.random() >= config.category_noise else int(rng.integers(3))
            attrs = {
                "FACILITY_T": f"cat{cat}",
                "FACI_DOM": f"cat{cat}-{sub}",
                "SOURCE": sources[int(rng.integers(len(sources)))],
                "SOS": sides[int(rng.integers(len(sides)))],
            }
            pois.append(PoiRecord(f"P{i:03d}{j:02d}", i, attrs))

    rng = substream(config.seed, "synth.checkins")
    levels = rng.uniform(50.0, 500.0, size=c)
    signal = levels[labels]
    sd = signal.std() if c > 1 else signal.mean()
    checkins = np.maximum(signal + rng.normal(scale=config.checkin_noise * sd, size=n), 0.0)

    geometries = [_cell(r, q) for r in range(h) for q in range(w)]
    return SyntheticCity(registry, trips, grid_adjacency(w, h), pois, checkins, labels, geometries, config)


def write_city(city: SyntheticCity, out_dir) -> dict[str, Path]:
    """Write every input file format plus ``labels.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "regions": out / "regions.csv",
        "trips": out / "trips.csv",
        "adjacency": out / "adjacency.csv",
        "pois": out / "pois.csv",
        "checkins": out / "checkins.csv",
        "labels": out / "labels.csv",
        "polygons": out / "regions.geojson",
    }
    reg = city.registry
    ingest.write_regions(paths["regions"], reg)
    ingest.write_trips(paths["trips"], city.trips, reg)
    ingest.write_adjacency(paths["adjacency"], city.adjacency, reg)
    ingest.write_pois(paths["pois"], city.pois, reg)
    ingest.write_checkins(paths["checkins"], city.checkins, reg)
    ingest.write_labels(paths["labels"], city.labels, reg)
    ingest.write_geojson(paths["polygons"], reg, city.geometries)
    return paths


def parse_grid(text: str) -> tuple[int, int]:
    """``"6x6"`` -> (width, height)."""
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ContractError(f"grid must look like WxH, got {text!r}") from None
    return w, h
