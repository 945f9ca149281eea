"""POI side-information knowledge graph and its TransD embedding.

Entities are regions, POIs and attribute values (namespaced by field, so
``FACILITY_T:park`` and ``FACI_DOM:park`` are distinct). Every relation has a
reversed twin, which lets paths such as ``poi -> value <- poi -> region`` be
followed in both directions during training.

Scoring follows TransD: head and tail are mapped into the relation space with
``M = r_p e_p^T + I`` before the translation ``h + r ~ t`` is measured. Since
``(r_p e_p^T + I) e = e + (e_p . e) r_p`` the projection matrix is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .ingest import POI_FIELDS, PoiRecord, RegionRegistry, _write
from .tensor import Adam, Tensor

LOCATED_IN = "LocatedIn"


@dataclass
class KgVocab:
    entities: list[str]
    relations: list[str]  # forward relations first, then their reversed twins
    n_regions: int
    poi_region: dict[int, int] = field(default_factory=dict)  # POI entity -> region index

    @property
    def n_forward(self) -> int:
        return len(self.relations) // 2

    def reverse(self, r: int) -> int:
        return (r + self.n_forward) % len(self.relations)

    def region_entity(self, region: int) -> int:
        return region  # regions occupy the first entity slots


def build_kg(pois: Sequence[PoiRecord], registry: RegionRegistry,
             fields: Sequence[str] | None = None) -> tuple[KgVocab, np.ndarray]:
    """Triples ``(head, relation, tail)`` as an ``(m, 3)`` int array.

    Forward triples come first (POI order, then field order), followed by the
    reversed twin of each in the same order.
    """
    fields = list(POI_FIELDS if fields is None else fields)
    used = [f for f in fields if any(f in p.attributes for p in pois)]
    forward_rel = used + [LOCATED_IN] if pois else []
    relations = forward_rel + [f"~{r}" for r in forward_rel]
    rel_index = {r: i for i, r in enumerate(forward_rel)}

    entities = [f"region:{rid}" for rid in registry.ids]
    ent_index: dict[str, int] = {}
    poi_region: dict[int, int] = {}

    def entity(name: str) -> int:
        if name not in ent_index:
            ent_index[name] = len(entities)
            entities.append(name)
        return ent_index[name]

    forward = []
    for p in pois:
        pe = entity(f"poi:{p.place_id}")
        poi_region[pe] = p.region
        for f in used:
            value = p.attributes.get(f)
            if value:
                forward.append((pe, rel_index[f], entity(f"{f}:{value}")))
        forward.append((pe, rel_index[LOCATED_IN], p.region))

    vocab = KgVocab(entities, relations, registry.n, poi_region)
    if not forward:
        return vocab, np.zeros((0, 3), dtype=np.int64)
    fwd = np.array(forward, dtype=np.int64)
    rev = np.stack([fwd[:, 2], fwd[:, 1] + len(forward_rel), fwd[:, 0]], axis=1)
    return vocab, np.concatenate([fwd, rev])


@dataclass
class TransDParams:
    entity: np.ndarray
    entity_proj: np.ndarray
    relation: np.ndarray
    relation_proj: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    max_norm_history: list[float] = field(default_factory=list)


@dataclass
class KgConfig:
    dim: int = 32
    margin: float = 1.0
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0


def _project(e: np.ndarray, e_p: np.ndarray, r_p: np.ndarray) -> np.ndarray:
    return e + (e_p * e).sum(axis=-1, keepdims=True) * r_p


def transd_score(triple, params: TransDParams) -> float:
    h, r, t = (int(x) for x in triple)
    rp = params.relation_proj[r]
    h_perp = _project(params.entity[h], params.entity_proj[h], rp)
    t_perp = _project(params.entity[t], params.entity_proj[t], rp)
    diff = h_perp + params.relation[r] - t_perp
    return float(diff @ diff)


def transd_scores(triples: np.ndarray, params: TransDParams) -> np.ndarray:
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    rp = params.relation_proj[r]
    diff = (_project(params.entity[h], params.entity_proj[h], rp) + params.relation[r]
            - _project(params.entity[t], params.entity_proj[t], rp))
    return (diff * diff).sum(axis=1)


def _score_tensor(ent: Tensor, ent_p: Tensor, rel: Tensor, rel_p: Tensor, triples: np.ndarray) -> Tensor:
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    rp = rel_p[r]
    eh, et = ent[h], ent[t]
    h_perp = eh + (ent_p[h] * eh).sum(axis=1, keepdims=True) * rp
    t_perp = et + (ent_p[t] * et).sum(axis=1, keepdims=True) * rp
    diff = h_perp + rel[r] - t_perp
    return (diff * diff).sum(axis=1)


def _keys(triples: np.ndarray, n_ent: int, n_rel: int) -> np.ndarray:
    return (triples[:, 0] * n_rel + triples[:, 1]) * n_ent + triples[:, 2]


def corrupt(triples: np.ndarray, n_entities: int, known: np.ndarray, n_relations: int,
            rng: np.random.Generator, max_rounds: int = 100) -> np.ndarray:
    """One negative per positive: replace head or tail uniformly, never producing a known triple.

    ``known`` is the sorted key array of true triples. Positives whose every
    corruption is known are impossible in practice; after ``max_rounds`` they
    raise.
    """
    neg = triples.copy()
    todo = np.arange(len(triples))
    for _ in range(max_rounds):
        side = np.where(rng.random(len(todo)) < 0.5, 0, 2)
        neg[todo, side] = rng.integers(0, n_entities, size=len(todo))
        keys = _keys(neg[todo], n_entities, n_relations)
        pos = np.searchsorted(known, keys)
        hit = (pos < len(known)) & (known[np.minimum(pos, len(known) - 1)] == keys)
        neg[todo[hit]] = triples[todo[hit]]
        todo = todo[hit]
        if len(todo) == 0:
            return neg
    raise ContractError(f"could not corrupt {len(todo)} triple(s) without hitting a true triple")


def _renormalise(m: np.ndarray) -> None:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    np.divide(m, np.maximum(norms, 1.0), out=m)


def init_params(vocab: KgVocab, dim: int, rng: np.random.Generator) -> TransDParams:
    def draw(n):
        m = rng.normal(scale=1.0 / np.sqrt(dim), size=(n, dim))
        _renormalise(m)
        return m

    n_ent, n_rel = len(vocab.entities), len(vocab.relations)
    return TransDParams(draw(n_ent), draw(n_ent), draw(n_rel), draw(n_rel))


def train_kg(triples: np.ndarray, vocab: KgVocab, config: KgConfig | None = None,
             on_epoch: Callable[[int, TransDParams], None] | None = None) -> TransDParams:
    """Full-batch margin-ranking training with filtered uniform negatives.

    Embeddings and projection vectors are pulled back into the unit ball after
    every epoch.
    """
    config = config or KgConfig()
    triples = np.asarray(triples, dtype=np.int64)
    if len(triples) == 0:
        raise ContractError("cannot train a knowledge graph with no triples")
    rng = np.random.default_rng(config.seed)
    params = init_params(vocab, config.dim, rng)
    n_ent, n_rel = len(vocab.entities), len(vocab.relations)
    known = np.unique(_keys(triples, n_ent, n_rel))

    tensors = [Tensor(m, requires_grad=True) for m in
               (params.entity, params.entity_proj, params.relation, params.relation_proj)]
    opt = Adam(tensors, lr=config.lr)
    for epoch in range(config.epochs):
        neg = corrupt(triples, n_ent, known, n_rel, rng)
        opt.zero_grad()
        pos_score = _score_tensor(*tensors, triples)
        neg_score = _score_tensor(*tensors, neg)
        loss = T.relu(config.margin + pos_score - neg_score).sum()
        loss.backward()
        opt.step()
        for t in tensors:
            _renormalise(t.data)
        params.entity, params.entity_proj, params.relation, params.relation_proj = (t.data for t in tensors)
        params.loss_history.append(loss.item())
        params.max_norm_history.append(float(max(np.linalg.norm(params.entity, axis=1).max(),
                                                 np.linalg.norm(params.relation, axis=1).max())))
        if on_epoch is not None:
            on_epoch(epoch, params)
    # detach from the optimiser's tensors
    params.entity, params.entity_proj = params.entity.copy(), params.entity_proj.copy()
    params.relation, params.relation_proj = params.relation.copy(), params.relation_proj.copy()
    return params


def filtered_tail_ranks(triples: np.ndarray, params: TransDParams, known: np.ndarray | None = None) -> np.ndarray:
    """Rank of each true tail among all entities, ignoring other true tails.

    ``known`` defaults to ``triples`` itself.
    """
    triples = np.asarray(triples, dtype=np.int64)
    known = triples if known is None else np.asarray(known, dtype=np.int64)
    n_ent = params.entity.shape[0]
    true_tails: dict[tuple[int, int], list[int]] = {}
    for h, r, t in known.tolist():
        true_tails.setdefault((h, r), []).append(t)

    ranks = np.empty(len(triples), dtype=np.int64)
    for r in np.unique(triples[:, 1]):
        rows = np.flatnonzero(triples[:, 1] == r)
        rp = params.relation_proj[r]
        all_perp = _project(params.entity, params.entity_proj, rp[None, :])
        sub = triples[rows]
        heads = _project(params.entity[sub[:, 0]], params.entity_proj[sub[:, 0]], rp[None, :]) + params.relation[r]
        d = ((heads[:, None, :] - all_perp[None, :, :]) ** 2).sum(axis=2)
        for k, (h, _, t) in enumerate(sub.tolist()):
            scores = d[k].copy()
            others = [x for x in true_tails[(h, int(r))] if x != t]
            scores[others] = np.inf
            ranks[rows[k]] = 1 + int((scores < scores[t]).sum())
    assert ranks.min() >= 1 and ranks.max() <= n_ent
    return ranks


def region_functionality_vectors(params: TransDParams, vocab: KgVocab,
                                 readout: str = "entity") -> tuple[np.ndarray, np.ndarray]:
    """Per-region vectors and a flag marking regions without POIs.

    ``readout="entity"`` returns each region's own entity embedding;
    ``readout="mean_poi"`` averages the embeddings of the region's POIs (zero
    vector when there are none).
    """
    n = vocab.n_regions
    has_poi = np.zeros(n, dtype=bool)
    for region in vocab.poi_region.values():
        has_poi[region] = True
    if readout == "entity":
        vectors = params.entity[:n].copy()
    elif readout == "mean_poi":
        vectors = np.zeros((n, params.entity.shape[1]))
        counts = np.zeros(n)
        for ent, region in vocab.poi_region.items():
            vectors[region] += params.entity[ent]
            counts[region] += 1
        vectors[has_poi] /= counts[has_poi, None]
    else:
        raise ContractError(f"unknown readout {readout!r}; expected 'entity' or 'mean_poi'")
    return vectors, ~has_poi


def write_triples(path, triples: np.ndarray, vocab: KgVocab) -> None:
    e, r = vocab.entities, vocab.relations
    _write(path, ["head", "relation", "tail"], ((e[h], r[rel], e[t]) for h, rel, t in triples.tolist()))


def write_region_vectors(path, vectors: np.ndarray, registry: RegionRegistry) -> None:
    header = ["region_id"] + [f"v{i}" for i in range(vectors.shape[1])]
    _write(path, header, ([rid] + [repr(float(x)) for x in row] for rid, row in zip(registry.ids, vectors)))


def read_region_vectors(path, registry: RegionRegistry) -> np.ndarray:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        out = np.zeros((registry.n, len(header) - 1))
        for row in reader:
            out[registry.index(row[0])] = [float(x) for x in row[1:]]
    return out
