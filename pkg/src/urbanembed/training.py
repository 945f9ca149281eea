"""Joint objective and the end-to-end training loop.

The model chains, per correlation graph, a free (or KG-derived) input
embedding, a GAT stack and the fusion module. Three reconstruction losses are
summed with weights:

* AC: softmax likelihood of every observed trip, read in both directions from
  the origin/destination projections of the AC decoder output;
* VC, FC: mean squared error between the target correlation matrix and the
  Gram matrix of the matching decoder output.

Ablation variants swap pieces out (see :func:`make_variant`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import correlation as corr
from . import kg
from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .fusion import STREAMS, FusionModule, Linear, ODProjection
from .gat import GatLayer
from .ingest import AdjacencySet, PoiRecord, RegionRegistry, TripRecord
from .seeding import subseed, substream
from .tensor import Adam, Module, Tensor


@dataclass
class TrainingConfig:
    epochs: int = 500
    lr: float = 1e-3
    seed: int = 0
    lambda_ac: float = 1.0
    lambda_vc: float = 1.0
    lambda_fc: float = 1.0
    dim: int = 96
    k: int = 10
    gat_heads: int = 8
    gat_layers: int = 1
    fusion_heads: int = 4
    d_ff: int = 256
    alpha: float = 0.5
    init_scale: float = 1.0
    query_mode: str = "prose"
    swap_od: bool = False
    vector_gate: bool = False
    per_graph_bias: bool = False
    patience: int = 50
    min_delta: float = 1e-6
    checkpoint_every: int = 0
    fc_readout: str = "entity"
    kg: kg.KgConfig = field(default_factory=kg.KgConfig)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ContractError(f"epochs must be non-negative, got {self.epochs}")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        for heads in (self.gat_heads, self.fusion_heads):
            if heads < 1 or self.dim % heads:
                raise ContractError(f"dim={self.dim} is not divisible by {heads} heads")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")

    def weight(self, stream: str) -> float:
        return {"AC": self.lambda_ac, "VC": self.lambda_vc, "FC": self.lambda_fc}[stream]

    def with_seed(self, seed: int) -> "TrainingConfig":
        """Copy driven by root ``seed``; the KG gets its own named substream."""
        return replace(self, seed=seed, kg=replace(self.kg, seed=subseed(seed, "kg")))


@dataclass(frozen=True)
class LossBreakdown:
    loss_ac: float
    loss_vc: float
    loss_fc: float
    total: float


@dataclass
class TrainingLog:
    history: list[LossBreakdown] = field(default_factory=list)  # loss before each update
    final: LossBreakdown | None = None  # loss of the returned parameters
    stopped_early: bool = False
    checkpoints: list[Path] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.history)

    def totals(self) -> np.ndarray:
        return np.array([b.total for b in self.history])


# -- variants ---------------------------------------------------------------
@dataclass(frozen=True)
class Variant:
    name: str
    streams: tuple[str, ...] = STREAMS
    use_gat: bool = True
    fusion: str = "attention"  # or "mean": plain average, no decoders


VARIANTS = {
    "HM": Variant("HM", ("AC",)),
    "GN": Variant("GN", ("VC",)),
    "SI": Variant("SI", ("FC",)),
    "HM+GN": Variant("HM+GN", ("AC", "VC")),
    "HM+SI": Variant("HM+SI", ("AC", "FC")),
    "R2V-g": Variant("R2V-g", use_gat=False),
    "R2V-f": Variant("R2V-f", fusion="mean"),
    "full": Variant("full"),
}


def make_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ContractError(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}") from None


# -- inputs -------------------------------------------------------------------
@dataclass
class TrainingInputs:
    n: int
    graphs: dict[str, corr.RegionGraph]
    counts: np.ndarray | None = None  # N x N trip counts, origin rows
    targets: dict[str, np.ndarray] = field(default_factory=dict)  # VC / FC correlation values
    fc_features: np.ndarray | None = None  # per-region KG vectors
    correlations: dict[str, corr.CorrelationMatrix] = field(default_factory=dict)
    kg_vocab: kg.KgVocab | None = None
    kg_triples: np.ndarray | None = None
    kg_params: kg.TransDParams | None = None

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(m for m in STREAMS if m in self.graphs)


def prepare_inputs(registry: RegionRegistry, config: TrainingConfig,
                   trips: Sequence[TripRecord] | None = None,
                   adjacency: AdjacencySet | None = None,
                   pois: Sequence[PoiRecord] | None = None,
                   streams: Sequence[str] = STREAMS,
                   fc_vectors: np.ndarray | None = None) -> TrainingInputs:
    """Correlations, kNN graphs and (for FC) the trained KG for ``streams``.

    Only the sources a stream needs are required: an AC-only run never looks
    at adjacency or POIs. Passing ``fc_vectors`` skips KG training.
    """
    n = registry.n
    out = TrainingInputs(n, {})
    if "AC" in streams:
        if not trips:
            raise ContractError("the AC graph needs at least one trip")
        out.counts = corr.cooccurrence_counts(trips, n).astype(np.float64)
        od = corr.od_distributions(out.counts)
        out.correlations["AC"] = corr.accessibility_correlation(od.p_o, od.p_d, config.alpha)
    if "VC" in streams:
        if adjacency is None:
            raise ContractError("the VC graph needs region adjacency")
        out.correlations["VC"] = corr.vicinity_correlation(adjacency)
    if "FC" in streams:
        if fc_vectors is None:
            if not pois:
                raise ContractError("the FC graph needs POIs (or precomputed region vectors)")
            vocab, triples = kg.build_kg(pois, registry)
            params = kg.train_kg(triples, vocab, config.kg)
            fc_vectors, _ = kg.region_functionality_vectors(params, vocab, config.fc_readout)
            out.kg_vocab, out.kg_triples, out.kg_params = vocab, triples, params
        fc_vectors = np.asarray(fc_vectors, dtype=np.float64)
        if fc_vectors.shape[0] != n:
            raise ShapeError(f"{fc_vectors.shape[0]} region vectors for {n} regions")
        out.fc_features = fc_vectors
        out.correlations["FC"] = corr.functionality_correlation(fc_vectors)
    for m in STREAMS:
        if m in out.correlations:
            out.graphs[m] = corr.knn_graph(out.correlations[m], config.k)
            if m != "AC":
                out.targets[m] = out.correlations[m].values
    return out


# -- losses -------------------------------------------------------------------
def _count_matrix(counts, n: int) -> np.ndarray:
    if isinstance(counts, Mapping):
        c = np.zeros((n, n))
        for (i, j), w in counts.items():
            c[i, j] += w
        return c
    c = np.asarray(counts, dtype=np.float64)
    if c.shape != (n, n):
        raise ShapeError(f"trip counts {c.shape} do not match {n} regions")
    return c


def ac_loss(e_o: Tensor, e_d: Tensor, counts, swap_od: bool = False) -> Tensor:
    """Negative log-likelihood of observed trips under both conditional softmaxes.

    ``counts`` is an N x N matrix (origin rows) or a ``{(i, j): count}`` map.
    As printed, ``p_o(j | i)`` normalises ``E_o[i] . E_d[j']`` over j' and
    ``p_d(j | i)`` normalises ``E_d[i] . E_o[j']`` over j'. With ``swap_od``
    the second term instead scores the origin i given the destination j,
    normalising ``E_o[i'] . E_d[j]`` over i'.
    """
    c = _count_matrix(counts, e_o.shape[0])
    if not c.sum() > 0:
        raise ContractError("ac_loss needs at least one trip")
    logits = e_o @ e_d.T
    lp_o = T.log_softmax(logits, axis=1)
    lp_d = T.log_softmax(logits, axis=0) if swap_od else T.log_softmax(logits.T, axis=1)
    return -((lp_o + lp_d) * Tensor(c)).sum()


def gram_loss(e: Tensor, target) -> Tensor:
    """``mean_ij (C_ij - e_i . e_j)^2`` over all N^2 ordered pairs."""
    target = np.asarray(target, dtype=np.float64)
    n = e.shape[0]
    if target.shape != (n, n):
        raise ShapeError(f"target {target.shape} does not match {n} embeddings")
    return T.squared_error(e @ e.T, Tensor(target), reduction="mean")


vc_loss = gram_loss
fc_loss = gram_loss


# -- model --------------------------------------------------------------------
@dataclass
class ModelOutput:
    embedding: Tensor
    for_loss: dict[str, Tensor]  # stream -> representation the loss sees
    e_o: Tensor | None
    e_d: Tensor | None
    trace: list[tuple[str, Tensor]]  # forward tensors in evaluation order


class RegionModel(Module):
    """Inputs -> per-graph GAT -> fusion, configured by a :class:`Variant`."""

    def __init__(self, n: int, variant: Variant, config: TrainingConfig,
                 fc_features: np.ndarray | None = None, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else substream(config.seed, "init")
        d = config.dim
        self.n = n
        self.variant = variant
        self.inputs = {}
        self.fc_proj = None
        for m in variant.streams:
            if m == "FC":
                if fc_features is None:
                    raise ContractError("the FC stream needs KG region vectors")
                self._fc_features = Tensor(np.asarray(fc_features, dtype=np.float64))
                self.fc_proj = Linear(self._fc_features.shape[1], d, rng)
            else:
                self.inputs[m] = Tensor(rng.normal(scale=config.init_scale, size=(n, d)),
                                        requires_grad=True, name=f"inputs.{m}")
        self.gat = {}
        if variant.use_gat:
            self.gat = {m: [GatLayer(d, d, config.gat_heads, rng) for _ in range(config.gat_layers)]
                        for m in variant.streams}
        self.fusion = None
        self.od = None
        if variant.fusion == "attention":
            self.fusion = FusionModule(d, config.fusion_heads, config.d_ff, rng, streams=variant.streams,
                                       query_mode=config.query_mode, vector_gate=config.vector_gate,
                                       per_graph_bias=config.per_graph_bias)
        elif variant.fusion == "mean":
            if "AC" in variant.streams:
                self.od = ODProjection(d, rng)
        else:
            raise ContractError(f"unknown fusion {variant.fusion!r}")

    def features(self) -> dict[str, Tensor]:
        out = dict(self.inputs)
        if self.fc_proj is not None:
            out["FC"] = self.fc_proj(self._fc_features)
        return out

    def __call__(self, graphs: Mapping[str, corr.RegionGraph]) -> ModelOutput:
        trace = []
        feats = self.features()
        encoded = {}
        for m in self.variant.streams:
            h = feats[m]
            trace.append((f"input[{m}]", h))
            if self.variant.use_gat:
                mask = graphs[m].attention_mask()
                for depth, layer in enumerate(self.gat[m]):
                    h = layer(h, mask)
                    trace.append((f"gat[{m}].{depth}", h))
            encoded[m] = h
        if self.fusion is not None:
            out = self.fusion(encoded)
            trace.append(("fused", out.fused))
            trace.append(("embedding", out.embedding))
            trace.extend((f"decoded[{m}]", out.decoded[m]) for m in self.variant.streams)
            for_loss, e_o, e_d, embedding = out.decoded, out.e_o, out.e_d, out.embedding
        else:
            embedding = None
            for m in self.variant.streams:
                embedding = encoded[m] if embedding is None else embedding + encoded[m]
            embedding = embedding * (1.0 / len(self.variant.streams))
            trace.append(("embedding", embedding))
            for_loss = encoded
            e_o = e_d = None
            if self.od is not None:
                e_o, e_d = self.od(encoded["AC"])
        if e_o is not None:
            trace.append(("e_o", e_o))
            trace.append(("e_d", e_d))
        return ModelOutput(embedding, for_loss, e_o, e_d, trace)


def compute_loss(output: ModelOutput, inputs: TrainingInputs,
                 config: TrainingConfig) -> tuple[Tensor, LossBreakdown, list[tuple[str, Tensor]]]:
    parts: dict[str, Tensor] = {}
    if "AC" in output.for_loss:
        parts["AC"] = ac_loss(output.e_o, output.e_d, inputs.counts, swap_od=config.swap_od)
    for m in ("VC", "FC"):
        if m in output.for_loss:
            parts[m] = gram_loss(output.for_loss[m], inputs.targets[m])
    total = None
    for m, value in parts.items():
        term = value * config.weight(m)
        total = term if total is None else total + term
    values = {m: float(v.data) for m, v in parts.items()}
    breakdown = LossBreakdown(values.get("AC", 0.0), values.get("VC", 0.0), values.get("FC", 0.0), float(total.data))
    trace = [(f"loss[{m}]", v) for m, v in parts.items()] + [("loss[total]", total)]
    return total, breakdown, trace


def first_non_finite(trace: Sequence[tuple[str, Tensor]]) -> str | None:
    for name, t in trace:
        if t is not None and not np.all(np.isfinite(t.data)):
            return name
    return None


def _check(trace, epoch: int) -> None:
    bad = first_non_finite(trace)
    if bad is not None:
        raise NumericError(f"non-finite values in {bad} at epoch {epoch}")


def build_model(inputs: TrainingInputs, config: TrainingConfig, variant: Variant | str = "full") -> RegionModel:
    variant = make_variant(variant) if isinstance(variant, str) else variant
    missing = [m for m in variant.streams if m not in inputs.graphs]
    if missing:
        raise ContractError(f"variant {variant.name} needs graphs {missing} that were not prepared")
    return RegionModel(inputs.n, variant, config, inputs.fc_features)


def fit(inputs: TrainingInputs, config: TrainingConfig | None = None, variant: Variant | str = "full",
        model: RegionModel | None = None, checkpoint_dir=None,
        on_epoch: Callable[[int, LossBreakdown], None] | None = None) -> tuple[np.ndarray, TrainingLog]:
    """Full-batch Adam on the weighted loss; returns the final embedding and the log.

    Gradients are zeroed explicitly at the top of every step. Training stops
    early once the total loss has failed to improve on its best value by
    ``min_delta`` for ``patience`` consecutive epochs.
    """
    config = config or TrainingConfig()
    config.validate()
    model = model if model is not None else build_model(inputs, config, variant)
    log = TrainingLog()
    if config.epochs == 0:
        out = model(inputs.graphs)
        _check(out.trace, 0)
        return out.embedding.data.copy(), log

    opt = Adam(model.parameters(), lr=config.lr)
    best, since_best = math.inf, 0
    for epoch in range(config.epochs):
        opt.zero_grad()
        out = model(inputs.graphs)
        total, breakdown, loss_trace = compute_loss(out, inputs, config)
        _check(out.trace + loss_trace, epoch)
        log.history.append(breakdown)
        if on_epoch is not None:
            on_epoch(epoch, breakdown)
        if best - breakdown.total > config.min_delta:
            best, since_best = breakdown.total, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                log.stopped_early = True
                break
        total.backward()
        opt.step()
        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            log.checkpoints.append(save_checkpoint(model, Path(checkpoint_dir) / f"checkpoint_{epoch + 1:05d}.npz"))

    out = model(inputs.graphs)
    _, log.final, loss_trace = compute_loss(out, inputs, config)
    _check(out.trace + loss_trace, len(log.history))
    return out.embedding.data.copy(), log


# -- persistence --------------------------------------------------------------
def save_checkpoint(model: Module, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **model.state_dict())
    return path


def load_checkpoint(model: Module, path) -> None:
    with np.load(path) as data:
        model.load_state_dict({k: data[k] for k in data.files})


def write_training_log(path, log: TrainingLog) -> None:
    rows = list(enumerate(log.history))
    if log.final is not None:
        rows.append((len(log.history), log.final))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss_ac", "loss_vc", "loss_fc", "total"])
        for epoch, b in rows:
            w.writerow([epoch, repr(b.loss_ac), repr(b.loss_vc), repr(b.loss_fc), repr(b.total)])


def write_embeddings(path, embedding: np.ndarray, registry: RegionRegistry) -> None:
    kg.write_region_vectors(path, embedding, registry)
