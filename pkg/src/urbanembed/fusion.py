"""Encoder/decoder fusion of the per-graph region representations.

The gated sum of the graph streams feeds a transformer-style encoder whose
output is the final region embedding. Each graph stream then has its own
decoder (self-attention, cross-attention against the encoder output, feed
forward; post-norm residuals around all three) whose output serves that
stream's reconstruction loss.

Cross-attention wiring is selectable:

* ``"prose"`` (default): queries from the stream after its self-attention
  sublayer, keys and values from the encoder output;
* ``"literal"``: the reverse -- queries from the encoder output, keys and
  values from the stream. Here the encoder output only shapes attention
  weights, which in practice leaves the embedding weakly trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Module, Tensor

STREAMS = ("AC", "VC", "FC")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = T.glorot(rng, d_in, d_out)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads and an output projection."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ContractError(f"model size {d} is not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d // heads
        self.w_q = T.glorot(rng, d, d)
        self.w_k = T.glorot(rng, d, d)
        self.w_v = T.glorot(rng, d, d)
        self.w_o = T.glorot(rng, d, d)

    def __call__(self, query_src: Tensor, kv_src: Tensor, return_attention: bool = False):
        q, k, v = query_src @ self.w_q, kv_src @ self.w_k, kv_src @ self.w_v
        dh = self.d_head
        scale = 1.0 / np.sqrt(dh)
        outs, attn = [], []
        for h in range(self.heads):
            cols = slice(h * dh, (h + 1) * dh)
            weights = T.softmax((q[:, cols] @ k[:, cols].T) * scale, axis=1)
            outs.append(weights @ v[:, cols])
            attn.append(weights.data)
        out = (outs[0] if self.heads == 1 else T.concat(outs, axis=1)) @ self.w_o
        return (out, np.stack(attn)) if return_attention else out


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.inner = Linear(d, d_ff, rng)
        self.outer = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.elu(self.inner(x)))


class GlobalFusionLayer(Module):
    """Sigmoid-gated sum ``E_f = sum_m sigmoid(E_m W + b) * E_m``.

    The gate is shared by all streams. ``vector_gate`` makes W square so each
    feature gets its own gate; ``per_graph_bias`` gives every stream its own b.
    """

    def __init__(self, d: int, rng: np.random.Generator, vector_gate: bool = False,
                 per_graph_bias: bool = False, streams: Sequence[str] = STREAMS):
        width = d if vector_gate else 1
        self.weight = T.glorot(rng, d, width)
        if per_graph_bias:
            self.bias = {m: Tensor(np.zeros(width), requires_grad=True) for m in streams}
        else:
            self.bias = Tensor(np.zeros(width), requires_grad=True)

    def gates(self, streams: Mapping[str, Tensor]) -> dict[str, Tensor]:
        out = {}
        for name, e in streams.items():
            b = self.bias[name] if isinstance(self.bias, dict) else self.bias
            out[name] = T.sigmoid(e @ self.weight + b)
        return out

    def __call__(self, streams: Mapping[str, Tensor]) -> Tensor:
        shapes = {e.shape for e in streams.values()}
        if len(shapes) != 1:
            raise ShapeError(f"streams have mismatched shapes {sorted(shapes)}")
        gates = self.gates(streams)
        fused = None
        for name, e in streams.items():
            term = gates[name] * e
            fused = term if fused is None else fused + term
        return fused


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ff = FeedForward(d, d_ff, rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, return_attention: bool = False):
        a, weights = self.attn(x, x, return_attention=True)
        h = self.norm1(x + a)
        out = self.norm2(h + self.ff(h))
        return (out, weights) if return_attention else out


class CorrelationDecoder(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator, query_mode: str = "prose"):
        if query_mode not in ("literal", "prose"):
            raise ContractError(f"unknown query_mode {query_mode!r}")
        self.query_mode = query_mode
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ff = FeedForward(d, d_ff, rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm3 = LayerNorm(d)

    def __call__(self, stream: Tensor, memory: Tensor, return_attention: bool = False):
        if stream.shape != memory.shape:
            raise ShapeError(f"stream {stream.shape} and encoder output {memory.shape} differ")
        a, w_self = self.self_attn(stream, stream, return_attention=True)
        s = self.norm1(stream + a)
        if self.query_mode == "literal":
            c, w_cross = self.cross_attn(memory, s, return_attention=True)
        else:
            c, w_cross = self.cross_attn(s, memory, return_attention=True)
        h = self.norm2(s + c)
        out = self.norm3(h + self.ff(h))
        return (out, (w_self, w_cross)) if return_attention else out


class ODProjection(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.w_o = T.glorot(rng, d, d)
        self.w_d = T.glorot(rng, d, d)

    def __call__(self, e_ac: Tensor) -> tuple[Tensor, Tensor]:
        return e_ac @ self.w_o, e_ac @ self.w_d


@dataclass
class FusionOutput:
    embedding: Tensor  # encoder output
    decoded: dict[str, Tensor]
    e_o: Tensor | None = None
    e_d: Tensor | None = None
    fused: Tensor | None = None
    attention: dict[str, np.ndarray] = field(default_factory=dict)


class FusionModule(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator,
                 streams: Sequence[str] = STREAMS, query_mode: str = "prose",
                 vector_gate: bool = False, per_graph_bias: bool = False):
        self.streams = tuple(streams)
        self.gate = GlobalFusionLayer(d, rng, vector_gate=vector_gate, per_graph_bias=per_graph_bias,
                                      streams=self.streams)
        self.encoder = EncoderLayer(d, heads, d_ff, rng)
        self.decoders = {m: CorrelationDecoder(d, heads, d_ff, rng, query_mode) for m in self.streams}
        self.od = ODProjection(d, rng) if "AC" in self.streams else None

    def __call__(self, graph_outputs: Mapping[str, Tensor]) -> FusionOutput:
        missing = [m for m in self.streams if m not in graph_outputs]
        if missing:
            raise ContractError(f"fusion expects streams {missing} that were not provided")
        streams = {m: graph_outputs[m] for m in self.streams}
        fused = self.gate(streams)
        embedding, enc_attn = self.encoder(fused, return_attention=True)
        attention = {"encoder": enc_attn}
        decoded = {}
        for m in self.streams:
            decoded[m], (w_self, w_cross) = self.decoders[m](streams[m], embedding, return_attention=True)
            attention[f"{m}.self"] = w_self
            attention[f"{m}.cross"] = w_cross
        e_o = e_d = None
        if self.od is not None:
            e_o, e_d = self.od(decoded["AC"])
        return FusionOutput(embedding, decoded, e_o, e_d, fused, attention)


def global_fuse(layer: GlobalFusionLayer, e_ac: Tensor, e_vc: Tensor, e_fc: Tensor) -> Tensor:
    return layer({"AC": e_ac, "VC": e_vc, "FC": e_fc})


def project_od(proj: ODProjection, e_ac: Tensor) -> tuple[Tensor, Tensor]:
    return proj(e_ac)
