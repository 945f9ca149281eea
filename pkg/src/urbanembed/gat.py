"""Multi-head graph attention over dense kNN adjacency masks."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .correlation import RegionGraph
from .errors import ContractError, ShapeError
from .tensor import Module, Tensor


class GatLayer(Module):
    """One attention layer; head outputs are concatenated then passed through elu.

    Node i attends over its out-neighbours and itself with
    ``e_ij = leaky_relu(a_src . W x_i + a_dst . W x_j)``.
    """

    def __init__(self, d_in: int, d_out: int, heads: int, rng: np.random.Generator, slope: float = 0.2):
        if d_out % heads:
            raise ContractError(f"output size {d_out} is not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_out // heads
        self.slope = slope
        self.weight = T.glorot(rng, d_in, d_out, name="gat.weight")
        limit = np.sqrt(6.0 / (2 * self.d_head + 1))
        self.att = Tensor(rng.uniform(-limit, limit, size=(heads, 2 * self.d_head)), requires_grad=True, name="gat.att")

    @property
    def d_out(self) -> int:
        return self.heads * self.d_head

    def __call__(self, x: Tensor, mask: np.ndarray, return_attention: bool = False):
        n = x.shape[0]
        if mask.shape != (n, n):
            raise ShapeError(f"attention mask {mask.shape} does not match {n} nodes")
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"features of width {x.shape[1]} fed to a layer expecting {self.weight.shape[0]}")
        dh = self.d_head
        wx = x @ self.weight
        outs, attn = [], []
        for h in range(self.heads):
            wh = wx[:, h * dh:(h + 1) * dh]
            src = wh @ self.att[h, :dh].reshape(dh, 1)
            dst = wh @ self.att[h, dh:].reshape(dh, 1)
            logits = T.leaky_relu(src + dst.T, self.slope)
            alpha = T.softmax(logits, axis=1, mask=mask)
            outs.append(alpha @ wh)
            attn.append(alpha.data)
        out = T.elu(outs[0] if self.heads == 1 else T.concat(outs, axis=1))
        return (out, np.stack(attn)) if return_attention else out


def gat_forward(layer: GatLayer, graph: RegionGraph, x: Tensor) -> Tensor:
    if graph.n != x.shape[0]:
        raise ShapeError(f"graph has {graph.n} nodes but features have {x.shape[0]} rows")
    return layer(x, graph.attention_mask())


def encode_graph(graphs: Mapping[str, RegionGraph], inits: Mapping[str, Tensor],
                 layers: Mapping[str, Sequence[GatLayer]]) -> dict[str, Tensor]:
    """Run each graph's GAT stack on its own input features."""
    out = {}
    for name, graph in graphs.items():
        h = inits[name]
        mask = graph.attention_mask()
        if graph.n != h.shape[0]:
            raise ShapeError(f"graph {name} has {graph.n} nodes but features have {h.shape[0]} rows")
        for layer in layers[name]:
            h = layer(h, mask)
        out[name] = h
    return out
