"""Learnable hypergraph construction and attention-based aggregation.

A structure step scores hyperedge queries against node features
(``sigmoid(Q N^T)``), keeps the top-k entries per node as the incidence
matrix and turns the complement into an additive attention bias of value
``alpha``.  Aggregation is multi-head cross-attention from hyperedge queries
to nodes under that bias, followed by ``LN(FFN(LN(x))) + x``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import FFN, LayerNorm, Linear, Module, merge_heads, scaled_dot_attention, split_heads, trunc_normal
from .tensor import Tensor, topk_mask

TOPK_AXES = ("node", "edge")


@dataclass
class HyperGraphStructure:
    confidence: np.ndarray  # ... x rows(hyperedges) x cols(nodes), in (0, 1)
    incidence: np.ndarray  # same shape, {0, 1}
    mask: np.ndarray  # same shape, {0, alpha}
    k_per_node: int
    axis: str = "node"

    @property
    def n_edges(self) -> int:
        return self.confidence.shape[-2]

    @property
    def n_nodes(self) -> int:
        return self.confidence.shape[-1]


def topk_count(n_edges: int, floor_one: bool = False) -> int:
    """Hyperedges joined per node: a third of the hyperedge count, rounded down."""
    k = n_edges // 3
    return max(1, k) if floor_one else k


def build_structure(queries, nodes, alpha: float, k: int, axis: str = "node") -> HyperGraphStructure:
    """Confidence -> incidence -> additive mask for one hypergraph.

    ``queries`` is ``(..., rows, D)``, ``nodes`` is ``(..., cols, D)``.  With
    ``axis="node"`` every node column keeps its ``k`` most confident
    hyperedges; with ``axis="edge"`` every hyperedge row keeps its ``k`` most
    confident nodes.
    """
    q = queries.data if isinstance(queries, Tensor) else np.asarray(queries)
    n = nodes.data if isinstance(nodes, Tensor) else np.asarray(nodes)
    if q.shape[-1] != n.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} differs from node width {n.shape[-1]}")
    if axis not in TOPK_AXES:
        raise ConfigError(f"topk axis must be one of {TOPK_AXES}, got {axis!r}")
    logits = q @ np.swapaxes(n, -1, -2)
    conf = 0.5 * (1.0 + np.tanh(0.5 * logits))
    rows, cols = conf.shape[-2], conf.shape[-1]
    limit = rows if axis == "node" else cols
    if not 1 <= k <= limit:
        raise ConfigError(f"top-k of {k} is outside [1, {limit}] for a {rows}x{cols} hypergraph")
    adj = topk_mask(conf, k, axis=-2 if axis == "node" else -1)
    mask = (1.0 - adj) * conf.dtype.type(alpha)
    return HyperGraphStructure(conf, adj, mask, k, axis)


def hga_aggregate(
    queries: Tensor,
    nodes: Tensor,
    mask,
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    ffn: FFN,
    ln1: LayerNorm,
    ln2: LayerNorm,
    n_heads: int = 1,
    return_weights: bool = False,
):
    """Aggregate nodes into hyperedges under an additive mask.

    ``queries``: (..., E, D); ``nodes``: (..., N, D); ``mask``: broadcastable to (..., E, N).
    """
    mask = np.asarray(mask, dtype=nodes.dtype)
    if mask.shape[-2:] != (queries.shape[-2], nodes.shape[-2]):
        raise ShapeError(f"mask {mask.shape} does not match {queries.shape[-2]} edges x {nodes.shape[-2]} nodes")
    q = split_heads(w_q(queries), n_heads)
    k = split_heads(w_k(nodes), n_heads)
    v = split_heads(w_v(nodes), n_heads)
    bias = mask[..., None, :, :]
    att, weights = scaled_dot_attention(q, k, v, bias, return_weights=True)
    x_out = merge_heads(att)
    out = ln2(ffn(ln1(x_out))) + x_out
    return (out, weights) if return_weights else out


class _HGABase(Module):
    def __init__(self, d_model: int, d_ff: int, n_heads: int, rng: np.random.Generator, dtype):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={n_heads}")
        self.w_q = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_k = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_v = Linear(d_model, d_model, rng, dtype=dtype)
        self.ffn = FFN(d_model, d_ff, rng, dtype=dtype)
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.n_heads = n_heads

    def aggregate(self, queries: Tensor, nodes: Tensor, mask, return_weights: bool = False):
        return hga_aggregate(
            queries, nodes, mask, self.w_q, self.w_k, self.w_v, self.ffn, self.ln1, self.ln2,
            self.n_heads, return_weights=return_weights,
        )


class IntraHGABlock(_HGABase):
    """Patch tokens of one channel -> ``edge_num`` hyperedges via learnable queries."""

    def __init__(self, d_model: int, d_ff: int, n_heads: int, edge_num: int, rng: np.random.Generator, dtype=np.float32):
        if edge_num <= 3:
            raise ConfigError(f"edge_num must be greater than 3, got {edge_num}")
        self.queries = Tensor(trunc_normal(rng, (edge_num, d_model), dtype=dtype), requires_grad=True)
        super().__init__(d_model, d_ff, n_heads, rng, dtype)

    @property
    def edge_num(self) -> int:
        return self.queries.shape[0]

    def __call__(self, x_hat: Tensor, alpha: float, axis: str = "node"):
        k = topk_count(self.edge_num) if axis == "node" else topk_count(x_hat.shape[-2], floor_one=True)
        structure = build_structure(self.queries, x_hat, alpha, k, axis)
        return self.aggregate(self.queries, x_hat, structure.mask), structure


class InterHGABlock(_HGABase):
    """Intra hyperedges of all channels -> one hyperedge per channel, guided by global queries."""

    def __call__(self, nodes: Tensor, q_g: Tensor, alpha: float, axis: str = "node"):
        n_channels = q_g.shape[-2]
        k = topk_count(n_channels, floor_one=True) if axis == "node" else topk_count(nodes.shape[-2], floor_one=True)
        structure = build_structure(q_g, nodes, alpha, k, axis)
        return self.aggregate(q_g, nodes, structure.mask), structure


class EdgeToNodeBlock(Module):
    """Cross-attention writing channel-level hyperedges back into every patch token."""

    def __init__(self, d_model: int, d_ff: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={n_heads}")
        self.w_q = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_k = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_v = Linear(d_model, d_model, rng, dtype=dtype)
        self.w_p = Linear(d_model, d_model, rng, dtype=dtype)
        self.ffn = FFN(d_model, d_ff, rng, dtype=dtype)
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.n_heads = n_heads

    def __call__(self, tokens: Tensor, edges: Tensor) -> Tensor:
        h = self.n_heads
        q = split_heads(self.w_q(tokens), h)
        k = split_heads(self.w_k(edges), h)
        v = split_heads(self.w_v(edges), h)
        x_node = self.w_p(merge_heads(scaled_dot_attention(q, k, v))) + tokens
        return self.ln2(self.ffn(self.ln1(x_node))) + x_node


def flatten_channels(x: Tensor, batch: int) -> Tensor:
    """(B*C) x M x D -> B x (C*M) x D; row ``c*M + m`` is (channel c, item m)."""
    bc, m, d = x.shape
    if bc % batch:
        raise ShapeError(f"leading extent {bc} is not a multiple of batch {batch}")
    return x.reshape(batch, (bc // batch) * m, d)


def intra_hga(x_hat: Tensor, block: IntraHGABlock, alpha: float, axis: str = "node"):
    return block(x_hat, alpha, axis)


def inter_hga(x_intra: Tensor, q_g: Tensor, block: InterHGABlock, alpha: float, axis: str = "node"):
    return block(x_intra, q_g, alpha, axis)


def edge_to_node(tokens: Tensor, x_inter: Tensor, block: EdgeToNodeBlock) -> Tensor:
    return block(tokens, x_inter)


def dump_structure_csv(structure: HyperGraphStructure, directory: str, prefix: str) -> list[str]:
    """Write confidence / incidence / mask as CSV, one file per leading slice.

    Header row holds node indices; each following row is one hyperedge.
    """
    os.makedirs(directory, exist_ok=True)
    paths = []
    conf = structure.confidence
    lead = conf.shape[:-2]
    for idx in np.ndindex(*lead) if lead else [()]:
        tag = "_".join(str(i) for i in idx) if idx else "0"
        for kind, arr, fmt in (
            ("conf", structure.confidence, "{:.6g}"),
            ("adj", structure.incidence, "{:.0f}"),
            ("mask", structure.mask, "{:.6g}"),
        ):
            path = os.path.join(directory, f"{prefix}_{kind}_s{tag}.csv")
            mat = arr[idx]
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(range(mat.shape[1]))
                for row in mat:
                    w.writerow(fmt.format(float(v)) for v in row)
            paths.append(path)
    return paths
