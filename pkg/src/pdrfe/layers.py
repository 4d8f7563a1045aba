"""Message-passing layers over the bipartite graph, plus the personalizer.

Three conv flavors share one calling convention (params, graph, embeddings
-> next embeddings):

  * edge-conditioned conv: a linear map of the edge feature is reshaped
    into a d x d matrix applied to the neighbor embedding, mean-aggregated,
    residual update, no extra nonlinearity,
  * edge-based attention: logits from both endpoint embeddings and the
    edge feature, softmax over each node's incident edges, weighted sum of
    linearly mapped neighbors,
  * relational GCN baseline: ReLU(W_self h + per-relation mean of W_r h).

The graph is heterogeneous, so every conv keeps separate parameters per
message direction (into customers vs into skills). Nodes with no incident
edges pass through unchanged (identity for the first two convs, the
self-weight path for RGCN); the test split can isolate nodes, so this case
is load-bearing.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import BipartiteGraph
from .tensor import Tensor

LAYER_KINDS = ("rgcn", "nnconv", "eattn", "rgcn+nnconv", "rgcn+eattn")
DEFAULT_LEAKY_SLOPE = 0.2

CHECKPOINT_FORMAT = "pdrfe-params"
CHECKPOINT_VERSION = 1


class AttentionNormalizationError(AssertionError):
    """Attention weights failed to sum to 1 within a node's neighborhood."""


@dataclass
class EmbeddingTable:
    customers: Tensor
    skills: Tensor
    layer_index: int = 0

    @property
    def dim(self) -> int:
        return self.customers.data.shape[1]

    @staticmethod
    def from_graph(g: BipartiteGraph, requires_grad: bool = False) -> "EmbeddingTable":
        return EmbeddingTable(Tensor(g.h0_customers, requires_grad=requires_grad),
                              Tensor(g.h0_skills, requires_grad=requires_grad), 0)


# -- parameter containers ------------------------------------------------------


@dataclass
class NNConvRelation:
    edge_weight: Tensor  # (d*d, d_e); maps the edge feature to a flat d x d matrix
    edge_bias: Tensor    # (d*d,)


@dataclass
class NNConvParams:
    to_customer: NNConvRelation
    to_skill: NNConvRelation


@dataclass
class EdgeAttnRelation:
    msg_weight: Tensor   # (d, d)
    attn_weight: Tensor  # (d_a, d + d_e)
    attn_vec: Tensor     # (2 * d_a,)


@dataclass
class EdgeAttnParams:
    to_customer: EdgeAttnRelation
    to_skill: EdgeAttnRelation
    leaky_slope: float = DEFAULT_LEAKY_SLOPE


@dataclass
class RgcnParams:
    self_weight: Tensor  # (d, d), shared by both node kinds
    to_customer: Tensor  # (d, d), skill -> customer messages
    to_skill: Tensor     # (d, d), customer -> skill messages


@dataclass
class PersonalizerParams:
    w1: Tensor  # (d_h, d + d_e)
    b1: Tensor  # (d_h,)
    w2: Tensor  # (d, d_h)
    b2: Tensor  # (d,)


@dataclass
class RgcnNNConvParams:
    """Backbone conv plus an edge-conditioned message term (nested family:
    zero edge weights recover the plain backbone exactly)."""
    backbone: RgcnParams
    edge: NNConvParams


@dataclass
class RgcnEdgeAttnParams:
    """Backbone conv plus an attention-weighted message term."""
    backbone: RgcnParams
    edge: EdgeAttnParams


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _param(rng, shape) -> Tensor:
    return Tensor(xavier_uniform(rng, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_nnconv(d: int, d_e: int, rng: np.random.Generator) -> NNConvParams:
    def relation():
        return NNConvRelation(_param(rng, (d * d, d_e)), _zeros((d * d,)))
    return NNConvParams(relation(), relation())


def init_edge_attn(d: int, d_e: int, d_a: int, rng: np.random.Generator,
                   leaky_slope: float = DEFAULT_LEAKY_SLOPE) -> EdgeAttnParams:
    def relation():
        return EdgeAttnRelation(_param(rng, (d, d)),
                                _param(rng, (d_a, d + d_e)),
                                _param(rng, (2 * d_a,)))
    return EdgeAttnParams(relation(), relation(), leaky_slope)


def init_rgcn(d: int, rng: np.random.Generator) -> RgcnParams:
    return RgcnParams(_param(rng, (d, d)), _param(rng, (d, d)), _param(rng, (d, d)))


def init_personalizer(d: int, d_e: int, hidden: int,
                      rng: np.random.Generator) -> PersonalizerParams:
    return PersonalizerParams(_param(rng, (hidden, d + d_e)), _zeros((hidden,)),
                              _param(rng, (d, hidden)), _zeros((d,)))


def relation_params(obj) -> list[Tensor]:
    if isinstance(obj, NNConvParams):
        return [obj.to_customer.edge_weight, obj.to_customer.edge_bias,
                obj.to_skill.edge_weight, obj.to_skill.edge_bias]
    if isinstance(obj, EdgeAttnParams):
        out = []
        for rel in (obj.to_customer, obj.to_skill):
            out += [rel.msg_weight, rel.attn_weight, rel.attn_vec]
        return out
    if isinstance(obj, RgcnParams):
        return [obj.self_weight, obj.to_customer, obj.to_skill]
    if isinstance(obj, (RgcnNNConvParams, RgcnEdgeAttnParams)):
        return relation_params(obj.backbone) + relation_params(obj.edge)
    if isinstance(obj, PersonalizerParams):
        return [obj.w1, obj.b1, obj.w2, obj.b2]
    raise TypeError(f"unknown parameter container {type(obj).__name__}")


# -- attention instrumentation ---------------------------------------------------

_attention_sink: list | None = None


@contextmanager
def capture_attention():
    """Collect (side, weights, segments) triples from attention forwards."""
    global _attention_sink
    prev, _attention_sink = _attention_sink, []
    try:
        yield _attention_sink
    finally:
        _attention_sink = prev


def _check_attention(alpha: np.ndarray, segments: np.ndarray, side: str) -> None:
    if alpha.size == 0:
        return
    width = int(segments.max()) + 1
    sums = np.zeros(width)
    np.add.at(sums, segments, alpha)
    occupied = np.zeros(width, dtype=bool)
    occupied[segments] = True
    worst = np.abs(sums[occupied] - 1.0).max()
    if worst > 1e-9:
        raise AttentionNormalizationError(
            f"attention weights into {side} off by {worst:.3e}")
    if _attention_sink is not None:
        _attention_sink.append((side, alpha.copy(), segments.copy()))


# -- forward passes ----------------------------------------------------------------


def _edge_maps(rel: NNConvRelation, efeat: Tensor) -> Tensor:
    return T.affine_rows(efeat, rel.edge_weight, rel.edge_bias)


def _nnconv_aggregate(rel: NNConvRelation, efeat: Tensor, h_src: Tensor,
                      src: np.ndarray, dst: np.ndarray, n_dst: int) -> Tensor:
    """Mean over incident edges of (edge map @ neighbor embedding)."""
    msgs = T.edge_matvec(_edge_maps(rel, efeat), T.gather_rows(h_src, src))
    return T.segment_mean(msgs, dst, n_dst)


def nnconv_forward(params: NNConvParams, g: BipartiteGraph,
                   table: EmbeddingTable) -> EmbeddingTable:
    """Residual edge-conditioned conv: h_i + mean of (edge map @ h_j)."""
    _check_dims(table, g)
    if g.n_edges == 0:
        return EmbeddingTable(table.customers, table.skills, table.layer_index + 1)
    efeat = Tensor(g.edge_features)
    out_c = table.customers + _nnconv_aggregate(
        params.to_customer, efeat, table.skills,
        g.skill_of_edge, g.customer_of_edge, g.n_customers)
    out_s = table.skills + _nnconv_aggregate(
        params.to_skill, efeat, table.customers,
        g.customer_of_edge, g.skill_of_edge, g.n_skills)
    return EmbeddingTable(out_c, out_s, table.layer_index + 1)


def _attention_aggregate(rel: EdgeAttnRelation, slope: float, efeat: Tensor,
                         h_dst: Tensor, h_src: Tensor, dst: np.ndarray,
                         src: np.ndarray, n_dst: int, side: str) -> Tensor:
    """Sum over incident edges of alpha_ij * (W h_j); zero for isolated nodes."""
    hi = T.gather_rows(h_dst, dst)
    hj = T.gather_rows(h_src, src)
    ai = T.affine_rows(T.concat([hi, efeat], axis=1), rel.attn_weight)
    aj = T.affine_rows(T.concat([hj, efeat], axis=1), rel.attn_weight)
    logits = T.leaky_relu(T.matmul(T.concat([ai, aj], axis=1), rel.attn_vec), slope)
    alpha = T.segment_softmax(logits, dst)
    _check_attention(alpha.data, dst, side)
    weighted = T.mul(T.reshape(alpha, (-1, 1)), T.affine_rows(hj, rel.msg_weight))
    return T.segment_sum(weighted, dst, n_dst)


def _isolated_mask(dst: np.ndarray, n_dst: int) -> Tensor:
    deg = np.bincount(dst, minlength=n_dst)
    return Tensor((deg == 0).astype(np.float64).reshape(-1, 1))


def edge_attention_forward(params: EdgeAttnParams, g: BipartiteGraph,
                           table: EmbeddingTable) -> EmbeddingTable:
    """Attention over incident edges with edge-feature-aware logits.

    Isolated nodes pass through unchanged (softmax over an empty
    neighborhood is undefined, so their aggregate row is replaced).
    """
    _check_dims(table, g)
    if g.n_edges == 0:
        return EmbeddingTable(table.customers, table.skills, table.layer_index + 1)
    efeat = Tensor(g.edge_features)
    agg_c = _attention_aggregate(params.to_customer, params.leaky_slope, efeat,
                                 table.customers, table.skills,
                                 g.customer_of_edge, g.skill_of_edge,
                                 g.n_customers, "customers")
    out_c = agg_c + T.mul(_isolated_mask(g.customer_of_edge, g.n_customers),
                          table.customers)
    agg_s = _attention_aggregate(params.to_skill, params.leaky_slope, efeat,
                                 table.skills, table.customers,
                                 g.skill_of_edge, g.customer_of_edge,
                                 g.n_skills, "skills")
    out_s = agg_s + T.mul(_isolated_mask(g.skill_of_edge, g.n_skills),
                          table.skills)
    return EmbeddingTable(out_c, out_s, table.layer_index + 1)


def _rgcn_preact(params: RgcnParams, g: BipartiteGraph,
                 table: EmbeddingTable) -> tuple[Tensor, Tensor]:
    pre_c = T.affine_rows(table.customers, params.self_weight)
    pre_s = T.affine_rows(table.skills, params.self_weight)
    if g.n_edges:
        hj_c = T.affine_rows(T.gather_rows(table.skills, g.skill_of_edge),
                             params.to_customer)
        pre_c = pre_c + T.segment_mean(hj_c, g.customer_of_edge, g.n_customers)
        hj_s = T.affine_rows(T.gather_rows(table.customers, g.customer_of_edge),
                             params.to_skill)
        pre_s = pre_s + T.segment_mean(hj_s, g.skill_of_edge, g.n_skills)
    return pre_c, pre_s


def rgcn_forward(params: RgcnParams, g: BipartiteGraph,
                 table: EmbeddingTable) -> EmbeddingTable:
    """ReLU(W_self h_i + mean over the node's one incoming relation)."""
    _check_dims(table, g)
    pre_c, pre_s = _rgcn_preact(params, g, table)
    return EmbeddingTable(T.relu(pre_c), T.relu(pre_s), table.layer_index + 1)


def rgcn_nnconv_forward(params: RgcnNNConvParams, g: BipartiteGraph,
                        table: EmbeddingTable) -> EmbeddingTable:
    """Backbone conv with an extra edge-conditioned message term.

    ReLU(W_self h_i + mean(W_r h_j) + mean(edge map @ h_j)); with zero edge
    parameters this is exactly the backbone update.
    """
    _check_dims(table, g)
    pre_c, pre_s = _rgcn_preact(params.backbone, g, table)
    if g.n_edges:
        efeat = Tensor(g.edge_features)
        pre_c = pre_c + _nnconv_aggregate(
            params.edge.to_customer, efeat, table.skills,
            g.skill_of_edge, g.customer_of_edge, g.n_customers)
        pre_s = pre_s + _nnconv_aggregate(
            params.edge.to_skill, efeat, table.customers,
            g.customer_of_edge, g.skill_of_edge, g.n_skills)
    return EmbeddingTable(T.relu(pre_c), T.relu(pre_s), table.layer_index + 1)


def rgcn_edge_attention_forward(params: RgcnEdgeAttnParams, g: BipartiteGraph,
                                table: EmbeddingTable) -> EmbeddingTable:
    """Backbone conv with an extra attention-weighted message term."""
    _check_dims(table, g)
    pre_c, pre_s = _rgcn_preact(params.backbone, g, table)
    if g.n_edges:
        efeat = Tensor(g.edge_features)
        pre_c = pre_c + _attention_aggregate(
            params.edge.to_customer, params.edge.leaky_slope, efeat,
            table.customers, table.skills, g.customer_of_edge,
            g.skill_of_edge, g.n_customers, "customers")
        pre_s = pre_s + _attention_aggregate(
            params.edge.to_skill, params.edge.leaky_slope, efeat,
            table.skills, table.customers, g.skill_of_edge,
            g.customer_of_edge, g.n_skills, "skills")
    return EmbeddingTable(T.relu(pre_c), T.relu(pre_s), table.layer_index + 1)


def personalize(h_u: Tensor, e: Tensor, params: PersonalizerParams) -> Tensor:
    """Context-tailored customer embedding: 2-layer ReLU net on [h_u || e].

    Accepts a single embedding (1D) or a batch of rows (2D); the output
    dimension equals the embedding dimension, so the result is a drop-in
    replacement for the context-free customer embedding.
    """
    if h_u.data.ndim == 1:
        x = T.concat([h_u, e], axis=0)
        hidden = T.relu(T.matmul(params.w1, x) + params.b1)
        return T.matmul(params.w2, hidden) + params.b2
    x = T.concat([h_u, e], axis=1)
    hidden = T.relu(T.affine_rows(x, params.w1, params.b1))
    return T.affine_rows(hidden, params.w2, params.b2)


_FORWARDS = {
    "rgcn": rgcn_forward,
    "nnconv": nnconv_forward,
    "eattn": edge_attention_forward,
    "rgcn+nnconv": rgcn_nnconv_forward,
    "rgcn+eattn": rgcn_edge_attention_forward,
}


def stack_forward(layer_kind: str, layer_params: Sequence, g: BipartiteGraph,
                  table: EmbeddingTable) -> EmbeddingTable:
    """Apply the chosen conv once per entry of `layer_params`."""
    if layer_kind not in _FORWARDS:
        raise ValueError(f"unknown layer kind {layer_kind!r}, expected {LAYER_KINDS}")
    if not layer_params:
        raise ValueError("stack_forward needs at least one layer")
    fwd = _FORWARDS[layer_kind]
    for params in layer_params:
        table = fwd(params, g, table)
    return table


def _check_dims(table: EmbeddingTable, g: BipartiteGraph) -> None:
    if table.customers.data.shape[0] != g.n_customers:
        raise T.ShapeMismatchError("customer embedding row count != graph")
    if table.skills.data.shape[0] != g.n_skills:
        raise T.ShapeMismatchError("skill embedding row count != graph")
    if table.customers.data.shape[1] != table.skills.data.shape[1]:
        raise T.ShapeMismatchError("customer/skill embedding dims differ")


# -- full model container -----------------------------------------------------------


@dataclass
class ModelParams:
    """Every learnable tensor for one representation model."""
    layer_kind: str
    layers: list
    personalizer: PersonalizerParams | None
    hidden_dim: int
    edge_dim: int

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for layer in self.layers:
            out += relation_params(layer)
        if self.personalizer is not None:
            out += relation_params(self.personalizer)
        return out

    def forward(self, g: BipartiteGraph, table: EmbeddingTable | None = None
                ) -> EmbeddingTable:
        if table is None:
            table = EmbeddingTable.from_graph(g)
        return stack_forward(self.layer_kind, self.layers, g, table)


def init_model(layer_kind: str, n_layers: int, d: int, d_e: int,
               rng: np.random.Generator, personalizer: bool,
               attn_dim: int | None = None, personalizer_hidden: int = 32,
               leaky_slope: float = DEFAULT_LEAKY_SLOPE) -> ModelParams:
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if layer_kind == "nnconv":
        layers = [init_nnconv(d, d_e, rng) for _ in range(n_layers)]
    elif layer_kind == "eattn":
        layers = [init_edge_attn(d, d_e, attn_dim or d, rng, leaky_slope)
                  for _ in range(n_layers)]
    elif layer_kind == "rgcn":
        layers = [init_rgcn(d, rng) for _ in range(n_layers)]
    elif layer_kind == "rgcn+nnconv":
        def nnconv_branch():
            edge = init_nnconv(d, d_e, rng)
            # zero message branch: the hybrid starts exactly at the backbone
            edge.to_customer.edge_weight.data[...] = 0.0
            edge.to_skill.edge_weight.data[...] = 0.0
            return RgcnNNConvParams(init_rgcn(d, rng), edge)
        layers = [nnconv_branch() for _ in range(n_layers)]
    elif layer_kind == "rgcn+eattn":
        def eattn_branch():
            edge = init_edge_attn(d, d_e, attn_dim or d, rng, leaky_slope)
            # start at the backbone with near-uniform attention; training
            # grows and sharpens the branch only where it helps
            for rel in (edge.to_customer, edge.to_skill):
                rel.msg_weight.data[...] = 0.0
                rel.attn_vec.data *= 0.1
            return RgcnEdgeAttnParams(init_rgcn(d, rng), edge)
        layers = [eattn_branch() for _ in range(n_layers)]
    else:
        raise ValueError(f"unknown layer kind {layer_kind!r}, expected {LAYER_KINDS}")
    pers = init_personalizer(d, d_e, personalizer_hidden, rng) if personalizer else None
    return ModelParams(layer_kind, layers, pers, d, d_e)


# -- checkpoint io -----------------------------------------------------------------


def _tensor_payload(t: Tensor) -> dict:
    return {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}


def _tensor_from_payload(obj: dict) -> Tensor:
    arr = np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])
    return Tensor(arr, requires_grad=True)


def _layer_payload(layer) -> dict:
    if isinstance(layer, NNConvParams):
        return {"to_customer": {"edge_weight": _tensor_payload(layer.to_customer.edge_weight),
                                "edge_bias": _tensor_payload(layer.to_customer.edge_bias)},
                "to_skill": {"edge_weight": _tensor_payload(layer.to_skill.edge_weight),
                             "edge_bias": _tensor_payload(layer.to_skill.edge_bias)}}
    if isinstance(layer, EdgeAttnParams):
        def rel(r):
            return {"msg_weight": _tensor_payload(r.msg_weight),
                    "attn_weight": _tensor_payload(r.attn_weight),
                    "attn_vec": _tensor_payload(r.attn_vec)}
        return {"to_customer": rel(layer.to_customer),
                "to_skill": rel(layer.to_skill),
                "leaky_slope": layer.leaky_slope}
    if isinstance(layer, RgcnParams):
        return {"self_weight": _tensor_payload(layer.self_weight),
                "to_customer": _tensor_payload(layer.to_customer),
                "to_skill": _tensor_payload(layer.to_skill)}
    if isinstance(layer, (RgcnNNConvParams, RgcnEdgeAttnParams)):
        return {"backbone": _layer_payload(layer.backbone),
                "edge": _layer_payload(layer.edge)}
    raise TypeError(f"unknown layer container {type(layer).__name__}")


def _layer_from_payload(kind: str, obj: dict):
    if kind == "nnconv":
        return NNConvParams(
            NNConvRelation(_tensor_from_payload(obj["to_customer"]["edge_weight"]),
                           _tensor_from_payload(obj["to_customer"]["edge_bias"])),
            NNConvRelation(_tensor_from_payload(obj["to_skill"]["edge_weight"]),
                           _tensor_from_payload(obj["to_skill"]["edge_bias"])))
    if kind == "eattn":
        def rel(r):
            return EdgeAttnRelation(_tensor_from_payload(r["msg_weight"]),
                                    _tensor_from_payload(r["attn_weight"]),
                                    _tensor_from_payload(r["attn_vec"]))
        return EdgeAttnParams(rel(obj["to_customer"]), rel(obj["to_skill"]),
                              float(obj["leaky_slope"]))
    if kind == "rgcn":
        return RgcnParams(_tensor_from_payload(obj["self_weight"]),
                          _tensor_from_payload(obj["to_customer"]),
                          _tensor_from_payload(obj["to_skill"]))
    if kind == "rgcn+nnconv":
        return RgcnNNConvParams(_layer_from_payload("rgcn", obj["backbone"]),
                                _layer_from_payload("nnconv", obj["edge"]))
    if kind == "rgcn+eattn":
        return RgcnEdgeAttnParams(_layer_from_payload("rgcn", obj["backbone"]),
                                  _layer_from_payload("eattn", obj["edge"]))
    raise ValueError(f"unknown layer kind {kind!r}")


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    """Write parameters as JSON; floats round-trip exactly via repr."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_kind": model.layer_kind,
        "hidden_dim": model.hidden_dim,
        "edge_dim": model.edge_dim,
        "layers": [_layer_payload(layer) for layer in model.layers],
        "personalizer": None if model.personalizer is None else {
            "w1": _tensor_payload(model.personalizer.w1),
            "b1": _tensor_payload(model.personalizer.b1),
            "w2": _tensor_payload(model.personalizer.w2),
            "b2": _tensor_payload(model.personalizer.b2),
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> ModelParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a parameter checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    kind = payload["layer_kind"]
    layers = [_layer_from_payload(kind, obj) for obj in payload["layers"]]
    pers = None
    if payload["personalizer"] is not None:
        p = payload["personalizer"]
        pers = PersonalizerParams(_tensor_from_payload(p["w1"]),
                                  _tensor_from_payload(p["b1"]),
                                  _tensor_from_payload(p["w2"]),
                                  _tensor_from_payload(p["b2"]))
    return ModelParams(kind, layers, pers,
                       int(payload["hidden_dim"]), int(payload["edge_dim"]))
