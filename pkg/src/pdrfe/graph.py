"""Bipartite customer-skill multigraph with per-edge features and labels.

Edges carry an utterance feature vector and a binary defect label; parallel
edges between the same customer and skill are allowed. Adjacency is indexed
CSR-style in both directions so message passing can walk either side.
Graphs are immutable once built.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphBuildError(ValueError):
    """Raised for dangling node ids or inconsistent feature tables."""


class NodeKind(str, Enum):
    CUSTOMER = "customer"
    SKILL = "skill"


@dataclass(frozen=True)
class NodeId:
    kind: NodeKind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("node index must be non-negative")


def customer(index: int) -> NodeId:
    return NodeId(NodeKind.CUSTOMER, index)


def skill(index: int) -> NodeId:
    return NodeId(NodeKind.SKILL, index)


@dataclass(frozen=True)
class EdgeRecord:
    customer: NodeId
    skill: NodeId
    utterance_feature: np.ndarray
    defect_label: int
    edge_id: int


class _CsrIndex:
    """indptr/indices pair mapping node index -> incident edge positions."""

    __slots__ = ("indptr", "edge_pos")

    def __init__(self, node_of_edge: np.ndarray, n_nodes: int):
        counts = np.bincount(node_of_edge, minlength=n_nodes)
        self.indptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        order = np.argsort(node_of_edge, kind="stable")
        self.edge_pos = order.astype(np.int64)

    def incident(self, node: int) -> np.ndarray:
        return self.edge_pos[self.indptr[node]:self.indptr[node + 1]]


class BipartiteGraph:
    """Immutable customer-skill interaction multigraph.

    `h0_customers` / `h0_skills` are the initial per-node feature tables
    consumed as layer-0 embeddings by the conv layers.
    """

    def __init__(self, n_customers: int, n_skills: int,
                 edges: Sequence[EdgeRecord],
                 h0_customers: np.ndarray, h0_skills: np.ndarray):
        self.n_customers = int(n_customers)
        self.n_skills = int(n_skills)
        self.edges = list(edges)
        self.h0_customers = np.asarray(h0_customers, dtype=np.float64)
        self.h0_skills = np.asarray(h0_skills, dtype=np.float64)
        if self.h0_customers.shape[0] != self.n_customers:
            raise GraphBuildError("customer feature table row count mismatch")
        if self.h0_skills.shape[0] != self.n_skills:
            raise GraphBuildError("skill feature table row count mismatch")

        n_e = len(self.edges)
        self.customer_of_edge = np.fromiter(
            (e.customer.index for e in self.edges), dtype=np.int64, count=n_e)
        self.skill_of_edge = np.fromiter(
            (e.skill.index for e in self.edges), dtype=np.int64, count=n_e)
        if n_e:
            self.edge_features = np.stack([e.utterance_feature for e in self.edges])
        else:
            self.edge_features = np.zeros((0, 0))
        self.defect_labels = np.fromiter(
            (e.defect_label for e in self.edges), dtype=np.int64, count=n_e)
        self._by_customer = _CsrIndex(self.customer_of_edge, self.n_customers)
        self._by_skill = _CsrIndex(self.skill_of_edge, self.n_skills)

    # -- queries ---------------------------------------------------------------

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, node: NodeId) -> list[tuple[int, NodeId]]:
        """Incident (edge position, opposite node) pairs in CSR order.

        Parallel edges appear once per edge.
        """
        if node.kind is NodeKind.CUSTOMER:
            if node.index >= self.n_customers:
                raise IndexError(f"customer index {node.index} out of range")
            pos = self._by_customer.incident(node.index)
            return [(int(p), skill(int(self.skill_of_edge[p]))) for p in pos]
        if node.index >= self.n_skills:
            raise IndexError(f"skill index {node.index} out of range")
        pos = self._by_skill.incident(node.index)
        return [(int(p), customer(int(self.customer_of_edge[p]))) for p in pos]

    def degree(self, node: NodeId) -> int:
        idx = self._by_customer if node.kind is NodeKind.CUSTOMER else self._by_skill
        return int(idx.indptr[node.index + 1] - idx.indptr[node.index])

    def skill_neighbors_of_customer(self, cust_index: int) -> np.ndarray:
        """Distinct skill indices adjacent to a customer."""
        pos = self._by_customer.incident(cust_index)
        return np.unique(self.skill_of_edge[pos])

    def with_edges(self, edges: Sequence[EdgeRecord]) -> "BipartiteGraph":
        """Same node sets and features, different edge list."""
        return BipartiteGraph(self.n_customers, self.n_skills, edges,
                              self.h0_customers, self.h0_skills)


def build_graph(rows: Sequence[tuple[int, int, np.ndarray, int]],
                n_customers: int, n_skills: int,
                customer_features: np.ndarray,
                skill_features: np.ndarray) -> BipartiteGraph:
    """Assemble a graph from (customer, skill, feature, defect) rows.

    Rows keep their position as `edge_id`. Dangling node indices and
    ragged feature dimensions are rejected with the offending row number.
    """
    customer_features = np.asarray(customer_features, dtype=np.float64)
    skill_features = np.asarray(skill_features, dtype=np.float64)
    edges = []
    feat_dim = None
    for i, (c, s, feat, defect) in enumerate(rows):
        if not 0 <= c < n_customers:
            raise GraphBuildError(f"row {i}: customer index {c} out of range")
        if not 0 <= s < n_skills:
            raise GraphBuildError(f"row {i}: skill index {s} out of range")
        feat = np.asarray(feat, dtype=np.float64)
        if feat.ndim != 1:
            raise GraphBuildError(f"row {i}: edge feature must be 1D")
        if feat_dim is None:
            feat_dim = feat.shape[0]
        elif feat.shape[0] != feat_dim:
            raise GraphBuildError(
                f"row {i}: edge feature dim {feat.shape[0]} != {feat_dim}")
        if defect not in (0, 1):
            raise GraphBuildError(f"row {i}: defect label must be 0 or 1")
        if not np.all(np.isfinite(feat)):
            raise GraphBuildError(f"row {i}: non-finite edge feature")
        edges.append(EdgeRecord(customer(c), skill(s), feat, int(defect), i))
    return BipartiteGraph(n_customers, n_skills, edges,
                          customer_features, skill_features)


def split_edges(g: BipartiteGraph, train_fraction: float,
                seed: int) -> tuple[BipartiteGraph, BipartiteGraph]:
    """Uniform random edge partition; node sets unchanged on both sides.

    |train| = round(train_fraction * |E|). Original `edge_id`s are kept on
    the subgraph records so the partition can be audited.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    n = g.n_edges
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train_pos = np.sort(perm[:n_train])
    test_pos = np.sort(perm[n_train:])
    train = g.with_edges([g.edges[int(p)] for p in train_pos])
    test = g.with_edges([g.edges[int(p)] for p in test_pos])
    return train, test


def sample_negatives(g: BipartiteGraph, u: NodeId, k: int,
                     rng: np.random.Generator) -> list[NodeId]:
    """k distinct skills drawn uniformly from the non-neighbors of `u`."""
    if u.kind is not NodeKind.CUSTOMER:
        raise ValueError("negative sampling is defined for customer nodes")
    pool = nonneighbor_skills(g, u.index)
    if pool.shape[0] < k:
        raise ValueError(
            f"customer {u.index} has only {pool.shape[0]} non-neighbor skills, "
            f"need {k}")
    picks = rng.choice(pool, size=k, replace=False)
    return [skill(int(s)) for s in picks]


def nonneighbor_skills(g: BipartiteGraph, cust_index: int) -> np.ndarray:
    """Skill indices not connected to the customer."""
    connected = g.skill_neighbors_of_customer(cust_index)
    mask = np.ones(g.n_skills, dtype=bool)
    mask[connected] = False
    return np.flatnonzero(mask)


# -- initial node features -------------------------------------------------------


def gaussian_node_features(n_nodes: int, dim: int, seed: int) -> np.ndarray:
    """Seeded standard-normal feature table (synthetic-data mode)."""
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_nodes, dim))


def one_hot_features(n_nodes: int) -> np.ndarray:
    return np.eye(n_nodes)


def project_features(one_hots: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Random linear projection of (concatenated) metadata one-hots.

    Used to initialize node embeddings from categorical metadata tables;
    the projection is fixed by the seed, not learned.
    """
    one_hots = np.asarray(one_hots, dtype=np.float64)
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=(one_hots.shape[1], dim)) / np.sqrt(one_hots.shape[1])
    return one_hots @ proj


# -- interaction-log files --------------------------------------------------------

LOG_FIELDS = ("cid", "sid", "utterance", "defect")


@dataclass(frozen=True)
class InteractionRow:
    cid: str
    sid: str
    utterance: str
    defect: int


def _parse_defect(value, where: str) -> int:
    try:
        d = int(value)
    except (TypeError, ValueError):
        raise GraphBuildError(f"{where}: defect must be 0 or 1, got {value!r}")
    if d not in (0, 1):
        raise GraphBuildError(f"{where}: defect must be 0 or 1, got {value!r}")
    return d


def load_interaction_log(path: str | Path) -> list[InteractionRow]:
    """Read an interaction log; JSON-lines or delimited text with a header.

    Required columns: cid, sid, utterance, defect (0/1). The format is
    sniffed from the first non-empty line.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        while first and not first.strip():
            first = fh.readline()
        if not first:
            return []
        rest = fh.read()
    if first.lstrip().startswith("{"):
        rows = []
        for ln, line in enumerate((first + rest).splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphBuildError(f"line {ln}: invalid JSON") from exc
            missing = [f for f in LOG_FIELDS if f not in obj]
            if missing:
                raise GraphBuildError(f"line {ln}: missing fields {missing}")
            rows.append(InteractionRow(str(obj["cid"]), str(obj["sid"]),
                                       str(obj["utterance"]),
                                       _parse_defect(obj["defect"], f"line {ln}")))
        return rows
    delim = "\t" if "\t" in first else ","
    reader = csv.DictReader((first + rest).splitlines(), delimiter=delim)
    if reader.fieldnames is None or any(f not in reader.fieldnames for f in LOG_FIELDS):
        raise GraphBuildError(
            f"delimited log must have header columns {LOG_FIELDS}")
    return [InteractionRow(r["cid"], r["sid"], r["utterance"],
                           _parse_defect(r["defect"], f"row {i}"))
            for i, r in enumerate(reader, start=2)]


def write_interaction_log(rows: Iterable[InteractionRow], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps({"cid": r.cid, "sid": r.sid,
                                 "utterance": r.utterance, "defect": r.defect}) + "\n")


def index_log(rows: Sequence[InteractionRow]) -> tuple[list[str], list[str],
                                                        list[tuple[int, int]]]:
    """Map string ids to dense indices (first-seen order, deterministic)."""
    customers: dict[str, int] = {}
    skills: dict[str, int] = {}
    indexed = []
    for r in rows:
        c = customers.setdefault(r.cid, len(customers))
        s = skills.setdefault(r.sid, len(skills))
        indexed.append((c, s))
    return list(customers), list(skills), indexed
