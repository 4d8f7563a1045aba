"""Minibatch representation training against the margin objective.

Message passing runs over the whole (training) graph every step; the batch
only selects which positive edges contribute loss terms. That is the right
trade at desk scale and keeps gradients exact. The personalizer, when
enabled, is trained jointly with the conv layers here and is frozen for
all downstream use.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .graph import BipartiteGraph, nonneighbor_skills
from .layers import EmbeddingTable, ModelParams, init_model, personalize
from .losses import margin_loss_pairs
from .optim import make_optimizer
from .tensor import NonFiniteValueError, Tensor

LAYER_KIND_CHOICES = ("rgcn", "nnconv", "eattn", "rgcn+nnconv", "rgcn+eattn")
BATCH_SIZE_MENU = (512, 1024, 2048, 4096)  # the sweepable published values


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the last finite state."""

    def __init__(self, message: str, model: ModelParams, history: "TrainHistory"):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class TrainConfig:
    """Representation-learning knobs.

    Defaults follow the published setup: batch sizes from
    {512, 1024, 2048, 4096}, five negatives per positive, learning rate
    1e-4, hidden dimension 128, at most 10 epochs. The margin and layer
    count are config knobs. `message_edges` records the transductive
    choice: the held-out test edges are hidden from message passing as
    well as from the loss ("train"); pass a different graph through
    `train_representation(message_graph=...)` for the "full" alternative.
    """
    layer_kind: str = "rgcn"
    personalizer: bool = False
    batch_size: int = 1024
    negatives_per_positive: int = 5
    learning_rate: float = 1e-4
    hidden_dim: int = 128
    n_layers: int = 2
    max_epochs: int = 10
    margin: float = 1.0
    seed: int = 0
    attn_dim: int | None = None
    personalizer_hidden: int = 32
    leaky_slope: float = 0.2
    optimizer: str = "adam"
    patience: int = 2
    val_fraction: float = 0.1
    message_edges: str = "train"

    def __post_init__(self):
        if self.layer_kind not in LAYER_KIND_CHOICES:
            raise ValueError(f"layer_kind must be one of {LAYER_KIND_CHOICES}")
        for name in ("batch_size", "negatives_per_positive", "learning_rate",
                     "hidden_dim", "n_layers", "margin"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @staticmethod
    def from_dict(obj: dict) -> "TrainConfig":
        return TrainConfig(**obj)

    @staticmethod
    def from_json_file(path: str | Path) -> "TrainConfig":
        return TrainConfig.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    step_losses: list[float] = field(default_factory=list)
    epoch_train_losses: list[float] = field(default_factory=list)
    epoch_val_losses: list[float] = field(default_factory=list)
    epochs_run: int = 0
    skipped_positives: int = 0
    wall_time_s: float = 0.0

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            for i, loss in enumerate(self.step_losses):
                fh.write(f"{i},{loss!r}\n")

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "epochs_run": self.epochs_run,
            "steps": len(self.step_losses),
            "final_step_loss": self.step_losses[-1] if self.step_losses else None,
            "epoch_train_losses": self.epoch_train_losses,
            "epoch_val_losses": self.epoch_val_losses,
            "skipped_positives": self.skipped_positives,
            "wall_time_s": self.wall_time_s,
        }), encoding="utf-8")


def epoch_batches(n_edges: int, batch_size: int,
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform shuffle of edge positions, chunked; covers each edge once."""
    perm = rng.permutation(n_edges)
    return [perm[i:i + batch_size] for i in range(0, n_edges, batch_size)]


def _snapshot(model: ModelParams) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: ModelParams, snap: list[np.ndarray]) -> None:
    for p, arr in zip(model.parameters(), snap):
        p.data[...] = arr


class _NegativeSampler:
    """Per-customer non-neighbor pools, cached once per (immutable) graph."""

    def __init__(self, g: BipartiteGraph):
        self.g = g
        self._pools: dict[int, np.ndarray] = {}

    def pool(self, cust: int) -> np.ndarray:
        got = self._pools.get(cust)
        if got is None:
            got = nonneighbor_skills(self.g, cust)
            self._pools[cust] = got
        return got

    def draw(self, positives: np.ndarray, k: int,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Negatives for each batch row; rows with pools < k are dropped."""
        keep, negs = [], []
        for i, c in enumerate(positives):
            pool = self.pool(int(c))
            if pool.shape[0] < k:
                continue
            keep.append(i)
            negs.append(rng.choice(pool, size=k, replace=False))
        if not keep:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.asarray(keep, np.int64), np.concatenate(negs)


def _batch_loss(model: ModelParams, table: EmbeddingTable, g: BipartiteGraph,
                edge_pos: np.ndarray, neg_skills: np.ndarray, k: int,
                margin: float) -> Tensor:
    cust = g.customer_of_edge[edge_pos]
    pos_sk = g.skill_of_edge[edge_pos]
    h_u = T.gather_rows(table.customers, cust)
    if model.personalizer is not None:
        efeat = Tensor(g.edge_features[edge_pos])
        h_u = personalize(h_u, efeat, model.personalizer)
    h_pos = T.gather_rows(table.skills, pos_sk)
    h_neg = T.gather_rows(table.skills, neg_skills)
    return margin_loss_pairs(h_u, h_pos, h_neg, margin)


def train_representation(cfg: TrainConfig, g_train: BipartiteGraph,
                         message_graph: BipartiteGraph | None = None
                         ) -> tuple[ModelParams, TrainHistory]:
    """Train conv layers (and optionally the personalizer) by link prediction.

    Deterministic for a fixed config and seed. Early-stops when the
    held-out-edge validation loss has not improved for `patience` epochs
    and restores the best snapshot. Raises `DivergenceError` on a
    non-finite loss, carrying the last finite state.
    """
    if g_train.n_edges == 0:
        raise ValueError("training graph has no edges")
    if g_train.h0_customers.shape[1] != cfg.hidden_dim:
        raise ValueError(
            f"graph feature dim {g_train.h0_customers.shape[1]} != "
            f"hidden_dim {cfg.hidden_dim}; build the graph at the model dim")
    msg_graph = message_graph if message_graph is not None else g_train
    if (msg_graph.n_customers, msg_graph.n_skills) != \
            (g_train.n_customers, g_train.n_skills):
        raise ValueError("message graph must share the training node sets")

    rng = np.random.default_rng(cfg.seed)
    d_e = g_train.edge_features.shape[1]
    model = init_model(cfg.layer_kind, cfg.n_layers, cfg.hidden_dim, d_e, rng,
                       cfg.personalizer, cfg.attn_dim, cfg.personalizer_hidden,
                       cfg.leaky_slope)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.learning_rate)
    history = TrainHistory()
    sampler = _NegativeSampler(g_train)
    k = cfg.negatives_per_positive

    # carve validation positives out of the loss (not out of message passing)
    n_val = int(round(cfg.val_fraction * g_train.n_edges))
    perm = rng.permutation(g_train.n_edges)
    val_pos, loss_pos = perm[:n_val], perm[n_val:]
    if loss_pos.size == 0:
        loss_pos, val_pos = perm, perm[:0]
    val_keep, val_negs = sampler.draw(g_train.customer_of_edge[val_pos], k, rng)
    val_pos = val_pos[val_keep]

    def val_loss() -> float | None:
        if val_pos.size == 0:
            return None
        table = model.forward(msg_graph)
        return _batch_loss(model, table, g_train, val_pos, val_negs, k,
                           cfg.margin).item()

    started = time.perf_counter()
    best_snapshot = _snapshot(model)
    best_val = np.inf
    stale = 0
    for _epoch in range(cfg.max_epochs):
        epoch_losses = []
        for batch in epoch_batches(loss_pos.size, cfg.batch_size, rng):
            edge_pos = loss_pos[batch]
            keep, negs = sampler.draw(g_train.customer_of_edge[edge_pos], k, rng)
            history.skipped_positives += edge_pos.size - keep.size
            if keep.size == 0:
                continue
            edge_pos = edge_pos[keep]
            try:
                table = model.forward(msg_graph)
                loss = _batch_loss(model, table, g_train, edge_pos, negs, k,
                                   cfg.margin)
            except NonFiniteValueError as exc:
                _restore(model, best_snapshot)
                history.wall_time_s = time.perf_counter() - started
                raise DivergenceError(
                    f"non-finite loss at step {len(history.step_losses)}: {exc}",
                    model, history) from exc
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_loss = loss.item()
            history.step_losses.append(step_loss)
            epoch_losses.append(step_loss)
        history.epochs_run += 1
        history.epoch_train_losses.append(
            float(np.mean(epoch_losses)) if epoch_losses else np.nan)
        v = val_loss()
        if v is not None:
            history.epoch_val_losses.append(v)
            if v < best_val - 1e-12:
                best_val = v
                best_snapshot = _snapshot(model)
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if val_pos.size > 0 and np.isfinite(best_val):
        _restore(model, best_snapshot)
    history.wall_time_s = time.perf_counter() - started
    return model, history


# -- embedding export --------------------------------------------------------------


@dataclass
class EmbeddingExport:
    """Frozen node embeddings plus optional per-interaction personalized rows."""
    customers: np.ndarray
    skills: np.ndarray
    personalized: np.ndarray | None
    row_customer: np.ndarray | None
    row_skill: np.ndarray | None


def export_embeddings(model: ModelParams, g: BipartiteGraph,
                      rows_graph: BipartiteGraph | None = None) -> EmbeddingExport:
    """Final-layer embeddings for every node of `g`.

    When the model has a personalizer, also emits one personalized customer
    row per interaction of `rows_graph` (default: `g`'s own edges), built
    from that row's utterance feature.
    """
    table = model.forward(g)
    customers = table.customers.data.copy()
    skills = table.skills.data.copy()
    rows = rows_graph if rows_graph is not None else g
    if model.personalizer is None:
        return EmbeddingExport(customers, skills, None,
                               rows.customer_of_edge.copy(),
                               rows.skill_of_edge.copy())
    if rows.n_edges == 0:
        personalized = np.zeros((0, customers.shape[1]))
    else:
        h_u = Tensor(customers[rows.customer_of_edge])
        personalized = personalize(h_u, Tensor(rows.edge_features),
                                   model.personalizer).data.copy()
    return EmbeddingExport(customers, skills, personalized,
                           rows.customer_of_edge.copy(),
                           rows.skill_of_edge.copy())


def save_embeddings(export: EmbeddingExport, path: str | Path) -> None:
    arrays = {"customers": export.customers, "skills": export.skills,
              "row_customer": export.row_customer, "row_skill": export.row_skill}
    if export.personalized is not None:
        arrays["personalized"] = export.personalized
    np.savez(path, **{k: v for k, v in arrays.items() if v is not None})


def load_embeddings(path: str | Path) -> EmbeddingExport:
    with np.load(path) as data:
        return EmbeddingExport(
            data["customers"], data["skills"],
            data["personalized"] if "personalized" in data else None,
            data["row_customer"] if "row_customer" in data else None,
            data["row_skill"] if "row_skill" in data else None)
