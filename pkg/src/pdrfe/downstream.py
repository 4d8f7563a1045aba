"""Defect prediction on frozen embeddings: the evaluation that scores a model.

Each interaction becomes one row: the customer side of the feature is the
personalized embedding when the representation model produced one, else the
plain final-layer embedding; the skill side is always the final-layer skill
embedding. Rows are split 6:2:2, a small classifier is trained on the
train rows with early stopping on the validation rows, and the test
cross-entropy is the headline metric (AUC is reported alongside because CE
alone is sensitive to calibration).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .graph import BipartiteGraph
from .losses import cross_entropy_of_probs, defect_ce
from .optim import make_optimizer
from .tensor import Tensor
from .training import EmbeddingExport, epoch_batches

CLASSIFIER_KINDS = ("logistic", "mlp2")
SPLIT_RATIOS = (0.6, 0.2, 0.2)


@dataclass
class RowSet:
    x: np.ndarray          # (n, D) features
    y: np.ndarray          # (n,) 0/1 labels
    row_index: np.ndarray  # (n,) positions in the source interaction log

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class RowSplit:
    train: RowSet
    val: RowSet
    test: RowSet


def assemble_downstream(export: EmbeddingExport, interactions: BipartiteGraph,
                        seed: int) -> RowSplit:
    """Build per-interaction feature rows and split them 6:2:2.

    Counts are exact: val and test sizes round to nearest, the remainder
    goes to train; the three parts are disjoint and seeded.
    """
    cust = interactions.customer_of_edge
    sk = interactions.skill_of_edge
    n = cust.shape[0]
    if cust.size and cust.max() >= export.customers.shape[0]:
        raise ValueError(
            f"customer {int(cust.max())} has no embedding row")
    if sk.size and sk.max() >= export.skills.shape[0]:
        raise ValueError(f"skill {int(sk.max())} has no embedding row")
    if export.personalized is not None:
        if export.personalized.shape[0] != n:
            raise ValueError(
                f"personalized rows ({export.personalized.shape[0]}) != "
                f"interactions ({n})")
        cust_feat = export.personalized
    else:
        cust_feat = export.customers[cust]
    x = np.concatenate([cust_feat, export.skills[sk]], axis=1)
    y = interactions.defect_labels.astype(np.int64)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(SPLIT_RATIOS[1] * n))
    n_test = int(round(SPLIT_RATIOS[2] * n))
    test_i = perm[:n_test]
    val_i = perm[n_test:n_test + n_val]
    train_i = perm[n_test + n_val:]

    def take(idx):
        return RowSet(x[idx], y[idx], idx.astype(np.int64))

    return RowSplit(take(train_i), take(val_i), take(test_i))


@dataclass
class ClassifierSpec:
    kind: str = "logistic"
    hidden_dim: int = 32
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 60
    patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ValueError(f"classifier kind must be one of {CLASSIFIER_KINDS}")
        if min(self.hidden_dim, self.batch_size, self.max_epochs) < 1:
            raise ValueError("hidden_dim, batch_size, max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class DefectClassifier:
    """Logistic regression or a 2-layer ReLU net, trained on defect CE.

    Inputs are standardized with statistics fitted on the training rows,
    so embedding scales do not bias the comparison across models.
    """

    def __init__(self, spec: ClassifierSpec, n_features: int):
        self.spec = spec
        self.feature_mean = np.zeros(n_features)
        self.feature_scale = np.ones(n_features)
        rng = np.random.default_rng(spec.seed)
        limit = np.sqrt(6.0 / (n_features + 1))
        if spec.kind == "logistic":
            self.params = [
                Tensor(rng.uniform(-limit, limit, size=n_features), requires_grad=True),
                Tensor(0.0, requires_grad=True),
            ]
        else:
            h = spec.hidden_dim
            l1 = np.sqrt(6.0 / (n_features + h))
            l2 = np.sqrt(6.0 / (h + 1))
            self.params = [
                Tensor(rng.uniform(-l1, l1, size=(h, n_features)), requires_grad=True),
                Tensor(np.zeros(h), requires_grad=True),
                Tensor(rng.uniform(-l2, l2, size=h), requires_grad=True),
                Tensor(0.0, requires_grad=True),
            ]

    def fit_normalization(self, x: np.ndarray) -> None:
        self.feature_mean = x.mean(axis=0)
        self.feature_scale = np.maximum(x.std(axis=0), 1e-8)

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_mean) / self.feature_scale

    def _probs(self, x: Tensor) -> Tensor:
        if self.spec.kind == "logistic":
            w, b = self.params
            return T.sigmoid(T.matmul(x, w) + b)
        w1, b1, w2, b2 = self.params
        hidden = T.relu(T.affine_rows(x, w1, b1))
        return T.sigmoid(T.matmul(hidden, w2) + b2)

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        return defect_ce(self._probs(Tensor(self._normalize(x))), y)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self._probs(Tensor(self._normalize(x))).data.copy()


def train_classifier(spec: ClassifierSpec, split: RowSplit) -> DefectClassifier:
    """Adam on mean defect CE with plateau early stopping (best restored)."""
    if split.train.n == 0:
        raise ValueError("empty training set")
    classes = np.unique(split.train.y)
    if classes.shape[0] < 2:
        raise ValueError(
            f"training set contains a single class ({int(classes[0])})")
    clf = DefectClassifier(spec, split.train.x.shape[1])
    clf.fit_normalization(split.train.x)
    opt = make_optimizer("adam", clf.params, spec.learning_rate)
    rng = np.random.default_rng(spec.seed)
    use_val = split.val.n > 0
    best_val = np.inf
    best = [p.data.copy() for p in clf.params]
    stale = 0
    for _epoch in range(spec.max_epochs):
        for batch in epoch_batches(split.train.n, spec.batch_size, rng):
            loss = clf.loss(split.train.x[batch], split.train.y[batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if not use_val:
            continue
        v = cross_entropy_of_probs(clf.predict_proba(split.val.x), split.val.y)
        if v < best_val - 1e-12:
            best_val, stale = v, 0
            best = [p.data.copy() for p in clf.params]
        else:
            stale += 1
            if stale >= spec.patience:
                break
    if use_val and np.isfinite(best_val):
        for p, arr in zip(clf.params, best):
            p.data[...] = arr
    return clf


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC with average ranks on ties; NaN if one class."""
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    test_ce: float
    test_auc: float
    positive_rate: float
    n_test: int
    model: str = ""
    classifier: str = ""
    seed: int = -1

    def to_json(self) -> str:
        return json.dumps({"model": self.model, "classifier": self.classifier,
                           "seed": self.seed, "test_ce": self.test_ce,
                           "test_auc": self.test_auc, "n_test": self.n_test,
                           "positive_rate": self.positive_rate})

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        obj = json.loads(text)
        return MetricsReport(obj["test_ce"], obj["test_auc"],
                             obj.get("positive_rate", float("nan")),
                             obj["n_test"], obj.get("model", ""),
                             obj.get("classifier", ""), obj.get("seed", -1))


def evaluate(classifier: DefectClassifier, rows: RowSet) -> MetricsReport:
    """Mean test CE (primary, lower is better) plus AUC and base rate."""
    if rows.n == 0:
        raise ValueError("empty evaluation set")
    probs = classifier.predict_proba(rows.x)
    return MetricsReport(
        test_ce=cross_entropy_of_probs(probs, rows.y),
        test_auc=auc_score(probs, rows.y),
        positive_rate=float(rows.y.mean()),
        n_test=rows.n,
    )
