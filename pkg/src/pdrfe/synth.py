"""Synthetic interaction logs with utterance-dependent defect labels.

Customers and skills get latent vectors; interaction pairs are sampled with
probability increasing in latent affinity, and each interaction draws an
utterance cluster whose token vocabulary is disjoint from every other
cluster's. The defect probability mixes a base rate with a context term
that depends jointly on the customer, the skill, and the cluster, so a
predictor that ignores the utterance text cannot reach the Bayes optimum.
A side-channel ground-truth file records the per-row Bayes probabilities
(training code never reads it; tests and the harness do).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import InteractionRow


@dataclass(frozen=True)
class SynthConfig:
    n_customers: int = 500
    n_skills: int = 50
    n_interactions: int = 50_000
    latent_dim: int = 8
    n_utterance_clusters: int = 6
    base_defect_rate: float = 0.3
    context_weight: float = 2.0
    cluster_affinity: float = 2.0
    noise_fraction: float = 0.15
    tokens_per_cluster: int = 12
    min_tokens: int = 3
    max_tokens: int = 7
    seed: int = 0

    def __post_init__(self):
        if min(self.n_customers, self.n_skills, self.n_interactions,
               self.latent_dim, self.n_utterance_clusters) < 1:
            raise ValueError("counts must be positive")
        if not 0.0 < self.base_defect_rate < 1.0:
            raise ValueError("base defect rate must be in (0, 1)")
        if self.context_weight < 0.0:
            raise ValueError("context weight must be >= 0")
        if self.cluster_affinity < 0.0:
            raise ValueError("cluster affinity must be >= 0")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError("noise fraction must be in [0, 1)")


@dataclass
class GroundTruth:
    """What the generator knew; consumed only by tests and reports."""
    z_customers: np.ndarray          # (|U|, d_z)
    z_skills: np.ndarray             # (|S|, d_z)
    cluster_maps: np.ndarray         # (C, d_z, d_z)
    clusters: np.ndarray             # (n,) cluster id per row
    bayes_p: np.ndarray              # (n,) true defect probability per row
    config: SynthConfig | None = None


@dataclass
class SyntheticDataset:
    rows: list[InteractionRow] = field(default_factory=list)
    customer_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    skill_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    truth: GroundTruth | None = None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def cluster_vocabulary(cluster: int, size: int) -> list[str]:
    """Disjoint token sets so a hashing encoder separates clusters."""
    return [f"c{cluster}w{t}" for t in range(size)]


def generate(cfg: SynthConfig) -> SyntheticDataset:
    """Draw a full interaction log plus its ground-truth record.

    Pair (u, s) is sampled with probability increasing in the latent
    affinity <z_u, z_s>. Each interaction draws its utterance cluster from
    a per-skill preference (people ask different things of different
    skills), so cluster identity is informative but not determined by the
    pair. The defect logit is

        logit(base rate) + weight * <z_u, M_c z_s> / 2

    with one random mixing matrix M_c per cluster. The latent vectors
    carry a trailing constant coordinate, so the bilinear form expands into
    per-cluster offsets, (customer, cluster) and (skill, cluster)
    interactions, and a fully joint term -- everything the utterance-blind
    feature path cannot see.
    """
    rng = np.random.default_rng(cfg.seed)
    m = cfg.latent_dim
    # random coords scaled so <z~_u, z~_s> and each block of the context
    # term have unit-order variance, then a homogeneous coordinate appended
    zr_u = rng.normal(size=(cfg.n_customers, m)) / np.sqrt(m)
    zr_s = rng.normal(size=(cfg.n_skills, m)) / np.sqrt(m)
    z_u = np.concatenate([zr_u, np.ones((cfg.n_customers, 1))], axis=1)
    z_s = np.concatenate([zr_s, np.ones((cfg.n_skills, 1))], axis=1)
    maps = rng.normal(size=(cfg.n_utterance_clusters, m + 1, m + 1))
    # down-weight the fully joint block relative to the pairwise and offset
    # blocks so small classifiers have signal to recover
    maps[:, :m, :m] *= 0.4
    maps[:, :m, m] *= 1.5   # (customer, cluster) interactions
    maps[:, m, m] *= 1.5    # per-cluster offsets

    n = cfg.n_interactions
    affinity = _softplus(2.0 * np.sqrt(m) * (zr_u @ zr_s.T))
    pair_p = (affinity / affinity.sum()).reshape(-1)
    flat = rng.choice(pair_p.size, size=n, p=pair_p)
    cust = (flat // cfg.n_skills).astype(np.int64)
    sk = (flat % cfg.n_skills).astype(np.int64)

    # <prefs_c, z~_s> has unit variance, so cluster_affinity is the logit std
    prefs = rng.normal(size=(cfg.n_utterance_clusters, m))
    cluster_logits = cfg.cluster_affinity * (zr_s @ prefs.T)
    cluster_logits -= cluster_logits.max(axis=1, keepdims=True)
    cluster_probs = np.exp(cluster_logits)
    cluster_probs /= cluster_probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(cluster_probs, axis=1)
    draws = rng.random(n)
    clusters = (draws[:, None] > cum[sk]).sum(axis=1).astype(np.int64)

    # chatter rows: uninformative interactions between random pairs, with
    # their own utterance vocabulary and base-rate labels; these dilute
    # plain mean aggregation, which is exactly what attention and the edge
    # maps can learn to filter out
    chatter = rng.random(n) < cfg.noise_fraction
    n_chat = int(chatter.sum())
    if n_chat:
        cust[chatter] = rng.integers(0, cfg.n_customers, size=n_chat)
        sk[chatter] = rng.integers(0, cfg.n_skills, size=n_chat)
        clusters[chatter] = cfg.n_utterance_clusters

    context = np.einsum("nd,nde,ne->n", z_u[cust],
                        maps[np.minimum(clusters, cfg.n_utterance_clusters - 1)],
                        z_s[sk])
    # standardize over content rows so context_weight is exactly the
    # context logit std there; the dataset-level offset folds into the
    # base rate; chatter rows carry the plain base rate
    content = ~chatter
    if content.any():
        mu = context[content].mean()
        sd = max(context[content].std(), 1e-12)
        context = (context - mu) / sd
    context[chatter] = 0.0
    base_logit = np.log(cfg.base_defect_rate / (1.0 - cfg.base_defect_rate))
    bayes_p = _sigmoid(base_logit + cfg.context_weight * context)
    labels = (rng.random(n) < bayes_p).astype(int)

    # vocabulary index n_utterance_clusters is the chatter vocabulary
    vocabs = [cluster_vocabulary(c, cfg.tokens_per_cluster)
              for c in range(cfg.n_utterance_clusters + 1)]
    lengths = rng.integers(cfg.min_tokens, cfg.max_tokens + 1,
                           size=cfg.n_interactions)
    rows = []
    for i in range(cfg.n_interactions):
        vocab = vocabs[clusters[i]]
        words = rng.choice(len(vocab), size=lengths[i], replace=True)
        utterance = " ".join(vocab[w] for w in words)
        rows.append(InteractionRow(f"u{cust[i]:05d}", f"s{sk[i]:03d}",
                                   utterance, int(labels[i])))
    truth = GroundTruth(z_u, z_s, maps, clusters.astype(np.int64), bayes_p, cfg)
    return SyntheticDataset(rows, cust, sk, truth)


def bayes_cross_entropy(truth: GroundTruth, labels: np.ndarray,
                        subset: np.ndarray | None = None) -> float:
    """CE of the true generating probabilities against realized labels."""
    p = truth.bayes_p if subset is None else truth.bayes_p[subset]
    y = np.asarray(labels, dtype=np.float64)
    if subset is not None and y.shape[0] == truth.bayes_p.shape[0]:
        y = y[subset]
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def contextfree_cross_entropy(truth: GroundTruth, cust: np.ndarray,
                              sk: np.ndarray, labels: np.ndarray) -> float:
    """CE of the best utterance-blind predictor (per-pair averaging).

    Averages the true probabilities over each (customer, skill) pair's
    rows, which is the CE-optimal predictor among functions of the pair
    alone.
    """
    key = cust.astype(np.int64) * (int(sk.max()) + 1) + sk
    sums = np.zeros(int(key.max()) + 1)
    counts = np.zeros(int(key.max()) + 1)
    np.add.at(sums, key, truth.bayes_p)
    np.add.at(counts, key, 1.0)
    pair_mean = sums[key] / counts[key]
    p = np.clip(pair_mean, 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


# -- ground-truth side channel -------------------------------------------------


def write_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    """JSON-lines: one meta record, then one record per interaction row."""
    with Path(path).open("w", encoding="utf-8") as fh:
        meta = {"type": "meta",
                "z_customers": truth.z_customers.tolist(),
                "z_skills": truth.z_skills.tolist(),
                "cluster_maps": truth.cluster_maps.tolist()}
        fh.write(json.dumps(meta) + "\n")
        for i in range(truth.clusters.shape[0]):
            fh.write(json.dumps({"row": i, "cluster": int(truth.clusters[i]),
                                 "bayes_p": float(truth.bayes_p[i])}) + "\n")


def read_ground_truth(path: str | Path) -> GroundTruth:
    with Path(path).open("r", encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        if meta.get("type") != "meta":
            raise ValueError(f"{path}: first record must be the meta record")
        clusters, bayes = [], []
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            clusters.append(obj["cluster"])
            bayes.append(obj["bayes_p"])
    return GroundTruth(np.array(meta["z_customers"]),
                       np.array(meta["z_skills"]),
                       np.array(meta["cluster_maps"]),
                       np.array(clusters, dtype=np.int64),
                       np.array(bayes))
