"""Experiment harness: run model variants end to end and aggregate reports.

A plan names the variants, classifiers and seeds to run; every
(variant, classifier, seed) cell trains a representation model (shared
across the two classifiers of the same variant and seed), exports
embeddings, runs the downstream defect evaluation, and lands one row in
the aggregate CSV. Cell failures are recorded, not fatal; the run only
counts as failed when every cell failed.

Each row carries the cell's config hash and the package version so the
CSVs are self-describing. When ground truth is available the harness also
records the Bayes cross-entropy on the cell's test rows and flags any
cell that (impossibly) beats it.
"""

from __future__ import annotations

import hashlib
import json
import statistics
import traceback
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from .downstream import (ClassifierSpec, CLASSIFIER_KINDS, assemble_downstream,
                         evaluate, train_classifier)
from .encoder import EncoderSpec, HashingEncoder
from .graph import (BipartiteGraph, build_graph, gaussian_node_features,
                    index_log, load_interaction_log, one_hot_features,
                    write_interaction_log, InteractionRow)
from .synth import (GroundTruth, SynthConfig, bayes_cross_entropy, generate,
                    read_ground_truth, write_ground_truth)
from .training import (EmbeddingExport, TrainConfig, export_embeddings,
                       train_representation)

# variant -> (layer kind, personalizer enabled); None means no representation
# training at all (raw one-hot features feed the classifier directly). The
# edge modules extend the backbone conv (nested models), and the full model
# is backbone + edge module + personalizer jointly.
VARIANTS: dict[str, tuple[str, bool] | None] = {
    "onehot": None,
    "rgcn": ("rgcn", False),
    "rgcn+ec": ("rgcn+nnconv", False),
    "rgcn+eatt": ("rgcn+eattn", False),
    "rgcn+per": ("rgcn", True),
    "pdrfe-nnconv": ("rgcn+nnconv", True),
    "pdrfe-eattn": ("rgcn+eattn", True),
}

# rendered in comparison reports as placeholders, never run
UNIMPLEMENTED_BASELINES = ("pinsage", "revised-pinsage")

ABLATION_PAIRS = (
    ("personalizer", "rgcn", "rgcn+per"),
    ("nnconv", "rgcn", "rgcn+ec"),
    ("edge-attention", "rgcn", "rgcn+eatt"),
)

CSV_COLUMNS = ("variant", "classifier", "seed", "status", "test_ce", "test_auc",
               "n_test", "positive_rate", "bayes_test_ce", "bayes_ok", "error",
               "config_hash", "version")


class PlanError(ValueError):
    """Invalid experiment plan."""


@dataclass
class ExperimentPlan:
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    classifiers: list[str] = field(default_factory=lambda: list(CLASSIFIER_KINDS))
    seeds: list[int] = field(default_factory=lambda: [101, 102, 103])
    synth: SynthConfig | None = None
    data_path: str | None = None
    truth_path: str | None = None
    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(dim=16))
    train: dict = field(default_factory=dict)
    downstream: dict = field(default_factory=dict)
    train_fraction: float = 0.8

    def __post_init__(self):
        if not self.seeds:
            raise PlanError("at least one seed is required")
        if not self.variants:
            raise PlanError("at least one variant is required")
        for v in self.variants:
            if v not in VARIANTS:
                if v in UNIMPLEMENTED_BASELINES:
                    raise PlanError(
                        f"variant {v!r} is not implemented; it appears in "
                        f"comparison reports as a placeholder row")
                raise PlanError(f"unknown variant {v!r}; choose from {list(VARIANTS)}")
        for c in self.classifiers:
            if c not in CLASSIFIER_KINDS:
                raise PlanError(f"unknown classifier {c!r}")
        if self.synth is None and self.data_path is None:
            raise PlanError("plan needs either a synth config or a data path")
        if not 0.0 < self.train_fraction < 1.0:
            raise PlanError("train_fraction must be in (0, 1)")

    @staticmethod
    def from_dict(obj: dict) -> "ExperimentPlan":
        obj = dict(obj)
        if "synth" in obj and obj["synth"] is not None:
            obj["synth"] = SynthConfig(**obj["synth"])
        if "encoder" in obj and obj["encoder"] is not None:
            obj["encoder"] = EncoderSpec(**obj["encoder"])
        return ExperimentPlan(**obj)

    @staticmethod
    def from_json_file(path: str | Path) -> "ExperimentPlan":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise PlanError(f"plan file {path} is not valid JSON: {exc}") from exc
        return ExperimentPlan.from_dict(obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        return out


def default_plan() -> ExperimentPlan:
    """The desk-scale default: context-heavy synthetic data, all variants.

    Training dims are kept small so a full comparison finishes in minutes
    on a laptop CPU; the published-scale defaults remain on `TrainConfig`.
    """
    return ExperimentPlan(
        synth=SynthConfig(),
        encoder=EncoderSpec(dim=16),
        train={"hidden_dim": 16, "n_layers": 2, "batch_size": 4096,
               "max_epochs": 4, "learning_rate": 1e-4},
        downstream={"max_epochs": 40},
    )


def _subseed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


@dataclass
class PreparedData:
    rows: list[InteractionRow]
    customer_ids: list[str]
    skill_ids: list[str]
    indexed: list[tuple[int, int]]
    edge_features: np.ndarray
    truth: GroundTruth | None


def prepare_data(plan: ExperimentPlan, out_dir: Path | None = None) -> PreparedData:
    """Generate or load the interaction log and encode the utterances."""
    truth = None
    if plan.synth is not None:
        ds = generate(plan.synth)
        rows, truth = ds.rows, ds.truth
        if out_dir is not None:
            data_dir = out_dir / "data"
            data_dir.mkdir(parents=True, exist_ok=True)
            write_interaction_log(rows, data_dir / "interactions.jsonl")
            write_ground_truth(truth, data_dir / "ground_truth.jsonl")
            (data_dir / "synth_config.json").write_text(
                json.dumps(asdict(plan.synth)), encoding="utf-8")
    else:
        rows = load_interaction_log(plan.data_path)
        if plan.truth_path:
            truth = read_ground_truth(plan.truth_path)
    customer_ids, skill_ids, indexed = index_log(rows)
    enc = HashingEncoder(plan.encoder)
    feats = enc.encode_all([r.utterance for r in rows])
    return PreparedData(rows, customer_ids, skill_ids, indexed, feats, truth)


def _build_full_graph(data: PreparedData, hidden_dim: int, seed: int) -> BipartiteGraph:
    n_c, n_s = len(data.customer_ids), len(data.skill_ids)
    graph_rows = [(c, s, data.edge_features[i], data.rows[i].defect)
                  for i, (c, s) in enumerate(data.indexed)]
    return build_graph(graph_rows, n_c, n_s,
                       gaussian_node_features(n_c, hidden_dim, _subseed(seed, 1)),
                       gaussian_node_features(n_s, hidden_dim, _subseed(seed, 2)))


@dataclass
class CellResult:
    variant: str
    classifier: str
    seed: int
    status: str = "ok"
    test_ce: float | None = None
    test_auc: float | None = None
    n_test: int | None = None
    positive_rate: float | None = None
    bayes_test_ce: float | None = None
    bayes_ok: bool | None = None
    error: str = ""
    config_hash: str = ""
    version: str = ""

    def csv_row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)
        return [fmt(getattr(self, col)) for col in CSV_COLUMNS]


def _config_hash(plan: ExperimentPlan, variant: str, classifier: str,
                 seed: int) -> str:
    blob = json.dumps({"plan": plan.to_dict(), "variant": variant,
                       "classifier": classifier, "seed": seed},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _train_cfg(plan: ExperimentPlan, layer_kind: str, personalizer: bool,
               seed: int) -> TrainConfig:
    overrides = dict(plan.train)
    overrides.update(layer_kind=layer_kind, personalizer=personalizer, seed=seed)
    return TrainConfig(**overrides)


def _classifier_spec(plan: ExperimentPlan, kind: str, seed: int) -> ClassifierSpec:
    overrides = dict(plan.downstream)
    overrides.update(kind=kind, seed=_subseed(seed, 5))
    return ClassifierSpec(**overrides)


def run_cells(plan: ExperimentPlan, data: PreparedData,
              progress=None) -> list[CellResult]:
    """Run every (variant, classifier, seed) cell; failures stay local."""
    from .graph import split_edges  # local import keeps module load light

    results: list[CellResult] = []
    hidden_dim = int(plan.train.get("hidden_dim",
                                    TrainConfig.__dataclass_fields__["hidden_dim"].default))
    for seed in plan.seeds:
        g_full = _build_full_graph(data, hidden_dim, seed)
        g_train, _g_test = split_edges(g_full, plan.train_fraction,
                                       _subseed(seed, 3))
        downstream_seed = _subseed(seed, 4)
        for variant in plan.variants:
            try:
                export = _variant_export(plan, variant, seed, g_full, g_train)
            except Exception:
                err = traceback.format_exc(limit=3)
                for kind in plan.classifiers:
                    results.append(_error_cell(plan, variant, kind, seed, err))
                continue
            split = assemble_downstream(export, g_full, downstream_seed)
            for kind in plan.classifiers:
                if progress:
                    progress(f"{variant}/{kind}/seed={seed}")
                try:
                    clf = train_classifier(_classifier_spec(plan, kind, seed), split)
                    report = evaluate(clf, split.test)
                except Exception:
                    results.append(_error_cell(plan, variant, kind, seed,
                                               traceback.format_exc(limit=3)))
                    continue
                cell = CellResult(
                    variant=variant, classifier=kind, seed=seed,
                    test_ce=report.test_ce, test_auc=report.test_auc,
                    n_test=report.n_test, positive_rate=report.positive_rate,
                    config_hash=_config_hash(plan, variant, kind, seed),
                    version=f"pdrfe-{__version__}")
                if data.truth is not None:
                    labels = g_full.defect_labels
                    bayes = bayes_cross_entropy(data.truth, labels,
                                                subset=split.test.row_index)
                    cell.bayes_test_ce = bayes
                    cell.bayes_ok = bool(report.test_ce >= bayes - 1e-9)
                results.append(cell)
    return results


def _variant_export(plan: ExperimentPlan, variant: str, seed: int,
                    g_full: BipartiteGraph, g_train: BipartiteGraph
                    ) -> EmbeddingExport:
    spec = VARIANTS[variant]
    if spec is None:
        return EmbeddingExport(one_hot_features(g_full.n_customers),
                               one_hot_features(g_full.n_skills), None,
                               g_full.customer_of_edge.copy(),
                               g_full.skill_of_edge.copy())
    layer_kind, personalizer = spec
    cfg = _train_cfg(plan, layer_kind, personalizer, seed)
    message_graph = g_full if cfg.message_edges == "full" else g_train
    model, _history = train_representation(cfg, g_train,
                                           message_graph=message_graph)
    return export_embeddings(model, message_graph, rows_graph=g_full)


def _error_cell(plan, variant, kind, seed, err) -> CellResult:
    return CellResult(variant=variant, classifier=kind, seed=seed,
                      status="error", error=err.strip().splitlines()[-1],
                      config_hash=_config_hash(plan, variant, kind, seed),
                      version=f"pdrfe-{__version__}")


# -- aggregation -------------------------------------------------------------------


def write_cells_csv(cells: list[CellResult], path: Path,
                    placeholders: bool = False) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for cell in cells:
        lines.append(",".join(cell.csv_row()))
    if placeholders:
        for name in UNIMPLEMENTED_BASELINES:
            row = CellResult(variant=name, classifier="", seed=-1,
                             status="not implemented",
                             version=f"pdrfe-{__version__}")
            lines.append(",".join(row.csv_row()))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def median_table(cells: list[CellResult]) -> dict[tuple[str, str], float]:
    """Median test CE per (variant, classifier) over seeds."""
    groups: dict[tuple[str, str], list[float]] = {}
    for cell in cells:
        if cell.status == "ok" and cell.test_ce is not None:
            groups.setdefault((cell.variant, cell.classifier), []).append(cell.test_ce)
    return {key: statistics.median(vals) for key, vals in groups.items()}


def write_median_csv(medians: dict[tuple[str, str], float], path: Path) -> None:
    lines = ["variant,classifier,median_test_ce"]
    for (variant, kind), ce in sorted(medians.items()):
        lines.append(f"{variant},{kind},{ce!r}")
    for name in UNIMPLEMENTED_BASELINES:
        lines.append(f"{name},,not implemented")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _bar_chart(medians: dict[tuple[str, str], float], path: Path,
               title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = sorted({v for v, _ in medians})
    kinds = sorted({k for _, k in medians})
    x = np.arange(len(variants))
    width = 0.8 / max(len(kinds), 1)
    fig, ax = plt.subplots(figsize=(9, 4))
    for i, kind in enumerate(kinds):
        vals = [medians.get((v, kind), np.nan) for v in variants]
        ax.bar(x + i * width, vals, width, label=kind)
    ax.set_xticks(x + width * (len(kinds) - 1) / 2)
    ax.set_xticklabels(variants, rotation=20, ha="right")
    ax.set_ylabel("median test cross-entropy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@dataclass
class RunReport:
    cells: list[CellResult]
    out_dir: Path
    all_failed: bool


def run_experiment(plan: ExperimentPlan, out_dir: str | Path,
                   progress=None) -> RunReport:
    """Full comparison: every plan cell, aggregate CSVs, bar chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(plan, out)
    cells = run_cells(plan, data, progress)
    write_cells_csv(cells, out / "compare.csv", placeholders=True)
    medians = median_table(cells)
    write_median_csv(medians, out / "compare_medians.csv")
    if medians:
        _bar_chart(medians, out / "compare_ce.png", "defect prediction test CE")
    (out / "run_meta.json").write_text(json.dumps({
        "plan": plan.to_dict(), "version": f"pdrfe-{__version__}",
        "n_cells": len(cells),
        "n_failed": sum(c.status != "ok" for c in cells)}, default=str),
        encoding="utf-8")
    cell_dir = out / "cells"
    cell_dir.mkdir(exist_ok=True)
    for cell in cells:
        name = f"{cell.variant}_{cell.classifier}_{cell.seed}.json".replace("+", "_")
        (cell_dir / name).write_text(json.dumps(asdict(cell), default=str),
                                     encoding="utf-8")
    all_failed = bool(cells) and all(c.status != "ok" for c in cells)
    return RunReport(cells, out, all_failed)


@dataclass
class AblationPair:
    component: str
    classifier: str
    without_ce: float
    with_ce: float

    @property
    def relative_improvement(self) -> float:
        return (self.without_ce - self.with_ce) / self.without_ce


def ablation_pairs(cells: list[CellResult]) -> list[AblationPair]:
    medians = median_table(cells)
    kinds = sorted({c.classifier for c in cells if c.status == "ok"})
    pairs = []
    for component, without, with_ in ABLATION_PAIRS:
        for kind in kinds:
            if (without, kind) in medians and (with_, kind) in medians:
                pairs.append(AblationPair(component, kind,
                                          medians[(without, kind)],
                                          medians[(with_, kind)]))
    return pairs


def run_ablation(plan: ExperimentPlan, out_dir: str | Path,
                 progress=None) -> RunReport:
    """With-vs-without runs for each added component over the backbone."""
    needed = {v for _, w, x in ABLATION_PAIRS for v in (w, x)}
    if needed - set(plan.variants):
        plan = ExperimentPlan.from_dict(
            {**plan.to_dict(), "variants": sorted(set(plan.variants) | needed)})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(plan, out)
    cells = [c for c in run_cells(plan, data, progress) if c.variant in needed]
    write_cells_csv(cells, out / "ablation_cells.csv")
    pairs = ablation_pairs(cells)
    lines = ["component,classifier,without_ce,with_ce,relative_improvement"]
    for p in pairs:
        lines.append(f"{p.component},{p.classifier},{p.without_ce!r},"
                     f"{p.with_ce!r},{p.relative_improvement!r}")
    (out / "ablation_pairs.csv").write_text("\n".join(lines) + "\n",
                                            encoding="utf-8")
    medians = median_table(cells)
    if medians:
        _bar_chart(medians, out / "ablation_ce.png", "ablation: test CE")
    (out / "run_meta.json").write_text(json.dumps({
        "plan": plan.to_dict(), "version": f"pdrfe-{__version__}",
        "pairs": [asdict(p) for p in pairs]}, default=str), encoding="utf-8")
    all_failed = bool(cells) and all(c.status != "ok" for c in cells)
    return RunReport(cells, out, all_failed)
