"""Command-line front end.

Subcommands:
  gen      synth config -> interaction log + ground-truth files
  train    interaction log -> parameter checkpoint + loss history
  eval     checkpoint + log -> downstream metrics JSON
  compare  plan -> variant-by-classifier CE table (CSV + chart)
  ablate   plan -> with/without component pairs (CSV + chart)

Exit codes: 0 success, 1 usage error, 2 run failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .downstream import ClassifierSpec, assemble_downstream, evaluate, train_classifier
from .encoder import EncoderSpec, HashingEncoder
from .graph import (build_graph, gaussian_node_features, index_log,
                    load_interaction_log, split_edges, write_interaction_log)
from .harness import (ExperimentPlan, PlanError, default_plan, run_ablation,
                      run_experiment, VARIANTS)
from .layers import load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate, write_ground_truth
from .training import (DivergenceError, TrainConfig, export_embeddings,
                       save_embeddings, train_representation)

USAGE_ERROR = 1
RUN_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _cmd_gen(args) -> int:
    cfg = SynthConfig(**_load_json(args.config)) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg)
    write_interaction_log(ds.rows, out / "interactions.jsonl")
    write_ground_truth(ds.truth, out / "ground_truth.jsonl")
    (out / "synth_config.json").write_text(json.dumps(dataclasses.asdict(cfg)),
                                           encoding="utf-8")
    print(f"wrote {len(ds.rows)} interactions to {out / 'interactions.jsonl'}")
    return 0


def _variant_to_cfg(variant: str, overrides: dict, seed: int) -> TrainConfig:
    spec = VARIANTS.get(variant)
    if spec is None:
        raise ValueError(
            f"variant {variant!r} has no trainable representation model")
    layer_kind, personalizer = spec
    overrides = dict(overrides)
    overrides.update(layer_kind=layer_kind, personalizer=personalizer, seed=seed)
    return TrainConfig(**overrides)


def _build_graph_from_log(path: str, hidden_dim: int, encoder_spec: EncoderSpec,
                          seed: int):
    rows = load_interaction_log(path)
    if not rows:
        raise ValueError(f"no interactions in {path}")
    customer_ids, skill_ids, indexed = index_log(rows)
    enc = HashingEncoder(encoder_spec)
    feats = enc.encode_all([r.utterance for r in rows])
    graph_rows = [(c, s, feats[i], rows[i].defect)
                  for i, (c, s) in enumerate(indexed)]
    rng_c = np.random.SeedSequence([seed, 1]).generate_state(1)[0]
    rng_s = np.random.SeedSequence([seed, 2]).generate_state(1)[0]
    g = build_graph(graph_rows, len(customer_ids), len(skill_ids),
                    gaussian_node_features(len(customer_ids), hidden_dim, int(rng_c)),
                    gaussian_node_features(len(skill_ids), hidden_dim, int(rng_s)))
    return g, rows


def _cmd_train(args) -> int:
    overrides = _load_json(args.config) if args.config else {}
    encoder_spec = EncoderSpec(dim=args.encoder_dim)
    seed = args.seed if args.seed is not None else overrides.pop("seed", 0)
    overrides.pop("layer_kind", None)
    overrides.pop("personalizer", None)
    cfg = _variant_to_cfg(args.variant, overrides, seed)
    g_full, _rows = _build_graph_from_log(args.data, cfg.hidden_dim,
                                          encoder_spec, seed)
    g_train, _g_test = split_edges(g_full, args.train_fraction, seed)
    message_graph = g_full if cfg.message_edges == "full" else g_train
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, history = train_representation(cfg, g_train,
                                              message_graph=message_graph)
    except DivergenceError as exc:
        (out / "error.json").write_text(json.dumps({"error": str(exc)}),
                                        encoding="utf-8")
        print(f"training diverged: {exc}", file=sys.stderr)
        return RUN_FAILURE
    save_checkpoint(model, out / "checkpoint.json")
    history.write_csv(out / "history.csv")
    history.write_summary(out / "history_summary.json")
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict()),
                                           encoding="utf-8")
    print(f"trained {args.variant} for {history.epochs_run} epochs; "
          f"checkpoint at {out / 'checkpoint.json'}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    encoder_spec = EncoderSpec(dim=model.edge_dim)
    g_full, _rows = _build_graph_from_log(args.data, model.hidden_dim,
                                          encoder_spec, args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export = export_embeddings(model, g_full)
    save_embeddings(export, out / "embeddings.npz")
    split = assemble_downstream(export, g_full, args.seed or 0)
    spec = ClassifierSpec(kind=args.classifier, seed=args.seed or 0)
    clf = train_classifier(spec, split)
    report = evaluate(clf, split.test)
    report.model = model.layer_kind
    report.classifier = args.classifier
    report.seed = args.seed or 0
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return 0


def _plan_from_args(args) -> ExperimentPlan:
    plan = (ExperimentPlan.from_json_file(args.plan) if args.plan
            else default_plan())
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.variant:
        updates["variants"] = [args.variant]
    if updates:
        plan = ExperimentPlan.from_dict({**plan.to_dict(), **updates})
    return plan


def _cmd_compare(args) -> int:
    plan = _plan_from_args(args)
    report = run_experiment(plan, args.out,
                            progress=(lambda msg: print(f"  {msg}", flush=True))
                            if args.verbose else None)
    print(f"wrote {report.out_dir / 'compare.csv'}")
    return RUN_FAILURE if report.all_failed else 0


def _cmd_ablate(args) -> int:
    plan = _plan_from_args(args)
    report = run_ablation(plan, args.out,
                          progress=(lambda msg: print(f"  {msg}", flush=True))
                          if args.verbose else None)
    print(f"wrote {report.out_dir / 'ablation_pairs.csv'}")
    return RUN_FAILURE if report.all_failed else 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pdrfe", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version",
                        version=f"pdrfe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic interaction log")
    p.add_argument("--config", help="synth config JSON (defaults when omitted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train", help="train one representation variant")
    p.add_argument("--data", required=True, help="interaction log path")
    p.add_argument("--config", help="train config JSON overrides")
    p.add_argument("--variant", default="pdrfe-nnconv",
                   choices=[v for v in VARIANTS if VARIANTS[v] is not None])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--encoder-dim", type=int, default=32)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a log")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", default="logistic",
                   choices=["logistic", "mlp2"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("compare", help="run the full variant comparison")
    p.add_argument("--plan", help="plan JSON (built-in default when omitted)")
    p.add_argument("--seed", type=int, default=None,
                   help="restrict the plan to a single seed")
    p.add_argument("--variant", default=None,
                   help="restrict the plan to a single variant")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("ablate", help="run the component ablation")
    p.add_argument("--plan", help="plan JSON (built-in default when omitted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=_cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (PlanError, ValueError) as exc:
        print(f"pdrfe: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"pdrfe: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception:
        traceback.print_exc()
        return RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
