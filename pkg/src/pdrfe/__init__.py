"""Edge-featured bipartite GCN lab with a defect-prediction benchmark."""

__version__ = "0.1.0"

from .tensor import Tensor, grad_check
from .graph import (BipartiteGraph, NodeId, NodeKind, EdgeRecord, build_graph,
                    split_edges, sample_negatives, load_interaction_log)
from .encoder import EncoderSpec, encode_utterance, HashingEncoder
from .layers import (EmbeddingTable, ModelParams, nnconv_forward,
                     edge_attention_forward, rgcn_forward, personalize,
                     stack_forward, init_model, save_checkpoint, load_checkpoint)
from .losses import margin_loss, defect_ce, MarginConfig
from .training import (TrainConfig, TrainHistory, train_representation,
                       export_embeddings, EmbeddingExport)
from .downstream import (ClassifierSpec, assemble_downstream, train_classifier,
                         evaluate, MetricsReport)
from .synth import SynthConfig, generate

__all__ = [
    "Tensor", "grad_check",
    "BipartiteGraph", "NodeId", "NodeKind", "EdgeRecord", "build_graph",
    "split_edges", "sample_negatives", "load_interaction_log",
    "EncoderSpec", "encode_utterance", "HashingEncoder",
    "EmbeddingTable", "ModelParams", "nnconv_forward", "edge_attention_forward",
    "rgcn_forward", "personalize", "stack_forward", "init_model",
    "save_checkpoint", "load_checkpoint",
    "margin_loss", "defect_ce", "MarginConfig",
    "TrainConfig", "TrainHistory", "train_representation", "export_embeddings",
    "EmbeddingExport",
    "ClassifierSpec", "assemble_downstream", "train_classifier", "evaluate",
    "MetricsReport",
    "SynthConfig", "generate",
    "__version__",
]
