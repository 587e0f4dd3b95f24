"""Rank distillation from a tiny causal decoder into a tiny bidirectional encoder."""

from .datagen import LabeledRecord, SynthConfig, gen_corpus, generate_splits, read_jsonl, write_jsonl
from .metrics import evaluate_groups, gsb_delta, latency_bench, ndcg_at_k, pnr, score_histogram
from .objectives import Hyperparams, cpt_loss, hybrid_loss, margin_mse_loss, point_mse_loss, sft_hinge_loss
from .textmodel import ModelConfig, QueryDoc, RankerModel, encode_pair, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Hyperparams",
    "LabeledRecord",
    "ModelConfig",
    "QueryDoc",
    "RankerModel",
    "SynthConfig",
    "cpt_loss",
    "encode_pair",
    "evaluate_groups",
    "gen_corpus",
    "generate_splits",
    "gsb_delta",
    "hybrid_loss",
    "latency_bench",
    "load_checkpoint",
    "margin_mse_loss",
    "ndcg_at_k",
    "pnr",
    "point_mse_loss",
    "read_jsonl",
    "save_checkpoint",
    "score_histogram",
    "sft_hinge_loss",
    "write_jsonl",
]
